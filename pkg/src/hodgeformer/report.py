"""Figures written next to the CSV/JSON outputs of the command line tools."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# PNG metadata carries no timestamp, so figures are reproducible byte for byte
SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _floats(rows, key):
    return [float(r[key]) if r.get(key) not in (None, "") else float("nan") for r in rows]


def plot_training(metrics, out_path):
    """Loss and accuracy curves from a metrics CSV (or the list of row dicts)."""
    rows = _read_rows(metrics) if isinstance(metrics, (str, Path)) else metrics
    rows = [{k: ("" if v is None else v) for k, v in r.items()} for r in rows]
    epochs = [int(r["epoch"]) for r in rows]
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_l.plot(epochs, _floats(rows, "train_loss"), label="train")
    ax_a.plot(epochs, _floats(rows, "train_acc"), label="train")
    if any(r["val_loss"] != "" for r in rows):
        ax_l.plot(epochs, _floats(rows, "val_loss"), label="val")
        ax_a.plot(epochs, _floats(rows, "val_acc"), label="val")
    ax_l.set(xlabel="epoch", ylabel="loss")
    ax_a.set(xlabel="epoch", ylabel="accuracy", ylim=(0, 1.02))
    for ax in (ax_l, ax_a):
        ax.legend(frameon=False)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, **SAVE_KW)
    plt.close(fig)
    return Path(out_path)


def plot_bench(rows, out_path):
    """Log-log wall time and peak memory against mesh size."""
    rows = [r for r in rows if r.get("status", "ok") == "ok"]
    n = [int(r["n_v"]) for r in rows]
    fig, (ax_t, ax_m) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_t.loglog(n, [float(r["compute_s"]) for r in rows], "o-", label="compute")
    ax_t.loglog(n, [float(r["end_to_end_s"]) for r in rows], "s--", label="end to end")
    if n:
        ref = [float(rows[0]["compute_s"]) * (k / n[0]) ** 1.5 for k in n]
        ax_t.loglog(n, ref, ":", color="gray", label="n^1.5")
    ax_t.set(xlabel="vertices", ylabel="seconds per pass")
    ax_m.loglog(n, [float(r["peak_mb"]) for r in rows], "o-")
    ax_m.set(xlabel="vertices", ylabel="peak traced memory (MB)")
    ax_t.legend(frameon=False)
    for ax in (ax_t, ax_m):
        ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(out_path, **SAVE_KW)
    plt.close(fig)
    return Path(out_path)


def plot_smoothing(rows, out_path):
    """Grouped bars of train/eval accuracy per smoothing value."""
    labels = [f"{s:g}" for s, _, _ in rows]
    x = range(len(rows))
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.bar([i - 0.2 for i in x], [r[1] or 0 for r in rows], 0.4, label="train")
    ax.bar([i + 0.2 for i in x], [r[2] or 0 for r in rows], 0.4, label="eval")
    ax.set_xticks(list(x), labels)
    ax.set(xlabel="label smoothing", ylabel="accuracy", ylim=(0, 1.05))
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_path, **SAVE_KW)
    plt.close(fig)
    return Path(out_path)


def plot_robustness(rows, out_path):
    names = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 0.4 * len(rows) + 1.2))
    ax.barh(range(len(rows)), [r[1] for r in rows], color=["C0"] + ["C1"] * (len(rows) - 1))
    ax.set_yticks(range(len(rows)), names)
    ax.invert_yaxis()
    ax.set(xlabel="accuracy", xlim=(0, 1))
    fig.tight_layout()
    fig.savefig(out_path, **SAVE_KW)
    plt.close(fig)
    return Path(out_path)
