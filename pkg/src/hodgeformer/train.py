"""Training loop, evaluation, robustness and label-smoothing studies."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    DatasetManifest,
    MeshStatics,
    collate,
    load_entry,
    nearest_face_labels,
    prepare_sample,
)
from .mesh import Mutation, apply_mutation
from .model import SMOOTHING_GRID, HodgeFormerModel, ModelConfig
from .numerics import Adam, Tape, cosine_lr, cross_entropy, load_arrays, save_arrays

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc")
EVAL_STREAM = 0xE7A1
NAN_PATIENCE = 3


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model, optimizer=None, **meta):
    arrays = dict(model.state_arrays())
    adam_t = 0
    if optimizer is not None and optimizer.state:
        arrays.update(optimizer.state_arrays())
        adam_t = optimizer.state["t"]
    meta = {"format": "hodgeformer-checkpoint", "version": __version__,
            "config": model.config.to_dict(), "adam_t": adam_t, **meta}
    return save_arrays(path, arrays, meta)


def load_checkpoint(path):
    """Return ``(model, meta, optimizer)`` restored from ``path``."""
    arrays, meta = load_arrays(path)
    config = ModelConfig.from_dict(meta["config"])
    model = HodgeFormerModel(config)
    model.load_state_arrays(arrays)
    opt = Adam(model.parameters())
    opt.load_state_arrays(arrays, meta.get("adam_t", 0))
    return model, meta, opt


# ---------------------------------------------------------------- helpers

def loss_ce_smoothed(logits, targets, smoothing=0.0, class_weights=None):
    return cross_entropy(logits, targets, smoothing, class_weights)


def class_weights_from(labels, num_classes):
    """Inverse training frequency, normalized to mean 1 over the classes."""
    counts = np.bincount(np.concatenate([np.atleast_1d(l) for l in labels]), minlength=num_classes)
    w = np.where(counts > 0, counts.sum() / np.maximum(counts, 1) / num_classes, 1.0)
    return w / w.mean()


def _targets(batch, task):
    return np.asarray(batch.labels, dtype=np.int64)


def _accuracy_counts(logits, targets):
    pred = np.argmax(logits, axis=1)
    return int((pred == targets).sum()), len(targets)


@dataclass
class LoadedSet:
    statics: list
    labels: list
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.statics)


def load_set(entries, root="."):
    statics, labels = [], []
    for e in entries:
        mesh, label = load_entry(e, root)
        statics.append(MeshStatics(mesh))
        labels.append(label)
    return LoadedSet(statics, labels, list(entries))


def _split_sets(config, manifest):
    train = manifest.split("train")
    if not train:
        raise ValueError("manifest has no training entries")
    val = manifest.split("val")
    if not val and config.val_fraction > 0 and len(train) > 1:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5641]))
        order = rng.permutation(len(train))
        n_val = max(1, int(round(config.val_fraction * len(train))))
        val_ids = set(order[:n_val].tolist())
        val = [e for i, e in enumerate(train) if i in val_ids]
        train = [e for i, e in enumerate(train) if i not in val_ids]
    return train, val


def _prepare_all(data, indices, config, seeds, augmented, workers):
    kinds = config.pattern_elements()

    def one(pair):
        i, seed = pair
        return prepare_sample(data.statics[i], data.labels[i], seed=seed, augmented=augmented,
                              jitter=config.jitter, kinds=kinds, s_override=config.s_override)

    pairs = list(zip(indices, seeds))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, pairs))
    return [one(p) for p in pairs]


def run_inference(model, data, batch_size=8, seed=0, workers=1, trace=None):
    """Eval-mode logits per mesh (classification: (C,), segmentation: (n_f, C))."""
    config = model.config
    out = []
    for lo in range(0, len(data), batch_size):
        idx = list(range(lo, min(len(data), lo + batch_size)))
        seeds = [[seed, EVAL_STREAM, i] for i in idx]
        samples = _prepare_all(data, idx, config, seeds, False, workers)
        batch = collate(samples, config.dtype)
        logits = model(batch, train=False, trace=trace).data
        if config.task == "classification":
            out.extend(logits[j] for j in range(len(idx)))
        else:
            fo = batch.offsets["f"]
            out.extend(logits[fo[j]:fo[j + 1]] for j in range(len(idx)))
    return out


def _eval_metrics(model, data, class_weights, seed, workers):
    config = model.config
    if len(data) == 0:
        return None, None
    logits = run_inference(model, data, config.batch_size, seed, workers)
    if config.task == "classification":
        z = np.stack(logits)
        y = np.asarray(data.labels, dtype=np.int64)
    else:
        z = np.concatenate(logits)
        y = np.concatenate([np.asarray(l, dtype=np.int64) for l in data.labels])
    loss = float(cross_entropy(z, y, config.label_smoothing, class_weights).data)
    correct, total = _accuracy_counts(z, y)
    return loss, correct / total


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: HodgeFormerModel
    metrics: list
    best_epoch: int
    checkpoint: Path = None


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(float(np.float64(x)))
    return str(x)


def metrics_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def train(config, manifest, run_dir=None, workers=1, progress=None):
    """Fit a model; writes ``metrics.csv``, ``best.ckpt`` and ``last.ckpt`` under ``run_dir``.

    Each epoch shuffles the training meshes, re-augments them and resamples
    the random part of the sparsity patterns before batching. The learning
    rate follows a cosine schedule over all optimizer steps.
    """
    if isinstance(manifest, (str, Path)):
        manifest = DatasetManifest.read(manifest)
    train_entries, val_entries = _split_sets(config, manifest)
    train_set = load_set(train_entries, manifest.root)
    val_set = load_set(val_entries, manifest.root)

    weights = class_weights_from(train_set.labels, config.num_classes) if config.class_weighting else None
    for labels in train_set.labels + val_set.labels:
        if np.any(np.asarray(labels) >= config.num_classes) or np.any(np.asarray(labels) < 0):
            raise ValueError(f"label outside [0, {config.num_classes})")

    model = HodgeFormerModel(config)
    params = model.parameters()
    opt = Adam(params)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5348]))
    drop_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x4452]))
    steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    best = (-1.0, math.inf)
    best_epoch = 0
    rows = []
    step = 0
    bad_batches = 0

    def checkpoint(name, epoch):
        if run_dir is None:
            return None
        return save_checkpoint(run_dir / name, model, opt, epoch=epoch, step=step,
                               shuffle_rng=shuffle_rng.bit_generator.state,
                               dropout_rng=drop_rng.bit_generator.state)

    if config.epochs == 0:
        checkpoint("best.ckpt", 0)
        checkpoint("last.ckpt", 0)

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        loss_sum = 0.0
        correct = count = 0
        lr = config.lr
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size].tolist()
            seeds = [[config.seed, epoch, i] for i in idx]
            samples = _prepare_all(train_set, idx, config, seeds, config.augment, workers)
            batch = collate(samples, config.dtype)
            targets = _targets(batch, config.task)
            lr = cosine_lr(step, total_steps, config.lr, config.lr_min)
            opt.zero_grad()
            with Tape() as tape:
                logits = model(batch, train=True, rng=drop_rng)
                loss = cross_entropy(logits, targets, config.label_smoothing, weights)
                value = float(loss.data)
                if not math.isfinite(value):
                    bad_batches += 1
                    logger.warning("non-finite loss at epoch %d batch %d", epoch, b)
                    if bad_batches >= NAN_PATIENCE:
                        raise TrainingDiverged(
                            f"loss was non-finite for {bad_batches} consecutive batches (epoch {epoch})")
                    continue
                tape.backward(loss)
            bad_batches = 0
            opt.step(lr)
            step += 1
            c, n = _accuracy_counts(logits.data, targets)
            correct += c
            count += n
            loss_sum += value * n
        train_loss = loss_sum / max(count, 1)
        train_acc = correct / max(count, 1)
        val_loss, val_acc = _eval_metrics(model, val_set, weights, config.seed, workers)
        rows.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "train_acc": train_acc,
                     "val_loss": val_loss, "val_acc": val_acc})
        if progress is not None:
            progress(rows[-1])
        logger.info("epoch %d loss %.4f acc %.3f val %s", epoch, train_loss, train_acc, val_acc)

        score = (val_acc, -val_loss) if val_acc is not None else (0.0, 0.0)
        if val_acc is None or score > (best[0], -best[1]):
            best = (score[0], -score[1])
            best_epoch = epoch
            checkpoint("best.ckpt", epoch)
        if run_dir is not None:
            (run_dir / "metrics.csv").write_text(metrics_csv(rows))
        if config.target_train_acc is not None and train_acc >= config.target_train_acc:
            logger.info("train accuracy %.3f reached target at epoch %d", train_acc, epoch)
            break

    ckpt = checkpoint("last.ckpt", rows[-1]["epoch"] if rows else 0)
    if run_dir is not None:
        (run_dir / "metrics.csv").write_text(metrics_csv(rows))
        ckpt = run_dir / "best.ckpt"
    return TrainResult(model, rows, best_epoch, ckpt)


# ---------------------------------------------------------------- evaluation

def _mutated_set(data, mutation, seed):
    statics, labels, removed = [], [], []
    for i, (st, label) in enumerate(zip(data.statics, data.labels)):
        mutated, gone = apply_mutation(st.mesh, mutation, np.random.SeedSequence([seed, 0x4D55, i]))
        if np.ndim(label) > 0:
            label = nearest_face_labels(st.mesh, label, mutated)
        statics.append(MeshStatics(mutated))
        labels.append(label)
        removed.append(gone)
    return LoadedSet(statics, labels, data.entries), removed


def evaluate(model, data, mutation=None, seed=0, workers=1, area_weighted=False):
    """Accuracy report: mesh-level for classification, face-level for segmentation."""
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model)[0]
    config = model.config
    if mutation is not None:
        if isinstance(mutation, str):
            mutation = Mutation.parse(mutation)
        data, _ = _mutated_set(data, mutation, seed)
    if config.task == "segmentation":
        for y, st in zip(data.labels, data.statics):
            if len(y) != st.mesh.n_f:
                raise ValueError(f"label/mesh mismatch: {len(y)} labels for {st.mesh.n_f} faces")
    logits = run_inference(model, data, config.batch_size, seed, workers)
    report = {"task": config.task, "meshes": len(data),
              "mutation": None if mutation is None else {"kind": mutation.kind, "param": mutation.param}}
    if config.task == "classification":
        y = np.asarray(data.labels, dtype=np.int64)
        if np.any(y >= config.num_classes):
            raise ValueError("label/model mismatch: class id exceeds model outputs")
        pred = np.array([int(np.argmax(z)) for z in logits])
        report["accuracy"] = float((pred == y).mean())
        report["predictions"] = pred.tolist()
        return report
    correct = total = 0
    area_correct = area_total = 0.0
    for z, y, st in zip(logits, data.labels, data.statics):
        y = np.asarray(y)
        if len(y) != len(z):
            raise ValueError(f"label/mesh mismatch: {len(y)} labels for {len(z)} faces")
        hit = np.argmax(z, axis=1) == y
        correct += int(hit.sum())
        total += len(y)
        m = st.mesh
        area = 0.5 * np.linalg.norm(np.cross(m.vertices[m.faces[:, 1]] - m.vertices[m.faces[:, 0]],
                                             m.vertices[m.faces[:, 2]] - m.vertices[m.faces[:, 0]]), axis=1)
        area_correct += float(area[hit].sum())
        area_total += float(area.sum())
    report["accuracy"] = correct / max(total, 1)
    report["faces"] = total
    if area_weighted:
        report["area_weighted_accuracy"] = area_correct / max(area_total, 1e-300)
    return report


DEFAULT_MUTATIONS = ("gaussian_noise:0.005", "gaussian_noise:0.01", "gaussian_noise:0.02",
                     "face_removal:0.04", "face_removal:0.1", "face_removal:0.2", "patch_removal:0.005")


def robustness_table(model, data, mutations=DEFAULT_MUTATIONS, seed=0, workers=1):
    """Rows ``(variant, accuracy, drop)`` with the original set first."""
    base = evaluate(model, data, seed=seed, workers=workers)["accuracy"]
    rows = [("Original", base, None)]
    for text in mutations:
        mut = Mutation.parse(text) if isinstance(text, str) else text
        acc = evaluate(model, data, mut, seed=seed, workers=workers)["accuracy"]
        rows.append((mut.label(), acc, base - acc))
    return rows


def format_table(header, rows):
    cells = [[str(h) for h in header]] + [[_cell(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)


def _cell(c):
    if c is None:
        return "n/a"
    if isinstance(c, float):
        return f"{100 * c:.1f}%"
    return str(c)


def smoothing_study(config, manifest, grid=SMOOTHING_GRID, run_dir=None, workers=1, eval_split="test"):
    """Train once per smoothing value; rows ``(smoothing, train_acc, eval_acc)``."""
    import dataclasses

    if isinstance(manifest, (str, Path)):
        manifest = DatasetManifest.read(manifest)
    eval_set = load_set(manifest.split(eval_split), manifest.root)
    rows = []
    for s in grid:
        cfg = dataclasses.replace(config, label_smoothing=float(s))
        sub = None if run_dir is None else Path(run_dir) / f"smoothing_{s:g}"
        res = train(cfg, manifest, sub, workers)
        train_acc = res.metrics[-1]["train_acc"] if res.metrics else None
        eval_acc = evaluate(res.model, eval_set, seed=cfg.seed, workers=workers)["accuracy"] if len(eval_set) else None
        rows.append((float(s), train_acc, eval_acc))
    return rows
