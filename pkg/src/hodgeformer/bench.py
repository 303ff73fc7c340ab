"""Forward-pass timing and memory scaling on sphere meshes of growing size."""

from __future__ import annotations

import csv
import gc
import io
import statistics
import time
import tracemalloc

from .data import MeshStatics, collate, prepare_sample
from .mesh import generate_shape, normalize_mesh
from .model import HodgeFormerModel, ModelConfig
from .numerics import Tape, total

DEFAULT_SIZES = (2**8, 2**10, 2**12, 2**14)
BENCH_COLUMNS = ("n_v", "n_e", "n_f", "s", "compute_s", "end_to_end_s", "peak_mb", "runs", "status")


def bench_config(layers=1, precision="float32", d=256, d_hidden=512, heads=4, elements=("v",)):
    return ModelConfig(n_hodge=layers, n_vanilla=0, d=d, d_hidden=d_hidden, heads=heads,
                       elements=elements, dropout=0.0, precision=precision, augment=False)


def _pass(model, batch, backward):
    if not backward:
        return model(batch)
    with Tape() as tape:
        out = model(batch)
        tape.backward(total(out))
    return out


def _prepare(mesh, config, seed):
    statics = MeshStatics(mesh)
    sample = prepare_sample(statics, 0, seed=seed, kinds=config.pattern_elements(),
                            s_override=config.s_override)
    return collate([sample], config.dtype)


def bench_size(n_v, config, runs=5, warmup=2, backward=False, seed=0):
    """Median compute and end-to-end seconds plus the traced peak for one size."""
    mesh = normalize_mesh(generate_shape("sphere", n_v, seed=seed))
    model = HodgeFormerModel(config, zero_init=False)
    batch = _prepare(mesh, config, seed)
    for _ in range(warmup):
        _pass(model, batch, backward)

    compute, e2e = [], []
    for r in range(runs):
        t0 = time.perf_counter()
        b = _prepare(mesh, config, [seed, r])
        t1 = time.perf_counter()
        _pass(model, b, backward)
        t2 = time.perf_counter()
        compute.append(t2 - t1)
        e2e.append(t2 - t0)

    gc.collect()
    tracemalloc.start()
    try:
        _pass(model, batch, backward)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    s = batch.patterns[config.pattern_elements()[0]].s if config.pattern_elements() else 0
    return {"n_v": mesh.n_v, "n_e": mesh.n_e, "n_f": mesh.n_f, "s": s,
            "compute_s": statistics.median(compute), "end_to_end_s": statistics.median(e2e),
            "peak_mb": peak / 2**20, "runs": runs, "status": "ok"}


def run_bench(sizes=DEFAULT_SIZES, config=None, runs=5, warmup=2, backward=False, seed=0, log=None):
    config = config or bench_config()
    rows = []
    for n in sizes:
        try:
            row = bench_size(int(n), config, runs, warmup, backward, seed)
        except MemoryError:
            row = {"n_v": int(n), "status": "skipped: out of memory"}
        rows.append(row)
        if log is not None:
            log(row)
    return rows


def bench_csv(rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, BENCH_COLUMNS, lineterminator="\n", restval="")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def scaling_ratios(rows, key="compute_s"):
    """``value(4n) / value(n)`` for consecutive completed sizes that differ by 4x."""
    ok = {r["n_v"]: r for r in rows if r.get("status") == "ok"}
    out = {}
    for n, r in ok.items():
        if 4 * n in ok:
            out[(n, 4 * n)] = float(ok[4 * n][key]) / float(r[key])
    return out


__all__ = ["DEFAULT_SIZES", "bench_config", "bench_size", "run_bench", "bench_csv", "scaling_ratios"]
