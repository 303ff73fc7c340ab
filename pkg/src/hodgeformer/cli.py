"""Command line interface.

Configuration precedence, lowest to highest: built-in defaults, the config
file (``--config`` or ``$HODGEFORMER_CONFIG``), ``--set key=value`` pairs,
then dedicated flags such as ``--epochs`` or ``--seed``.

Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data import DatasetManifest, ManifestEntry, ManifestError, octant_labels, synthetic_entries
from .features import dump_features, extract_features
from .layers import ConfigurationError
from .mesh import (
    MeshError,
    Mutation,
    apply_mutation,
    build_incidence,
    generate_shape,
    load_mesh,
    normalize_mesh,
    save_off,
)
from .model import SMOOTHING_GRID, LayerConfig, ModelConfig
from .numerics import CheckpointError

logger = logging.getLogger("hodgeformer")

CONFIG_ENV = "HODGEFORMER_CONFIG"
RUN_KEYS = {"workers": 1, "manifest": None, "run_dir": None}


class InputError(Exception):
    """Invalid user input; maps to exit code 2."""


# ---------------------------------------------------------------- configuration

def _config_defaults():
    out = {}
    for f in dataclasses.fields(ModelConfig):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        else:
            out[f.name] = f.default_factory()
    return out


def _check_type(key, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InputError(f"{key}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InputError(f"{key}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InputError(f"{key}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise InputError(f"{key}: expected a string, got {value!r}")
    elif isinstance(default, (tuple, list)):
        if not isinstance(value, (list, tuple)):
            raise InputError(f"{key}: expected a list, got {value!r}")
    elif isinstance(default, dict):
        if not isinstance(value, dict):
            raise InputError(f"{key}: expected a mapping, got {value!r}")
    return value


def _check_layers(layers):
    if not isinstance(layers, list):
        raise InputError("layers: expected a list")
    for i, item in enumerate(layers):
        if not isinstance(item, dict):
            raise InputError(f"layers[{i}]: expected a mapping with kind/elements")
        extra = sorted(set(item) - {"kind", "elements"})
        if extra:
            raise InputError(f"layers[{i}].{extra[0]}: unknown key")
        try:
            LayerConfig(item.get("kind", "hodgeformer"), tuple(item.get("elements", ("v",))))
        except ConfigurationError as exc:
            raise InputError(f"layers[{i}]: {exc}") from None


def merge_config(doc, overrides=None):
    """Validate a config mapping; returns ``(ModelConfig, run_options)``."""
    doc = dict(doc or {})
    doc.update(overrides or {})
    model_defaults = _config_defaults()
    model_kw, run = {}, dict(RUN_KEYS)
    for key, value in doc.items():
        if key in model_defaults:
            if key == "layers" and value is not None:
                _check_layers(value)
            elif key == "s_override" and isinstance(value, dict):
                for k, s in value.items():
                    if k not in ("v", "e", "f"):
                        raise InputError(f"s_override.{k}: unknown element kind")
                    if s is not None and (not isinstance(s, int) or s < 1):
                        raise InputError(f"s_override.{k}: expected a positive integer")
            model_kw[key] = _check_type(key, value, model_defaults[key])
        elif key in run:
            run[key] = _check_type(key, value, RUN_KEYS[key])
        else:
            raise InputError(f"{key}: unknown config key")
    try:
        config = ModelConfig.from_dict(model_kw)
    except (ConfigurationError, TypeError) as exc:
        raise InputError(f"config: {exc}") from None
    return config, run


def read_config_file(path):
    if path is None:
        return {}
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise InputError(f"{path}: {exc}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise InputError(f"{path}: top level must be a mapping")
    return doc


def _parse_set(pairs):
    out = {}
    for item in pairs or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise InputError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(raw)
    return out


def resolve_config(args, flag_keys=()):
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV)
    overrides = _parse_set(getattr(args, "set", None))
    for key in flag_keys:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return merge_config(read_config_file(path), overrides)


def config_help():
    lines = ["config keys (default):"]
    for key, value in {**_config_defaults(), **RUN_KEYS}.items():
        lines.append(f"  {key} = {json.dumps(list(value) if isinstance(value, tuple) else value)}")
    return "\n".join(lines)


# ---------------------------------------------------------------- outputs

def version_string():
    try:
        rev = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_stamp(out_dir, config_hash, seed, command):
    stamp = {"command": command, "config_hash": config_hash, "seed": seed, "version": version_string()}
    path = Path(out_dir) / "stamp.json"
    path.write_text(json.dumps(stamp, indent=2, sort_keys=True) + "\n")
    return path


def _json_dump(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def _run_dir(args, run):
    d = Path(args.out or run.get("run_dir") or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------- commands

def cmd_inspect(args):
    mesh = load_mesh(args.mesh)
    ops = build_incidence(mesh)
    prod = (ops.d1.astype(np.int64) @ ops.d0.astype(np.int64))
    exact = prod.count_nonzero() == 0
    lo, hi = mesh.bounding_box()
    print(f"V={mesh.n_v} E={mesh.n_e} F={mesh.n_f} χ={mesh.euler_characteristic} "
          f"d1·d0=0: {'OK' if exact else 'FAIL'}")
    print(f"boundary edges: {len(mesh.boundary_edges)}")
    print(f"bounding box: [{', '.join(f'{x:.6g}' for x in lo)}] to [{', '.join(f'{x:.6g}' for x in hi)}]")
    return 0 if exact else 1


def cmd_gen_data(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = synthetic_entries(args.classes, args.per_class, args.seed, "train")
    if args.test_per_class:
        entries += synthetic_entries(args.classes, args.test_per_class, args.seed + 1, "test")
    written = []
    for i, e in enumerate(entries):
        g = e.generator
        mesh = normalize_mesh(generate_shape(g["kind"], g["resolution"], g["seed"], g["deform"]))
        name = f"{e.split}_{i:04d}_{g['kind']}.off"
        save_off(mesh, out / name)
        if args.task == "segmentation":
            lab = f"{Path(name).stem}.labels"
            np.savetxt(out / lab, octant_labels(mesh), fmt="%d")
            written.append(ManifestEntry(path=name, label_file=lab, split=e.split))
        else:
            written.append(ManifestEntry(path=name, label=e.label, split=e.split))
    manifest = DatasetManifest(written, out).write(out / "manifest.jsonl")
    blob = json.dumps(vars(args), sort_keys=True, default=str).encode()
    write_stamp(out, hashlib.sha256(blob).hexdigest(), args.seed, "gen-data")
    print(f"wrote {len(written)} meshes and {manifest}")
    return 0


def cmd_features(args):
    mesh = load_mesh(args.mesh)
    if args.normalize:
        mesh = normalize_mesh(mesh)
    fs = extract_features(mesh)
    stem = Path(args.out) if args.out else Path(args.mesh).with_suffix("")
    stem.parent.mkdir(parents=True, exist_ok=True)
    for p in dump_features(fs, stem):
        print(p)
    if fs.diagnostics:
        print(_json_dump(fs.diagnostics), end="")
    return 0


def _train_flags(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--precision", choices=("float32", "float64"))
    p.add_argument("--workers", type=int)


TRAIN_FLAGS = ("epochs", "seed", "lr", "batch_size", "precision", "workers")


def cmd_train(args):
    from . import report
    from .train import format_table, smoothing_study, train

    config, run = resolve_config(args, TRAIN_FLAGS)
    manifest = args.manifest or run["manifest"]
    if manifest is None:
        raise InputError("manifest: required (argument or config key)")
    out = _run_dir(args, run)
    write_stamp(out, config.digest(), config.seed, "train")
    (out / "config.json").write_text(_json_dump(config.to_dict()))
    progress = (lambda r: print(f"epoch {r['epoch']} loss {r['train_loss']:.4f} acc {r['train_acc']:.3f}",
                                file=sys.stderr)) if args.verbose else None
    if args.smoothing_study:
        rows = smoothing_study(config, manifest, SMOOTHING_GRID, out, run["workers"])
        table = format_table(("smoothing", "train acc", "eval acc"), rows)
        (out / "smoothing.txt").write_text(table + "\n")
        with open(out / "smoothing.csv", "w") as fh:
            fh.write("smoothing,train_acc,eval_acc\n")
            for s, a, b in rows:
                fh.write(f"{s!r},{'' if a is None else repr(a)},{'' if b is None else repr(b)}\n")
        report.plot_smoothing(rows, out / "smoothing.png")
        print(table)
        return 0
    result = train(config, manifest, out, run["workers"], progress)
    if result.metrics:
        report.plot_training(out / "metrics.csv", out / "metrics.png")
        last = result.metrics[-1]
        print(f"epochs {last['epoch']} train_acc {last['train_acc']:.4f} best_epoch {result.best_epoch}")
    print(f"checkpoint {out / 'best.ckpt'}")
    return 0


def cmd_eval(args):
    from . import report
    from .train import format_table, load_checkpoint, load_set, robustness_table
    from .train import evaluate as run_eval

    model, meta, _ = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.read(args.manifest)
    entries = manifest.split(args.split)
    if not entries:
        raise InputError(f"split: manifest has no {args.split!r} entries")
    data = load_set(entries, manifest.root)
    out = Path(args.out) if args.out else None
    if args.robustness:
        kw = {"mutations": args.mutation} if args.mutation else {}
        rows = robustness_table(model, data, seed=args.seed, workers=args.workers, **kw)
        table = format_table(("Variant", "Accuracy", "Drop"), rows)
        print(table)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "robustness.txt").write_text(table + "\n")
            _json_dump([{"variant": v, "accuracy": a, "drop": d} for v, a, d in rows], out / "robustness.json")
            report.plot_robustness(rows, out / "robustness.png")
            write_stamp(out, model.config.digest(), args.seed, "eval")
        return 0
    mutation = Mutation.parse(args.mutation[0]) if args.mutation else None
    rep = run_eval(model, data, mutation, seed=args.seed, workers=args.workers,
                   area_weighted=args.area_weighted)
    rep["split"] = args.split
    rep["checkpoint_epoch"] = meta.get("epoch")
    text = _json_dump(rep)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _json_dump(rep, out / "eval.json")
        write_stamp(out, model.config.digest(), args.seed, "eval")
    print(text, end="")
    return 0


def cmd_predict(args):
    from .data import MeshStatics
    from .train import LoadedSet, load_checkpoint, run_inference

    model, _, _ = load_checkpoint(args.checkpoint)
    meshes = [normalize_mesh(load_mesh(p)) for p in args.meshes]
    data = LoadedSet([MeshStatics(m) for m in meshes], [None] * len(meshes))
    logits = run_inference(model, data, model.config.batch_size, args.seed, args.workers)
    out = []
    for path, z in zip(args.meshes, logits):
        pred = np.argmax(z, axis=-1)
        out.append({"mesh": str(path), "prediction": pred.tolist()})
    text = _json_dump(out)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_mutate(args):
    mesh = load_mesh(args.mesh)
    mutation = Mutation(args.kind, args.param) if args.param is not None else Mutation.parse(args.kind)
    mutated, removed = apply_mutation(mesh, mutation, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_off(mutated, out)
    sidecar = {"seed": args.seed, "kind": mutation.kind,
               "parameters": {"param": mutation.param, "k_range": list(mutation.k_range)},
               "removed_face_ids": removed.tolist(), "source": str(args.mesh)}
    _json_dump(sidecar, out.with_suffix(".json"))
    print(f"{out}: V={mutated.n_v} F={mutated.n_f} removed={len(removed)}")
    return 0


def cmd_bench(args):
    from . import report
    from .bench import bench_config, bench_csv, run_bench, scaling_ratios

    config = bench_config(args.layers, args.precision, args.d, args.d_hidden, args.heads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_bench(args.sizes, config, args.runs, args.warmup, args.backward, args.seed,
                     log=lambda r: print(json.dumps(r), file=sys.stderr))
    text = bench_csv(rows)
    (out / "bench.csv").write_text(text)
    report.plot_bench(rows, out / "bench.png")
    write_stamp(out, config.digest(), args.seed, "bench")
    print(text, end="")
    for (a, b), r in scaling_ratios(rows).items():
        pk = scaling_ratios(rows, "peak_mb")[(a, b)]
        print(f"time({b})/time({a}) = {r:.2f}  peak({b})/peak({a}) = {pk:.2f}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="hodgeformer", description="Attention-based Hodge Laplacians on triangle meshes.",
        epilog=config_help() + f"\n\nDefault config file: ${CONFIG_ENV}. Flags override --set, "
                               "which overrides the config file.",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"hodgeformer {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="mesh statistics and the d1·d0 check")
    p.add_argument("mesh")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gen-data", help="write a synthetic dataset and manifest")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", dest="per_class", type=int, default=10)
    p.add_argument("--test-per-class", dest="test_per_class", type=int, default=0)
    p.add_argument("--task", choices=("classification", "segmentation"), default="classification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("features", help="dump raw per-element features as CSV")
    p.add_argument("mesh")
    p.add_argument("--out", help="output stem (default: next to the mesh)")
    p.add_argument("--normalize", action="store_true")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train a model", epilog=config_help(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("manifest", nargs="?")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out")
    p.add_argument("--smoothing-study", dest="smoothing_study", action="store_true",
                   help=f"train once per smoothing value in {list(SMOOTHING_GRID)}")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--mutation", action="append", metavar="KIND[:PARAM]")
    p.add_argument("--robustness", action="store_true", help="accuracy table over mutations")
    p.add_argument("--area-weighted", dest="area_weighted", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict labels for mesh files")
    p.add_argument("checkpoint")
    p.add_argument("meshes", nargs="+")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("mutate", help="apply a robustness mutation to a mesh")
    p.add_argument("mesh")
    p.add_argument("--kind", required=True, help="gaussian_noise, face_removal or patch_removal")
    p.add_argument("--param", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mutate)

    p = sub.add_parser("bench", help="forward time and memory against mesh size")
    p.add_argument("--sizes", type=int, nargs="+", default=[2**8, 2**10, 2**12, 2**14])
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    p.add_argument("--d", type=int, default=256)
    p.add_argument("--d-hidden", dest="d_hidden", type=int, default=512)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--backward", action="store_true", help="time forward+backward")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bench")
    p.set_defaults(func=cmd_bench)
    return parser


INPUT_ERRORS = (InputError, ConfigurationError, MeshError, ManifestError, CheckpointError,
                FileNotFoundError, IsADirectoryError, ValueError, KeyError)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
