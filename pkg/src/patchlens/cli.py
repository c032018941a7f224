"""Command-line pipeline: synth, train-dense, select, finetune, evaluate, explain.

Each subcommand is thin orchestration over the library modules. Options
resolve in three layers: built-in defaults, then a flat key=value
--config file, then explicit flags. Every run writes a provenance JSON
next to its output (command, resolved config, config hash, seed, wall
time); the wall time lives only there so checkpoints and reports stay
byte-identical across reruns of the same config and seed.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import metrics, synth
from .formats import (FormatError, _atomic_write, export_saliency,
                      read_checkpoint, read_embeddings, write_checkpoint)
from .model import AdapterModel, TrainConfig, explain, train_stage
from .nn import NumericError, ShapeError
from .selection import apply_selection, build_problem, solve_exact, solve_heuristic

# keys that locate artifacts rather than shape the computation; excluded
# from the config hash so identical runs in different directories still
# produce byte-identical checkpoints and reports
PATH_KEYS = ("config", "out", "embeddings", "checkpoint")

# what to run when a required input artifact is missing
UPSTREAM = {
    ("train-dense", "embeddings"): "patchlens synth",
    ("select", "embeddings"): "patchlens synth",
    ("select", "checkpoint"): "patchlens train-dense",
    ("finetune", "embeddings"): "patchlens synth",
    ("finetune", "checkpoint"): "patchlens select",
    ("evaluate", "embeddings"): "patchlens synth",
    ("evaluate", "checkpoint"): "patchlens train-dense or patchlens finetune",
    ("explain", "embeddings"): "patchlens synth",
    ("explain", "checkpoint"): "patchlens finetune",
}


class DataError(Exception):
    """Input artifacts are missing, malformed, or from the wrong stage."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# (dest, type, default, help); required options use default=None and are
# checked after the config file is merged in. Booleans are tri-state on
# the command line so a config-file value survives an absent flag.
_COMMON = [
    ("seed", int, 0, "base seed for every random stream"),
]

OPTIONS: dict[str, list[tuple[str, type, object, str]]] = {
    "synth": _COMMON + [
        ("out", str, None, "output directory for train.emb and test.emb"),
        ("classes", int, 8, "number of classes"),
        ("parts", int, 12, "size of the part prototype pool"),
        ("parts_per_class", int, 3, "prototypes per class"),
        ("grid", int, 12, "patch grid side length"),
        ("dim", int, 32, "embedding dimension"),
        ("samples", int, 200, "training samples per class"),
        ("test_samples", int, 50, "test samples per class (0 skips the file)"),
        ("noise", float, 0.3, "background noise sigma"),
        ("mask_frac", float, 0.4, "object mask area as a fraction of the grid"),
        ("amplitude", float, 3.0, "prototype vector norm"),
        ("disjoint_parts", _parse_bool, False, "give classes disjoint prototypes"),
        ("distractor_pool", int, 6, "number of background clutter prototypes"),
        ("distractors", int, 3, "clutter placements per image"),
        ("distractor_bias", float, 0.7,
         "probability a clutter slot takes the class-preferred prototype"),
    ],
    "train-dense": _COMMON + [
        ("embeddings", str, None, "training embedding file"),
        ("out", str, None, "checkpoint to write"),
        ("nf", int, 24, "number of features"),
        ("hidden", int, 64, "hidden width"),
        ("layers", int, 4, "number of linear layers"),
        ("epochs", int, 30, "training epochs"),
        ("batch_size", int, 32, "minibatch size"),
        ("lr", float, 1e-3, "learning rate"),
        ("weight_decay", float, 1e-4, "decoupled weight decay"),
        ("dropout", float, 0.2, "dropout on the pooled feature vector"),
        ("lambda_div", float, 0.05, "diversity loss weight"),
        ("lambda_l1_fv", float, 0.01, "L1 weight on the feature vector"),
        ("lambda_l1_fm", float, 0.0, "L1 weight on the feature maps"),
        ("schedule_free", _parse_bool, False, "use the schedule-free optimizer"),
    ],
    "select": _COMMON + [
        ("embeddings", str, None, "training embedding file"),
        ("checkpoint", str, None, "dense-stage checkpoint"),
        ("out", str, None, "sparse checkpoint to write"),
        ("nf_star", int, 12, "features to keep"),
        ("nf_class", int, 3, "features per class"),
        ("lambda_sim", float, 0.5, "similarity penalty weight"),
        ("lambda_bias", float, 0.1, "locality bias weight"),
        ("solver", str, "heuristic", "exact or heuristic"),
        ("budget", int, 20000, "swap evaluations for the heuristic solver"),
    ],
    "finetune": _COMMON + [
        ("embeddings", str, None, "training embedding file"),
        ("checkpoint", str, None, "sparse checkpoint from select"),
        ("out", str, None, "checkpoint to write"),
        ("epochs", int, 15, "training epochs"),
        ("batch_size", int, 32, "minibatch size"),
        ("lr", float, 5e-4, "learning rate"),
        ("weight_decay", float, 1e-4, "decoupled weight decay"),
        ("lambda_div", float, 0.05, "diversity loss weight"),
        ("lambda_l1_fv", float, 0.01, "L1 weight on the feature vector"),
        ("lambda_l1_fm", float, 0.0, "L1 weight on the feature maps"),
        ("schedule_free", _parse_bool, False, "use the schedule-free optimizer"),
    ],
    "evaluate": _COMMON + [
        ("embeddings", str, None, "embedding file to score"),
        ("checkpoint", str, None, "checkpoint to score"),
        ("out", str, None, "metric report JSON to write"),
        ("k", int, 5, "features per cell for spatial distinctiveness"),
        ("batch_size", int, 256, "evaluation batch size"),
    ],
    "explain": _COMMON + [
        ("embeddings", str, None, "embedding file"),
        ("checkpoint", str, None, "finetuned sparse checkpoint"),
        ("out", str, None, "directory for saliency maps"),
        ("class_id", int, None, "class whose features to render"),
        ("image", int, -1, "sample index (-1 picks the first of --class)"),
        ("top_k", int, 0, "strongest features to keep (0 keeps all assigned)"),
        ("upsample", int, 16, "nearest-neighbour upscale factor for the maps"),
    ],
}

_REQUIRED = {
    "synth": ("out",),
    "train-dense": ("embeddings", "out"),
    "select": ("embeddings", "checkpoint", "out"),
    "finetune": ("embeddings", "checkpoint", "out"),
    "evaluate": ("embeddings", "checkpoint", "out"),
    "explain": ("embeddings", "checkpoint", "out", "class_id"),
}


def _flag(dest: str) -> str:
    if dest == "class_id":
        return "--class"
    return "--" + dest.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchlens",
        description="train, sparsify, and inspect patch-embedding adapters")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in OPTIONS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="flat key=value option file")
        for dest, typ, _default, help_text in opts:
            # defaults stay None here so the config file can fill the gap
            p.add_argument(_flag(dest), dest=dest, type=typ, default=None,
                           help=help_text)
    return parser


def read_config_file(path: str) -> dict[str, str]:
    """Flat key=value lines; blank lines and # comments are ignored."""
    if not os.path.exists(path):
        raise DataError(f"config file {path} not found")
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    return values


def resolve_options(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config file, and flags into one plain dict."""
    file_values = read_config_file(args.config) if args.config else {}
    known = {dest for dest, _, _, _ in OPTIONS[command]}
    for key in file_values:
        if key not in known:
            raise ValueError(f"unknown config key {key!r} for {command}")
    resolved: dict = {}
    for dest, typ, default, _help in OPTIONS[command]:
        value = getattr(args, dest)
        if value is None and dest in file_values:
            value = typ(file_values[dest])
        if value is None:
            value = default
        resolved[dest] = value
    for dest in _REQUIRED[command]:
        if resolved[dest] is None:
            raise ValueError(f"{command} needs {_flag(dest)}")
    return resolved


def config_digest(command: str, resolved: dict) -> bytes:
    hashed = {k: v for k, v in resolved.items() if k not in PATH_KEYS}
    hashed["command"] = command
    canon = json.dumps(hashed, sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).digest()


def write_provenance(path: str, command: str, resolved: dict,
                     digest: bytes, elapsed: float) -> None:
    doc = {
        "command": command,
        "config": resolved,
        "config_hash": digest.hex(),
        "seed": resolved.get("seed", 0),
        "wall_time_s": round(elapsed, 6),
    }
    _atomic_write(path, (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode())


def _load_embeddings(command: str, path: str):
    if not os.path.exists(path):
        raise DataError(f"{path} not found: run `{UPSTREAM[(command, 'embeddings')]}` "
                        "first to produce it")
    return read_embeddings(path)


def _load_model(command: str, path: str) -> AdapterModel:
    if not os.path.exists(path):
        raise DataError(f"{path} not found: run `{UPSTREAM[(command, 'checkpoint')]}` "
                        "first to produce it")
    return AdapterModel.from_checkpoint(read_checkpoint(path))


def _write_train_log(path: str, command: str, digest: bytes, log: list[dict]) -> None:
    doc = {"command": command, "config_hash": digest.hex(), "epochs": log}
    _atomic_write(path, (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode())


def run_synth(cfg: dict) -> None:
    scfg = synth.SynthConfig(
        n_classes=cfg["classes"], n_parts=cfg["parts"],
        parts_per_class=cfg["parts_per_class"], grid=cfg["grid"],
        dim=cfg["dim"], noise=cfg["noise"], mask_frac=cfg["mask_frac"],
        amplitude=cfg["amplitude"], disjoint_parts=cfg["disjoint_parts"],
        distractor_pool=cfg["distractor_pool"], distractors=cfg["distractors"],
        distractor_bias=cfg["distractor_bias"], seed=cfg["seed"])
    scfg.validate()
    os.makedirs(cfg["out"], exist_ok=True)
    train_path = os.path.join(cfg["out"], "train.emb")
    train = synth.write_split(scfg, "train", cfg["samples"], train_path)
    print(f"wrote {train_path} ({train.n} samples)")
    if cfg["test_samples"] > 0:
        test_path = os.path.join(cfg["out"], "test.emb")
        test = synth.write_split(scfg, "test", cfg["test_samples"], test_path)
        print(f"wrote {test_path} ({test.n} samples)")


def run_train_dense(cfg: dict) -> None:
    data = _load_embeddings("train-dense", cfg["embeddings"])
    net = AdapterModel(in_dim=data.d, hidden=cfg["hidden"],
                       n_features=cfg["nf"], n_classes=data.n_classes,
                       n_layers=cfg["layers"], dropout_p=cfg["dropout"],
                       seed=cfg["seed"])
    tcfg = TrainConfig(stage="dense", epochs=cfg["epochs"],
                       batch_size=cfg["batch_size"], lr=cfg["lr"],
                       weight_decay=cfg["weight_decay"], dropout_p=cfg["dropout"],
                       lambda_div=cfg["lambda_div"],
                       lambda_l1_fv=cfg["lambda_l1_fv"],
                       lambda_l1_fm=cfg["lambda_l1_fm"], seed=cfg["seed"],
                       schedule_free=cfg["schedule_free"])
    log = train_stage(net, data, tcfg)
    digest = config_digest("train-dense", cfg)
    write_checkpoint(net.to_checkpoint(digest), cfg["out"])
    _write_train_log(cfg["out"] + ".train.json", "train-dense", digest, log)
    final = log[-1]["accuracy"] if log else float("nan")
    print(f"wrote {cfg['out']} (train accuracy {final:.4f})")


def run_select(cfg: dict) -> None:
    if cfg["solver"] not in ("exact", "heuristic"):
        raise ValueError(f"unknown solver {cfg['solver']!r}")
    data = _load_embeddings("select", cfg["embeddings"])
    net = _load_model("select", cfg["checkpoint"])
    if net.head_mode != "dense":
        raise DataError(f"{cfg['checkpoint']} already has a sparse head; "
                        "select expects the `patchlens train-dense` product")
    problem = build_problem(net, data, cfg["nf_star"], cfg["nf_class"],
                            lambda_sim=cfg["lambda_sim"],
                            lambda_bias=cfg["lambda_bias"])
    if cfg["solver"] == "exact":
        result = solve_exact(problem)
    else:
        result = solve_heuristic(problem, budget=cfg["budget"])
    sparse = apply_selection(net, result)
    digest = config_digest("select", cfg)
    write_checkpoint(sparse.to_checkpoint(digest), cfg["out"])
    doc = json.loads(result.to_json())
    doc["config_hash"] = digest.hex()
    _atomic_write(cfg["out"] + ".selection.json",
                  (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode())
    print(f"wrote {cfg['out']} (features {result.selected.tolist()}, "
          f"objective {result.objective:.6f})")


def run_finetune(cfg: dict) -> None:
    data = _load_embeddings("finetune", cfg["embeddings"])
    net = _load_model("finetune", cfg["checkpoint"])
    if net.head_mode != "sparse":
        raise DataError(f"{cfg['checkpoint']} has a dense head: run "
                        "`patchlens select` first to fix the feature set")
    tcfg = TrainConfig(stage="finetune", epochs=cfg["epochs"],
                       batch_size=cfg["batch_size"], lr=cfg["lr"],
                       weight_decay=cfg["weight_decay"],
                       lambda_div=cfg["lambda_div"],
                       lambda_l1_fv=cfg["lambda_l1_fv"],
                       lambda_l1_fm=cfg["lambda_l1_fm"], seed=cfg["seed"],
                       schedule_free=cfg["schedule_free"])
    log = train_stage(net, data, tcfg)
    digest = config_digest("finetune", cfg)
    write_checkpoint(net.to_checkpoint(digest), cfg["out"])
    _write_train_log(cfg["out"] + ".train.json", "finetune", digest, log)
    final = log[-1]["accuracy"] if log else float("nan")
    print(f"wrote {cfg['out']} (train accuracy {final:.4f})")


def run_evaluate(cfg: dict) -> None:
    data = _load_embeddings("evaluate", cfg["embeddings"])
    net = _load_model("evaluate", cfg["checkpoint"])
    report = metrics.evaluate(net, data, k=cfg["k"],
                              batch_size=cfg["batch_size"])
    digest = config_digest("evaluate", cfg)
    report["config_hash"] = digest.hex()
    _atomic_write(cfg["out"], metrics.report_to_json(report).encode())
    print(f"wrote {cfg['out']} ({report['feature_space']} features, "
          f"accuracy {report['accuracy']:.4f})")


def run_explain(cfg: dict) -> None:
    data = _load_embeddings("explain", cfg["embeddings"])
    net = _load_model("explain", cfg["checkpoint"])
    if net.head_mode != "sparse":
        raise DataError(f"{cfg['checkpoint']} has a dense head: run "
                        "`patchlens select` and `patchlens finetune` first")
    cls = cfg["class_id"]
    if not 0 <= cls < data.n_classes:
        raise ValueError(f"--class {cls} out of range [0, {data.n_classes})")
    index = cfg["image"]
    if index < 0:
        hits = np.flatnonzero(np.asarray(data.labels) == cls)
        if hits.size == 0:
            raise DataError(f"no sample of class {cls} in {cfg['embeddings']}")
        index = int(hits[0])
    if index >= data.n:
        raise DataError(f"sample {index} out of range: file has {data.n}")
    top_k = cfg["top_k"] if cfg["top_k"] > 0 else None
    results = explain(net, data.patches[index], cls, top_k)
    os.makedirs(cfg["out"], exist_ok=True)
    name = f"img{index:05d}_c{cls}"
    for fid, weight, fmap in results:
        grid = fmap.reshape(data.h_f, data.w_f)
        pgm, _sidecar = export_saliency(grid, cfg["out"], name, fid, weight,
                                        upsample=cfg["upsample"])
        print(f"wrote {pgm}")


RUNNERS = {
    "synth": run_synth,
    "train-dense": run_train_dense,
    "select": run_select,
    "finetune": run_finetune,
    "evaluate": run_evaluate,
    "explain": run_explain,
}


def _provenance_path(command: str, cfg: dict) -> str:
    out = cfg["out"]
    if command in ("synth", "explain"):
        return os.path.join(out, "provenance.json")
    return out + ".provenance.json"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors and 0 for --help
        return 0 if e.code in (0, None) else 2
    try:
        cfg = resolve_options(args.command, args)
        t0 = time.monotonic()
        RUNNERS[args.command](cfg)
        write_provenance(_provenance_path(args.command, cfg), args.command,
                         cfg, config_digest(args.command, cfg),
                         time.monotonic() - t0)
        return 0
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except (DataError, FormatError, ShapeError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ValueError, KeyError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
