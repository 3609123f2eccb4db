"""Command-line entry point: featurize, pretrain, finetune, eval, bench, inspect.

Each command takes an optional JSON config (``--config``), writes into
``--out`` and leaves a ``manifest.json`` there describing the run.  A
manifest can be passed back as ``--config`` to repeat the run.

Exit codes: 0 success, 1 scaling gate failed, 2 usage or config,
3 data or ingestion, 4 integrity, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import bench, features as ft, training as tr
from .checkpoint import CorruptionError, ShapeMismatchError, load_tensors
from .model import PRESETS, ModelConfig, count_params, preset
from .numerics import DomainError, NumericError

log = logging.getLogger("ssamba")

EXIT_OK, EXIT_GATE, EXIT_USAGE, EXIT_DATA, EXIT_INTEGRITY, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5
DEFAULT_SEED = 42
CACHE_SUFFIX = ".smf1"
STATS_FILE = "stats.json"


class UsageError(ValueError):
    """Bad command-line arguments or config contents."""


# --------------------------------------------------------------------------
# Config schema

def _defaults(cls) -> dict:
    return {f.name: getattr(cls(), f.name) for f in fields(cls)}


def default_config(command: str) -> dict:
    if command == "featurize":
        return {"duration": 10.0, "workers": 1}
    if command == "pretrain":
        train = _defaults(tr.PretrainConfig)
        train.pop("seed")
        return {"data": None, "model": {"preset": "nano"}, "train": train}
    if command == "finetune":
        train = _defaults(tr.FinetuneConfig)
        train.pop("seed")
        return {"checkpoint": None, "data": None, "labels": None,
                "eval_data": None, "eval_labels": None, "train": train}
    if command == "eval":
        return {"checkpoint": None, "data": None, "labels": None}
    if command == "bench":
        cfg = _defaults(bench.BenchConfig)
        cfg.pop("seed")
        cfg["kinds"], cfg["lengths"] = list(cfg["kinds"]), list(cfg["lengths"])
        return cfg
    return {}


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        path = f"{where}{key}"
        if key not in base and not (where == "model." and key in _MODEL_KEYS):
            raise UsageError(f"unknown config key {path!r}")
        if isinstance(base.get(key), dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


_MODEL_KEYS = {"preset"} | {f.name for f in fields(ModelConfig)}


def resolve_config(command: str, path: str | None, seed_flag: int | None) -> tuple[dict, int]:
    """Defaults, then the config file, then flags.  Seed: flag > file > SSAMBA_SEED > 42."""
    cfg = default_config(command)
    file_cfg = {}
    if path is not None:
        try:
            file_cfg = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path}: invalid JSON ({exc})") from None
        if not isinstance(file_cfg, dict):
            raise UsageError(f"config file {path}: top level must be an object")
        if "command" in file_cfg and "config" in file_cfg:      # a run manifest
            if file_cfg["command"] != command:
                raise UsageError(f"manifest is for {file_cfg['command']!r}, not {command!r}")
            file_cfg = dict(file_cfg["config"], seed=file_cfg.get("seed"))
    file_seed = file_cfg.pop("seed", None)
    cfg = _merge(cfg, file_cfg)
    if seed_flag is not None:
        seed = seed_flag
    elif file_seed is not None:
        seed = file_seed
    elif os.environ.get("SSAMBA_SEED"):
        try:
            seed = int(os.environ["SSAMBA_SEED"])
        except ValueError:
            raise UsageError(f"SSAMBA_SEED must be an integer, got {os.environ['SSAMBA_SEED']!r}") from None
    else:
        seed = DEFAULT_SEED
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise UsageError(f"config key 'seed' must be a non-negative integer, got {seed!r}")
    return cfg, seed


def _build(cls, values: dict, key: str, **extra):
    try:
        return cls(**values, **extra)
    except TypeError as exc:
        raise UsageError(f"config key {key!r}: {exc}") from None
    except ValueError as exc:
        raise UsageError(f"config key {key!r}: {exc}") from None


def _model_config(section: dict) -> ModelConfig:
    section = dict(section)
    name = section.pop("preset", "nano")
    if name not in PRESETS:
        raise UsageError(f"config key 'model.preset': unknown preset {name!r}")
    try:
        return preset(name, **section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config key 'model': {exc}") from None


def _require(cfg: dict, key: str) -> str:
    if not cfg.get(key):
        raise UsageError(f"config key {key!r} is required")
    return cfg[key]


# --------------------------------------------------------------------------
# Manifest

def write_json_atomic(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out: Path, command: str, config_path, config: dict, seed: int,
                   started: str, outputs: list[Path]) -> None:
    write_json_atomic(out / "manifest.json", {
        "command": command,
        "config_path": None if config_path is None else str(config_path),
        "config": config,
        "seed": seed,
        "started": started,
        "finished": _now(),
        "outputs": sorted(str(p.relative_to(out)) for p in outputs),
    })


# --------------------------------------------------------------------------
# Data loading for the training commands

def load_feature_dir(path) -> tr.PatchCorpus:
    d = Path(path)
    if not d.is_dir():
        raise FileNotFoundError(f"feature directory {d} not found")
    files = sorted(d.glob(f"*{CACHE_SUFFIX}"))
    if not files:
        raise ft.IngestionError(f"{d}: no {CACHE_SUFFIX} feature caches")
    stats_path = d / STATS_FILE
    if not stats_path.exists():
        raise ft.IngestionError(f"{d}: missing {STATS_FILE}")
    stats = json.loads(stats_path.read_text(encoding="utf-8"))
    specs = [ft.read_feature_cache(f) for f in files]
    return tr.PatchCorpus.from_spectrograms(specs, [f.stem for f in files], (stats["mean"], stats["std"]))


def read_labels(path, corpus: tr.PatchCorpus, task: str, num_classes: int) -> tr.LabeledSet:
    """CSV with columns ``id,label``.

    ``single``: one class index.  ``multi``: space-separated class indices.
    ``segment``: space-separated class index per segment.
    """
    table = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"id", "label"} <= set(reader.fieldnames):
            raise tr.DataError(f"{path}: expected header with columns id,label")
        for row in reader:
            table[row["id"]] = row["label"].split()
    missing = [i for i in corpus.ids if i not in table]
    if missing:
        raise tr.DataError(f"{path}: no label for clip {missing[0]!r}")
    try:
        values = [[int(v) for v in table[i]] for i in corpus.ids]
    except ValueError as exc:
        raise tr.DataError(f"{path}: {exc}") from None
    if task == "single":
        labels = np.array([v[0] for v in values], dtype=np.int64)
    elif task == "multi":
        labels = np.zeros((len(values), num_classes), dtype=np.float32)
        for r, v in enumerate(values):
            if any(c < 0 or c >= num_classes for c in v):
                raise tr.DataError(f"{path}: class index outside [0, {num_classes})")
            labels[r, v] = 1
    else:
        if len({len(v) for v in values}) != 1:
            raise tr.DataError(f"{path}: segment label sequences differ in length")
        labels = np.array(values, dtype=np.int64)
    return tr.LabeledSet(corpus, labels)


# --------------------------------------------------------------------------
# Commands

def cmd_featurize(args, cfg: dict, seed: int) -> list[Path]:
    src, out = Path(args.input), Path(args.out)
    if not src.is_dir():
        raise UsageError(f"input directory {src} not found")
    wavs = sorted(p for p in src.iterdir() if p.suffix.lower() == ".wav")
    if not wavs:
        raise UsageError(f"input directory {src} contains no .wav files")
    duration = cfg["duration"]
    workers = cfg["workers"]
    if not isinstance(workers, int) or workers < 1:
        raise UsageError("config key 'workers' must be a positive integer")

    def one(path):
        try:
            return ft.featurize(ft.load_audio(path), duration)
        except (ft.IngestionError, ft.DegenerateInputError) as exc:
            log.warning("skipping %s: %s", path.name, exc)
            return None

    with ThreadPoolExecutor(max_workers=workers) as pool:
        specs = list(pool.map(one, wavs))
    kept = [(p, s) for p, s in zip(wavs, specs) if s is not None]
    if not kept:
        raise ft.IngestionError(f"no readable WAV files in {src}")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for p, s in kept:
        target = out / (p.stem + CACHE_SUFFIX)
        ft.write_feature_cache(target, s)
        written.append(target)
    mean, std = ft.corpus_stats(s for _, s in kept)
    stats = out / STATS_FILE
    write_json_atomic(stats, {"mean": mean, "std": std, "clips": len(kept)})
    print(f"featurized {len(kept)} of {len(wavs)} files into {out}")
    return written + [stats]


def cmd_pretrain(args, cfg: dict, seed: int) -> list[Path]:
    corpus = load_feature_dir(_require(cfg, "data"))
    mcfg = _model_config(cfg["model"])
    cfg["model"] = {"preset": cfg["model"].get("preset", "nano"), **mcfg.to_dict()}
    if corpus.grid[1] > mcfg.max_time_patches:
        raise UsageError(f"config key 'model.max_time_patches': corpus needs {corpus.grid[1]}")
    pcfg = _build(tr.PretrainConfig, cfg["train"], "train", seed=seed)
    out = Path(args.out)
    res = tr.pretrain(corpus, pcfg, mcfg, out_dir=out)
    print(f"pretrained {res.run.step} steps, best val_loss {res.run.best_val:.5f}")
    return [out / n for n in ("best.ckpt", "last.ckpt", "pretrain_log.csv", "eval.csv", "mask_stats.csv")
            if (out / n).exists()]


def cmd_finetune(args, cfg: dict, seed: int) -> list[Path]:
    ckpt = Path(_require(cfg, "checkpoint"))
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    run = tr.load_checkpoint(ckpt)
    fcfg = _build(tr.FinetuneConfig, cfg["train"], "train", seed=seed)
    corpus = load_feature_dir(_require(cfg, "data"))
    train = read_labels(_require(cfg, "labels"), corpus, fcfg.task, fcfg.num_classes)
    eval_set = None
    if cfg.get("eval_data"):
        ecorpus = load_feature_dir(cfg["eval_data"])
        eval_set = read_labels(_require(cfg, "eval_labels"), ecorpus, fcfg.task, fcfg.num_classes)
    out = Path(args.out)
    res = tr.finetune(run, train, fcfg, eval_set, out_dir=out)
    print(", ".join(f"{k} {v:.4f}" for k, v in res.metrics.items()))
    return [out / n for n in ("finetuned.ckpt", "finetune_log.csv", "metrics.csv")]


def cmd_eval(args, cfg: dict, seed: int) -> list[Path]:
    ckpt = Path(_require(cfg, "checkpoint"))
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    clf = tr.load_classifier(ckpt)
    corpus = load_feature_dir(_require(cfg, "data"))
    data = read_labels(_require(cfg, "labels"), corpus, clf.config.task, clf.config.num_classes)
    metrics = tr.evaluate(clf, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tr.write_metrics(out / "metrics.csv", metrics)
    print(", ".join(f"{k} {v:.4f}" for k, v in metrics.items()))
    return [out / "metrics.csv"]


def cmd_bench(args, cfg: dict, seed: int) -> list[Path]:
    if args.kinds:
        cfg["kinds"] = [k.strip() for k in args.kinds.split(",") if k.strip()]
    bcfg = _build(bench.BenchConfig, {**cfg, "kinds": tuple(cfg["kinds"]),
                                      "lengths": tuple(cfg["lengths"])}, "bench", seed=seed)
    if bcfg.lengths[0] < 1:
        raise UsageError("config key 'lengths' must be positive")
    if args.assert_scaling and bcfg.threads != 1:
        raise UsageError("config key 'threads': scaling assertions need single-threaded runs")
    out = Path(args.out)

    def progress(p):
        t = "truncated" if p.truncated else f"{p.median_seconds:.4f}s"
        print(f"{p.kind:9s} M={p.M:5d} {t} analytic={p.analytic_bytes} peak={p.peak_bytes}", flush=True)

    result = bench.sweep(bcfg, out, progress)
    for (kind, metric), fit in result.fits.items():
        print(f"{kind:9s} {metric:15s} slope {fit.slope:.3f} r2 {fit.r2:.4f}")
    files = [out / "bench.csv", out / "bench_summary.csv"]
    if args.assert_scaling:
        checks = bench.scaling_checks(result)
        for name, ok, detail in checks:
            print(f"{'PASS' if ok else 'FAIL'} {name} ({detail})")
        if not checks or not all(ok for _, ok, _ in checks):
            args.gate_failed = True
    return files


def cmd_inspect(args, cfg: dict, seed: int) -> list[Path]:
    path = Path(args.checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    t = load_tensors(path)
    width = max((len(k) for k in t), default=0)
    groups: dict[str, int] = {}
    for name, arr in t.items():
        print(f"{name:<{width}}  {str(tuple(arr.shape)):>16}  {arr.size}")
        prefix = name.split(".", 1)[0]
        groups[prefix] = groups.get(prefix, 0) + arr.size
    for prefix, n in groups.items():
        print(f"total {prefix}: {n}")
    if "meta.config" in t:
        mcfg = tr.config_from_vector(t["meta.config"])
        enc = groups.get("encoder", 0)
        expected = count_params(mcfg)
        print(f"encoder parameters: {enc} (symbolic count {expected})")
        if enc != expected:
            raise ShapeMismatchError("encoder.*", (expected,), (enc,))
    return []


COMMANDS = {"featurize": cmd_featurize, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "bench": cmd_bench, "inspect": cmd_inspect}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssamba", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (or a previous run's manifest.json)")
    common.add_argument("--seed", type=int, help="overrides the config file and SSAMBA_SEED")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p = sub.add_parser("featurize", parents=[common], help="WAV directory to log-mel caches")
    p.add_argument("input", help="directory of .wav files")
    p.add_argument("--out", required=True)
    for name, text in (("pretrain", "masked-patch pretraining"), ("finetune", "supervised fine-tuning"),
                       ("eval", "score a fine-tuned checkpoint")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--out", required=True)
    p = sub.add_parser("bench", parents=[common], help="time/memory scaling sweep")
    p.add_argument("--out", required=True)
    p.add_argument("--kinds", help="comma-separated subset of: " + ",".join(bench.KINDS))
    p.add_argument("--assert-scaling", action="store_true", help="exit 1 if scaling bands are violated")
    p = sub.add_parser("inspect", parents=[common], help="list checkpoint tensors")
    p.add_argument("checkpoint")
    return parser


def _exit_code(exc: BaseException) -> int | None:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (CorruptionError, ShapeMismatchError)):
        return EXIT_INTEGRITY
    if isinstance(exc, (NumericError, DomainError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ft.IngestionError, tr.DataError, FileNotFoundError, OSError, ValueError)):
        return EXIT_DATA
    return None


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    args.gate_failed = False
    started = _now()
    try:
        cfg, seed = resolve_config(args.command, args.config, args.seed)
        if args.print_config:
            print(json.dumps({**cfg, "seed": seed}, indent=2, sort_keys=True))
            return EXIT_OK
        outputs = COMMANDS[args.command](args, cfg, seed)
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"ssamba {args.command}: error: {exc}", file=sys.stderr)
        return code
    if getattr(args, "out", None):
        write_manifest(Path(args.out), args.command, args.config, cfg, seed, started, outputs)
    return EXIT_GATE if args.gate_failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
