"""Command-line driver.

Every command builds and validates its configuration before touching the
filesystem.  Results go to files or stdout; progress goes to stderr as one
JSON object per line.  Exit codes: 0 ok, 1 usage/config, 2 data, 3 numeric.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .configs import apply_overrides
from .data import generate_synthetic, load_image_dir, load_manifest, save_image_dir, save_manifest
from .errors import ConfigError, DataError, NumericError, ShapeError
from .evaluation import emit_reports
from .hybrid import checkpoint_dict, load_checkpoint, model_from_checkpoint, save_checkpoint
from .pipeline import (
    VARIANTS,
    ExperimentConfig,
    default_threads,
    evaluate_model,
    finetune,
    prepare_splits,
    pretrain,
    run_matrix,
    write_matrix_outputs,
)
from .qsim import CircuitSpec, gradient_check

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _progress(event):
    sys.stderr.write(json.dumps(event, sort_keys=True) + "\n")
    sys.stderr.flush()


# -- configuration ----------------------------------------------------------
def load_config(path=None, overrides=(), seed=None) -> ExperimentConfig:
    """Defaults <- config file <- ``--set`` overrides; ``seed`` may not contradict the file."""
    data = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc.msg} at byte {len(text[:exc.pos].encode())}") \
                from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    data = apply_overrides(data, overrides)
    if seed is not None:
        if "seed" in data and data["seed"] != seed:
            raise ConfigError(f"--seed {seed} conflicts with seed {data['seed']!r} in the configuration")
        data["seed"] = seed
    return ExperimentConfig.from_dict(data)


def _threads(args):
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return args.threads
    return default_threads()


def _load_data(cfg, data_dir):
    """Dataset plus split manifest: a PGM directory (with its manifest.json if present) or the generator."""
    if data_dir is None:
        dataset = generate_synthetic(cfg.data)
        manifest = None
    else:
        dataset = load_image_dir(data_dir)
        mpath = Path(data_dir) / "manifest.json"
        manifest = load_manifest(mpath) if mpath.exists() else None
    return prepare_splits(cfg, dataset, manifest)


def _check_out(out, *inputs):
    """Refuse output directories inside an input directory, so inputs are never overwritten."""
    out = Path(out).resolve()
    for p in inputs:
        if p is not None and Path(p).resolve() in (out, *out.parents):
            raise ConfigError(f"output directory {out} must not be inside input directory {p}")
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# -- commands ---------------------------------------------------------------
def cmd_gen_data(args):
    cfg = load_config(args.config, args.set, args.seed)
    out = Path(args.out)
    h = cfg.hash
    dataset = generate_synthetic(cfg.data)
    manifest, _ = prepare_splits(cfg, dataset)
    out.mkdir(parents=True, exist_ok=True)
    save_image_dir(dataset, out, comment=f"hyqal config_hash={h}")
    save_manifest(manifest, out / "manifest.json", extra={"config_hash": h})
    _write_json(out / "config.json", {"config_hash": h, "config": cfg.to_dict()})
    _progress({"event": "gen_data_done", "samples": len(dataset), "config_hash": h, "out": str(out)})
    return EXIT_OK


def cmd_pretrain(args):
    cfg = load_config(args.config, args.set, args.seed)
    out = _check_out(args.out, args.data)
    _, splits = _load_data(cfg, args.data)
    ckpt, losses = pretrain(cfg, splits["train_unlabeled"], cfg.seed, progress=_progress)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "pretrain.json", ckpt)
    _write_json(out / "pretrain_losses.json", {"config_hash": cfg.hash, "seed": cfg.seed, "losses": losses})
    _progress({"event": "pretrain_done", "config_hash": cfg.hash, "out": str(out / "pretrain.json")})
    return EXIT_OK


def cmd_finetune(args):
    cfg = load_config(args.config, args.set, args.seed)
    if args.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {args.variant!r}; choose from {list(VARIANTS)}")
    if VARIANTS[args.variant]["ssl"] and args.checkpoint is None:
        raise ConfigError(f"variant {args.variant} needs --checkpoint from the pretrain command")
    out = _check_out(args.out, args.data)
    ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else None
    _, splits = _load_data(cfg, args.data)
    model, record = finetune(cfg, args.variant, splits["train_labeled"], splits["validation"], cfg.seed,
                             ckpt if VARIANTS[args.variant]["ssl"] else None, progress=_progress)
    record.test = evaluate_model(model, splits["test"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.json", checkpoint_dict(
        model, kind="finetuned", meta={"experiment_hash": cfg.hash, "variant": args.variant}))
    _write_json(out / "run.json", {"config_hash": cfg.hash, "run": record.to_dict()})
    _progress({"event": "finetune_done", "variant": args.variant, "test_auc": round(record.test.auc, 4),
               "config_hash": cfg.hash})
    return EXIT_OK


def cmd_evaluate(args):
    cfg = load_config(args.config, args.set, args.seed)
    out = _check_out(args.out, args.data)
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    _, splits = _load_data(cfg, args.data)
    split = splits[args.split]
    if split.labels().min() == split.labels().max():
        raise DataError(f"split {args.split!r} holds a single class; metrics need both")
    report = evaluate_model(model, split)
    name = ckpt.get("meta", {}).get("variant", "model")
    emit_reports({name: report}, out, cfg.hash)
    print(json.dumps({"model": name, "split": args.split, "config_hash": cfg.hash,
                      **{k: round(v, 4) for k, v in report.to_dict().items() if isinstance(v, float)}}))
    return EXIT_OK


def cmd_run_matrix(args):
    cfg = load_config(args.config, args.set, args.seed)
    threads = _threads(args)
    out = _check_out(args.out, args.data)
    dataset, manifest = None, None
    if args.data is not None:
        dataset = load_image_dir(args.data)
        mpath = Path(args.data) / "manifest.json"
        manifest = load_manifest(mpath) if mpath.exists() else None
    else:
        dataset = generate_synthetic(cfg.data)
    manifest, _ = prepare_splits(cfg, dataset, manifest)
    records = run_matrix(cfg, dataset, manifest, threads=threads, progress=_progress)
    write_matrix_outputs(cfg, records, manifest, out)
    return EXIT_OK


def cmd_gradcheck(args):
    if args.qubits < 1 or args.layers < 0:
        raise ConfigError("gradcheck needs --qubits >= 1 and --layers >= 0")
    spec = CircuitSpec(args.qubits, args.layers)
    rel, abs_err = gradient_check(spec, seed=args.seed)
    print(json.dumps({"qubits": args.qubits, "layers": args.layers, "seed": args.seed,
                      "max_relative_error": rel, "max_absolute_error": abs_err, "tolerance": GRADCHECK_TOL}))
    return EXIT_OK if rel < GRADCHECK_TOL else EXIT_NUMERIC


def cmd_inspect_checkpoint(args):
    ckpt = load_checkpoint(args.path)
    groups = {}
    for g, ps in ckpt["params"].items():
        groups[g] = {n: a.get("shape") if isinstance(a, dict) else None for n, a in ps.items()}
    model_from_checkpoint(ckpt)  # full decode catches malformed arrays
    print(json.dumps({
        "kind": ckpt.get("kind"), "format_version": ckpt["format_version"], "config_hash": ckpt.get("config_hash"),
        "seed": ckpt.get("seed"), "freeze_policy": ckpt.get("freeze_policy"), "step": ckpt.get("step"),
        "groups": groups, "meta": ckpt.get("meta", {}),
    }, indent=1, sort_keys=True))
    return EXIT_OK


# -- argument parsing -------------------------------------------------------
def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON experiment configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, value parsed as JSON when possible (repeatable)")
    common.add_argument("--seed", type=int, help="global seed; must agree with the config file if it sets one")

    p = _Parser(prog="hyqal", description="Contrastive pretraining + simulated quantum fusion experiments.")
    p.add_argument("--version", action="version", version=f"hyqal {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset as PGM files")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("pretrain", parents=[common], help="contrastive pretraining on the unlabeled split")
    s.add_argument("--data", help="PGM directory (default: generate in memory)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", parents=[common], help="supervised fine-tuning of one variant")
    s.add_argument("--variant", default="ssl_quantum")
    s.add_argument("--checkpoint", help="pretraining checkpoint (SSL variants)")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("evaluate", parents=[common], help="metrics of a fine-tuned checkpoint on one split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--split", default="test", choices=("train_labeled", "validation", "test"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("run-matrix", parents=[common], help="all variants over all seeds")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.add_argument("--threads", type=int, help="worker processes (fallback: HYQAL_THREADS, then 1)")
    s.set_defaults(func=cmd_run_matrix)

    s = sub.add_parser("gradcheck", help="parameter-shift vs finite differences on a random circuit")
    s.add_argument("--qubits", type=int, default=3)
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("inspect-checkpoint", help="summarise a checkpoint file")
    s.add_argument("path")
    s.set_defaults(func=cmd_inspect_checkpoint)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except ConfigError as exc:
        sys.stderr.write(f"hyqal: configuration error: {exc}\n")
        return EXIT_USAGE
    except (DataError, ShapeError) as exc:
        sys.stderr.write(f"hyqal: data error: {exc}\n")
        return EXIT_DATA
    except OSError as exc:
        sys.stderr.write(f"hyqal: data error: {exc}\n")
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        sys.stderr.write(f"hyqal: numeric failure: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
