"""Command-line driver: train -> generate -> evaluate, plus verification.

Exit codes: 0 success, 1 runtime or verification failure, 2 usage/config/data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .datapipe import (FLAG_COLUMNS, Schema, fit_normalizer, ingest, prepare_records, split_real,
                       write_records)
from .errors import CheckpointError, ConfigError, DataError, TSTError
from .evaluation import fidelity_report, run_downstream, write_plot_files
from .generation import TransformerPredictor, generate_dataset, write_synthetic
from .model import ModelConfig, count_parameters, init_params
from .training import load_checkpoint, train, write_loss_log
from . import verify as verify_mod

log = logging.getLogger("tstgen")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(TSTError):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.override(key, _parse_value(value))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def _require_files(*paths) -> None:
    for p in paths:
        if p is None:
            continue
        if not Path(p).is_file():
            raise FileNotFoundError(f"file not found: {p}")


def _write_manifest(out: Path, command: str, cfg: RunConfig | None, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config_sha256": cfg.digest() if cfg else None,
        "config_source": cfg.source if cfg else None,
        "seed": cfg.seed if cfg else None,
        "tstgen_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    manifest.update(extra or {})
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    cfg = _load_config(args)
    data = cfg.data
    if "schema" not in data:
        raise ConfigError("data.schema is required")
    if not data.get("dataset") and not data.get("train"):
        raise ConfigError("data.dataset or data.train is required")
    _require_files(data.get("schema"), data.get("dataset"), data.get("train"), data.get("test"))
    schema = Schema.load(data["schema"])
    model_cfg = cfg.model_config(input_dim=schema.n_features + FLAG_COLUMNS)
    train_cfg = cfg.train_config()
    if train_cfg.window > model_cfg.max_window:
        raise ConfigError(f"train.window {train_cfg.window} exceeds model.max_window {model_cfg.max_window}")

    if data.get("train"):
        real_train = ingest(data["train"], schema)
        real_test = ingest(data["test"], schema) if data.get("test") else []
    else:
        real_train, real_test = split_real(ingest(data["dataset"], schema),
                                           data.get("split_ratio", 0.5), cfg.seed)
    stats = fit_normalizer(real_train, tuple(data.get("normalize_range", (0.0, 1.0))))
    records = prepare_records(real_train, stats, train_cfg.window)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_records(out / "real_train.jsonl", real_train)
    write_records(out / "real_test.jsonl", real_test)
    schema.save(out / "schema.json")
    stats.save(out / "normalizer.txt")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    params = init_params(model_cfg, cfg.seed)
    result = train(params, model_cfg, records, train_cfg, checkpoint_dir=out, normalizer=stats,
                   on_epoch=lambda e, l: log.info("epoch %d loss %.6g", e, l))
    write_loss_log(out / "loss_log.tsv", result.loss_log)
    _write_manifest(out, "train", cfg, {"parameters": count_parameters(model_cfg),
                                        "windows": len(records)})
    print(f"trained {len(result.loss_log)} epochs, final loss {result.loss_log[-1]:.6g}; outputs in {out}")
    return EXIT_OK


def _parse_class(text: str | None) -> dict | None:
    if not text:
        return None
    if "=" not in text:
        raise UsageError(f"--class expects attribute=value, got {text!r}")
    key, value = text.split("=", 1)
    return {key: value}


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    gen = cfg.generation
    checkpoint = args.checkpoint or gen.get("checkpoint")
    real_path = args.real or cfg.data.get("train")
    schema_path = args.schema or cfg.data.get("schema")
    if not (checkpoint and real_path and schema_path):
        raise UsageError("generate needs --checkpoint, --real and --schema (or the config equivalents)")
    _require_files(checkpoint, real_path, schema_path)
    class_filter = _parse_class(args.class_filter) if args.class_filter else gen.get("class_filter")
    n = args.n if args.n is not None else int(gen.get("n", 100))
    if n < 0:
        raise UsageError("--n must be >= 0")

    schema = Schema.load(schema_path)
    for key, value in (class_filter or {}).items():
        vocab = schema.attributes.get(key)
        if vocab is None or (vocab and value not in vocab):
            raise DataError(f"unknown class {key}={value}")
    real = ingest(real_path, schema)
    ckpt = load_checkpoint(checkpoint)
    if ckpt.normalizer is None:
        raise CheckpointError("checkpoint carries no normalizer stats")
    if ckpt.model_config.input_dim != schema.n_features + FLAG_COLUMNS:
        raise DataError("checkpoint input width does not match the schema")
    gen_cfg = cfg.generation_config(max_len_cap=ckpt.model_config.max_window)
    if args.max_len is not None:
        gen_cfg = type(gen_cfg)(gen_cfg.seed_len, args.max_len, gen_cfg.seed)
    if gen_cfg.max_len > ckpt.model_config.max_window:
        raise ConfigError(f"max_len {gen_cfg.max_len} exceeds the model window {ckpt.model_config.max_window}")

    synthetic = generate_dataset(TransformerPredictor(ckpt.params, ckpt.model_config), real,
                                 ckpt.normalizer, n, gen_cfg, class_filter,
                                 checkpoint_id=Path(checkpoint).name)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_synthetic(out / "synthetic.jsonl", synthetic)
    _write_manifest(out, "generate", cfg, {"checkpoint": str(checkpoint), "n": n,
                                           "class_filter": class_filter})
    print(f"wrote {len(synthetic)} synthetic records to {out / 'synthetic.jsonl'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    data = cfg.data
    for key in ("schema", "train", "test", "synthetic"):
        if not data.get(key):
            raise ConfigError(f"data.{key} is required for evaluate")
    _require_files(*(data[k] for k in ("schema", "train", "test", "synthetic")))
    schema = Schema.load(data["schema"])
    real_train = ingest(data["train"], schema)
    real_test = ingest(data["test"], schema)
    synthetic = ingest(data["synthetic"], schema)
    task = cfg.downstream.get("task", "classification")

    out = Path(cfg.out_dir)
    reports_dir = out / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    ids = {"real_train": data["train"], "real_test": data["test"], "synthetic": data["synthetic"]}
    fid = fidelity_report(real_train, synthetic, schema.n_features)
    fid.dataset_ids = ids
    fid.save(reports_dir / "fidelity.json")
    reports = [fid]
    if task != "fidelity":
        classes = None
        if task == "classification":
            attr = cfg.downstream.get("class_attribute", "end_event_type")
            classes = schema.attributes.get(attr)
            if not classes:
                raise DataError(f"schema declares no vocabulary for {attr!r}")
        for dc in cfg.downstream_configs():
            rep = run_downstream(synthetic, real_train, real_test, dc, classes)
            rep.dataset_ids = ids
            rep.save(reports_dir / f"{dc.task}_{dc.family}_p{dc.mix_proportion:g}.json")
            reports.append(rep)
            log.info("%s p=%g: %s", dc.family, dc.mix_proportion,
                     rep.accuracy if rep.accuracy is not None else rep.r2)
    write_plot_files(reports, out / "plots")
    _write_manifest(out, "evaluate", cfg, {"reports": len(reports)})
    print(f"wrote {len(reports)} reports to {reports_dir}")
    return EXIT_OK


def run_verify(count_fn=count_parameters) -> int:
    results = verify_mod.run_all(count_fn)
    for r in results:
        print(r)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("FAILED: " + ", ".join(failed))
        return EXIT_FAILURE
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_verify(args) -> int:
    return run_verify(count_parameters)


def cmd_param_count(args) -> int:
    if args.config:
        cfg = _load_config(args)
        model_cfg = cfg.model_config()
    else:
        model_cfg = ModelConfig.gcut_reference()
    print(count_parameters(model_cfg))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tstgen", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a scalar config key, e.g. train.epochs=2")

    p = sub.add_parser("train", help="train the transformer")
    common(p, config_required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate a synthetic dataset from a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--real", help="real records to draw seeds from (default: data.train)")
    p.add_argument("--schema")
    p.add_argument("--class", dest="class_filter", metavar="ATTR=VALUE")
    p.add_argument("--n", type=int)
    p.add_argument("--max-len", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="fidelity + downstream evaluation")
    common(p, config_required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("verify", help="gradient checks and parameter-count oracle")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("param-count", help="print the parameter count of a model config")
    common(p)
    p.set_defaults(func=cmd_param_count)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ConfigError, DataError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, TSTError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
