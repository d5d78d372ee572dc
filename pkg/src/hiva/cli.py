"""Command-line entry point: ``hiva <command> [options]``.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime failure. Failures
print a single JSON line on stderr: ``{"error": kind, "key": ..., "message": ...}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import ConfigError, RunConfig, apply_overrides, config_hash, from_dict, to_dict, validate_config
from .data import DataError, SyntheticSpec, generate_synthetic_dataset, load_dataset, save_dataset

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
ABLATIONS = ("no_ddca", "no_cdca", "no_text", "no_aug", "no_diff_loss")

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def _ablation_overrides(args) -> dict:
    return {f"ablation.{name}": True for name in ABLATIONS if getattr(args, name, False)}


def load_config(args, base: RunConfig | None = None) -> RunConfig:
    """Config file (or ``base``, or defaults), then ``--set`` and ablation flags."""
    if getattr(args, "config", None):
        cfg = validate_config(args.config)
    else:
        cfg = base if base is not None else from_dict({})
    overrides = {**_parse_set(getattr(args, "set", None)), **_ablation_overrides(args)}
    return apply_overrides(cfg, overrides) if overrides else cfg


def synthetic_spec(cfg: RunConfig) -> SyntheticSpec:
    s = cfg.data.synthetic
    return SyntheticSpec(num_aus=cfg.num_aus, image_size=cfg.model.image_size, num_samples=s.num_samples,
                         seed=s.seed, jitter=s.jitter, noise=s.noise)


def load_samples(cfg: RunConfig, data_dir: str | None, split: str = "train"):
    """Samples from ``data_dir``, else the configured split, else the synthetic set regenerated from the config."""
    if data_dir is None:
        data_dir = cfg.data.eval_dir if split == "eval" and cfg.data.eval_dir else cfg.data.train_dir
    if data_dir is None:
        return generate_synthetic_dataset(synthetic_spec(cfg))
    return load_dataset(data_dir, cfg.data.au_ids)


def _checkpoint_config(args, ckpt) -> RunConfig:
    return load_config(args, base=ckpt.run_config)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_generate_data(args) -> int:
    cfg = load_config(args)
    spec = synthetic_spec(cfg)
    out = save_dataset(generate_synthetic_dataset(spec), cfg.data.au_ids, args.out, spec)
    _emit({"out": str(out), "num_samples": spec.num_samples, "au_ids": cfg.data.au_ids, "regions": spec.region_map})
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import load_checkpoint, save_checkpoint, train_stage1, train_stage2

    if args.stage == 2 and not args.from_ckpt and not args.resume:
        raise UsageError("stage-1 checkpoint required")
    cfg = load_config(args)
    if args.data:
        cfg = apply_overrides(cfg, {"data.train_dir": str(Path(args.data).resolve())})
    samples = load_samples(cfg, None)
    resume = load_checkpoint(args.resume, cfg) if args.resume else None
    if args.stage == 1:
        ckpt = train_stage1(cfg, samples, resume=resume, log_path=args.log)
    else:
        stage1 = load_checkpoint(args.from_ckpt, cfg) if args.from_ckpt else None
        ckpt = train_stage2(cfg, samples, stage1, resume=resume, log_path=args.log)
    path = save_checkpoint(ckpt, args.out)
    last = ckpt.history[-1] if ckpt.history else {}
    _emit({"checkpoint": str(path), "stage": ckpt.stage, "epoch": ckpt.epoch, "step": ckpt.step,
           "config_hash": ckpt.config_hash, "final": last})
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import export_metrics_csv, evaluate
    from .training import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(args, ckpt)
    if ckpt.stage == 1 and not args.stage1_head:
        raise UsageError("stage-1 checkpoint: pass --stage1-head to score the graph head")
    samples = load_samples(cfg, args.data, split="eval")
    report = evaluate(ckpt, samples, cfg, threshold=args.threshold, stage1_head=args.stage1_head,
                      cache_dir=args.cache_dir)
    if args.csv:
        export_metrics_csv(report, args.csv, label=args.label)
    _emit({**report.to_dict(), "config_hash": config_hash(cfg), "ablation": to_dict(cfg.ablation)})
    return EXIT_OK


def cmd_viz_attention(args) -> int:
    from .evaluation import export_attention_maps
    from .training import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.stage != 2:
        raise ConfigError("checkpoint", "attention maps need a stage-2 checkpoint")
    cfg = _checkpoint_config(args, ckpt)
    samples = load_samples(cfg, args.data, split="eval")[: args.limit]
    files = export_attention_maps(ckpt, samples, args.out, cfg, cache_dir=args.cache_dir)
    _emit({"out": args.out, "arrays": len(files), "samples": len(samples)})
    return EXIT_OK


def cmd_viz_graph(args) -> int:
    from .evaluation import export_graph
    from .training import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(args, ckpt)
    samples = load_samples(cfg, args.data, split="eval")[: args.limit]
    path = export_graph(ckpt, samples, args.out, cfg)
    _emit({"dump": str(path), "samples": len(samples)})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_report, gradient_check

    results = gradient_check(args.targets, tolerance=args.tolerance, seed=args.seed)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def cmd_stats(args) -> int:
    from .evaluation import report_model_stats
    from .training import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    _emit(report_model_stats(ckpt, _checkpoint_config(args, ckpt), batch_size=args.batch_size))
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args)
    _emit({"config_hash": config_hash(cfg), "config": to_dict(cfg)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hiva", description="Two-stage AU detection with vision-language fusion.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML run config")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
        return p

    def ablation_flags(p):
        for name in ABLATIONS:
            p.add_argument("--" + name.replace("_", "-"), dest=name, action="store_true")

    p = common(sub.add_parser("generate-data", help="render the synthetic dataset"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = common(sub.add_parser("train", help="run one training stage"))
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--from", dest="from_ckpt", help="stage-1 checkpoint (stage 2 only)")
    p.add_argument("--resume", help="continue from a checkpoint of the same stage")
    p.add_argument("--data", help="dataset directory (default: config or synthetic)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="JSON-lines training log")
    ablation_flags(p)
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="per-AU F1 on a dataset"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--threshold", type=float)
    p.add_argument("--stage1-head", action="store_true", help="score the stage-1 graph head")
    p.add_argument("--cache-dir", help="text-feature cache directory")
    p.add_argument("--csv", help="write the per-AU table here")
    p.add_argument("--label", default="HiVA", help="row label in the CSV")
    ablation_flags(p)
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("viz-attention", help="export DDCA/CDCA attention maps"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--cache-dir")
    p.set_defaults(func=cmd_viz_attention)

    p = common(sub.add_parser("viz-graph", help="dump per-sample AU graphs"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_viz_graph)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--targets", nargs="+")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = common(sub.add_parser("stats", help="parameter counts, MACs and timing"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch-size", type=int, default=1)
    p.set_defaults(func=cmd_stats)

    p = common(sub.add_parser("validate-config", help="check a config and print its hash"))
    p.set_defaults(func=cmd_validate)
    return parser


def _fail(kind: str, message: str, key: str | None = None) -> None:
    record = {"error": kind, "message": message}
    if key:
        record["key"] = key
    print(json.dumps(record), file=sys.stderr)


def main(argv=None) -> int:
    from .training import CheckpointError, TrainingError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return args.func(args)
    except UsageError as exc:
        _fail("usage", str(exc))
        return EXIT_USAGE
    except ConfigError as exc:
        _fail("validation", str(exc), exc.key)
        return EXIT_VALIDATION
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        _fail("validation", str(exc).splitlines()[0] if str(exc) else type(exc).__name__)
        return EXIT_VALIDATION
    except (TrainingError, OSError, ValueError, RuntimeError) as exc:
        _fail("runtime", " ".join(str(exc).split()))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
