"""Command-line entry point.

Subcommands: synth (phantom generation), train, infer (single sample),
eval (report emission). Exit codes: 0 success, 1 usage, 2 data error,
3 backend error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import metrics
from .config import RunConfig, apply_override, config_keys_with_defaults, load_config
from .data import PhantomSpec, gen_phantoms, load_manifest, read_pgm_image, read_pgm_mask, write_pgm
from .errors import BackendError, ConfigError, PointSegError
from .geometry import PointPrompt
from .pipeline import IterationConfig, build_train_samples, infer_iterative, run_training
from .refiner import RefinerDims, TrainHyper
from .segmenter import OracleBackend, OracleConfig, RemoteBackend

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BACKEND = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # map argparse failures to exit code 1
        raise UsageError(message)


def _config_epilog() -> str:
    lines = "\n".join(f"  {line}" for line in config_keys_with_defaults())
    return (
        "config keys (TOML file via --config, overridable with --set key=value):\n" + lines
    )


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="TOML config file")
    p.add_argument(
        "--set",
        metavar="KEY=VALUE",
        action="append",
        default=[],
        dest="overrides",
        help="override one config key (repeatable)",
    )
    p.add_argument("--seed", type=int, help="override rng_seed")
    p.add_argument("--json-errors", action="store_true", help="machine-readable errors on stderr")


def build_parser() -> _Parser:
    parser = _Parser(
        prog="pointseg",
        description="Point-prompted segmentation via iterative box-prompt refinement.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    fmt = argparse.RawDescriptionHelpFormatter

    p_synth = sub.add_parser(
        "synth", help="generate a phantom dataset", epilog=_config_epilog(), formatter_class=fmt
    )
    _add_common(p_synth)

    p_train = sub.add_parser(
        "train", help="train the prompt refiner", epilog=_config_epilog(), formatter_class=fmt
    )
    _add_common(p_train)

    p_infer = sub.add_parser(
        "infer", help="segment one image from a point", epilog=_config_epilog(), formatter_class=fmt
    )
    _add_common(p_infer)
    p_infer.add_argument("--image", required=True, metavar="PGM", help="input image (P5 PGM)")
    p_infer.add_argument("--point", required=True, metavar="X,Y", help="prompt pixel")
    p_infer.add_argument("--gt", metavar="PGM", help="ground-truth mask (required for oracle backend)")
    p_infer.add_argument("--rounds", type=int, metavar="T", help="iteration rounds (default: max of infer.t_values)")
    p_infer.add_argument("--out", metavar="PGM", help="output mask path (default OUT_DIR/mask.pgm)")
    p_infer.add_argument("--trace", metavar="JSON", help="trace output path (default OUT_DIR/trace.json)")
    p_infer.add_argument("--overlay", metavar="PPM", help="optional overlay output (requires --gt)")

    p_eval = sub.add_parser(
        "eval", help="evaluate on a manifest split", epilog=_config_epilog(), formatter_class=fmt
    )
    _add_common(p_eval)
    p_eval.add_argument("--T", dest="t_values", metavar="T1,T2,...", help="override infer.t_values")
    p_eval.add_argument("--split", default="test", choices=("train", "test"))
    p_eval.add_argument("--jobs", type=int, help="parallel sample evaluation (default eval.jobs)")
    return parser


def _load_config(args) -> RunConfig:
    cfg = load_config(args.config)
    for assignment in args.overrides:
        apply_override(cfg, assignment)
    if args.seed is not None:
        cfg.rng_seed = args.seed
    cfg.validate()
    return cfg


def _hyper(cfg: RunConfig) -> TrainHyper:
    return TrainHyper(
        lr=cfg.train.lr,
        momentum=cfg.train.momentum,
        batch_size=cfg.train.batch_size,
        proto_batches=cfg.train.prototype_batches,
        seed_w=cfg.prompt.seed_w,
        seed_h=cfg.prompt.seed_h,
        scales=tuple(cfg.prompt.scales),
        aggregation=cfg.prompt.aggregation,
        neg_margin=cfg.train.neg_margin,
        dims=RefinerDims(
            stem=cfg.model.stem,
            hidden=cfg.model.hidden,
            feature=cfg.model.feature,
            num_classes=cfg.model.num_classes,
        ),
    )


def _backend_factory(cfg: RunConfig):
    if cfg.backend.kind == "oracle":
        oracle_cfg = OracleConfig(
            perturb_radius=cfg.backend.perturb_radius,
            perturb_rate=cfg.backend.perturb_rate,
            rng_seed=cfg.rng_seed,
        )
        return lambda img, gt: OracleBackend(oracle_cfg, gt)
    remote = RemoteBackend(
        cfg.backend.endpoint, retries=cfg.backend.retries, timeout=cfg.backend.timeout_s
    )
    return lambda img, gt: remote


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    ph = cfg.phantoms
    spec = PhantomSpec(
        count=ph.count,
        width=ph.width,
        height=ph.height,
        blob_count=(ph.blob_count[0], ph.blob_count[1]),
        radius=(ph.radius[0], ph.radius[1]),
        contrast=ph.contrast,
        noise_sigma=ph.noise_sigma,
        rng_seed=cfg.rng_seed,
        spacing_mm=ph.spacing_mm,
    )
    manifest = gen_phantoms(spec, cfg.paths.data_dir)
    print(f"wrote {len(manifest.samples)} phantoms to {cfg.paths.data_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = load_manifest(Path(cfg.paths.data_dir) / "manifest.json")
    samples = build_train_samples(manifest, "train")
    result = run_training(samples, _hyper(cfg), cfg.train.epochs, cfg.rng_seed)
    out_dir = Path(cfg.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = Path(cfg.paths.checkpoint)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save_checkpoint(
        ckpt.Checkpoint(
            params=result.params,
            opt_state=result.opt_state,
            buffer=result.buffer,
            rng_seed=cfg.rng_seed,
        ),
        ckpt_path,
    )
    log = {"schema_version": 1, "epoch_loss": result.losses}
    (out_dir / "training_log.json").write_text(json.dumps(log, sort_keys=True, indent=2) + "\n")
    if result.losses:
        print(f"trained {cfg.train.epochs} epochs; loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}")
    else:
        print("trained 0 epochs")
    print(f"checkpoint written to {ckpt_path}")
    return EXIT_OK


def _load_refiner(cfg: RunConfig):
    loaded = ckpt.load_checkpoint(cfg.paths.checkpoint)
    return loaded.params, loaded.buffer


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    image = read_pgm_image(Path(args.image).read_bytes(), spacing=cfg.phantoms.spacing_mm)
    try:
        x, y = (int(v) for v in args.point.split(","))
    except ValueError:
        raise UsageError(f"--point expects X,Y integers, got {args.point!r}") from None
    gt = read_pgm_mask(Path(args.gt).read_bytes()) if args.gt else None
    if cfg.backend.kind == "oracle" and gt is None:
        raise ConfigError("the oracle backend needs --gt to stand in for a real segmenter")
    if args.overlay and gt is None:
        raise ConfigError("--overlay requires --gt")
    backend = _backend_factory(cfg)(image, gt)
    params, buf = (None, None)
    if cfg.infer.selector == "learned":
        params, buf = _load_refiner(cfg)
    rounds = args.rounds if args.rounds is not None else max(cfg.infer.t_values)
    iter_cfg = IterationConfig(
        rounds=rounds,
        seed_w=cfg.prompt.seed_w,
        seed_h=cfg.prompt.seed_h,
        scales=tuple(cfg.prompt.scales),
        class_id=cfg.infer.class_id,
        selector=cfg.infer.selector,
    )
    mask, trace = infer_iterative(
        params, buf, backend, image, PointPrompt(x=x, y=y, class_id=cfg.infer.class_id), iter_cfg, gt=gt
    )
    out_dir = Path(cfg.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask_path = Path(args.out) if args.out else out_dir / "mask.pgm"
    trace_path = Path(args.trace) if args.trace else out_dir / "trace.json"
    mask_path.write_bytes(write_pgm(mask))
    trace_path.write_text(json.dumps(trace.to_json_dict(), sort_keys=True, indent=2) + "\n")
    if args.overlay:
        Path(args.overlay).write_bytes(metrics.emit_overlay(image, gt, mask))
    print(f"mask written to {mask_path} ({mask.area} foreground pixels, {rounds} rounds)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if args.t_values:
        try:
            t_values = [int(v) for v in args.t_values.split(",")]
        except ValueError:
            raise UsageError(f"--T expects integers, got {args.t_values!r}") from None
    else:
        t_values = list(cfg.infer.t_values)
    manifest = load_manifest(Path(cfg.paths.data_dir) / "manifest.json")
    params, buf = (None, None)
    if cfg.infer.selector == "learned":
        params, buf = _load_refiner(cfg)
    base = IterationConfig(
        rounds=max(t_values),
        seed_w=cfg.prompt.seed_w,
        seed_h=cfg.prompt.seed_h,
        scales=tuple(cfg.prompt.scales),
        class_id=cfg.infer.class_id,
        selector=cfg.infer.selector,
    )
    jobs = args.jobs if args.jobs is not None else cfg.eval.jobs
    if jobs < 1:
        raise UsageError("--jobs must be a positive integer")
    report = metrics.evaluate(
        manifest,
        params,
        buf,
        _backend_factory(cfg),
        t_values,
        base,
        split=args.split,
        jobs=jobs,
        hd_variant=cfg.eval.hd_variant,
    )
    out_dir = Path(cfg.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics.write_report(report, out_dir / "report.json", out_dir / "report.csv")
    for t in sorted(report.aggregates):
        agg = report.aggregates[t]
        print(
            f"T={t}: dice {agg['dice']['mean']:.4f} +/- {agg['dice']['std']:.4f}, "
            f"hausdorff {agg['hausdorff_mm']['mean']:.2f} mm"
        )
    print(f"report written to {out_dir / 'report.json'} and {out_dir / 'report.csv'}")
    return EXIT_OK


_COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


def _emit_error(kind: str, exc: Exception, json_errors: bool) -> None:
    if json_errors:
        payload = {"error": {"type": type(exc).__name__, "kind": kind, "message": str(exc)}}
        if isinstance(exc, BackendError):
            payload["error"]["category"] = exc.category
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    else:
        print(f"pointseg: error: {exc}", file=sys.stderr)


def run(argv: list[str]) -> int:
    parser = build_parser()
    json_errors = "--json-errors" in argv
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return _COMMANDS[args.command](args)
    except UsageError as e:
        _emit_error("usage", e, json_errors)
        print(parser.format_usage(), end="", file=sys.stderr)
        return EXIT_USAGE
    except BackendError as e:
        _emit_error("backend", e, json_errors)
        return EXIT_BACKEND
    except (PointSegError, OSError, ValueError) as e:
        _emit_error("data", e, json_errors)
        return EXIT_DATA


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
