"""Command-line entry point.

Exit codes: 0 success, 2 malformed input, 3 violated configuration invariant.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, TrackerConfig
from .formats import FormatError, atomic_write, dump_json, load_weights, write_sequence
from .pipeline import (
    InputError,
    OracleNoise,
    ablate_gap,
    ablate_tau,
    evaluate,
    load_report,
    plot_data,
    rows_to_csv,
    track,
    write_report,
)
from .propagation import ModelParams, param_shapes
from .refiner import parse_refiner
from .synth import iter_frames, resolve_scene

EXIT_INPUT = 2
EXIT_CONFIG = 3


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _config(args) -> TrackerConfig:
    cfg = TrackerConfig.load(args.config) if args.config else TrackerConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "init", None) is not None:
        overrides["init"] = args.init
    return TrackerConfig.from_dict({**cfg.to_dict(), **overrides}) if overrides else cfg


def _track_kwargs(args, cfg: TrackerConfig) -> dict:
    kwargs: dict = {"oracle": args.oracle}
    if args.erosion is not None or args.miss_prob is not None:
        kwargs["oracle_noise"] = OracleNoise(args.erosion or 0, args.miss_prob or 0.0, args.noise_seed)
    if args.weights:
        kwargs["params"] = ModelParams(cfg, load_weights(args.weights, param_shapes(cfg)))
    return kwargs


def cmd_synth(args) -> int:
    spec = resolve_scene(args.spec)
    meta = write_sequence(args.out_dir, iter_frames(spec), spec.num_objects)
    print(f"wrote {meta.num_frames} frames ({meta.width}x{meta.height}, {meta.num_objects} objects) to {args.out_dir}")
    return 0


def cmd_track(args) -> int:
    cfg = _config(args)
    refiner = parse_refiner(args.refiner) if args.refiner else None
    report = track(
        args.seq,
        cfg,
        args.out,
        refiner=refiner,
        tau=args.tau,
        refine_all=args.refine_all,
        **_track_kwargs(args, cfg),
    )
    if args.eval:
        report["metrics"] = evaluate(Path(args.out) / "masks", args.seq)
        write_report(Path(args.out) / "report.json", report)
        m = report["metrics"]
        print(f"AUC {m['auc']:.4f}  A {m['accuracy']:.4f}  R {m['robustness']:.4f}  Q {m['quality']:.4f}")
    print(f"wrote {report['sequence']['num_frames']} mask files to {Path(args.out) / 'masks'}")
    return 0


def cmd_eval(args) -> int:
    result = evaluate(args.pred, args.gt)
    text = dump_json(result)
    if args.out:
        atomic_write(args.out, text)
    sys.stdout.write(text.decode())
    return 0


def _emit_csv(text: str, out: str | None) -> None:
    if out:
        atomic_write(out, text.encode())
    else:
        sys.stdout.write(text)


def cmd_ablate_gap(args) -> int:
    cfg = _config(args)
    rows = ablate_gap(args.seq, cfg, _ints(args.gaps), **_track_kwargs(args, cfg))
    _emit_csv(rows_to_csv(rows, "gap"), args.out)
    return 0


def cmd_ablate_tau(args) -> int:
    cfg = _config(args)
    rows = ablate_tau(
        args.seq,
        cfg,
        _floats(args.taus),
        parse_refiner(args.refiner),
        include_refine_all=args.refine_all,
        **_track_kwargs(args, cfg),
    )
    _emit_csv(rows_to_csv(rows, "tau"), args.out)
    return 0


def cmd_plot_data(args) -> int:
    atomic_write(args.out_csv, plot_data(load_report(args.report)).encode())
    return 0


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="tracker config JSON")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--init", choices=("random", "matching"), help="override the weight init")
    p.add_argument("--weights", help="TFW1 weights file")
    p.add_argument("--oracle", action="store_true", help="allow reading ground truth past frame 0")
    p.add_argument("--erosion", type=int, help="oracle-mode prediction: erosion radius")
    p.add_argument("--miss-prob", type=float, help="oracle-mode prediction: per-object miss probability")
    p.add_argument("--noise-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trackforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a scene spec or preset to a sequence directory")
    p.add_argument("spec", help="scene JSON path or preset name")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("track", help="track a sequence from its first-frame annotation")
    p.add_argument("seq")
    p.add_argument("--out", required=True)
    p.add_argument("--refiner", help="identity | dilate:R | noise:P:SEED | oracle:HI:LO:SEED")
    p.add_argument("--tau", type=float)
    p.add_argument("--refine-all", action="store_true", help="keep every refined mask, no gate")
    p.add_argument("--eval", action="store_true", help="score against ground truth into report.json")
    _add_model_args(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-gap", help="sweep the long-term memory gap")
    p.add_argument("seq")
    p.add_argument("--gaps", required=True, help="comma-separated integers")
    p.add_argument("--out")
    _add_model_args(p)
    p.set_defaults(func=cmd_ablate_gap)

    p = sub.add_parser("ablate-tau", help="sweep the selection threshold")
    p.add_argument("seq")
    p.add_argument("--taus", required=True, help="comma-separated floats")
    p.add_argument("--refiner", required=True)
    p.add_argument("--refine-all", action="store_true", help="append an ungated row")
    p.add_argument("--out")
    _add_model_args(p)
    p.set_defaults(func=cmd_ablate_tau)

    p = sub.add_parser("plot-data", help="per-frame score trace from an evaluated report")
    p.add_argument("report")
    p.add_argument("out_csv")
    p.set_defaults(func=cmd_plot_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
