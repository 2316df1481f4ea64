"""Command-line front end: gen, run, ablate, bounds, eval.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
Every command writes a manifest (config echo, toolkit version, seed) next
to its outputs; identical configs and seeds reproduce outputs byte for
byte.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .adapter import load_checkpoint
from .bounds import dc_upper_bound_terms
from .errors import DataError, DivergenceError
from .experiment import (
    DEFAULT_TAU_GRID,
    _prepare_data,
    _write_json,
    build_risk_report,
    config_from_json,
    config_to_json_dict,
    generate_dataset_files,
    run_ablation,
    run_experiment,
    standard_benchmark_config,
)
from .losses import FeatureBatch, LossConfig
from .metrics import evaluate

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGENCE = 3


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage failures exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="domcon",
        description="Feature-space domain adaptation with the domain-contrast loss.",
    )
    parser.add_argument("--version", action="version", version=f"domcon {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config JSON (default: built-in benchmark)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the config output directory")

    p_gen = sub.add_parser("gen", parents=[], help="write synthetic feature CSV files")
    common(p_gen)

    p_run = sub.add_parser("run", help="run the configured phase schedule")
    common(p_run)

    p_abl = sub.add_parser("ablate", help="sweep one axis, one full run per value")
    common(p_abl)
    p_abl.add_argument("--axis", required=True, choices=("tau", "lr", "batch"))
    p_abl.add_argument(
        "--values",
        help="comma-separated sweep values (default for tau: "
        + ",".join(str(v) for v in DEFAULT_TAU_GRID)
        + ")",
    )

    p_bounds = sub.add_parser("bounds", help="bound-chain report for a checkpoint")
    common(p_bounds)
    p_bounds.add_argument("--checkpoint", required=True)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the dataset")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)

    return parser


def _load_config(args):
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ValueError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file is not valid JSON: {exc}") from None
        cfg = config_from_json(doc)
    else:
        cfg = standard_benchmark_config()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    return cfg


def _write_manifest(out_dir, cfg) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(
        out / "manifest.json",
        {"toolkit_version": __version__, "seed": cfg.seed, "config": config_to_json_dict(cfg)},
    )


def _load_model_for(cfg, data, checkpoint_path):
    model, _ = load_checkpoint(checkpoint_path)
    if model.in_dim != data.source.dim:
        raise DataError(
            f"checkpoint expects {model.in_dim}-dim features, dataset has {data.source.dim}"
        )
    if model.num_classes < data.num_classes:
        raise DataError(
            f"checkpoint has {model.num_classes} classes, dataset needs {data.num_classes}"
        )
    return model


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    out = args.out or str(Path(cfg.output_dir) / "data")
    _write_manifest(out, cfg)
    summary = generate_dataset_files(cfg, out)
    print(f"wrote {summary['source_file']} and {summary['target_file']} to {out}")
    print(f"class counts: source={summary['source_class_counts']} "
          f"target={summary['target_class_counts']}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args)
    result = run_experiment(cfg)
    for phase, report in result.evals.items():
        print(f"{phase}: target_accuracy={report.target_accuracy:.4f} "
              f"mmd={report.mmd_source_target:.4f}")
    if result.risk_report is not None:
        print(f"risk report: r_T_fT={result.risk_report.r_T_fT:.4f} "
              f"bound_eq1={result.risk_report.bound_eq1:.4f}")
    print(f"artifacts in {result.output_dir}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    if args.values:
        try:
            values = [float(v) for v in args.values.split(",") if v.strip()]
        except ValueError:
            raise ValueError(f"--values must be comma-separated numbers: {args.values!r}") from None
    elif args.axis == "tau":
        values = list(DEFAULT_TAU_GRID)
    else:
        raise ValueError(f"--values is required for axis {args.axis!r}")
    out = args.out or str(Path(cfg.output_dir) / f"ablation_{args.axis}")
    _write_manifest(out, cfg)
    rows = run_ablation(cfg, args.axis, values, out)
    for r in rows:
        print(f"{args.axis}={r['value']:g}: target_accuracy={r['target_accuracy']:.4f} "
              f"mmd={r['mmd_source_target']:.4f}")
    print(f"wrote {Path(out) / f'ablation_{args.axis}.csv'}")
    return EXIT_OK


def cmd_bounds(args) -> int:
    cfg = _load_config(args)
    data = _prepare_data(cfg)
    model = _load_model_for(cfg, data, args.checkpoint)
    report = build_risk_report(model, data, cfg.loss.tau, cfg.positive_class)
    if report is None:
        raise DataError("bounds needs counterpart pairs in the dataset")
    out = Path(args.out or cfg.output_dir)
    _write_manifest(out, cfg)
    _write_json(out / "risk_report.json", report.to_json_dict())

    tgt_idx, src_idx = data.st_pairing[:, 0], data.st_pairing[:, 1]
    labels = (data.source.labels[src_idx] == cfg.positive_class).astype(int)
    batch = FeatureBatch(
        model.adapt(data.target.features[tgt_idx]),
        model.adapt(data.source.features[src_idx]),
        labels=labels,
    )
    lhs_a, rhs_a, lhs_b, rhs_b = dc_upper_bound_terms(batch, labels, cfg.loss.tau)
    assert rhs_a >= lhs_a - 1e-9 and rhs_b >= lhs_b - 1e-9
    print(json.dumps(report.to_json_dict(), sort_keys=True, indent=2))
    print(f"contrast relaxation t->s: lhs={lhs_a:.6f} rhs={rhs_a:.6f} (rhs >= lhs)")
    print(f"contrast relaxation s->t: lhs={lhs_b:.6f} rhs={rhs_b:.6f} (rhs >= lhs)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    data = _prepare_data(cfg)
    model = _load_model_for(cfg, data, args.checkpoint)
    report = evaluate(
        model, data.target, data.source,
        data.st_pairing if len(data.st_pairing) else None,
    )
    out = Path(args.out or cfg.output_dir)
    _write_manifest(out, cfg)
    _write_json(out / "eval_report.json", report.to_json_dict())
    print(json.dumps(report.to_json_dict(), sort_keys=True, indent=2))
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "bounds": cmd_bounds,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
