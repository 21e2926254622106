"""Command line entry point: ``asap {gen,calibrate,eval,bench,selftest}``.

Exit codes: 0 success, 1 validation error, 2 property failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..calibration import FitDataset, fit_kl, fit_ls
from ..numerics import sample_slice_bank
from ..sinkhorn import TeacherConfig
from .bench import bench_latency
from .cases import load_case_file, save_case_file
from .checks import run_selftest
from .experiment import EVAL, FIT, ExperimentConfig, FitFailure, fit_layers, run_replacement
from .layerio import load_layer, save_layer

EXIT_OK, EXIT_INVALID, EXIT_PROPERTY = 0, 1, 2

log = logging.getLogger("asap")


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)


def _add_config_flags(p):
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("--config", type=Path, help="JSON experiment config; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--d-h", dest="d_h", type=int)
    p.add_argument("--d-v", dest="d_v", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--L", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--lam", type=float)
    p.add_argument("--eval-cases", dest="eval_cases", type=int)
    p.add_argument("--mask-fraction", dest="mask_fraction", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--budget", type=int)
    p.add_argument("--kernel", choices=("score", "quadratic_cost"))


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config is not None:
        try:
            cfg = ExperimentConfig.load(args.config)
        except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
            raise ValidationError(f"cannot load config {args.config}: {exc}") from exc
    keys = ("seed", "N", "d_h", "d_v", "heads", "L", "M", "lam", "eval_cases", "mask_fraction")
    cfg = cfg.override(**{k: getattr(args, k, None) for k in keys})
    t = cfg.teacher
    teacher = TeacherConfig(
        args.epsilon if args.epsilon is not None else t.epsilon,
        args.budget if args.budget is not None else t.budget,
        args.kernel or t.kernel,
    )
    cfg = cfg.override(teacher=teacher)
    for name in ("N", "d_h", "d_v", "heads", "L", "M", "eval_cases"):
        if getattr(cfg, name) < 1:
            raise ValidationError(f"{name} must be positive, got {getattr(cfg, name)}")
    if not 0.0 <= cfg.mask_fraction < 1.0:
        raise ValidationError(f"mask_fraction must lie in [0, 1), got {cfg.mask_fraction}")
    if not cfg.lam > 0:
        raise ValidationError(f"lam must be positive, got {cfg.lam}")
    return cfg


def cmd_gen(args) -> int:
    cfg = load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    partition = FIT if args.partition == "fit" else EVAL
    count = args.cases if args.cases is not None else (cfg.M if partition == FIT else cfg.eval_cases)
    for c in range(count):
        save_case_file(out / f"{args.partition}_{c:05d}.npz", cfg.heads_for(partition, c))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    log.info("wrote %d %s cases to %s", count, args.partition, out)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = load_config(args)
    if args.cases_dir is not None:
        files = sorted(Path(args.cases_dir).glob("*.npz"))
        if not files:
            raise ValidationError(f"no .npz case files in {args.cases_dir}")
        heads = [(h.Q, h.K, h.active) for f in files for h in load_case_file(f)]
        d_h = heads[0][0].shape[1]
        bank = sample_slice_bank(cfg.bank_seed, cfg.L, d_h)
        data = FitDataset.build(heads, bank, cfg.teacher, keep_plans=args.objective == "KL")
        layer = fit_ls(data, cfg.lam) if args.objective == "LS" else fit_kl(data, cfg.lam)
    else:
        layer = fit_layers(cfg.override(objectives=(args.objective,)), log.info)[args.objective]
    save_layer(layer, args.out)
    log.info("saved %s layer to %s: %s", args.objective, args.out, layer.fit_stats)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    if args.no_timing:
        cfg = cfg.override(time_cases=False)
    layers = None
    if args.layer:
        layers = {}
        for path in args.layer:
            layer = load_layer(path)
            if layer.bank.d_h != cfg.d_h:
                raise ValidationError(f"{path}: layer has d_h={layer.bank.d_h}, config has {cfg.d_h}")
            layers[layer.objective] = layer
        cfg = cfg.override(objectives=tuple(layers))
    report = run_replacement(cfg, layers, log.info)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "cases.csv")
    report.write_summary_csv(out / "summary.csv")
    report.write_json(out / "report.json")
    if not args.no_plots:
        from .plotting import plot_fidelity

        plot_fidelity(report, out / "fidelity.png")
    for op, agg in report.aggregates().items():
        a = agg["attention_rel_l2"]
        print(f"{op:16s} rel_l2 median {a['median']:.4f} mean {a['mean']:.4f} ± {a['std']:.4f}  "
              f"passes {report.passes[op]}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args)
    sizes = tuple(args.sizes) if args.sizes else None
    if sizes and min(sizes) < 2:
        raise ValidationError("bench sizes must be at least 2")
    layer = load_layer(args.layer) if args.layer else None
    if layer is not None and layer.bank.d_h != cfg.bench_d_h:
        raise ValidationError(f"layer has d_h={layer.bank.d_h}, bench uses d_h={cfg.bench_d_h}")
    report = bench_latency(cfg, layer, sizes, log=log.info)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "latency.csv")
    (out / "machine.json").write_text(json.dumps(report.machine, indent=2))
    if not args.no_plots:
        from .plotting import plot_latency

        plot_latency(report, out / "latency.png")
    for r in report.rows:
        print(f"N={r.N:5d} {r.operator:16s} {r.median_ms:9.2f} ms  x{r.speedup_vs_asap0:5.2f}  passes {r.passes}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = run_selftest(log=print)
    failed = [r for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {total:.1f}s")
    return EXIT_PROPERTY if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="asap", description="Compile finite Sinkhorn attention into sliced-dual closures.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write synthetic case files")
    _add_config_flags(p)
    p.add_argument("--partition", choices=("fit", "eval"), default="eval")
    p.add_argument("--cases", type=int, help="number of cases (default: M or eval_cases)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("calibrate", help="fit a compiled layer and save it")
    _add_config_flags(p)
    p.add_argument("--objective", choices=("LS", "KL"), default="LS")
    p.add_argument("--cases-dir", help="fit on case files from gen instead of regenerating them")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="frozen-layer replacement study (CSV + figure)")
    _add_config_flags(p)
    p.add_argument("--layer", action="append", help="use a saved layer instead of fitting (repeatable)")
    p.add_argument("--no-timing", action="store_true")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="single-threaded latency (CSV + figure)")
    _add_config_flags(p)
    p.add_argument("--sizes", type=int, nargs="+")
    p.add_argument("--layer", help="saved layer with d_h equal to bench_d_h")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("selftest", help="run the property suite")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValidationError, FitFailure, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
