"""Single-threaded latency of compiled layers against Sinkhorn normalizers."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
import csv

import numpy as np
from threadpoolctl import threadpool_limits

from .. import ctransform as ct
from ..calibration import CompiledLayer, FitDataset, fit_ls
from ..numerics import sample_slice_bank
from ..sinkhorn import normalizer_forward
from .cases import gen_case
from .experiment import FIT, ExperimentConfig, machine_descriptor

BENCH_COLUMNS = ("N", "operator", "median_ms", "mean_ms", "std_ms", "speedup_vs_asap0",
                 "normalization_passes", "fit_seconds", "break_even_calls")


@dataclass
class BenchRow:
    N: int
    operator: str
    median_ms: float
    mean_ms: float
    std_ms: float
    speedup_vs_asap0: float
    passes: int
    fit_seconds: float = float("nan")
    break_even_calls: float = float("nan")


@dataclass
class BenchReport:
    rows: list[BenchRow]
    config: dict
    machine: dict = field(default_factory=machine_descriptor)

    def get(self, N: int, operator: str) -> BenchRow:
        for r in self.rows:
            if r.N == N and r.operator == operator:
                return r
        raise KeyError((N, operator))

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(BENCH_COLUMNS)
            for r in self.rows:
                w.writerow([r.N, r.operator, repr(r.median_ms), repr(r.mean_ms), repr(r.std_ms),
                            repr(r.speedup_vs_asap0), r.passes, repr(r.fit_seconds), repr(r.break_even_calls)])


def time_calls(ops: dict, warmup: int, runs: int) -> dict[str, np.ndarray]:
    """Wall-clock seconds per call for each operator.

    Operators are timed round-robin so slow drift of the machine affects
    all of them alike; each output is consumed (summed) inside the timed
    region.
    """
    for _ in range(warmup):
        for fn in ops.values():
            float(fn().sum())
    out = {name: np.empty(runs) for name in ops}
    for k in range(runs):
        for name, fn in ops.items():
            t0 = time.perf_counter()
            float(fn().sum())
            out[name][k] = time.perf_counter() - t0
    return out


def fit_bench_layer(cfg: ExperimentConfig, N: int = 128) -> CompiledLayer:
    """Least-squares layer at the bench head width, from a few fit cases."""
    bank = sample_slice_bank(cfg.bank_seed, cfg.L, cfg.bench_d_h)
    heads = []
    for m in range(cfg.bench_fit_cases):
        c = gen_case((cfg.seed, FIT, m, 0), N, cfg.bench_d_h, cfg.bench_d_h, 0.0, cfg.profile)
        heads.append((c.Q, c.K, None))
    return fit_ls(FitDataset.build(heads, bank, cfg.teacher, keep_plans=False), cfg.lam)


def bench_latency(cfg: ExperimentConfig, layer: CompiledLayer | None = None, sizes=None,
                  budgets=(3, 20), log=None) -> BenchReport:
    layer = layer or fit_bench_layer(cfg)
    sizes = tuple(sizes or cfg.bench_sizes)
    eps = cfg.teacher.epsilon
    rows = []
    with threadpool_limits(limits=1):
        for N in sizes:
            c = gen_case((cfg.seed, 2, N, 0), N, cfg.bench_d_h, cfg.bench_d_h, 0.0, cfg.profile)
            ops = {
                "asap0": lambda: layer.attend(c.Q, c.K, c.V, "asap0"),
                "asap": lambda: layer.attend(c.Q, c.K, c.V, "asap"),
            }
            for S in budgets:
                ops[f"normalizer_S{S}"] = lambda S=S: normalizer_forward(c.Q, c.K, c.V, S, eps)
            passes = {}
            for name, fn in ops.items():
                with ct.count_passes() as counter:
                    fn()
                passes[name] = sum(counter.values())
            times = {k: v * 1e3 for k, v in time_calls(ops, cfg.warmup_runs, cfg.timed_runs).items()}
            base = float(np.median(times["asap0"]))
            for name, t in times.items():
                med = float(np.median(t))
                row = BenchRow(N, name, med, float(np.mean(t)), float(np.std(t)), med / base, passes[name])
                if name.startswith("asap"):
                    row.fit_seconds = float(layer.fit_stats.get("fit_seconds", float("nan")))
                    saving = (float(np.median(times[f"normalizer_S{max(budgets)}"])) - med) / 1e3
                    row.break_even_calls = row.fit_seconds / saving if saving > 0 else float("inf")
                rows.append(row)
            if log:
                log(f"N={N}: " + ", ".join(f"{k} {float(np.median(v)):.2f} ms" for k, v in times.items()))
    return BenchReport(rows, cfg.to_dict())
