"""Frozen-layer replacement study on synthetic teachers."""

from __future__ import annotations

import csv
import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .. import ctransform as ct
from ..calibration import CompiledLayer, FitDataset, fit_kl, fit_ls
from ..metrics import NORM_CONVENTIONS, CaseReport, generalized_kl, marginal_errors, teacher_agreement
from ..numerics import sample_slice_bank
from ..sinkhorn import TeacherConfig, build_kernels, normalizer_forward, sinkhorn_run
from .cases import ActivationProfile, AttentionCase, gen_case

FIT, EVAL = 0, 1

CSV_COLUMNS = {
    "operator": "operator",
    "case": "case",
    "output_rmse": "output_rmse_pooled",
    "attention_rel_l2": "attention_rel_l2_frobenius",
    "row_err": "row_err_attention_units",
    "col_err": "col_err_active_keys",
    "plan_kl": "plan_kl_generalized_vs_teacher",
    "latency_ns": "latency_ns",
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    N: int = 128
    d_h: int = 16
    d_v: int = 16
    heads: int = 4
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    normalizer_budgets: tuple = (3, 5)
    objectives: tuple = ("LS", "KL")
    modes: tuple = ("asap0", "asap")
    L: int = 32
    M: int = 512
    lam: float = 1e-3
    eval_cases: int = 64
    mask_fraction: float = 0.0
    profile: ActivationProfile = field(default_factory=lambda: ActivationProfile("lowrank", scale=2.5))
    bank_seed: int = 0
    warmup_runs: int = 3
    timed_runs: int = 10
    bench_sizes: tuple = (512, 1024, 2048)
    bench_d_h: int = 64
    bench_fit_cases: int = 8
    time_cases: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["teacher"] = self.teacher.to_dict()
        d["profile"] = self.profile.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if "teacher" in kw:
            kw["teacher"] = TeacherConfig.from_dict({**TeacherConfig().to_dict(), **kw["teacher"]})
        if "profile" in kw:
            kw["profile"] = ActivationProfile(**{**ActivationProfile().to_dict(), **kw["profile"]})
        for name in ("normalizer_budgets", "objectives", "modes", "bench_sizes"):
            if name in kw:
                kw[name] = tuple(kw[name])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def override(self, **kw) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def heads_for(self, partition: int, case: int) -> list[AttentionCase]:
        return [
            gen_case((self.seed, partition, case, h), self.N, self.d_h, self.d_v, self.mask_fraction, self.profile)
            for h in range(self.heads)
        ]


def machine_descriptor() -> dict:
    return {
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "cpu_count": os.cpu_count(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


@dataclass
class RunReport:
    config: dict
    rows: list[CaseReport]
    fit_stats: dict
    passes: dict
    machine: dict = field(default_factory=machine_descriptor)
    conventions: dict = field(default_factory=lambda: dict(NORM_CONVENTIONS))

    def operators(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.operator not in seen:
                seen.append(r.operator)
        return seen

    def values(self, operator: str, metric: str) -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.rows if r.operator == operator])

    def aggregates(self) -> dict:
        out = {}
        for op in self.operators():
            out[op] = {}
            for m in ("output_rmse", "attention_rel_l2", "row_err", "col_err", "plan_kl", "latency_ns"):
                v = self.values(op, m)
                out[op][m] = {"mean": float(np.mean(v)), "std": float(np.std(v)), "median": float(np.median(v))}
        return out

    def write_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS.values())
            for r in self.rows:
                w.writerow([getattr(r, k) if k in ("operator", "case") else repr(float(getattr(r, k)))
                            for k in CSV_COLUMNS])

    def write_summary_csv(self, path) -> None:
        aggs = self.aggregates()
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            metrics = [k for k in CSV_COLUMNS if k not in ("operator", "case")]
            header = ["operator"]
            for m in metrics:
                header += [f"{CSV_COLUMNS[m]}_{s}" for s in ("mean", "std", "median")]
            w.writerow(header + ["normalization_passes"])
            for op, agg in aggs.items():
                row = [op]
                for m in metrics:
                    row += [repr(agg[m][s]) for s in ("mean", "std", "median")]
                w.writerow(row + [self.passes.get(op, "")])

    def write_json(self, path) -> None:
        doc = {
            "config": self.config,
            "machine": self.machine,
            "conventions": self.conventions,
            "fit_stats": self.fit_stats,
            "passes": self.passes,
            "aggregates": self.aggregates(),
        }
        Path(path).write_text(json.dumps(doc, indent=2))


class FitFailure(RuntimeError):
    """A compiled layer did not fit; carries the objective and its fit statistics."""

    def __init__(self, objective: str, fit_stats: dict):
        super().__init__(f"{objective} fit did not converge: {fit_stats}")
        self.objective = objective
        self.fit_stats = fit_stats


def fit_layers(cfg: ExperimentConfig, log=None) -> dict[str, CompiledLayer]:
    """Fit one compiled layer per objective on the fit partition (heads pooled).

    Raises :class:`FitFailure` if an iterative fit stops without converging.
    """
    bank = sample_slice_bank(cfg.bank_seed, cfg.L, cfg.d_h)
    heads = ((h.Q, h.K, h.active) for m in range(cfg.M) for h in cfg.heads_for(FIT, m))
    data = FitDataset.build(heads, bank, cfg.teacher, keep_plans="KL" in cfg.objectives)
    if log:
        log(f"built fit set: {len(data)} head instances in {data.build_seconds:.1f}s")
    layers = {}
    for obj in cfg.objectives:
        layers[obj] = fit_ls(data, cfg.lam) if obj == "LS" else fit_kl(data, cfg.lam)
        if log:
            log(f"fit {obj}: {layers[obj].fit_stats}")
        if not layers[obj].fit_stats.get("converged", True):
            raise FitFailure(obj, layers[obj].fit_stats)
    return layers


def _operators(cfg: ExperimentConfig, layers: dict[str, CompiledLayer]):
    """``name -> (plan_fn(head, pair), forward_fn(head))`` for every evaluated operator."""
    ops = {}
    teacher = cfg.teacher
    ops[f"teacher_S{teacher.budget}"] = (
        lambda hd, pair, t=teacher: sinkhorn_run(hd.Q, hd.K, t, hd.active, pair).final_plan,
        lambda hd, t=teacher: normalizer_forward(hd.Q, hd.K, hd.V, t.budget, t.epsilon),
    )
    for S in cfg.normalizer_budgets:
        t = teacher.with_budget(S)
        ops[f"normalizer_S{S}"] = (
            lambda hd, pair, t=t: sinkhorn_run(hd.Q, hd.K, t, hd.active, pair).final_plan,
            lambda hd, t=t: normalizer_forward(hd.Q, hd.K, hd.V, t.budget, t.epsilon),
        )
    for obj, layer in layers.items():
        for mode in cfg.modes:
            ops[f"{mode}_{obj}"] = (
                lambda hd, pair, L=layer, m=mode: ct.reconstruct(
                    L.predict_dual(hd.Q, hd.K, hd.active), pair.C, L.teacher.epsilon, L.teacher.ending, m, hd.active),
                lambda hd, L=layer, m=mode: L.attend(hd.Q, hd.K, hd.V, m, hd.active),
            )
    return ops


def run_replacement(cfg: ExperimentConfig, layers: dict[str, CompiledLayer] | None = None, log=None) -> RunReport:
    """Fit compiled layers, then compare every operator with the teacher on held-out cases."""
    if layers is None:
        layers = fit_layers(cfg, log)
    ops = _operators(cfg, layers)
    passes = {}
    probe = cfg.heads_for(EVAL, 0)[0]
    for name, (_, fwd) in ops.items():
        with ct.count_passes() as c:
            fwd(probe)
        passes[name] = sum(c.values())

    rows = []
    for e in range(cfg.eval_cases):
        heads = cfg.heads_for(EVAL, e)
        pairs = [build_kernels(h.Q, h.K) for h in heads]
        teacher_plans = [sinkhorn_run(h.Q, h.K, cfg.teacher, h.active, p).final_plan for h, p in zip(heads, pairs)]
        for name, (plan_fn, fwd) in ops.items():
            vals = []
            for h, p, tp in zip(heads, pairs, teacher_plans):
                plan = plan_fn(h, p)
                rmse, rel = teacher_agreement(plan.A, tp.A, h.V)
                row_err, col_err = marginal_errors(plan.A, h.active)
                vals.append((rmse, rel, row_err, col_err, generalized_kl(plan.P, tp.P)))
            latency = float("nan")
            if cfg.time_cases:
                t0 = time.perf_counter_ns()
                for h in heads:
                    fwd(h)
                latency = float(time.perf_counter_ns() - t0)
            m = np.mean(vals, axis=0)
            rows.append(CaseReport(name, e, *map(float, m), latency_ns=latency))
        if log and (e + 1) % 16 == 0:
            log(f"evaluated {e + 1}/{cfg.eval_cases} cases")
    fit_stats = {obj: layer.fit_stats for obj, layer in layers.items()}
    return RunReport(cfg.to_dict(), rows, fit_stats, passes)
