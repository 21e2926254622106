"""Report figures (Agg backend, written next to the CSV output)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_fidelity(report, path) -> Path:
    ops = report.operators()
    data = [report.values(op, "attention_rel_l2") for op in ops]
    fig, ax = plt.subplots(figsize=(1.2 * len(ops) + 2, 4))
    ax.boxplot(data)
    ax.set_xticks(range(1, len(ops) + 1), ops, rotation=30, ha="right")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.set_ylabel("attention rel. l2 vs teacher (Frobenius)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_latency(bench, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    names = []
    for r in bench.rows:
        if r.operator not in names:
            names.append(r.operator)
    for name in names:
        rows = [r for r in bench.rows if r.operator == name]
        ax.errorbar([r.N for r in rows], [r.median_ms for r in rows], yerr=[r.std_ms for r in rows],
                    marker="o", label=name, capsize=3)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("N")
    ax.set_ylabel("median latency (ms, 1 thread)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
