"""Plain-text tables and SVG figures for sweeps and training curves."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .beam import SweepReport
from .distill import SftEpochRecord, TrainRecord

__all__ = [
    "sweep_table",
    "emit_sweep_report",
    "metrics_table",
    "emit_training_report",
    "sft_table",
    "emit_sft_report",
]


def _format_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(headers, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def sweep_table(report: SweepReport) -> str:
    if not report.rows:
        raise ValueError("sweep report is empty")
    rows = [
        [str(r.K), f"{r.epsilon:g}", f"{r.median_jsd:.6g}", f"{r.mean_jsd:.6g}",
         f"{r.seconds_per_sample:.6g}", str(r.n_errors)]
        for r in report.rows
    ]
    return _format_table(
        ["K", "epsilon", "median_jsd", "mean_jsd", "sec/sample", "errors"], rows
    )


def emit_sweep_report(report: SweepReport, out_dir) -> list[str]:
    """Write the aligned table plus the two figure analogs:
    JSD vs K grouped by epsilon, and runtime vs epsilon grouped by K."""
    if not report.rows:
        raise ValueError("sweep report is empty")
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    table_path = os.path.join(out_dir, "sweep_table.txt")
    with open(table_path, "w", encoding="ascii") as fh:
        fh.write(sweep_table(report))
    paths.append(table_path)

    eps_values = sorted({r.epsilon for r in report.rows})
    k_values = sorted({r.K for r in report.rows})

    fig, ax = plt.subplots(figsize=(6, 4))
    for eps in eps_values:
        pts = sorted((r.K, r.median_jsd) for r in report.rows if r.epsilon == eps)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=f"eps={eps:g}")
    ax.set_xlabel("beam width K")
    ax.set_ylabel("median JSD vs reference")
    ax.set_xscale("log")
    ax.set_yscale("symlog", linthresh=1e-12)
    ax.legend(fontsize=8)
    ax.set_title("Byte-distribution approximation error")
    fig.tight_layout()
    jsd_path = os.path.join(out_dir, "jsd_vs_k.svg")
    fig.savefig(jsd_path)
    plt.close(fig)
    paths.append(jsd_path)

    fig, ax = plt.subplots(figsize=(6, 4))
    for k in k_values:
        pts = sorted((r.epsilon, r.seconds_per_sample) for r in report.rows if r.K == k)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="s", label=f"K={k}")
    ax.set_xlabel("pruning threshold epsilon")
    ax.set_ylabel("seconds per sample")
    ax.set_xscale("log")
    ax.legend(fontsize=8)
    ax.set_title("Byte-probability computation runtime")
    fig.tight_layout()
    rt_path = os.path.join(out_dir, "runtime_vs_eps.svg")
    fig.savefig(rt_path)
    plt.close(fig)
    paths.append(rt_path)
    return paths


def metrics_table(trace: list[TrainRecord]) -> str:
    if not trace:
        raise ValueError("metrics trace is empty")
    rows = [
        [str(r.step), f"{r.token_ce:.6g}", f"{r.byte_ce:.6g}", f"{r.byte_kl:.6g}",
         f"{r.total:.6g}", f"{r.lr:.3g}"]
        for r in trace
    ]
    return _format_table(["step", "token_ce", "byte_ce", "byte_kl", "total", "lr"], rows)


def emit_training_report(trace: list[TrainRecord], out_dir) -> list[str]:
    """Aligned table plus per-step loss-component curves."""
    if not trace:
        raise ValueError("metrics trace is empty")
    os.makedirs(out_dir, exist_ok=True)
    table_path = os.path.join(out_dir, "training_table.txt")
    with open(table_path, "w", encoding="ascii") as fh:
        fh.write(metrics_table(trace))

    steps = [r.step for r in trace]
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in ("token_ce", "byte_ce", "byte_kl", "total"):
        ax.plot(steps, [getattr(r, name) for r in trace], label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.set_title("Training loss components")
    fig.tight_layout()
    fig_path = os.path.join(out_dir, "training_curves.svg")
    fig.savefig(fig_path)
    plt.close(fig)
    return [table_path, fig_path]


def sft_table(records: list[SftEpochRecord]) -> str:
    if not records:
        raise ValueError("no epoch records")
    rows = [
        [str(r.epoch), f"{r.train_byte_ce:.6g}", f"{r.val_byte_ce:.6g}",
         f"{r.train_token_ce:.6g}", f"{r.val_token_ce:.6g}"]
        for r in records
    ]
    return _format_table(
        ["epoch", "train_byte_ce", "val_byte_ce", "train_token_ce", "val_token_ce"], rows
    )


def emit_sft_report(records: list[SftEpochRecord], out_dir) -> list[str]:
    """Four-curve byte-only SFT report: train/val byte and token CE."""
    if not records:
        raise ValueError("no epoch records")
    os.makedirs(out_dir, exist_ok=True)
    table_path = os.path.join(out_dir, "byte_sft_table.txt")
    with open(table_path, "w", encoding="ascii") as fh:
        fh.write(sft_table(records))

    epochs = [r.epoch for r in records]
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    axes[0].plot(epochs, [r.train_byte_ce for r in records], marker="o", label="train")
    axes[0].plot(epochs, [r.val_byte_ce for r in records], marker="s", label="val")
    axes[0].set_title("byte CE")
    axes[1].plot(epochs, [r.train_token_ce for r in records], marker="o", label="train")
    axes[1].plot(epochs, [r.val_token_ce for r in records], marker="s", label="val")
    axes[1].set_title("token CE")
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig_path = os.path.join(out_dir, "byte_sft_curves.svg")
    fig.savefig(fig_path)
    plt.close(fig)
    return [table_path, fig_path]
