"""Static figures: onset-latency distributions and threshold sweeps (PNG plus CSV)."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def onset_latencies(report) -> list[float]:
    return [t["onset_latency_ms"] for t in report.outputs["turns"] if t["kind"] == "response" and t["onset_latency_ms"] is not None]


def plot_latency(reports: Mapping[str, object], out_prefix) -> tuple[Path, Path]:
    """Empirical CDF of response-onset latency per named report."""
    out_prefix = Path(out_prefix)
    png, csv = out_prefix.with_suffix(".png"), out_prefix.with_suffix(".csv")
    rows = ["system,onset_latency_ms"]
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, report in reports.items():
        values = sorted(onset_latencies(report))
        rows += [f"{name},{v!r}" for v in values]
        if values:
            ys = [(i + 1) / len(values) for i in range(len(values))]
            ax.step(values, ys, where="post", label=name)
    ax.axhline(0.9, color="grey", lw=0.8, ls=":")
    ax.set_xlabel("onset latency (ms)")
    ax.set_ylabel("fraction of turns")
    ax.legend()
    fig.tight_layout()
    fig.savefig(png, dpi=120)
    plt.close(fig)
    csv.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return png, csv


def plot_sweep(rows: Sequence[dict], out_prefix) -> tuple[Path, Path]:
    """Commit and fallback rates against the threshold, one line set per prefix length."""
    from .harness import sweep_csv

    out_prefix = Path(out_prefix)
    png, csv = out_prefix.with_suffix(".png"), out_prefix.with_suffix(".csv")
    fig, ax = plt.subplots(figsize=(6, 4))
    for n in sorted({r["prefix_len"] for r in rows}):
        cells = sorted((r for r in rows if r["prefix_len"] == n), key=lambda r: r["threshold"])
        taus = [r["threshold"] for r in cells]
        for key, style in (("bad_commit_rate", "-o"), ("good_commit_rate", "-s"), ("fallback_rate", "--")):
            ys = [r[key] if r[key] is not None else float("nan") for r in cells]
            ax.plot(taus, ys, style, label=f"{key} N={n}")
    ax.set_xlabel("threshold")
    ax.set_ylabel("rate")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(png, dpi=120)
    plt.close(fig)
    csv.write_text(sweep_csv(rows), encoding="utf-8")
    return png, csv
