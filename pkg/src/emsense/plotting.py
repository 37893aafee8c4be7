"""Summary tables and figures from the aggregate report CSV."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .harness import read_reports  # noqa: E402

SUMMARY_COLUMNS = ["K", "L", "channel_error_db", "snr_db", "runs", "failed", "nmse_db", "accuracy", "accuracy_all",
                   "mann_iterations", "overhead"]


def _f(x):
    try:
        return float(x)
    except (TypeError, ValueError):
        return float("nan")


def summarize(rows: list[dict]) -> list[dict]:
    """Mean metrics per (K, L, channel error, SNR) over the successful runs."""
    groups = defaultdict(list)
    for r in rows:
        key = (int(r["K"]), int(r["L"]), r["channel_error_db"] or "none", _f(r["snr_db"]))
        groups[key].append(r)
    out = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], str(k[2]), k[3])):
        runs = groups[key]
        ok = [r for r in runs if r["status"] == "ok"]

        def mean(col):
            v = [_f(r[col]) for r in ok]
            return float(np.mean(v)) if v else float("nan")

        out.append({"K": key[0], "L": key[1], "channel_error_db": key[2], "snr_db": key[3], "runs": len(runs),
                    "failed": len(runs) - len(ok), "nmse_db": mean("nmse_db"), "accuracy": mean("accuracy"),
                    "accuracy_all": mean("accuracy_all"), "mann_iterations": mean("mann_iterations"),
                    "overhead": mean("overhead")})
    return out


def _series(summary, x, group, **fixed):
    lines = defaultdict(list)
    for r in summary:
        if all(r[k] == v for k, v in fixed.items()):
            lines[r[group]].append((r[x], r["nmse_db"], r["accuracy"]))
    return {g: sorted(v) for g, v in lines.items()}


def _plot(lines, xlabel, ylabel, col, legend_fmt, path):
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for g, pts in sorted(lines.items(), key=lambda kv: str(kv[0])):
        pts = np.array([(p[0], p[col]) for p in pts], dtype=float)
        ax.plot(pts[:, 0], pts[:, 1], marker="o", label=legend_fmt.format(g))
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_figures(summary: list[dict], out) -> list[Path]:
    """NMSE and accuracy versus SNR (one line per L), and NMSE versus K and channel error when swept."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    by_snr = defaultdict(list)
    for r in summary:
        if r["channel_error_db"] == "none":
            by_snr[r["K"]].append(r)
    for K, rows in by_snr.items():
        if len({r["snr_db"] for r in rows}) < 2:
            continue
        lines = _series(rows, "snr_db", "L")
        for col, name, label in ((1, "nmse", "NMSE (dB)"), (2, "accuracy", "accuracy")):
            p = out / f"{name}_vs_snr_K{K}.png"
            _plot(lines, "SNR (dB)", label, col, "L = {}", p)
            written.append(p)
    ks = {r["K"] for r in summary}
    if len(ks) > 1:
        for snr in sorted({r["snr_db"] for r in summary}):
            lines = _series([r for r in summary if r["channel_error_db"] == "none"], "K", "L", snr_db=snr)
            if lines:
                p = out / f"nmse_vs_K_snr{snr:g}.png"
                _plot(lines, "subcarriers K", "NMSE (dB)", 1, "L = {}", p)
                written.append(p)
    errs = [r for r in summary if r["channel_error_db"] != "none"]
    if errs:
        lines = defaultdict(list)
        for r in errs:
            lines[(r["L"], r["snr_db"])].append((float(r["channel_error_db"]), r["nmse_db"], r["accuracy"]))
        p = out / "nmse_vs_channel_error.png"
        _plot({k: sorted(v) for k, v in lines.items()}, "channel NMSE (dB)", "NMSE (dB)", 1, "(L, SNR) = {}", p)
        written.append(p)
    return written


def report(reports_csv, out) -> tuple[list[dict], list[Path]]:
    summary = summarize(read_reports(reports_csv))
    return summary, render_figures(summary, out)
