"""Render figures from a finished experiment directory.

Reads the per-cell CSVs and summary.csv written by the sweep harness and
saves PNGs next to them: risk-vs-iteration curves per (m, q) group and the
compression comparisons across dropout rates and widths.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

_CELL_RE = r"cell_m(?P<m>\d+)_q(?P<q>[0-9.eE+-]+)_s(?P<seed>\d+)\.csv"


def _read_csv(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        rows = list(reader)
    out = {}
    for name in reader.fieldnames:
        vals = [r[name] for r in rows]
        try:
            out[name] = np.array([float(v) if v else np.nan for v in vals])
        except ValueError:
            out[name] = np.array(vals)
    return out


def _cells(exp_dir: Path):
    import re

    pat = re.compile(_CELL_RE)
    for p in sorted(exp_dir.glob("cell_*.csv")):
        match = pat.fullmatch(p.name)
        if match:
            yield int(match["m"]), float(match["q"]), int(match["seed"]), _read_csv(p)


def render_experiment(exp_dir, dpi: int = 130, per_cell: bool = False) -> list[Path]:
    """Write the figure set for one experiment directory; returns the paths."""
    exp_dir = Path(exp_dir)
    cells = list(_cells(exp_dir))
    if not cells:
        raise FileNotFoundError(f"{exp_dir}: no cell_*.csv files found")
    written: list[Path] = []

    groups: dict[tuple[int, float], list[dict]] = defaultdict(list)
    for m, q, seed, table in cells:
        groups[(m, q)].append(table)

    have_risk = all("risk_full" in t for ts in groups.values() for t in ts)

    fig, axes = plt.subplots(1, 2 if have_risk else 1, figsize=(11 if have_risk else 6, 4))
    ax_loss = axes[0] if have_risk else axes
    for (m, q), tables in sorted(groups.items()):
        t = tables[0]["t"]
        loss = np.mean([tab["inst_loss"] for tab in tables], axis=0)
        ax_loss.plot(t, loss, label=f"m={m}, q={q:g}")
    ax_loss.set_xlabel("iteration")
    ax_loss.set_ylabel("instantaneous loss")
    ax_loss.set_yscale("log")
    ax_loss.legend(fontsize=8)
    ax_loss.set_title("training loss (mean over seeds)")
    if have_risk:
        ax_r = axes[1]
        for (m, q), tables in sorted(groups.items()):
            t = tables[0]["t"]
            full = np.mean([tab["risk_full"] for tab in tables], axis=0)
            vis = np.mean([tab["risk_visited"] for tab in tables], axis=0)
            (line,) = ax_r.plot(t, full, label=f"full m={m}, q={q:g}")
            ax_r.plot(t, vis, "--", color=line.get_color(), label=f"visited m={m}, q={q:g}")
            if "risk_random_mean" in tables[0]:
                rnd = np.mean([tab["risk_random_mean"] for tab in tables], axis=0)
                ax_r.plot(t, rnd, ":", color=line.get_color())
        ax_r.set_xlabel("iteration")
        ax_r.set_ylabel("misclassification risk")
        ax_r.legend(fontsize=7)
        ax_r.set_title("full network vs sub-networks")
    fig.tight_layout()
    path = exp_dir / "curves.png"
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    written.append(path)

    if have_risk:
        fig, ax = plt.subplots(figsize=(6, 4))
        for (m, q), tables in sorted(groups.items()):
            t = tables[0]["t"]
            gap = np.mean(
                [tab["risk_visited"] - tab["risk_full"] for tab in tables], axis=0
            )
            ax.plot(t, gap, label=f"m={m}, rate={1 - q:g}")
        ax.axhline(0.0, color="grey", lw=0.6)
        ax.set_xlabel("iteration")
        ax.set_ylabel("visited-sub-network risk gap")
        ax.legend(fontsize=8)
        ax.set_title("compression gap")
        fig.tight_layout()
        path = exp_dir / "gap.png"
        fig.savefig(path, dpi=dpi)
        plt.close(fig)
        written.append(path)

    if per_cell:
        for m, q, seed, table in cells:
            fig, ax = plt.subplots(figsize=(6, 4))
            ax.plot(table["t"], table["inst_loss"], label="inst_loss")
            if "risk_full" in table:
                ax.plot(table["t"], table["risk_full"], label="risk_full")
                ax.plot(table["t"], table["risk_visited"], label="risk_visited")
            ax.set_xlabel("iteration")
            ax.legend(fontsize=8)
            ax.set_title(f"m={m} q={q:g} seed={seed}")
            fig.tight_layout()
            path = exp_dir / f"cell_m{m}_q{q:g}_s{seed}.png"
            fig.savefig(path, dpi=dpi)
            plt.close(fig)
            written.append(path)
    return written
