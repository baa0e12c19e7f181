"""Matplotlib figures: budget curves, difference bars, embedding scatter."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .reporting import summary_table  # noqa: E402

# fixed metadata keeps PNG bytes stable across runs
_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_budget_curves(reports, out_dir, mode: str = "linear") -> list[Path]:
    """One figure per (objective, domain): ROC-AUC against label budget, one line per strategy."""
    rows = summary_table(reports, mode)
    out = []
    for obj in sorted({r["objective"] for r in rows}):
        for dom in sorted({r["domain"] for r in rows if r["objective"] == obj}):
            sel = [r for r in rows if r["objective"] == obj and r["domain"] == dom]
            fig, ax = plt.subplots(figsize=(4, 3))
            for strat in sorted({r["strategy"] for r in sel}):
                pts = sorted((r["budget_fraction"], r["mean"], r["se"]) for r in sel if r["strategy"] == strat)
                x, y, e = map(np.asarray, zip(*pts))
                ax.errorbar(x * 100, y, yerr=e, marker="o", capsize=3, label=strat)
            ax.set_xscale("log")
            ax.set_xlabel("labelled training data (%)")
            ax.set_ylabel("ROC-AUC")
            ax.set_title(f"{obj}, domain {dom}")
            ax.legend(fontsize=7)
            fig.tight_layout()
            out.append(_save(fig, Path(out_dir) / f"budget_{obj}_domain-{dom}.png"))
    return out


def plot_differences(diff: dict, out_dir) -> list[Path]:
    """Bars of mean ROC-AUC difference to the baseline, whiskers at one standard error."""
    rows = [r for r in diff["rows"] if r["strategy"] != diff["baseline"]]
    out = []
    for obj in sorted({r["objective"] for r in rows}):
        sel = [r for r in rows if r["objective"] == obj]
        budgets = sorted({r["budget_fraction"] for r in sel})
        domains = sorted({r["domain"] for r in sel})
        strategies = sorted({r["strategy"] for r in sel})
        fig, axes = plt.subplots(1, len(budgets), figsize=(3.2 * len(budgets), 3), squeeze=False)
        width = 0.8 / max(1, len(strategies))
        for ax, b in zip(axes[0], budgets):
            for k, s in enumerate(strategies):
                vals = {r["domain"]: r for r in sel if r["strategy"] == s and r["budget_fraction"] == b}
                xs = np.arange(len(domains)) + k * width
                ax.bar(xs, [vals[d]["mean_diff"] if d in vals else 0 for d in domains], width,
                       yerr=[vals[d]["se"] if d in vals else 0 for d in domains], capsize=2, label=s)
            ax.axhline(0, color="k", lw=0.6)
            ax.set_xticks(np.arange(len(domains)) + 0.4 - width / 2, domains, fontsize=7)
            ax.set_title(f"{b:.0%} labels")
        axes[0][0].set_ylabel(f"ROC-AUC minus {diff['baseline']}")
        axes[0][-1].legend(fontsize=7)
        fig.tight_layout()
        out.append(_save(fig, Path(out_dir) / f"diff_{obj}.png"))
    return out


def plot_embedding(projection: dict, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    xy, dom = projection["xy"], projection["domain"]
    for d in np.unique(dom):
        m = dom == d
        ax.scatter(xy[m, 0], xy[m, 1], s=4, label=f"domain {d}", alpha=0.7)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_title(title)
    ax.legend(fontsize=7, markerscale=3)
    fig.tight_layout()
    return _save(fig, Path(path))
