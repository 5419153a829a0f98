"""Figures for each experiment family, written next to the CSV they are drawn from."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..store import write_results_csv  # noqa: E402
from .experiments import mean_by, norm_diag_summary  # noqa: E402

METHOD_STYLE = {
    "prompting": {"color": "black", "marker": "o", "label": "prompting"},
    "prompt_steering": {"color": "tab:orange", "marker": "s", "label": "prompt-space steering"},
    "h_steering": {"color": "tab:blue", "marker": "^", "label": "h-space steering"},
}
SCARCITY_THRESHOLD = 0.01
REQUIRED = ("family", "method", "target", "accuracy", "model_seed", "params", "job_key")

plt.rcParams.update(
    {
        "font.size": 9,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "svg.hashsalt": "concept-reach",
    }
)


def _save(fig, out: Path, stem: str) -> list[Path]:
    paths = []
    for ext in ("png", "svg"):
        p = out / f"{stem}.{ext}"
        meta = {"Software": None} if ext == "png" else {"Date": None, "Creator": None}
        fig.savefig(p, dpi=150, bbox_inches="tight", metadata=meta)
        paths.append(p)
    plt.close(fig)
    return paths


def _baseline(records, out):
    acc = mean_by(records, "distance", "method")
    dists = sorted({k[0] for k in acc})
    fig, ax = plt.subplots(figsize=(5, 3))
    width = 0.27
    for i, m in enumerate(METHOD_STYLE):
        ys = [acc.get((d, m), np.nan) for d in dists]
        ax.bar(np.arange(len(dists)) + (i - 1) * width, ys, width, color=METHOD_STYLE[m]["color"], label=METHOD_STYLE[m]["label"])
    ax.set_xticks(range(len(dists)), [str(d) for d in dists])
    ax.set_xlabel("concepts changed from starting prompt")
    ax.set_ylabel("reachability")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False, fontsize=7)
    return _save(fig, out, "baseline")


def _scarcity(records, out):
    acc = mean_by(records, "concept", "p", "method")
    concepts = sorted({k[0] for k in acc})
    fig, axes = plt.subplots(len(concepts), 1, figsize=(4.5, 2.2 * len(concepts)), squeeze=False)
    for ax, concept in zip(axes[:, 0], concepts):
        for m, style in METHOD_STYLE.items():
            pts = sorted((k[1], v) for k, v in acc.items() if k[0] == concept and k[2] == m)
            if not pts:
                continue
            # p = 0 drawn at a small positive abscissa on the log axis
            xs = [max(p, 1e-3) for p, _ in pts]
            ax.plot(xs, [v for _, v in pts], marker=style["marker"], color=style["color"], label=style["label"])
        ax.axvline(SCARCITY_THRESHOLD, color="red", ls="--", lw=1)
        ax.set_xscale("log")
        ax.set_ylim(0, 1)
        ax.set_title(f"reduced concept {concept}", fontsize=9)
        ax.set_ylabel("reachability")
    axes[-1, 0].set_xlabel("proportion of training set with concept (0 at 1e-3)")
    axes[0, 0].legend(frameon=False, fontsize=7)
    return _save(fig, out, "scarcity")


def _underspec(records, out):
    acc = mean_by(records, "n_specified", "method", "variant")
    levels = sorted({k[0] for k in acc}, reverse=True)
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for m, style in METHOD_STYLE.items():
        for variant, ls in (("reduced", "-"), ("full", ":")):
            pts = [(lv, acc[(lv, m, variant)]) for lv in levels if (lv, m, variant) in acc]
            if not pts or (m == "prompting" and variant == "reduced"):
                continue
            label = style["label"] + (" (full y_s)" if variant == "full" and m != "prompting" else "")
            ax.plot([p for p, _ in pts], [v for _, v in pts], ls=ls, marker=style["marker"], color=style["color"], label=label)
    ax.invert_xaxis()
    ax.set_xlabel("factors specified in training captions")
    ax.set_ylabel("mean reachability")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False, fontsize=6)
    return _save(fig, out, "underspec")


def _bias(records, out):
    acc = mean_by(records, "tie", "injection", "kind", "method")
    paths = []
    for tie in sorted({k[0] for k in acc}):
        fig, ax = plt.subplots(figsize=(4, 4))
        injections = sorted({k[1] for k in acc if k[0] == tie})
        shades = np.linspace(0.15, 0.9, len(injections))
        for m, style in METHOD_STYLE.items():
            for inj, shade in zip(injections, shades):
                x = acc.get((tie, inj, "a_only", m))
                y = acc.get((tie, inj, "b_only", m))
                if x is None or y is None:
                    continue
                ax.scatter(x, y, marker=style["marker"], color=style["color"], alpha=1 - shade * 0.8, s=30)
            ax.scatter([], [], marker=style["marker"], color=style["color"], label=style["label"])
        a, b = tie.split(",")
        ax.set_xlabel(f"reachability: {a} without {b}")
        ax.set_ylabel(f"reachability: {b} without {a}")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.legend(frameon=False, fontsize=7)
        paths += _save(fig, out, "bias_" + tie.replace("=", "-").replace(",", "_"))
    return paths


def _removal(records, out):
    acc = mean_by(records, "removed", "y_s", "method")
    removed = sorted({k[0] for k in acc})
    fig, axes = plt.subplots(1, len(removed), figsize=(3.2 * len(removed), 3), squeeze=False)
    for ax, key in zip(axes[0], removed):
        entries = sorted((k[1], k[2], v) for k, v in acc.items() if k[0] == key)
        labels = [f"{m[:6]}\n{y}" for y, m, _ in entries]
        ax.bar(range(len(entries)), [v for *_, v in entries], color=[METHOD_STYLE[m]["color"] for _, m, _ in entries])
        ax.set_xticks(range(len(entries)), labels, rotation=90, fontsize=5)
        ax.set_ylim(0, 1)
        ax.set_title(key, fontsize=8)
    axes[0, 0].set_ylabel("reachability")
    return _save(fig, out, "removal")


def _norm_diag(records, out):
    summary = norm_diag_summary(records)
    rows = summary["rows"]
    fig, axes = plt.subplots(2, 2, figsize=(6, 5))
    seeds = sorted({r["model_seed"] for r in rows})
    colors = plt.cm.viridis(np.linspace(0, 0.9, max(len(seeds), 1)))
    for j, space in enumerate(("prompt", "h")):
        for i, col in enumerate(("final_loss", "l2_norm")):
            ax = axes[i, j]
            for seed, c in zip(seeds, colors):
                sub = [r for r in rows if r["space"] == space and r["model_seed"] == seed]
                ax.scatter([r[col] for r in sub], [r["accuracy"] for r in sub], color=c, marker="x", label=f"seed {seed}")
            ax.set_xlabel(col.replace("_", " "))
            ax.set_ylabel("reachability")
            ax.set_title(f"{space}-space", fontsize=9)
    axes[0, 0].legend(frameon=False, fontsize=6)
    fig.tight_layout()
    return _save(fig, out, "norm_diag")


DRAWERS = {
    "baseline": _baseline,
    "scarcity": _scarcity,
    "underspec": _underspec,
    "bias": _bias,
    "removal": _removal,
    "norm_diag": _norm_diag,
}


def plot(results: list[dict], family: str, out_dir: str | Path) -> list[Path]:
    """Draw the family's figure(s) and write the underlying CSV; returns written paths."""
    if family not in DRAWERS:
        raise ValueError(f"unknown family {family!r}")
    if not results:
        raise ValueError(f"no results to plot for {family}")
    missing = [c for c in REQUIRED if any(c not in r for r in results)]
    if missing:
        raise ValueError(f"results are missing columns {missing}")
    results = sorted(results, key=lambda r: r["job_key"])  # drawing order must not depend on input order
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{family}.csv"
    write_results_csv(results, csv_path)
    return [csv_path] + DRAWERS[family](results, out)


__all__ = ["plot", "DRAWERS"]
