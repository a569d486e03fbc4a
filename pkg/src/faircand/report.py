"""Figure rendering for experiment sweeps.

One four-panel figure per sweep family: ER for each group (percentage with
standard-error bars) and CSS for each group (mean with a one-standard-
deviation band), methods overlaid, styled so the certified rules stand out.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .io import read_csv

_RULE_METHODS = {"cipw-lb-mono", "cipw-lb-union"}

_SWEEP_LABELS = {
    "m": "user feedback size m",
    "epsilon": "relevance noise ratio",
    "lambda": "clipping parameter",
    "t_max": "largest considered threshold",
}


def _to_float(value) -> float:
    if value in ("", None):
        return math.nan
    return float(value)


def render_sweep_figure(agg_rows: Sequence[Mapping], out_path) -> Path:
    """Render ER/CSS panels for one sweep family and save the figure."""
    if not agg_rows:
        raise ValueError("no aggregate rows to plot")
    sweep_param = agg_rows[0]["sweep_param"]
    groups = sorted({r["group"] for r in agg_rows})
    methods: list[str] = []
    for r in agg_rows:
        if r["method"] not in methods:
            methods.append(r["method"])
    values = []
    for r in agg_rows:
        v = _to_float(r["sweep_value"])
        if v not in values:
            values.append(v)
    values.sort()

    log_x = sweep_param in ("m", "lambda") and min(values) > 0

    fig, axes = plt.subplots(1, 2 * len(groups), figsize=(4.2 * 2 * len(groups), 3.4))
    panels = [("er", g) for g in groups] + [("css", g) for g in groups]
    for ax, (metric, group) in zip(axes, panels):
        for method in methods:
            rows = {
                _to_float(r["sweep_value"]): r
                for r in agg_rows
                if r["method"] == method and r["group"] == group
            }
            xs = [v for v in values if v in rows]
            if not xs:
                continue
            emphasized = method in _RULE_METHODS
            style = dict(
                marker="o" if emphasized else ".",
                linewidth=2.0 if emphasized else 1.0,
                linestyle="-" if emphasized else "--",
                alpha=1.0 if emphasized else 0.75,
            )
            if metric == "er":
                ys = [_to_float(rows[v]["er_pct"]) for v in xs]
                es = [_to_float(rows[v]["er_se"]) for v in xs]
                ax.errorbar(xs, ys, yerr=es, label=method, capsize=2, **style)
            else:
                ys = [_to_float(rows[v]["css_mean"]) for v in xs]
                sd = [_to_float(rows[v]["css_std"]) for v in xs]
                line = ax.plot(xs, ys, label=method, **style)[0]
                lo = [y - s for y, s in zip(ys, sd)]
                hi = [y + s for y, s in zip(ys, sd)]
                ax.fill_between(xs, lo, hi, color=line.get_color(), alpha=0.15)
        if log_x:
            ax.set_xscale("log")
        ax.set_xlabel(_SWEEP_LABELS.get(sweep_param, sweep_param))
        if metric == "er":
            ax.set_ylabel(f"ER {group} (%)")
            ax.set_ylim(-5, 105)
        else:
            ax.set_ylabel(f"CSS {group}")
        ax.grid(True, alpha=0.3)
    axes[0].legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_report(aggregate_csv, out_dir) -> list[Path]:
    """Render one figure per sweep family found in an aggregate CSV."""
    rows, _config = read_csv(aggregate_csv)
    if not rows:
        raise ValueError(f"no rows in {aggregate_csv}")
    out_dir = Path(out_dir)
    families: dict[str, list[Mapping]] = {}
    for r in rows:
        families.setdefault(r["sweep_param"], []).append(r)
    paths = []
    for sweep_param, fam_rows in families.items():
        paths.append(
            render_sweep_figure(fam_rows, out_dir / f"figure_{sweep_param}_sweep.png")
        )
    return paths
