"""Static figures for traced curves and pipeline results."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .cpflow import COLLAPSE, HOLD, Q_LIMIT, RG_TRIP, SNB, PvCurve  # noqa: E402

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
WIDTH_IN = 6.0

RC = {
    "axes.labelsize": 10,
    "font.size": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "font.family": "serif",
    "figure.figsize": (WIDTH_IN, WIDTH_IN * GOLDEN),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.2,
    # keep every traced point as a path vertex
    "path.simplify": False,
    "svg.hashsalt": "lvrtadapt",
    "svg.fonttype": "none",
}

_MARKERS = {RG_TRIP: ("v", "trip"), HOLD: ("s", "held online"), Q_LIMIT: ("^", "Q limit"),
            SNB: ("o", "nose"), COLLAPSE: ("x", "collapse")}


def new_figure(ncols: int = 1, scale: float = 1.0):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(1, ncols, figsize=(WIDTH_IN * scale * ncols, WIDTH_IN * scale * GOLDEN))
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(RC):
        fig.savefig(path, bbox_inches="tight", metadata={"Date": None} if path.suffix == ".svg" else None)
    plt.close(fig)
    return path


def pv_curve_figure(curve: PvCurve, buses=None, thresholds: bool = True):
    """V against load scale at selected buses (default: every RG bus)."""
    case = curve.case
    if buses is None:
        buses = [u.bus for u in case.rg_units]
    lam = curve.lambdas
    V = curve.voltages()
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
        for n, b in enumerate(buses):
            k = case.bus_index(b)
            color = colors[n % len(colors)]
            ax.plot(lam, V[:, k], color=color, label=f"bus {b}", gid=f"pv-bus-{b}")
            if thresholds:
                try:
                    u = case.rg_by_bus(b)
                except KeyError:
                    continue
                ax.axhline(u.c_lvrt_original, color=color, ls="-.", lw=0.8)
        seen = set()
        for e in curve.events:
            marker, label = _MARKERS[e.kind]
            if e.subject is not None and e.subject in case.rg_ids:
                b = case.rg_units[case.rg_index(e.subject)].bus
                y = curve.points[e.index].v[case.bus_index(b)] if b in buses else None
            else:
                y = None
            if y is None:
                ax.axvline(e.lam, color="0.4", ls=":", lw=0.8)
                continue
            ax.plot([e.lam], [y], marker=marker, color="k", ls="none",
                    label=None if e.kind in seen else label)
            seen.add(e.kind)
        ax.set_xlabel(r"load scale $\lambda$")
        ax.set_ylabel("voltage magnitude (p.u.)")
        ax.set_title(f"P-V curve, LM = {curve.load_margin:.4f} ({curve.terminal})")
        ax.legend(loc="lower left", ncol=2)
    return fig


def plot_pv_curve(curve: PvCurve, path, buses=None) -> Path:
    return save(pv_curve_figure(curve, buses), path)


def candidates_figure(result):
    """Estimated against traced load margin and total adjustment of evaluated masks."""
    rows = result.evaluated
    labels = ["+".join(str(i) for i, b in zip(result.base_curve.case.rg_ids, c.mask) if b) for c in rows]
    x = np.arange(len(rows))
    with plt.rc_context(RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(2 * WIDTH_IN, WIDTH_IN * GOLDEN))
        ax1.bar(x - 0.2, [c.lm_estimate for c in rows], 0.4, label="estimate")
        ax1.bar(x + 0.2, [c.lm_actual for c in rows], 0.4, label="traced")
        ax1.axhline(result.config.lambda_limit, color="k", ls="--", lw=0.8, label=r"$\lambda_{limit}$")
        lo = min([c.lm_estimate for c in rows] + [c.lm_actual for c in rows] + [result.config.lambda_limit])
        ax1.set_ylim(lo - 0.1, None)
        ax1.set_ylabel("load margin")
        ax2.bar(x - 0.2, [c.sum_estimate for c in rows], 0.4, label="estimate")
        ax2.bar(x + 0.2, [c.sum_actual for c in rows], 0.4, label="traced")
        ax2.set_ylabel("total LVRT reduction (p.u.)")
        for ax in (ax1, ax2):
            ax.set_xticks(x, labels, rotation=30)
            ax.set_xlabel("blocked RGs")
            ax.legend()
    return fig


def plot_candidates(result, path) -> Path:
    return save(candidates_figure(result), path)
