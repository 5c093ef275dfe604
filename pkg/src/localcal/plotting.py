"""Report figures written to image files (non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .binning import BinningScheme, assign_bins  # noqa: E402

# no timestamps or version strings, so reruns give identical bytes
_META = {"png": {"Software": None}, "svg": {"Date": None, "Creator": None}, "pdf": {"CreationDate": None, "Producer": None, "Creator": None}}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = path.suffix.lstrip(".").lower() or "png"
    fig.savefig(path, dpi=100, metadata=_META.get(fmt, {}))
    plt.close(fig)
    return path


def reliability_diagram(probs, labels, path, n_bins: int = 15, title: str | None = None) -> Path:
    """One panel per class: bin confidence against bin frequency, marker area by bin count."""
    probs = np.asarray(probs, dtype=np.float64)
    C = probs.shape[1]
    stats = assign_bins(probs, labels, BinningScheme(n_bins=n_bins))
    cols = min(C, 4)
    rows = int(np.ceil(C / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(3.0 * cols, 3.0 * rows), squeeze=False)
    for c in range(rows * cols):
        ax = axes[c // cols][c % cols]
        if c >= C:
            ax.axis("off")
            continue
        keep = stats.retained[:, c]
        ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
        ax.scatter(stats.conf[keep, c], stats.freq[keep, c], s=8 + 60 * stats.weights[keep, c], color="C0")
        ax.plot(stats.conf[keep, c], stats.freq[keep, c], color="C0", lw=1)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_title(f"class {c}", fontsize=9)
        ax.set_xlabel("confidence", fontsize=8)
        if c % cols == 0:
            ax.set_ylabel("frequency", fontsize=8)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    return _save(fig, path)


def bound_scatter(reports, path, title: str = "") -> Path:
    """Observed metric against its bound, one point per trial."""
    obs = np.array([r.observed for r in reports])
    bnd = np.array([r.bound for r in reports])
    fig, ax = plt.subplots(figsize=(4, 4))
    hi = float(max(obs.max(initial=0), bnd.max(initial=0))) * 1.05 or 1.0
    ax.plot([0, hi], [0, hi], color="0.6", lw=0.8, ls="--")
    ax.scatter(bnd, obs, s=6, color=np.where(obs <= bnd, "C0", "C3"))
    ax.set_xlabel("bound")
    ax.set_ylabel("observed")
    ax.set_title(title or f"{np.mean(obs <= bnd):.1%} of {obs.size} trials hold", fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def bias_variance_sweep(rows, path) -> Path:
    g = [r["gamma"] for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(g, [r["variance"] for r in rows], "o-", label="variance term")
    ax.plot(g, [r["bias"] for r in rows], "s-", label="bias term")
    ax.set_xscale("log")
    ax.set_xlabel("bandwidth")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def consistency_plot(rows, path) -> Path:
    sizes = sorted({r["n"] for r in rows})
    med = [np.median([r["gap"] for r in rows if r["n"] == n]) for n in sizes]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for r in rows:
        ax.plot(r["n"], r["gap"], ".", color="0.7")
    ax.plot(sizes, med, "o-", color="C0")
    ax.set_xscale("log")
    ax.set_xlabel("n")
    ax.set_ylabel("|JSD gap|")
    fig.tight_layout()
    return _save(fig, path)


def proximity_pairs(reports, path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    for rep in reports:
        for p in rep.pairs:
            ax.plot(p.bound, p.freq_gap, "o", ms=3, color="C0" if p.holds else "C3")
    ax.axline((0, 0), slope=1, color="0.6", lw=0.8, ls="--")
    ax.set_xlabel("bound")
    ax.set_ylabel("sub-bin frequency gap")
    fig.tight_layout()
    return _save(fig, path)
