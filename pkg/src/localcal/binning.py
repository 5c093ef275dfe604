"""Class-wise confidence binning and the generic bin-based calibration metric.

For every class ``c`` the scores ``p[:, c]`` are partitioned into ``n_bins``
bins. Statistics are kept per (bin, class) pair, so the bin weights carry a
class index too: ``w[b, c] = |B_bc| / sum_b' |B_b'c|`` over retained bins.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import AllBinsEmpty, InvalidDelta

MODES = ("classwise_equal_width", "classwise_equal_frequency")


@dataclass(frozen=True)
class BinningScheme:
    mode: str = "classwise_equal_width"
    n_bins: int = 15
    min_bin_size: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown binning mode {self.mode!r}; expected one of {MODES}")
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        if self.min_bin_size < 0:
            raise ValueError("min_bin_size must be >= 0")

    def fingerprint(self) -> str:
        return f"{self.mode}(bins={self.n_bins},min_bin={self.min_bin_size})"


@dataclass(frozen=True)
class Comparator:
    name: str = "abs_diff"
    lipschitz: float = 1.0

    def __call__(self, freq, conf):
        if self.name == "abs_diff":
            return np.abs(np.asarray(freq) - np.asarray(conf))
        raise ValueError(f"unknown comparator {self.name!r}")


ABS_DIFF = Comparator()


@dataclass(frozen=True, eq=False)
class BinStats:
    scheme: BinningScheme
    bin_of: np.ndarray  # (n, C) bin index of row i under class c
    counts: np.ndarray  # (n_bins, C)
    freq: np.ndarray  # (n_bins, C), nan where empty
    conf: np.ndarray  # (n_bins, C), nan where empty
    retained: np.ndarray  # (n_bins, C) bool
    weights: np.ndarray  # (n_bins, C), columns sum to 1 over retained bins
    priors: np.ndarray  # (C,)

    @property
    def n_bins(self) -> int:
        return self.counts.shape[0]

    @property
    def n_classes(self) -> int:
        return self.counts.shape[1]

    def members(self, b: int, c: int) -> np.ndarray:
        return np.flatnonzero(self.bin_of[:, c] == b)

    def bin_weights(self) -> np.ndarray:
        """Class-averaged bin weights ``w_b = sum_c pi_c w_bc`` (sum to 1)."""
        return self.weights @ self.priors


def equal_width_index(p, n_bins: int) -> np.ndarray:
    """Bin ``[b/m, (b+1)/m)``, with ``p = 1`` clamped into the last bin."""
    p = np.asarray(p, dtype=np.float64)
    return np.clip(np.floor(p * n_bins).astype(np.int64), 0, n_bins - 1)


def equal_frequency_index(p, n_bins: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    order = np.argsort(p, kind="stable")
    idx = np.empty(p.size, dtype=np.int64)
    bounds = np.linspace(0, p.size, n_bins + 1)
    sizes = np.diff(np.floor(bounds + 1e-9).astype(np.int64))
    idx[order] = np.repeat(np.arange(n_bins), sizes)
    return idx


def top_label_bins(probs, n_bins: int) -> np.ndarray:
    return equal_width_index(np.max(probs, axis=1), n_bins)


def assign_bins(probs, labels, scheme: BinningScheme, priors=None) -> BinStats:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, C = probs.shape
    if priors is None:
        priors = np.bincount(labels, minlength=C)[:C] / n
    priors = np.asarray(priors, dtype=np.float64)
    onehot = np.eye(C)[labels]
    if scheme.mode == "classwise_equal_width":
        bin_of = equal_width_index(probs, scheme.n_bins)
    else:
        bin_of = np.stack([equal_frequency_index(probs[:, c], scheme.n_bins) for c in range(C)], axis=1)

    counts = np.zeros((scheme.n_bins, C))
    hits = np.zeros((scheme.n_bins, C))
    conf_sum = np.zeros((scheme.n_bins, C))
    for c in range(C):
        counts[:, c] = np.bincount(bin_of[:, c], minlength=scheme.n_bins)
        hits[:, c] = np.bincount(bin_of[:, c], weights=onehot[:, c], minlength=scheme.n_bins)
        conf_sum[:, c] = np.bincount(bin_of[:, c], weights=probs[:, c], minlength=scheme.n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        freq = np.where(counts > 0, hits / counts, np.nan)
        conf = np.where(counts > 0, conf_sum / counts, np.nan)
    retained = (counts > 0) & (counts >= scheme.min_bin_size)
    if not retained.any():
        raise AllBinsEmpty(f"no bin has at least {scheme.min_bin_size} members")
    kept = np.where(retained, counts, 0.0)
    col = kept.sum(axis=0)
    if np.any(col == 0):
        warnings.warn(
            f"classes {np.flatnonzero(col == 0).tolist()} have no retained bins and contribute nothing",
            RuntimeWarning,
            stacklevel=2,
        )
    weights = np.divide(kept, col, out=np.zeros_like(kept), where=col > 0)
    return BinStats(scheme, bin_of, counts, freq, conf, retained, weights, priors)


def generic_metric(stats: BinStats, cmp: Comparator = ABS_DIFF) -> float:
    """``sum_c pi_c sum_b w_bc * phi(freq_bc, conf_bc)`` over retained bins."""
    total = 0.0
    for c in range(stats.n_classes):
        inner = 0.0
        for b in range(stats.n_bins):
            if stats.retained[b, c]:
                inner += stats.weights[b, c] * float(cmp(stats.freq[b, c], stats.conf[b, c]))
        total += stats.priors[c] * inner
    return total


def hoeffding_term(size, n_classes: int, n_bins: int, delta: float):
    """``sqrt(log(2 C m_B / delta) / (2 |B|))`` (natural log)."""
    size = np.asarray(size, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.sqrt(math.log(2.0 * n_classes * n_bins / delta) / (2.0 * size))


def psi_sizes(stats: BinStats) -> np.ndarray:
    """Per-bin ``|Psi(b, Y)| = min_c |B_bc|`` over classes where bin ``b`` is retained (0 if none)."""
    masked = np.where(stats.retained, stats.counts, np.inf)
    out = masked.min(axis=1)
    out[~np.isfinite(out)] = 0.0
    return out


def theorem2_terms(stats: BinStats, eps: float, delta: float, lipschitz: float = 1.0, psi: str | None = None) -> dict:
    """Terms of the upper bound on :func:`generic_metric` for an ``eps``-locally calibrated predictor.

    ``psi="min_class"`` uses ``w_b sqrt(log(2 C m_B/delta) / (2 min_c |B_bc|))``;
    ``psi="per_class"`` keeps the per-class sizes, ``sum_c pi_c sum_b w_bc sqrt(.../(2|B_bc|))``
    (never larger). Default: min_class for equal-width, per_class for equal-frequency.

    Returns a dict with ``bound``, ``eps_term`` and ``stochastic_term``.
    """
    if not 0 < delta <= 1:
        raise InvalidDelta(f"delta must lie in (0, 1], got {delta}")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if psi is None:
        psi = "min_class" if stats.scheme.mode == "classwise_equal_width" else "per_class"
    C, m_B = stats.n_classes, stats.scheme.n_bins
    if psi == "min_class":
        sizes = psi_sizes(stats)
        wb = stats.bin_weights()
        keep = sizes > 0
        stochastic = float(np.sum(wb[keep] * hoeffding_term(sizes[keep], C, m_B, delta)))
    elif psi == "per_class":
        terms = np.where(stats.retained, hoeffding_term(np.maximum(stats.counts, 1), C, m_B, delta), 0.0)
        stochastic = float(np.sum(stats.priors * np.sum(stats.weights * terms, axis=0)))
    else:
        raise ValueError(f"unknown psi rule {psi!r}")
    return {
        "bound": lipschitz * (eps + stochastic),
        "eps_term": lipschitz * eps,
        "stochastic_term": lipschitz * stochastic,
        "psi": psi,
    }


def theorem2_bound(stats: BinStats, eps: float, delta: float, lipschitz: float = 1.0, psi: str | None = None) -> float:
    return theorem2_terms(stats, eps, delta, lipschitz, psi)["bound"]
