"""Gaussian kernels and normalized Nadaraya-Watson weights.

All pairwise work is blocked over anchors so that memory stays bounded at
``block_rows x pool_size``. Reductions are plain numpy sums over fixed axes,
which keeps results independent of the BLAS thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NoNeighbors

_BLOCK_ELEMS = 4_000_000


@dataclass(frozen=True)
class KernelConfig:
    gamma: float = 10.0
    exclude_self: bool = True
    family: str = "gaussian"
    distance: str = "euclidean"

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"kernel bandwidth must be positive, got {self.gamma}")
        if self.family != "gaussian":
            raise ValueError(f"unsupported kernel family {self.family!r}")
        if self.distance != "euclidean":
            raise ValueError(f"unsupported distance {self.distance!r}")

    def fingerprint(self) -> str:
        return f"{self.family}(gamma={self.gamma:g},exclude_self={str(self.exclude_self).lower()})"


@dataclass(frozen=True, eq=False)
class KernelWeights:
    anchor: int
    neighbors: np.ndarray
    weights: np.ndarray


def kernel_value(cfg: KernelConfig, a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"kernel arguments have shapes {a.shape} and {b.shape}")
    d2 = float(np.sum((a - b) ** 2))
    return float(np.exp(-d2 / (2.0 * cfg.gamma**2)))


def sq_distances(A, B) -> np.ndarray:
    """Squared Euclidean distances, summed coordinate by coordinate in index order."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    out = np.zeros((A.shape[0], B.shape[0]))
    diff = np.empty_like(out)
    for k in range(A.shape[1]):
        np.subtract.outer(A[:, k], B[:, k], out=diff)
        np.multiply(diff, diff, out=diff)
        out += diff
    return out


def l1_distances(A, B) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    out = np.zeros((A.shape[0], B.shape[0]))
    for k in range(A.shape[1]):
        out += np.abs(A[:, k, None] - B[None, :, k])
    return out


def _normalize_log_weights(logk: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # per-anchor max shift: the normalizer never underflows to zero
    top = logk.max(axis=1, keepdims=True)
    valid = np.isfinite(top[:, 0])
    top[~valid] = 0.0
    w = np.exp(logk - top)
    w[~valid] = 0.0
    s = w.sum(axis=1, keepdims=True)
    s[~valid] = 1.0
    return w / s, valid


def weight_block(cfg: KernelConfig, anchors_X, pool_X, self_index=None) -> tuple[np.ndarray, np.ndarray]:
    """Normalized kernel weights of each anchor over the pool.

    ``self_index[r]`` is the pool position of anchor ``r`` (or -1 when the
    anchor is not a pool member); with ``cfg.exclude_self`` that entry gets
    zero weight. Returns ``(W, valid)`` where invalid rows have no usable
    neighbor and are all-zero.
    """
    anchors_X = np.asarray(anchors_X, dtype=np.float64)
    pool_X = np.asarray(pool_X, dtype=np.float64)
    if anchors_X.shape[1] != pool_X.shape[1]:
        raise DimensionMismatch(f"anchor dim {anchors_X.shape[1]} != pool dim {pool_X.shape[1]}")
    logk = -sq_distances(anchors_X, pool_X) / (2.0 * cfg.gamma**2)
    if cfg.exclude_self and self_index is not None:
        self_index = np.asarray(self_index)
        rows = np.flatnonzero(self_index >= 0)
        logk[rows, self_index[rows]] = -np.inf
    return _normalize_log_weights(logk)


def iter_weight_blocks(cfg: KernelConfig, X, anchors=None, pool=None, block_rows: int | None = None):
    """Yield ``(anchor_positions, W, valid)`` blocks for anchors drawn from ``X[pool]``.

    ``anchors`` are positions *within* ``pool`` (default: all of them).
    """
    X = np.asarray(X, dtype=np.float64)
    pool = np.arange(X.shape[0]) if pool is None else np.asarray(pool)
    anchors = np.arange(pool.size) if anchors is None else np.asarray(anchors)
    P = X[pool]
    if block_rows is None:
        block_rows = max(1, _BLOCK_ELEMS // max(1, pool.size))
    for start in range(0, anchors.size, block_rows):
        pos = anchors[start : start + block_rows]
        W, valid = weight_block(cfg, P[pos], P, self_index=pos)
        yield pos, W, valid


def nw_estimates(cfg: KernelConfig, X, targets, pool=None) -> tuple[np.ndarray, np.ndarray]:
    """Kernel estimates for every pool member from the other pool members.

    Returns ``(estimates, valid)`` with one row per pool member.
    """
    X = np.asarray(X, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    pool = np.arange(X.shape[0]) if pool is None else np.asarray(pool)
    T = targets[pool]
    out = np.zeros((pool.size,) + T.shape[1:])
    valid = np.zeros(pool.size, dtype=bool)
    for pos, W, ok in iter_weight_blocks(cfg, X, pool=pool):
        out[pos] = W @ T
        valid[pos] = ok
    return out, valid


def nw_cross_estimates(cfg: KernelConfig, query_X, ref_X, ref_targets) -> np.ndarray:
    """Kernel estimates at ``query_X`` using an independent reference set."""
    query_X = np.asarray(query_X, dtype=np.float64)
    ref_X = np.asarray(ref_X, dtype=np.float64)
    ref_targets = np.asarray(ref_targets, dtype=np.float64)
    block = max(1, _BLOCK_ELEMS // max(1, ref_X.shape[0]))
    out = np.zeros((query_X.shape[0], ref_targets.shape[1]))
    for start in range(0, query_X.shape[0], block):
        W, _ = weight_block(cfg, query_X[start : start + block], ref_X)
        out[start : start + block] = W @ ref_targets
    return out


def nw_estimate(cfg: KernelConfig, anchor, neighbors, targets) -> np.ndarray:
    """Nadaraya-Watson estimate at ``anchor`` from explicit neighbor rows.

    The caller passes the neighborhood it wants; no self-exclusion happens here.
    """
    anchor = np.asarray(anchor, dtype=np.float64).reshape(1, -1)
    neighbors = np.asarray(neighbors, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if neighbors.shape[0] == 0:
        raise NoNeighbors("anchor has an empty neighborhood")
    if neighbors.shape[0] != targets.shape[0]:
        raise DimensionMismatch("neighbors and targets have different row counts")
    W, _ = weight_block(cfg, anchor, neighbors)
    return (W @ targets)[0]


def anchor_weights(cfg: KernelConfig, X, anchor: int, members) -> KernelWeights:
    """Weights of dataset row ``anchor`` over ``members`` (self-excluded per ``cfg``)."""
    X = np.asarray(X, dtype=np.float64)
    members = np.asarray(members)
    if cfg.exclude_self:
        members = members[members != anchor]
    if members.size == 0:
        raise NoNeighbors(f"anchor {anchor} has no neighbors")
    W, _ = weight_block(cfg, X[anchor : anchor + 1], X[members])
    return KernelWeights(int(anchor), members.copy(), W[0])


def effective_sample_size(w) -> float:
    weights = w.weights if isinstance(w, KernelWeights) else np.asarray(w, dtype=np.float64)
    return float(1.0 / np.sum(weights**2))
