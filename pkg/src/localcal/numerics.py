"""Deterministic numerical primitives shared across the toolkit."""

from __future__ import annotations

import math
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCovariance, DimensionMismatch, EmptyInput, InvalidBracket, NonFiniteInput, ShapeMismatch

LN2 = math.log(2.0)


# --------------------------------------------------------------------------
# RNG


def _stream_key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed`` and a named sub-stream.

    Distinct ``stream`` tuples give statistically independent generators, so
    parallel workers can each derive their own without sharing state.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_stream_key(p) for p in stream))
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------
# softmax / JSD


def softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NonFiniteInput("softmax input contains non-finite values")
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _xlogy_ratio(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    # x * ln(x / m) with 0 ln 0 := 0; m > 0 wherever x > 0
    out = np.zeros_like(x)
    pos = x > 0
    # x / m <= 2 exactly; the clamp only matters when m underflows to 0
    with np.errstate(divide="ignore"):
        out[pos] = x[pos] * np.log(np.minimum(x[pos] / m[pos], 2.0))
    return out


def js_divergence(p, q) -> np.ndarray:
    """Jensen-Shannon divergence in nats, row-wise over the last axis."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mix = 0.5 * (p + q)
    js = 0.5 * _xlogy_ratio(p, mix).sum(axis=-1) + 0.5 * _xlogy_ratio(q, mix).sum(axis=-1)
    return np.maximum(js, 0.0)


def jsd_distance(p, q) -> np.ndarray | float:
    """Jensen-Shannon distance (natural log), in ``[0, sqrt(ln 2)]``.

    Works on single distributions or row-wise on matrices.
    """
    d = np.sqrt(js_divergence(p, q))
    return float(d) if np.ndim(d) == 0 else d


# --------------------------------------------------------------------------
# PCA


@dataclass(frozen=True, eq=False)
class PcaProjection:
    mean: np.ndarray
    components: np.ndarray  # (d', m), orthonormal rows
    eigenvalues: np.ndarray
    degenerate: bool = False

    @property
    def dim(self) -> int:
        return self.components.shape[0]

    def project(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.mean.shape[0]:
            raise DimensionMismatch(f"expected {self.mean.shape[0]} features, got {X.shape[-1]}")
        return (X - self.mean) @ self.components.T

    def reconstruct(self, Y) -> np.ndarray:
        return np.asarray(Y, dtype=np.float64) @ self.components + self.mean

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PcaProjection":
        return cls(
            np.asarray(obj["mean"], dtype=np.float64),
            np.asarray(obj["components"], dtype=np.float64).reshape(-1, len(obj["mean"])),
            np.asarray(obj["eigenvalues"], dtype=np.float64),
            bool(obj.get("degenerate", False)),
        )


def fit_pca(X, dim: int) -> PcaProjection:
    """Top-``dim`` principal axes from the exact eigendecomposition of the sample covariance."""
    X = np.asarray(X, dtype=np.float64)
    n, m = X.shape
    if n < 2:
        raise EmptyInput("PCA needs at least two rows")
    if not 1 <= dim <= m:
        raise DimensionMismatch(f"PCA dimension {dim} not in [1, {m}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    evals = np.maximum(evals[order], 0.0)
    evecs = evecs[:, order]
    # fix the sign so the largest-magnitude coordinate of each axis is positive
    idx = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[idx, np.arange(m)])
    signs[signs == 0] = 1.0
    evecs = evecs * signs
    tol = max(evals[0], 1.0) * m * np.finfo(float).eps * 10
    rank = int(np.sum(evals > tol))
    degenerate = rank < dim
    if degenerate:
        # eigh already returns an orthonormal basis; the trailing vectors span
        # the null space and serve as the arbitrary complement
        warnings.warn(
            f"covariance rank {rank} < requested PCA dimension {dim}; padding with an arbitrary orthonormal complement",
            DegenerateCovariance,
            stacklevel=2,
        )
    return PcaProjection(mean, evecs[:, :dim].T.copy(), evals[:dim].copy(), degenerate)


def project(pca: PcaProjection, X) -> np.ndarray:
    return pca.project(X)


# --------------------------------------------------------------------------
# isotonic regression


def pav_isotonic(y, w=None) -> np.ndarray:
    """Weighted least-squares projection onto nondecreasing sequences (pool adjacent violators)."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.size == 0:
        raise EmptyInput("pav_isotonic needs a non-empty 1-D input")
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64)
    if w.shape != y.shape:
        raise ShapeMismatch(f"weights shape {w.shape} != values shape {y.shape}")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    means: list[float] = []
    weights: list[float] = []
    counts: list[int] = []
    for yi, wi in zip(y.tolist(), w.tolist()):
        means.append(yi)
        weights.append(wi)
        counts.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            w_new = weights[-2] + weights[-1]
            m_new = (weights[-2] * means[-2] + weights[-1] * means[-1]) / w_new
            c_new = counts[-2] + counts[-1]
            del means[-1], weights[-1], counts[-1]
            means[-1], weights[-1], counts[-1] = m_new, w_new, c_new
    return np.repeat(np.asarray(means), counts)


# --------------------------------------------------------------------------
# scalar minimization

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section_min(g, lo: float, hi: float, tol: float = 1e-6) -> float:
    """Minimizer of a unimodal ``g`` on ``[lo, hi]`` to within ``tol``."""
    if not lo < hi:
        raise InvalidBracket(f"invalid bracket [{lo}, {hi}]")
    if tol <= 0:
        raise InvalidBracket("tol must be positive")
    a, b = float(lo), float(hi)
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    gc, gd = g(c), g(d)
    while (b - a) > 2.0 * tol:
        if gc <= gd:
            b, d, gd = d, c, gc
            c = b - _INVPHI * (b - a)
            gc = g(c)
        else:
            a, c, gc = c, d, gd
            d = a + _INVPHI * (b - a)
            gd = g(d)
    return 0.5 * (a + b)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update. Returns new parameter arrays; ``state`` is advanced in place."""
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out
