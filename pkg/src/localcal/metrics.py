"""Calibration and performance metrics.

Global metrics (class-wise ECE / ECCE) bin each class score separately.
Local metrics (LCE / MLCE) additionally smooth the signed residual
``p_hat - onehot(y)`` with a Gaussian kernel over feature space, restricted
to the anchor's own confidence bin.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .binning import ABS_DIFF, BinningScheme, assign_bins, generic_metric, top_label_bins
from .errors import NoRetainedBins
from .kernels import KernelConfig, iter_weight_blocks, nw_estimates

NLL_FLOOR = 1e-12
VARIANTS = ("classwise", "vector")


def _onehot(labels, C: int) -> np.ndarray:
    return np.eye(C)[np.asarray(labels, dtype=np.int64)]


def _default_scheme(scheme) -> BinningScheme:
    return BinningScheme(n_bins=15) if scheme is None else scheme


# --------------------------------------------------------------------------
# global metrics


def classwise_ece(probs, labels, scheme: BinningScheme | None = None, priors=None) -> float:
    stats = assign_bins(probs, labels, _default_scheme(scheme), priors)
    return generic_metric(stats, ABS_DIFF)


def classwise_ecce(probs, labels, scheme: BinningScheme | None = None, priors=None) -> float:
    """Cumulative class-wise calibration error.

    For class ``c`` and retained bins in increasing confidence order, the
    term of bin ``b`` is ``(|B_b|/N) * |sum_{i<=b} sum_{j in B_i} (1{y_j=c} - p_jc)| / S_b``
    with ``S_b`` the cumulative bin size and ``N`` the retained row count.
    """
    probs = np.asarray(probs, dtype=np.float64)
    stats = assign_bins(probs, labels, _default_scheme(scheme), priors)
    onehot = _onehot(labels, probs.shape[1])
    total = 0.0
    for c in range(stats.n_classes):
        gap = np.bincount(stats.bin_of[:, c], weights=onehot[:, c] - probs[:, c], minlength=stats.n_bins)
        keep = stats.retained[:, c]
        if not keep.any():
            continue
        sizes = stats.counts[keep, c]
        prefix_gap = np.cumsum(gap[keep])
        prefix_size = np.cumsum(sizes)
        total += stats.priors[c] * float(np.sum(sizes / sizes.sum() * np.abs(prefix_gap / prefix_size)))
    return total


def classwise_ecce_no_cancellation(probs, labels, scheme: BinningScheme | None = None, priors=None) -> float:
    """ECCE with the absolute value moved inside the prefix sum (upper bound on ECCE)."""
    probs = np.asarray(probs, dtype=np.float64)
    stats = assign_bins(probs, labels, _default_scheme(scheme), priors)
    onehot = _onehot(labels, probs.shape[1])
    total = 0.0
    for c in range(stats.n_classes):
        gap = np.bincount(stats.bin_of[:, c], weights=onehot[:, c] - probs[:, c], minlength=stats.n_bins)
        keep = stats.retained[:, c]
        if not keep.any():
            continue
        sizes = stats.counts[keep, c]
        prefix = np.cumsum(np.abs(gap[keep]))
        total += stats.priors[c] * float(np.sum(sizes / sizes.sum() * prefix / np.cumsum(sizes)))
    return total


# --------------------------------------------------------------------------
# local metrics


@dataclass(frozen=True, eq=False)
class LocalDeviations:
    """Per-anchor kernel-smoothed residuals.

    ``values[c]`` holds scalar deviations of class ``c`` anchors in classwise
    mode; in vector mode there is a single entry (key ``-1``) of per-anchor
    l1 norms.
    """

    variant: str
    values: dict
    anchors: dict
    n_classes: int
    skipped: int = 0


def local_deviations(
    probs,
    labels,
    features,
    scheme: BinningScheme | None = None,
    kernel: KernelConfig | None = None,
    variant: str = "classwise",
) -> LocalDeviations:
    probs = np.asarray(probs, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    n, C = probs.shape
    scheme = BinningScheme(n_bins=15, min_bin_size=20) if scheme is None else scheme
    kernel = KernelConfig() if kernel is None else kernel
    resid = probs - _onehot(labels, C)
    values: dict = {}
    anchors: dict = {}
    skipped = 0

    if variant == "classwise":
        stats = assign_bins(probs, labels, scheme)
        groups = [(c, [stats.members(b, c) for b in range(stats.n_bins) if stats.retained[b, c]]) for c in range(C)]
    elif variant == "vector":
        bins = top_label_bins(probs, scheme.n_bins)
        members = [np.flatnonzero(bins == b) for b in range(scheme.n_bins)]
        members = [m for m in members if m.size > 0 and m.size >= scheme.min_bin_size]
        groups = [(-1, members)]
    else:
        raise ValueError(f"unknown LCE variant {variant!r}; expected one of {VARIANTS}")

    for key, bin_members in groups:
        devs, idx = [], []
        for mem in bin_members:
            target = resid[mem, key] if key >= 0 else resid[mem]
            for pos, W, ok in iter_weight_blocks(kernel, features, pool=mem):
                smoothed = W @ target
                d = np.abs(smoothed) if key >= 0 else np.abs(smoothed).sum(axis=1)
                skipped += int((~ok).sum())
                devs.append(d[ok])
                idx.append(mem[pos[ok]])
        if devs:
            values[key] = np.concatenate(devs)
            anchors[key] = np.concatenate(idx)
    if skipped:
        warnings.warn(f"{skipped} anchors had no neighbors in their bin and were skipped", RuntimeWarning, stacklevel=2)
    if not any(v.size for v in values.values()):
        raise NoRetainedBins(f"no bin retained with min_bin_size={scheme.min_bin_size}")
    return LocalDeviations(variant, values, anchors, C, skipped)


def lce_from_deviations(dev: LocalDeviations, priors=None) -> float:
    if dev.variant == "vector":
        return float(np.mean(dev.values[-1])) / dev.n_classes
    priors = np.asarray(priors, dtype=np.float64)
    present = [c for c in range(dev.n_classes) if c in dev.values and dev.values[c].size]
    # classes without retained bins are dropped and the priors renormalized
    mass = float(sum(priors[c] for c in present))
    if mass == 0.0:
        return float(np.mean([dev.values[c].mean() for c in present]))
    return float(sum(priors[c] * dev.values[c].mean() for c in present) / mass)


def mlce_from_deviations(dev: LocalDeviations) -> float:
    return float(max(v.max() for v in dev.values.values() if v.size))


def lce(probs, labels, features, scheme=None, kernel=None, priors=None, variant: str = "classwise") -> float:
    probs = np.asarray(probs)
    if priors is None:
        priors = np.bincount(np.asarray(labels), minlength=probs.shape[1])[: probs.shape[1]] / probs.shape[0]
    return lce_from_deviations(local_deviations(probs, labels, features, scheme, kernel, variant), priors)


def mlce(probs, labels, features, scheme=None, kernel=None, variant: str = "classwise") -> float:
    return mlce_from_deviations(local_deviations(probs, labels, features, scheme, kernel, variant))


# --------------------------------------------------------------------------
# performance


def nll(probs, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    picked = probs[np.arange(labels.size), labels]
    return float(-np.mean(np.log(np.maximum(picked, NLL_FLOOR))))


def nll_from_logits(logits, labels) -> float:
    from .numerics import log_softmax

    lp = log_softmax(logits)
    labels = np.asarray(labels, dtype=np.int64)
    return float(-np.mean(lp[np.arange(labels.size), labels]))


def accuracy(probs, labels) -> float:
    # np.argmax returns the first maximal index: ties go to the lowest class
    return float(np.mean(np.argmax(np.asarray(probs), axis=1) == np.asarray(labels)))


def softmax_lipschitz(W=None) -> float:
    """Bound on the Lipschitz constant of ``softmax(W h + b)`` in ``h``.

    Returns the largest column l1 norm of ``W`` (shape ``C x d``), or 1 when
    the kernel operates on logits directly (``W is None``).
    """
    if W is None:
        return 1.0
    W = np.asarray(W, dtype=np.float64)
    return float(np.max(np.sum(np.abs(W), axis=0)))


@dataclass(frozen=True, eq=False)
class RhoCheck:
    rho: float
    lipschitz: float
    violations: int
    per_class: np.ndarray
    max_deviation: float
    checked: int

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "L": self.lipschitz,
            "violations": self.violations,
            "per_class": self.per_class.tolist(),
            "max_deviation": self.max_deviation,
            "checked_pairs": self.checked,
        }


def rho_check(probs, features, labels, kernel: KernelConfig | None = None, rho: float = 0.0, lipschitz: float = 1.0) -> RhoCheck:
    """Count (instance, class) pairs with ``|p_ic - theta_ic| > L * rho``."""
    probs = np.asarray(probs, dtype=np.float64)
    kernel = KernelConfig() if kernel is None else kernel
    theta, valid = nw_estimates(kernel, features, _onehot(labels, probs.shape[1]))
    dev = np.abs(probs[valid] - theta[valid])
    flagged = dev > lipschitz * rho
    return RhoCheck(
        float(rho),
        float(lipschitz),
        int(flagged.sum()),
        flagged.sum(axis=0),
        float(dev.max()) if dev.size else 0.0,
        int(dev.size),
    )


# --------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class MetricConfig:
    n_bins: int = 15
    min_bin_size: int = 20
    gamma: float = 10.0
    exclude_self: bool = True
    variant: str = "classwise"
    prior_source: str = "train"

    def fingerprint(self) -> str:
        vector_binning = ",vector_bins=top_label" if self.variant == "vector" else ""
        return (
            f"bins={self.n_bins};min_bin={self.min_bin_size};gamma={self.gamma:g};"
            f"exclude_self={str(self.exclude_self).lower()};priors={self.prior_source};"
            f"variant={self.variant}{vector_binning}"
        )

    def to_dict(self) -> dict:
        return {
            "bins": self.n_bins,
            "min_bin": self.min_bin_size,
            "gamma": self.gamma,
            "exclude_self": self.exclude_self,
            "variant": self.variant,
            "priors": self.prior_source,
            "fingerprint": self.fingerprint(),
        }


@dataclass
class MetricReport:
    values: dict
    config: MetricConfig
    per_class: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def to_dict(self, digits: int = 12) -> dict:
        out = {k: _round(v, digits) for k, v in self.values.items()}
        out["config"] = self.config.to_dict()
        if self.per_class:
            out["per_class"] = {k: [_round(x, digits) for x in v] for k, v in self.per_class.items()}
        return out

    def to_json(self, digits: int = 12) -> str:
        return json.dumps(self.to_dict(digits), indent=2, sort_keys=False) + "\n"


def _round(x, digits: int):
    x = float(x)
    if not math.isfinite(x):
        return None
    return float(f"{x:.{digits}g}")


def evaluate(probs, labels, features, priors, config: MetricConfig | None = None) -> MetricReport:
    """All six metrics on one prediction set."""
    config = MetricConfig() if config is None else config
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    priors = np.asarray(priors, dtype=np.float64)
    global_scheme = BinningScheme(n_bins=config.n_bins)
    local_scheme = BinningScheme(n_bins=config.n_bins, min_bin_size=config.min_bin_size)
    kernel = KernelConfig(gamma=config.gamma, exclude_self=config.exclude_self)
    dev = local_deviations(probs, labels, features, local_scheme, kernel, config.variant)
    values = {
        "ece": classwise_ece(probs, labels, global_scheme, priors),
        "ecce": classwise_ecce(probs, labels, global_scheme, priors),
        "lce": lce_from_deviations(dev, priors),
        "mlce": mlce_from_deviations(dev),
        "nll": nll(probs, labels),
        "acc": accuracy(probs, labels),
    }
    per_class = {}
    if config.variant == "classwise":
        per_class["lce"] = [float(dev.values[c].mean()) if c in dev.values else float("nan") for c in range(probs.shape[1])]
    per_class["ece"] = [
        classwise_ece(probs, labels, global_scheme, np.eye(probs.shape[1])[c]) for c in range(probs.shape[1])
    ]
    return MetricReport(values, config, per_class)
