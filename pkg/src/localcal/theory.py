"""Monte-Carlo harnesses for the calibration-error bounds.

Each harness builds predictors whose local error is known, evaluates the
metric, evaluates the bound and records whether the bound held.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np

from .binning import BinningScheme, assign_bins, generic_metric, theorem2_terms, top_label_bins
from .dataset import CalibrationDataset, SplitSpec, split_indices
from .errors import InvalidDelta, KTooLarge, NoRetainedBins
from .kernels import KernelConfig, iter_weight_blocks, l1_distances, nw_cross_estimates, sq_distances
from .numerics import softmax
from .synth import TOY_REGIONS, SynthSpec, default_benchmark, generate, inject_local_miscalibration


@dataclass
class BoundReport:
    name: str
    observed: float
    bound: float
    terms: dict
    delta: float
    meta: dict = field(default_factory=dict)

    @property
    def holds(self) -> bool:
        return self.observed <= self.bound

    def to_dict(self) -> dict:
        out = asdict(self)
        out["holds"] = self.holds
        return out

    def to_json_line(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return float(f"{x:.12g}") if math.isfinite(x) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, Fraction):
        return str(obj)
    return obj


def write_json_lines(reports, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(r.to_json_line() + "\n")


def _check_delta(delta: float) -> None:
    if not 0 < delta <= 1:
        raise InvalidDelta(f"delta must lie in (0, 1], got {delta}")


# --------------------------------------------------------------------------
# binned metrics


def verify_theorem2(
    trials: int,
    n: int,
    m_B: int,
    eps: float,
    delta: float,
    seed: int = 0,
    base: SynthSpec | None = None,
    mode: str = "classwise_equal_width",
    psi: str | None = None,
) -> list[BoundReport]:
    """Class-wise ECE of ``eps``-perturbed true conditionals versus the binned bound.

    The bound uses the realized per-row perturbation (its maximum), which
    never exceeds the nominal ``eps``.
    """
    _check_delta(delta)
    base = default_benchmark() if base is None else base
    scheme = BinningScheme(mode, m_B)
    reports = []
    for t in range(trials):
        spec = replace(base, n=n, seed=seed * 100003 + t)
        d, p_true = generate(spec)
        noisy, realized = inject_local_miscalibration(d, p_true, eps, seed=spec.seed)
        probs = softmax(noisy.logits)
        stats = assign_bins(probs, d.labels, scheme, d.label_priors())
        observed = generic_metric(stats)
        eps_real = float(realized.max()) if realized.size else 0.0
        terms = theorem2_terms(stats, eps_real, delta, 1.0, psi)
        reports.append(
            BoundReport(
                "thm2",
                observed,
                terms["bound"],
                {k: v for k, v in terms.items() if k != "bound"},
                delta,
                {"seed": spec.seed, "n": n, "C": d.C, "m_B": m_B, "eps": eps, "eps_realized": eps_real},
            )
        )
    return reports


def corollary1_trend(eps_values, trials: int, n: int, m_B: int, delta: float, seed: int = 0, base=None) -> list[dict]:
    """Mean observed metric and mean bound as the injected local error shrinks."""
    rows = []
    for eps in eps_values:
        reps = verify_theorem2(trials, n, m_B, eps, delta, seed, base)
        rows.append(
            {
                "eps": eps,
                "observed_mean": float(np.mean([r.observed for r in reps])),
                "bound_mean": float(np.mean([r.bound for r in reps])),
                "stochastic_mean": float(np.mean([r.terms["stochastic_term"] for r in reps])),
                "hold_rate": float(np.mean([r.holds for r in reps])),
            }
        )
    return rows


# --------------------------------------------------------------------------
# kernel metric


@dataclass(frozen=True, eq=False)
class LceTerms:
    lce: float
    variance: float
    bias: float
    eps_self: float
    n_anchors: int


def lce_bound_terms(
    probs,
    labels,
    rep,
    gamma: float,
    delta: float,
    n_bins: int = 15,
    min_bin_size: int = 20,
    exclude_self: bool = True,
) -> LceTerms:
    """Vector LCE on top-label bins with its variance and empirical bias terms.

    ``rep`` is the representation the kernel runs on. All sums run over the
    anchors of retained bins; ``n`` in the log factor is their count.
    """
    _check_delta(delta)
    probs = np.asarray(probs, dtype=np.float64)
    rep = np.asarray(rep, dtype=np.float64)
    n, C = probs.shape
    onehot = np.eye(C)[np.asarray(labels)]
    resid = probs - onehot
    kernel = KernelConfig(gamma=gamma, exclude_self=exclude_self)
    bins = top_label_bins(probs, n_bins)
    dev, n_eff, radius, self_err = [], [], [], []
    for b in range(n_bins):
        mem = np.flatnonzero(bins == b)
        if mem.size == 0 or mem.size < min_bin_size:
            continue
        R = rep[mem]
        for pos, W, ok in iter_weight_blocks(kernel, rep, pool=mem):
            W, pos = W[ok], pos[ok]
            dev.append(np.abs(W @ resid[mem]).sum(axis=1))
            n_eff.append(1.0 / np.sum(W**2, axis=1))
            radius.append(np.sum(W * l1_distances(R[pos], R), axis=1))
            self_err.append(np.abs(probs[mem[pos]] - W @ onehot[mem]).sum(axis=1))
    if not dev:
        raise NoRetainedBins(f"no top-label bin has at least {min_bin_size} members")
    dev, n_eff, radius, self_err = (np.concatenate(a) for a in (dev, n_eff, radius, self_err))
    m = dev.size
    variance = float(np.mean(np.sqrt(2.0 * math.log(m / delta) / n_eff)))
    return LceTerms(float(dev.mean()) / C, variance, float(radius.mean()), float(self_err.mean()), m)


def estimate_eps(probs, labels, rep, gamma: float, mode: str = "two_split", seed: int = 0):
    """Local-error estimate ``max_i ||p_i - theta_i||_1``.

    ``two_split`` holds out half of the rows as an independent reference for
    the kernel estimate and returns ``(eps, eval_rows)``; ``self`` uses every
    row for both and returns all rows.
    """
    probs = np.asarray(probs, dtype=np.float64)
    rep = np.asarray(rep, dtype=np.float64)
    n, C = probs.shape
    onehot = np.eye(C)[np.asarray(labels)]
    if mode == "self":
        from .kernels import nw_estimates

        theta, valid = nw_estimates(KernelConfig(gamma=gamma), rep, onehot)
        return float(np.abs(probs[valid] - theta[valid]).sum(axis=1).max()), np.arange(n)
    if mode != "two_split":
        raise ValueError(f"unknown eps estimation mode {mode!r}")
    ev, ref = split_indices(n, SplitSpec((("eval", 0.5), ("reference", 0.5)), seed))
    theta = nw_cross_estimates(KernelConfig(gamma=gamma), rep[ev], rep[ref], onehot[ref])
    return float(np.abs(probs[ev] - theta).sum(axis=1).max()), ev


def verify_theorem3(
    d: CalibrationDataset,
    probs,
    eps_hat: float | None = None,
    gamma: float = 10.0,
    delta: float = 0.05,
    representation: str = "logits",
    lipschitz: float | None = None,
    eps_mode: str = "two_split",
    priors=None,
    seed: int = 0,
    n_bins: int = 15,
    min_bin_size: int = 20,
) -> BoundReport:
    """Observed vector LCE against ``k [eps + variance + L * bias]``.

    With ``representation="logits"`` the kernel runs on the logits, where the
    softmax is 1-Lipschitz in l1; with ``"features"`` the caller supplies
    ``lipschitz`` (default 1). ``k`` is the largest class prior.
    """
    _check_delta(delta)
    probs = np.asarray(probs, dtype=np.float64)
    if representation == "logits":
        rep, L = d.logits, 1.0 if lipschitz is None else lipschitz
    elif representation == "features":
        rep, L = d.features, 1.0 if lipschitz is None else lipschitz
    else:
        raise ValueError(f"unknown representation {representation!r}")
    rows = np.arange(d.n)
    if eps_hat is None:
        eps_hat, rows = estimate_eps(probs, d.labels, rep, gamma, eps_mode, seed)
    t = lce_bound_terms(probs[rows], d.labels[rows], rep[rows], gamma, delta, n_bins, min_bin_size)
    priors = d.label_priors() if priors is None else np.asarray(priors)
    k = float(np.max(priors))
    bound = k * (eps_hat + t.variance + L * t.bias)
    return BoundReport(
        "thm3",
        t.lce,
        bound,
        {
            "k": k,
            "eps_term": k * eps_hat,
            "variance_term": k * t.variance,
            "empirical_bias_term": k * L * t.bias,
            "variance_raw": t.variance,
            "bias_raw": t.bias,
            "eps_self": t.eps_self,
        },
        delta,
        {"n": t.n_anchors, "C": d.C, "m_B": n_bins, "gamma": gamma, "representation": representation, "eps_mode": eps_mode},
    )


def gamma_sweep(d: CalibrationDataset, probs, gammas, delta: float = 0.05, representation: str = "logits") -> list[dict]:
    """Variance and bias terms of the kernel bound across bandwidths on a fixed dataset."""
    rep = d.logits if representation == "logits" else d.features
    rows = []
    for g in gammas:
        t = lce_bound_terms(probs, d.labels, rep, g, delta)
        rows.append({"gamma": g, "lce": t.lce, "variance": t.variance, "bias": t.bias})
    return rows


# --------------------------------------------------------------------------
# proximity


def proximity_scores(features, k: int) -> np.ndarray:
    """Mean Euclidean distance to the ``k`` nearest other rows."""
    X = np.asarray(features, dtype=np.float64)
    n = X.shape[0]
    if k < 1 or k >= n:
        raise KTooLarge(f"k={k} needs 1 <= k < n={n}")
    out = np.empty(n)
    block = max(1, 4_000_000 // n)
    for start in range(0, n, block):
        rows = np.arange(start, min(n, start + block))
        dist = np.sqrt(sq_distances(X[rows], X))
        dist[np.arange(rows.size), rows] = np.inf
        nearest = np.partition(dist, k - 1, axis=1)[:, :k]
        out[rows] = np.sort(nearest, axis=1).mean(axis=1)
    return out


@dataclass
class SubBinPair:
    bin: int
    size_dense: int
    size_sparse: int
    freq_gap: float
    conf_gap: float
    hoeffding: float
    eps_term: float

    @property
    def bound(self) -> float:
        return self.eps_term + self.hoeffding + self.conf_gap

    @property
    def holds(self) -> bool:
        return self.freq_gap <= self.bound


@dataclass
class ProximityReport:
    k: int
    delta: float
    eps: float
    scores: np.ndarray
    pairs: list
    skipped_bins: int

    @property
    def violations(self) -> int:
        return sum(not p.holds for p in self.pairs)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "delta": self.delta,
            "eps": self.eps,
            "skipped_bins": self.skipped_bins,
            "violations": self.violations,
            "pairs": [dict(asdict(p), bound=p.bound, holds=p.holds) for p in self.pairs],
        }

    def to_json_line(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True)


def global_eps(probs, labels, n_bins: int = 15) -> float:
    """Binned l1 gap ``sum_b |B_b|/n ||freq_b - conf_b||_1`` on top-label bins: blind to within-bin structure."""
    probs = np.asarray(probs, dtype=np.float64)
    C = probs.shape[1]
    onehot = np.eye(C)[np.asarray(labels)]
    bins = top_label_bins(probs, n_bins)
    total = 0.0
    for b in np.unique(bins):
        mem = bins == b
        total += mem.sum() * np.abs(onehot[mem].mean(axis=0) - probs[mem].mean(axis=0)).sum()
    return float(total / probs.shape[0])


def verify_theorem5(
    d: CalibrationDataset,
    probs,
    eps_hat: float,
    k: int = 10,
    delta: float = 0.05,
    n_bins: int = 15,
    min_half: int = 10,
    representation=None,
) -> ProximityReport:
    """Split every top-label confidence bin at its median proximity score and test the sub-bin bound."""
    _check_delta(delta)
    probs = np.asarray(probs, dtype=np.float64)
    rep = d.features if representation is None else np.asarray(representation, dtype=np.float64)
    C = d.C
    onehot = np.eye(C)[d.labels]
    scores = proximity_scores(rep, k)
    bins = top_label_bins(probs, n_bins)
    pairs, skipped = [], 0
    for b in range(n_bins):
        mem = np.flatnonzero(bins == b)
        if mem.size == 0:
            continue
        half = mem.size // 2
        if half < min_half:
            skipped += 1
            continue
        order = mem[np.lexsort((mem, scores[mem]))]
        s1, s2 = order[:half], order[half:]
        freq_gap = float(np.abs(onehot[s1].mean(axis=0) - onehot[s2].mean(axis=0)).sum())
        conf_gap = float(np.abs(probs[s1].mean(axis=0) - probs[s2].mean(axis=0)).sum())
        hoeff = math.sqrt(2.0 * math.log(4.0 * C / delta) / min(s1.size, s2.size))
        pairs.append(SubBinPair(b, int(s1.size), int(s2.size), freq_gap, conf_gap, hoeff, 2.0 * eps_hat))
    return ProximityReport(k, delta, eps_hat, scores, pairs, skipped)


# --------------------------------------------------------------------------
# six-region example


def toy_example(sizes: dict | None = None) -> dict:
    """Recalibrate the six-region example conditionally on (density, confidence), exactly.

    Regions sharing a (density, prediction) cell are indistinguishable to the
    recalibrator, which can only assign them their pooled frequency.
    """
    sizes = {k: 1 for k in TOY_REGIONS} if sizes is None else dict(sizes)
    cells: dict = {}
    for name, (density, p, freq) in TOY_REGIONS.items():
        size = Fraction(sizes.get(name, 0))
        if size < 0:
            raise ValueError(f"region {name} has negative size")
        cells.setdefault((density, p), []).append((name, size, freq))
    regions, groups = {}, []
    for (density, p), members in cells.items():
        total = sum(s for _, s, _ in members)
        if total == 0:
            continue
        p_cal = sum(s * f for _, s, f in members) / total
        groups.append({"density": density, "p": p, "regions": [m[0] for m in members], "p_cal": p_cal})
        for name, size, freq in members:
            if size > 0:
                regions[name] = {"size": size, "p": p, "freq": freq, "p_cal": p_cal, "residual": p_cal - freq}
    return {"groups": groups, "regions": regions}


def toy_report_lines(report: dict) -> list[str]:
    lines = []
    for g in report["groups"]:
        if len(g["regions"]) > 1:
            lines.append(f"p_cal[{'+'.join(g['regions'])}] = {g['p_cal']} = {float(g['p_cal']):.12g}")
    for name, r in sorted(report["regions"].items()):
        lines.append(f"region {name}: freq={float(r['freq']):.12g} p_cal={float(r['p_cal']):.12g} residual={float(r['residual']):+.12g}")
    return lines
