"""Post-hoc calibration baselines sharing one fit/apply contract.

Every calibrator maps a dataset's logits to a probability matrix and
serializes to ``{"method", "params", "C", "fingerprint"}`` JSON.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import CalibrationDataset
from .errors import ClassCountMismatch, DegenerateClass, SpecInvalid
from .metrics import nll_from_logits
from .numerics import AdamState, adam_step, golden_section_min, log_softmax, make_rng, pav_isotonic, softmax

PROB_FLOOR = 1e-12
T_BRACKET = (0.05, 20.0)


@dataclass(frozen=True)
class FitConfig:
    val_frac: float = 0.1
    lr: float = 1e-2
    max_steps: int = 2000
    platt_steps: int = 500
    patience: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_frac < 1.0:
            raise SpecInvalid(f"validation fraction must lie in (0, 1), got {self.val_frac}")


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _f17(a):
    return [float(f"{x:.17g}") for x in np.ravel(a)]


class Calibrator:
    method: str = ""
    n_classes: int = 0

    def apply_logits(self, logits) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> dict:
        raise NotImplementedError

    def to_dict(self) -> dict:
        params = self.params()
        return {
            "method": self.method,
            "params": params,
            "C": self.n_classes,
            "fingerprint": f"{self.method}:{_digest(params)}",
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


@dataclass(eq=False)
class Temperature(Calibrator):
    T: float
    n_classes: int
    method: str = field(default="ts", init=False)

    def __post_init__(self):
        if not self.T > 0:
            raise SpecInvalid(f"temperature must be positive, got {self.T}")

    def apply_logits(self, logits):
        return softmax(np.asarray(logits, dtype=np.float64) / self.T)

    def params(self):
        return {"T": float(f"{self.T:.17g}")}


@dataclass(eq=False)
class Platt(Calibrator):
    a: np.ndarray
    b: np.ndarray
    n_classes: int
    method: str = field(default="platt", init=False)

    def scores(self, logits):
        z = np.asarray(logits, dtype=np.float64)
        return 1.0 / (1.0 + np.exp(-(self.a * z + self.b)))

    def apply_logits(self, logits):
        s = self.scores(logits)
        return s / s.sum(axis=1, keepdims=True)

    def params(self):
        return {"a": _f17(self.a), "b": _f17(self.b), "variant": "one_vs_rest_sigmoid_renormalized"}


@dataclass(eq=False)
class Isotonic(Calibrator):
    knots: list  # per class, increasing scores
    values: list  # per class, nondecreasing fitted values in [0, 1]
    n_classes: int
    method: str = field(default="isotonic", init=False)
    uniform_rows: int = field(default=0, init=False)

    def class_map(self, c: int, scores) -> np.ndarray:
        k, v = self.knots[c], self.values[c]
        # right-continuous step function; constant beyond both ends
        idx = np.searchsorted(k, scores, side="right") - 1
        return v[np.clip(idx, 0, len(v) - 1)]

    def apply_logits(self, logits):
        return self.apply_probs(softmax(logits))

    def apply_probs(self, probs):
        probs = np.asarray(probs, dtype=np.float64)
        out = np.stack([self.class_map(c, probs[:, c]) for c in range(self.n_classes)], axis=1)
        s = out.sum(axis=1, keepdims=True)
        zero = s[:, 0] <= 0
        self.uniform_rows = int(zero.sum())
        out[zero] = 1.0 / self.n_classes
        s[zero] = 1.0
        return out / s

    def params(self):
        return {"knots": [_f17(k) for k in self.knots], "values": [_f17(v) for v in self.values]}


@dataclass(eq=False)
class Dirichlet(Calibrator):
    W: np.ndarray
    b: np.ndarray
    n_classes: int
    method: str = field(default="dirichlet", init=False)
    history: dict = field(default_factory=dict, init=False)

    def __post_init__(self):
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise SpecInvalid("Dirichlet parameters must be finite")

    def apply_logits(self, logits):
        return self.apply_probs(softmax(logits))

    def apply_probs(self, probs):
        lp = np.log(np.clip(np.asarray(probs, dtype=np.float64), PROB_FLOOR, None))
        return softmax(lp @ self.W.T + self.b)

    def params(self):
        return {"W": _f17(self.W), "b": _f17(self.b), "input": "log_probs"}


# --------------------------------------------------------------------------
# fitting


def fit_temperature(cal: CalibrationDataset, cfg: FitConfig | None = None) -> Temperature:
    """Minimize NLL of ``softmax(z / T)`` over ``T`` in ``[0.05, 20]``.

    A coarse log-spaced scan picks the bracket around the best grid point;
    golden section refines it. ``T = 1`` wins ties against the search result.
    """
    z, y = cal.logits, cal.labels

    def g(T):
        return nll_from_logits(z / T, y)

    lo, hi = T_BRACKET
    grid = np.geomspace(lo, hi, 50)
    vals = np.array([g(t) for t in grid])
    best = int(np.argmin(vals))
    a = grid[max(best - 1, 0)]
    b = grid[min(best + 1, grid.size - 1)]
    T = golden_section_min(g, a, b, tol=1e-5)
    if g(1.0) < g(T):
        T = 1.0
    return Temperature(float(T), cal.C)


def _check_classes(cal: CalibrationDataset, method: str) -> np.ndarray:
    counts = np.bincount(cal.labels, minlength=cal.C)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        warnings.warn(
            f"{method}: classes {missing.tolist()} absent from the calibration split; using identity parameters",
            DegenerateClass,
            stacklevel=3,
        )
    return counts > 0


def fit_platt(cal: CalibrationDataset, cfg: FitConfig | None = None) -> Platt:
    """One-vs-rest ``sigmoid(a_c z_c + b_c)`` per class, fitted by Adam on the binary NLL."""
    cfg = FitConfig() if cfg is None else cfg
    present = _check_classes(cal, "platt")
    z = cal.logits
    Y = np.eye(cal.C)[cal.labels]
    params = {"a": np.ones(cal.C), "b": np.zeros(cal.C)}
    state = AdamState(lr=cfg.lr)
    n = z.shape[0]
    for _ in range(cfg.platt_steps):
        s = 1.0 / (1.0 + np.exp(-(params["a"] * z + params["b"])))
        r = (s - Y) / n
        grads = {"a": (r * z).sum(axis=0), "b": r.sum(axis=0)}
        params = adam_step(state, params, grads)
    a = np.where(present, params["a"], 1.0)
    b = np.where(present, params["b"], 0.0)
    return Platt(a, b, cal.C)


def _isotonic_fit_1d(scores, targets) -> tuple[np.ndarray, np.ndarray]:
    knots, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    means = np.bincount(inverse, weights=targets) / counts
    return knots, np.clip(pav_isotonic(means, counts.astype(np.float64)), 0.0, 1.0)


def fit_isotonic(cal: CalibrationDataset, cfg: FitConfig | None = None) -> Isotonic:
    present = _check_classes(cal, "isotonic")
    probs = softmax(cal.logits)
    knots, values = [], []
    for c in range(cal.C):
        if not present[c]:
            knots.append(np.array([0.0, 1.0]))
            values.append(np.array([0.0, 1.0]))
            continue
        k, v = _isotonic_fit_1d(probs[:, c], (cal.labels == c).astype(np.float64))
        knots.append(k)
        values.append(v)
    return Isotonic(knots, values, cal.C)


def _dirichlet_nll(W, b, L, Y) -> float:
    lq = log_softmax(L @ W.T + b)
    return float(-np.mean(np.sum(Y * lq, axis=1)))


def fit_dirichlet(cal: CalibrationDataset, cfg: FitConfig | None = None) -> Dirichlet:
    """Fit ``softmax(W log p + b)`` with Adam, early-stopped on an internal validation split.

    Starts from the identity map and returns the parameters with the lowest
    validation NLL seen (the initialization included).
    """
    cfg = FitConfig() if cfg is None else cfg
    C, n = cal.C, cal.n
    perm = make_rng(cfg.seed, "dirichlet", "val").permutation(n)
    n_val = min(max(1, int(round(cfg.val_frac * n))), n - 1)
    val, tr = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    L = np.log(np.clip(softmax(cal.logits), PROB_FLOOR, None))
    Y = np.eye(C)[cal.labels]
    Ltr, Ytr, Lva, Yva = L[tr], Y[tr], L[val], Y[val]

    params = {"W": np.eye(C), "b": np.zeros(C)}
    state = AdamState(lr=cfg.lr)
    best = (_dirichlet_nll(params["W"], params["b"], Lva, Yva), params, 0)
    init_val = best[0]
    since = 0
    for step in range(1, cfg.max_steps + 1):
        q = softmax(Ltr @ params["W"].T + params["b"])
        r = (q - Ytr) / Ltr.shape[0]
        params = adam_step(state, params, {"W": r.T @ Ltr, "b": r.sum(axis=0)})
        v = _dirichlet_nll(params["W"], params["b"], Lva, Yva)
        if v < best[0]:
            best, since = (v, params, step), 0
        else:
            since += 1
            if since >= cfg.patience:
                break
    out = Dirichlet(best[1]["W"].copy(), best[1]["b"].copy(), C)
    out.history = {"init_val_nll": init_val, "best_val_nll": best[0], "best_step": best[2]}
    return out


FITTERS = {"ts": fit_temperature, "platt": fit_platt, "isotonic": fit_isotonic, "dirichlet": fit_dirichlet}


def fit(method: str, cal: CalibrationDataset, cfg: FitConfig | None = None) -> Calibrator:
    try:
        fitter = FITTERS[method]
    except KeyError:
        raise SpecInvalid(f"unknown calibration method {method!r}; expected one of {sorted(FITTERS)}") from None
    return fitter(cal, cfg)


def apply(cal: Calibrator, d: CalibrationDataset) -> np.ndarray:
    if d.C != cal.n_classes:
        raise ClassCountMismatch(f"calibrator fitted for {cal.n_classes} classes, dataset has {d.C}")
    return cal.apply_logits(d.logits)


def calibrator_from_dict(obj: dict) -> Calibrator:
    method, p, C = obj["method"], obj["params"], int(obj["C"])
    if method == "ts":
        return Temperature(float(p["T"]), C)
    if method == "platt":
        return Platt(np.asarray(p["a"]), np.asarray(p["b"]), C)
    if method == "isotonic":
        return Isotonic([np.asarray(k) for k in p["knots"]], [np.asarray(v) for v in p["values"]], C)
    if method == "dirichlet":
        return Dirichlet(np.asarray(p["W"]).reshape(C, C), np.asarray(p["b"]), C)
    raise SpecInvalid(f"unknown calibrator method {method!r}")
