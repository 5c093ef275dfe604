"""Synthetic generators with an exactly known conditional p(y | x).

Generators:

``gaussian_mixture``
    isotropic Gaussian classes; logits are the exact log-posterior, so the
    predictor is perfectly calibrated.
``temperature_corrupted``
    same mixture, logits ``T * log p(y|x)`` plus an optional
    location-dependent distortion ``beta * sin(<u_c, x>/sigma + phase_c)``
    that no function of the logits alone can undo.
``toy_regions``
    the six-region binary example (sizes per region, constant predictions).
``proximity_biased``
    a dense cluster plus a sparse cloud sharing one prediction vector; the
    dense labels are shifted one way and the sparse labels the other, so the
    predictor is calibrated on average but not locally.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .dataset import CalibrationDataset
from .errors import EpsilonTooLarge, SpecInvalid
from .numerics import log_softmax, make_rng, softmax

GENERATORS = ("gaussian_mixture", "temperature_corrupted", "toy_regions", "proximity_biased")

# name -> (density, predicted probability, empirical frequency) of the positive class
TOY_REGIONS = {
    "A": (Fraction("0.35"), Fraction("0.9"), Fraction("0.95")),
    "B": (Fraction("0.075"), Fraction("0.6"), Fraction("0.55")),
    "C": (Fraction("0.075"), Fraction("0.6"), Fraction("0.65")),
    "D": (Fraction("0.075"), Fraction("0.4"), Fraction("0.35")),
    "E": (Fraction("0.075"), Fraction("0.4"), Fraction("0.45")),
    "F": (Fraction("0.35"), Fraction("0.1"), Fraction("0.05")),
}
_TOY_CENTERS = {name: (np.cos(k * np.pi / 3), np.sin(k * np.pi / 3)) for k, name in enumerate(TOY_REGIONS)}


@dataclass(frozen=True)
class SynthSpec:
    generator: str = "gaussian_mixture"
    n: int = 20000
    seed: int = 0
    n_classes: int = 4
    dim: int = 8
    sigma: float = 10.0
    separation: float = 2.15  # class-mean distance from the origin, in units of sigma
    priors: tuple | None = None
    t_corrupt: float = 1.0
    distortion: float = 0.0
    model_seed: int = 0  # fixes means / distortion directions independently of the sample seed
    feature_noise: float = 0.0  # extra isotropic noise on the exported features only
    region_sizes: tuple = (("A", 200), ("B", 200), ("C", 200), ("D", 200), ("E", 200), ("F", 200))
    prediction: float = 0.6
    shift: float = 0.12
    sparse_fraction: float = 0.5

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise SpecInvalid(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")
        if self.n < 1:
            raise SpecInvalid("n must be positive")
        if self.n_classes < 2:
            raise SpecInvalid("need at least two classes")
        if not self.sigma > 0:
            raise SpecInvalid("sigma must be positive")
        if not self.separation > 0:
            raise SpecInvalid("class means must be distinct (separation > 0)")
        if self.priors is not None:
            p = np.asarray(self.priors, dtype=np.float64)
            if p.shape != (self.n_classes,) or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
                raise SpecInvalid("priors must lie on the simplex with one entry per class")
        if self.t_corrupt <= 0:
            raise SpecInvalid("t_corrupt must be positive")
        if self.generator == "toy_regions":
            sizes = dict(self.region_sizes)
            if set(sizes) != set(TOY_REGIONS) or any(int(v) <= 0 for v in sizes.values()):
                raise SpecInvalid("toy_regions needs positive sizes for regions A..F")

    def class_priors(self) -> np.ndarray:
        if self.priors is None:
            return np.full(self.n_classes, 1.0 / self.n_classes)
        return np.asarray(self.priors, dtype=np.float64)

    def means(self) -> np.ndarray:
        C, m = self.n_classes, self.dim
        if C <= m:
            mu = np.zeros((C, m))
            mu[np.arange(C), np.arange(C)] = 1.0
        else:
            g = make_rng(self.model_seed, "means").normal(size=(C, m))
            mu = g / np.linalg.norm(g, axis=1, keepdims=True)
        return mu * self.separation * self.sigma


def default_benchmark(seed: int = 0, n: int = 20000) -> SynthSpec:
    """Desk-scale benchmark: C=4, m=8, Bayes accuracy about 0.85, locally distorted overconfident logits."""
    return SynthSpec(
        generator="temperature_corrupted",
        n=n,
        seed=seed,
        n_classes=4,
        dim=8,
        sigma=10.0,
        separation=2.15,
        t_corrupt=2.0,
        distortion=1.5,
    )


def mixture_log_posterior(spec: SynthSpec, X) -> np.ndarray:
    mu = spec.means()
    X = np.asarray(X, dtype=np.float64)
    sq = ((X[:, None, :] - mu[None, :, :]) ** 2).sum(axis=2)
    return log_softmax(np.log(spec.class_priors())[None, :] - sq / (2.0 * spec.sigma**2))


def _distortion(spec: SynthSpec, X) -> np.ndarray:
    rng = make_rng(spec.model_seed, "distortion")
    U = rng.normal(size=(spec.n_classes, spec.dim))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    phase = rng.uniform(0.0, 2 * np.pi, size=spec.n_classes)
    return spec.distortion * np.sin(X @ U.T / spec.sigma + phase)


def generate(spec: SynthSpec) -> tuple[CalibrationDataset, np.ndarray]:
    """Sample a dataset and return it with the exact conditionals ``p(y | x_i)``."""
    if spec.generator == "toy_regions":
        return _toy_regions(spec)
    if spec.generator == "proximity_biased":
        return _proximity_biased(spec)
    rng = make_rng(spec.seed, "sample", spec.generator)
    priors = spec.class_priors()
    y = rng.choice(spec.n_classes, size=spec.n, p=priors)
    X = spec.means()[y] + spec.sigma * rng.normal(size=(spec.n, spec.dim))
    logp = mixture_log_posterior(spec, X)
    p_true = np.exp(logp)
    if spec.generator == "gaussian_mixture":
        logits = logp
    else:
        logits = spec.t_corrupt * logp
        if spec.distortion:
            logits = logits + _distortion(spec, X)
    logits = logits - logits.max(axis=1, keepdims=True)
    feats = X
    if spec.feature_noise:
        feats = X + spec.feature_noise * make_rng(spec.seed, "feature_noise").normal(size=X.shape)
    return CalibrationDataset(feats, logits, y), p_true


def _toy_regions(spec: SynthSpec) -> tuple[CalibrationDataset, np.ndarray]:
    sizes = {k: int(v) for k, v in spec.region_sizes}
    feats, probs, labels, truth = [], [], [], []
    rng = make_rng(spec.seed, "toy")
    for name, (_, p, freq) in TOY_REGIONS.items():
        size = sizes[name]
        positives = int(round(float(freq) * size))
        lab = np.zeros(size, dtype=np.int64)
        lab[:positives] = 1
        rng.shuffle(lab)
        feats.append(np.tile(_TOY_CENTERS[name], (size, 1)))
        probs.append(np.tile([1 - float(p), float(p)], (size, 1)))
        truth.append(np.tile([1 - float(freq), float(freq)], (size, 1)))
        labels.append(lab)
    probs = np.concatenate(probs)
    ds = CalibrationDataset(np.concatenate(feats), np.log(probs), np.concatenate(labels))
    return ds, np.concatenate(truth)


def toy_region_ids(d: CalibrationDataset) -> np.ndarray:
    """Region letter of every row of a ``toy_regions`` dataset."""
    names = list(TOY_REGIONS)
    centers = np.asarray([_TOY_CENTERS[k] for k in names])
    dist = ((d.features[:, None, :2] - centers[None]) ** 2).sum(axis=2)
    return np.asarray(names)[np.argmin(dist, axis=1)]


def _proximity_biased(spec: SynthSpec) -> tuple[CalibrationDataset, np.ndarray]:
    rng = make_rng(spec.seed, "proximity")
    C = spec.n_classes
    n_sparse = int(round(spec.sparse_fraction * spec.n))
    n_dense = spec.n - n_sparse
    pred = np.full(C, (1.0 - spec.prediction) / (C - 1))
    pred[0] = spec.prediction
    delta = np.zeros(C)
    delta[0], delta[1] = spec.shift, -spec.shift
    dense_p, sparse_p = pred + delta, pred - delta
    if dense_p.min() < 0 or sparse_p.min() < 0:
        raise SpecInvalid("shift pushes a region's class distribution off the simplex")
    X = np.concatenate(
        [
            0.05 * spec.sigma * rng.normal(size=(n_dense, spec.dim)),
            2.0 * spec.sigma * rng.normal(size=(n_sparse, spec.dim)),
        ]
    )
    truth = np.concatenate([np.tile(dense_p, (n_dense, 1)), np.tile(sparse_p, (n_sparse, 1))])
    cum = np.cumsum(truth, axis=1)
    y = np.minimum((rng.random(spec.n)[:, None] > cum).sum(axis=1), C - 1)
    logits = np.tile(np.log(pred), (spec.n, 1))
    return CalibrationDataset(X, logits, y), truth


# --------------------------------------------------------------------------
# perturbation


def inject_local_miscalibration(
    d: CalibrationDataset, true_conditionals, eps: float, mode: str = "uniform_l1", seed: int = 0
) -> tuple[CalibrationDataset, np.ndarray]:
    """Perturb ``p_true`` by at most ``eps`` in l1 per row.

    The perturbation direction sums to zero, so rows stay normalized; it is
    shortened where a full step would leave the simplex. Returns the new
    dataset (logits ``log p_hat``) and the realized per-row l1 error.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if eps > 2.0:
        raise EpsilonTooLarge(f"l1 distance between distributions is at most 2, got eps={eps} (max feasible 2)")
    p = np.asarray(true_conditionals, dtype=np.float64)
    n, C = p.shape
    rng = make_rng(seed, "inject", mode)
    if mode == "uniform_l1":
        g = rng.normal(size=(n, C))
        g -= g.mean(axis=1, keepdims=True)
        direction = g / np.abs(g).sum(axis=1, keepdims=True)
    elif mode == "per_class":
        a = int(rng.integers(C))
        direction = np.zeros((n, C))
        direction[:, a] = 0.5
        direction[:, (a + 1) % C] = -0.5
    else:
        raise ValueError(f"unknown perturbation mode {mode!r}")
    step = eps * direction
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        room = np.where(step < 0, p / -step, np.inf).min(axis=1)
    # stop just short of the boundary so every entry stays strictly positive
    t = np.minimum(1.0, room * (1.0 - 1e-9))
    p_hat = p + t[:, None] * step
    p_hat = np.maximum(p_hat, 0.0)
    p_hat /= p_hat.sum(axis=1, keepdims=True)
    realized = np.abs(p_hat - p).sum(axis=1)
    logits = np.log(np.maximum(p_hat, 1e-300))
    logits -= logits.max(axis=1, keepdims=True)
    return CalibrationDataset(d.features, logits, d.labels, d.priors), realized


# --------------------------------------------------------------------------
# config files


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(SynthSpec)}
    t = types[name]
    if name == "priors":
        return tuple(float(v) for v in raw.split(","))
    if name == "region_sizes":
        pairs = [item.split("=") for item in raw.split(",")]
        return tuple((k.strip(), int(v)) for k, v in pairs)
    if "int" in str(t):
        return int(raw)
    if "float" in str(t):
        return float(raw)
    return raw.strip()


def load_synth_spec(path, **overrides) -> SynthSpec:
    """Read a ``[synth]`` section from an INI-style key = value file."""
    parser = configparser.ConfigParser()
    text = Path(path).read_text(encoding="utf-8")
    if not text.lstrip().startswith("["):
        text = "[synth]\n" + text
    parser.read_string(text)
    if "synth" not in parser:
        raise SpecInvalid(f"{path}: missing [synth] section")
    known = {f.name for f in fields(SynthSpec)}
    kwargs = {}
    for key, raw in parser["synth"].items():
        if key not in known:
            raise SpecInvalid(f"{path}: unknown key {key!r}")
        try:
            kwargs[key] = _coerce(key, raw)
        except ValueError as exc:
            raise SpecInvalid(f"{path}: bad value for {key!r}: {exc}") from None
    if kwargs.get("generator") == "benchmark":
        base = default_benchmark()
        kwargs.pop("generator")
        spec = replace(base, **kwargs)
    else:
        spec = SynthSpec(**kwargs)
    return replace(spec, **{k: v for k, v in overrides.items() if v is not None})


def spec_to_dict(spec: SynthSpec) -> dict:
    out = {}
    for f in fields(spec):
        v = getattr(spec, f.name)
        out[f.name] = [list(x) if isinstance(x, tuple) else x for x in v] if isinstance(v, tuple) else v
    return out


def calibrated_probs(d: CalibrationDataset) -> np.ndarray:
    return softmax(d.logits)
