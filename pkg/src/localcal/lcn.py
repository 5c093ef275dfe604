"""LoCal Net: a residual two-head MLP trained against in-batch kernel estimates.

Forward pass on standardized features ``x``::

    h   = dropout(relu(x W1 + b1))
    phi = h Wf + bf + w_phi * pca(x) + b_phi
    g   = h Wg + bg + w_g * logits + b_g
    p   = softmax(g)

The loss is ``mean_i [ d_JSD(p_i, theta_i) + lam * CE(y_i, theta_i) ]`` where
``theta_i`` is the Nadaraya-Watson estimate of the label distribution at
``phi_i`` from the other rows of the batch. Gradients are derived by hand,
including the dependence of ``theta`` on ``phi`` through the kernel weights.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import CalibrationDataset
from .errors import NoNeighbors, ShapeMismatch, SpecInvalid
from .kernels import KernelConfig, sq_distances
from .numerics import AdamState, PcaProjection, adam_step, fit_pca, js_divergence, make_rng, softmax

CE_FLOOR = 1e-12
PARAM_NAMES = ("W1", "b1", "Wf", "bf", "Wg", "bg", "w_phi", "b_phi", "w_g", "b_g")


@dataclass(frozen=True)
class LcnConfig:
    hidden_dim: int = 64
    dropout: float = 0.3
    lam: float = 1.0
    gamma: float = 10.0
    pca_dim: int = 50
    lr: float = 1e-3
    epochs: int = 60
    batch_size: int = 1024
    seed: int = 0
    val_frac: float = 0.1
    exclude_self: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise SpecInvalid("lambda must be nonnegative")
        if not self.gamma > 0:
            raise SpecInvalid("gamma must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise SpecInvalid("dropout rate must lie in [0, 1)")
        if self.batch_size < 2:
            raise SpecInvalid("batch_size must be at least 2")
        if self.hidden_dim < 1 or self.pca_dim < 1 or self.epochs < 0:
            raise SpecInvalid("hidden_dim and pca_dim must be positive, epochs nonnegative")
        if not 0.0 <= self.val_frac < 1.0:
            raise SpecInvalid("val_frac must lie in [0, 1)")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(eq=False)
class LcnModel:
    pca: PcaProjection
    in_mean: np.ndarray
    in_scale: np.ndarray
    params: dict
    config: LcnConfig
    activation: str = "relu"

    @property
    def n_classes(self) -> int:
        return self.params["Wg"].shape[1]

    @property
    def method(self) -> str:
        return "lcn"

    def copy_with(self, params: dict) -> "LcnModel":
        return LcnModel(self.pca, self.in_mean, self.in_scale, {k: np.array(v) for k, v in params.items()}, self.config)

    def to_dict(self) -> dict:
        def f17(a):
            return [float(f"{x:.17g}") for x in np.ravel(a)]

        return {
            "method": "lcn",
            "C": self.n_classes,
            "activation": self.activation,
            "config": asdict(self.config),
            "fingerprint": f"lcn:{self.config.fingerprint()}",
            "pca": {k: (f17(v) if isinstance(v, list) else v) for k, v in self.pca.to_dict().items()},
            "input": {"mean": f17(self.in_mean), "scale": f17(self.in_scale)},
            "shapes": {k: list(np.shape(v)) for k, v in self.params.items()},
            "params": {k: f17(v) for k, v in self.params.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, obj: dict) -> "LcnModel":
        params = {
            k: np.asarray(v, dtype=np.float64).reshape(obj["shapes"][k]) for k, v in obj["params"].items()
        }
        return cls(
            PcaProjection.from_dict(obj["pca"]),
            np.asarray(obj["input"]["mean"]),
            np.asarray(obj["input"]["scale"]),
            params,
            LcnConfig(**obj["config"]),
            obj.get("activation", "relu"),
        )


def init_model(features, n_classes: int, cfg: LcnConfig, pca: PcaProjection | None = None) -> LcnModel:
    """Zero heads, unit residual weights, small random residual biases, fan-in scaled hidden layer."""
    X = np.asarray(features, dtype=np.float64)
    n, m = X.shape
    if pca is None:
        pca = fit_pca(X, min(cfg.pca_dim, m, max(1, n - 1)))
    rng = make_rng(cfg.seed, "lcn", "init")
    H, d = cfg.hidden_dim, pca.dim
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    params = {
        "W1": rng.normal(size=(m, H)) * np.sqrt(2.0 / m),
        "b1": np.zeros(H),
        "Wf": np.zeros((H, d)),
        "bf": np.zeros(d),
        "Wg": np.zeros((H, n_classes)),
        "bg": np.zeros(n_classes),
        "w_phi": np.array(1.0),
        "b_phi": np.array(rng.normal(0.0, 0.01)),
        "w_g": np.array(1.0),
        "b_g": np.array(rng.normal(0.0, 0.01)),
    }
    return LcnModel(pca, X.mean(axis=0), scale, params, cfg)


# --------------------------------------------------------------------------
# forward / loss / backward


@dataclass
class _Cache:
    xs: np.ndarray
    z: np.ndarray
    logits: np.ndarray
    u: np.ndarray
    mask: np.ndarray
    h: np.ndarray
    phi: np.ndarray
    p: np.ndarray


def _forward(model: LcnModel, features, logits, train_mode: bool, rng) -> _Cache:
    P = model.params
    X = np.asarray(features, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.in_mean.shape[0]:
        raise ShapeMismatch(f"expected features with {model.in_mean.shape[0]} columns, got shape {X.shape}")
    if logits.shape != (X.shape[0], model.n_classes):
        raise ShapeMismatch(f"expected logits of shape {(X.shape[0], model.n_classes)}, got {logits.shape}")
    xs = (X - model.in_mean) / model.in_scale
    z = model.pca.project(X)
    u = xs @ P["W1"] + P["b1"]
    rate = model.config.dropout
    if train_mode and rate > 0:
        mask = (rng.random(u.shape) >= rate) / (1.0 - rate)
    else:
        mask = np.ones_like(u)
    h = np.maximum(u, 0.0) * mask
    phi = h @ P["Wf"] + P["bf"] + P["w_phi"] * z + P["b_phi"]
    g = h @ P["Wg"] + P["bg"] + P["w_g"] * logits + P["b_g"]
    return _Cache(xs, z, logits, u, mask, h, phi, softmax(g))


def lcn_forward(model: LcnModel, features, logits, train_mode: bool = False, rng=None):
    """Return ``(phi_prime, probs)``. Dropout is active only with ``train_mode``."""
    if train_mode and rng is None:
        rng = make_rng(model.config.seed, "lcn", "dropout")
    c = _forward(model, features, logits, train_mode, rng)
    return c.phi, c.p


def batch_kernel(phi, gamma: float, exclude_self: bool = True) -> np.ndarray:
    logk = -sq_distances(phi, phi) / (2.0 * gamma**2)
    if exclude_self:
        np.fill_diagonal(logk, -np.inf)
    top = logk.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise NoNeighbors("a batch row has no neighbors for the kernel estimate")
    w = np.exp(logk - top)
    return w / w.sum(axis=1, keepdims=True)


def _half_log_ratio(a, m):
    out = np.zeros_like(a)
    pos = a > 0
    out[pos] = 0.5 * np.log(a[pos] / m[pos])
    return out


def _loss_parts(phi, p, Y, lam, gamma, exclude_self=True):
    W = batch_kernel(phi, gamma, exclude_self)
    theta = W @ Y
    J = js_divergence(p, theta)
    d = np.sqrt(J)
    ce = -np.sum(Y * np.log(np.maximum(theta, CE_FLOOR)), axis=1)
    return W, theta, J, d, ce


def lcn_loss(phi, probs, onehot, lam: float, gamma: float, exclude_self: bool = True) -> tuple[float, float, float]:
    """Return ``(total, alignment, similarity)`` with ``total = alignment + lam * similarity``."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape[0] < 2:
        raise NoNeighbors("the loss needs a batch of at least two rows")
    _, _, _, d, ce = _loss_parts(phi, np.asarray(probs, float), np.asarray(onehot, float), lam, gamma, exclude_self)
    align, sim = float(d.mean()), float(ce.mean())
    return align + lam * sim, align, sim


def _backward(model: LcnModel, c: _Cache, Y, lam: float, gamma: float, exclude_self: bool):
    P = model.params
    n = Y.shape[0]
    W, theta, J, d, ce = _loss_parts(c.phi, c.p, Y, lam, gamma, exclude_self)
    mix = 0.5 * (c.p + theta)
    # d sqrt(J) / dJ, with the kink at J = 0 given zero slope
    dd = np.divide(1.0, 2.0 * d, out=np.zeros_like(d), where=d > 0)[:, None] / n

    grad_p = dd * _half_log_ratio(c.p, mix)
    grad_theta = dd * _half_log_ratio(theta, mix)
    safe = theta > CE_FLOOR
    grad_theta -= (lam / n) * np.divide(Y, theta, out=np.zeros_like(theta), where=safe)

    # theta = W Y with W a row softmax of logK; backprop to logK then to phi
    A = grad_theta @ Y.T
    S = W * (A - np.sum(W * A, axis=1, keepdims=True))
    M = S + S.T
    grad_phi = -(M.sum(axis=1, keepdims=True) * c.phi - M @ c.phi) / gamma**2

    grad_g = c.p * (grad_p - np.sum(c.p * grad_p, axis=1, keepdims=True))

    grads = {
        "Wg": c.h.T @ grad_g,
        "bg": grad_g.sum(axis=0),
        "w_g": np.array(np.sum(grad_g * c.logits)),
        "b_g": np.array(grad_g.sum()),
        "Wf": c.h.T @ grad_phi,
        "bf": grad_phi.sum(axis=0),
        "w_phi": np.array(np.sum(grad_phi * c.z)),
        "b_phi": np.array(grad_phi.sum()),
    }
    grad_h = grad_g @ P["Wg"].T + grad_phi @ P["Wf"].T
    grad_u = grad_h * c.mask * (c.u > 0)
    grads["W1"] = c.xs.T @ grad_u
    grads["b1"] = grad_u.sum(axis=0)
    align, sim = float(d.mean()), float(ce.mean())
    return grads, (align + lam * sim, align, sim)


def lcn_backward(model: LcnModel, features, logits, onehot, lam: float, gamma: float, train_mode=False, rng=None):
    """Analytic gradients of the batch loss. Returns ``(grads, (total, alignment, similarity))``."""
    Y = np.asarray(onehot, dtype=np.float64)
    if Y.shape[0] < 2:
        raise NoNeighbors("the loss needs a batch of at least two rows")
    c = _forward(model, features, logits, train_mode, rng)
    return _backward(model, c, Y, lam, gamma, model.config.exclude_self)


def batch_objective(model: LcnModel, features, logits, onehot, lam: float, gamma: float) -> float:
    phi, p = lcn_forward(model, features, logits, train_mode=False)
    return lcn_loss(phi, p, onehot, lam, gamma, model.config.exclude_self)[0]


def finite_difference_check(model: LcnModel, features, logits, onehot, lam, gamma, step=1e-5, floor=1e-6) -> float:
    """Largest ``|analytic - numeric| / max(|analytic|, |numeric|, floor)`` over every parameter entry.

    Uses eval mode (no dropout) so both sides see the same function.
    """
    grads, _ = lcn_backward(model, features, logits, onehot, lam, gamma, train_mode=False)
    worst = 0.0
    for name in PARAM_NAMES:
        base = model.params[name]
        flat = np.array(base, dtype=np.float64).ravel()
        g_an = np.ravel(grads[name])
        for k in range(flat.size):
            vals = []
            for sgn in (1.0, -1.0):
                trial = flat.copy()
                trial[k] += sgn * step
                params = dict(model.params)
                params[name] = trial.reshape(np.shape(base))
                vals.append(batch_objective(model.copy_with(params), features, logits, onehot, lam, gamma))
            g_num = (vals[0] - vals[1]) / (2 * step)
            err = abs(g_an[k] - g_num) / max(abs(g_an[k]), abs(g_num), floor)
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# training


@dataclass
class TrainTrace:
    total: list = field(default_factory=list)
    alignment: list = field(default_factory=list)
    similarity: list = field(default_factory=list)
    val_lce_proxy: list = field(default_factory=list)
    val_total: list = field(default_factory=list)
    initial_val_total: float | None = None
    best_epoch: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _val_scores(model, d: CalibrationDataset, Y) -> tuple[float, float]:
    cfg = model.config
    phi, p = lcn_forward(model, d.features, d.logits, train_mode=False)
    W, theta, _, dist, ce = _loss_parts(phi, p, Y, cfg.lam, cfg.gamma, cfg.exclude_self)
    proxy = float(np.mean(np.abs(p - theta).sum(axis=1)) / Y.shape[1])
    return float(dist.mean() + cfg.lam * ce.mean()), proxy


def train_lcn(cal: CalibrationDataset, cfg: LcnConfig | None = None) -> tuple[LcnModel, TrainTrace]:
    """Fit PCA on the calibration features, then run seeded mini-batch Adam.

    A held-out ``val_frac`` of the rows scores every epoch; the returned model
    holds the parameters with the lowest validation loss seen, initialization
    included.
    """
    cfg = LcnConfig() if cfg is None else cfg
    n = cal.n
    perm = make_rng(cfg.seed, "lcn", "val").permutation(n)
    n_val = int(round(cfg.val_frac * n)) if cfg.val_frac > 0 else 0
    if n_val and (n_val < 2 or n - n_val < 2):
        n_val = 0
    tr = np.sort(perm[n_val:])
    va = np.sort(perm[:n_val])
    train = cal.subset(tr, recompute_priors=False)
    model = init_model(train.features, cal.C, cfg)
    Ytr = np.eye(cal.C)[train.labels]
    trace = TrainTrace()
    if n_val:
        val = cal.subset(va, recompute_priors=False)
        Yva = np.eye(cal.C)[val.labels]
        best_val = _val_scores(model, val, Yva)[0]
        trace.initial_val_total = best_val
    best_params = {k: v.copy() for k, v in model.params.items()}

    state = AdamState(lr=cfg.lr)
    shuffle_rng = make_rng(cfg.seed, "lcn", "shuffle")
    drop_rng = make_rng(cfg.seed, "lcn", "dropout")
    bs = min(cfg.batch_size, train.n)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(train.n)
        sums = np.zeros(3)
        weight = 0
        for start in range(0, train.n, bs):
            idx = order[start : start + bs]
            if idx.size < 2:
                continue
            grads, parts = lcn_backward(
                model, train.features[idx], train.logits[idx], Ytr[idx], cfg.lam, cfg.gamma, True, drop_rng
            )
            model.params = adam_step(state, model.params, grads)
            sums += np.asarray(parts) * idx.size
            weight += idx.size
        sums /= max(weight, 1)
        trace.total.append(float(sums[0]))
        trace.alignment.append(float(sums[1]))
        trace.similarity.append(float(sums[2]))
        if n_val:
            vt, proxy = _val_scores(model, val, Yva)
            trace.val_total.append(vt)
            trace.val_lce_proxy.append(proxy)
            if vt <= best_val:
                best_val = vt
                best_params = {k: v.copy() for k, v in model.params.items()}
                trace.best_epoch = epoch + 1
        else:
            best_params = {k: v.copy() for k, v in model.params.items()}
            trace.best_epoch = epoch + 1
    model.params = best_params
    return model, trace


def lcn_apply(model: LcnModel, d: CalibrationDataset) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode ``(phi_prime, probs)`` for a dataset."""
    return lcn_forward(model, d.features, d.logits, train_mode=False)


# --------------------------------------------------------------------------
# consistency experiment


def bandwidth_schedule(n: int, dim: int, gamma0: float, n0: int = 500) -> float:
    """``gamma_n = gamma0 (n0/n)^(1/(dim+4))``: shrinks to 0 while ``n gamma_n^dim`` grows."""
    return gamma0 * (n0 / n) ** (1.0 / (dim + 4))


def jsd_consistency_experiment(spec, sizes, gamma0: float | None = None, seeds=(0,)) -> list[dict]:
    """Kernel-estimate consistency of the alignment term.

    For each ``n`` and seed, draws a dataset from ``spec`` (which exposes the
    exact conditional), sets ``p_hat`` to its logits' softmax and compares
    ``mean d_JSD(p_hat, theta_hat)`` against ``mean d_JSD(p_hat, p_true)``.
    """
    from dataclasses import replace

    from .kernels import nw_estimates
    from .synth import generate

    gamma0 = spec.sigma if gamma0 is None else gamma0
    rows = []
    for n in sizes:
        for seed in seeds:
            d, p_true = generate(replace(spec, n=int(n), seed=int(seed)))
            p_hat = softmax(d.logits)
            gamma = bandwidth_schedule(int(n), d.m, gamma0, int(min(sizes)))
            theta, _ = nw_estimates(KernelConfig(gamma=gamma), d.features, np.eye(d.C)[d.labels])
            est = float(np.mean(np.sqrt(js_divergence(p_hat, theta))))
            true = float(np.mean(np.sqrt(js_divergence(p_hat, p_true))))
            rows.append({"n": int(n), "seed": int(seed), "gamma": gamma, "jsd_hat": est, "jsd_true": true, "gap": abs(est - true)})
    return rows
