"""Shared builders for the LCN tests."""

import numpy as np

from localcal.lcn import LcnConfig, init_model
from localcal.numerics import make_rng


def tiny_model(seed=0, exclude_self=True):
    """m=3, hidden=4, d'=2, C=3, batch 5, every head randomized so all gradients are nonzero."""
    rng = make_rng(seed, "tiny")
    X = rng.normal(size=(5, 3))
    logits = rng.normal(size=(5, 3))
    Y = np.eye(3)[[0, 1, 2, 1, 0]]
    cfg = LcnConfig(hidden_dim=4, pca_dim=2, dropout=0.0, exclude_self=exclude_self)
    model = init_model(X, 3, cfg)
    params = {k: np.asarray(v, dtype=np.float64) + 0.3 * rng.normal(size=np.shape(v)) for k, v in model.params.items()}
    params["b1"] = params["b1"] + 0.5  # keep ReLU units away from their kinks
    return model.copy_with(params), X, logits, Y
