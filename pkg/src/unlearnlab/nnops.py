"""Composite differentiable ops built from the engine primitives."""

from __future__ import annotations

import numpy as np

from unlearnlab import grad as G
from unlearnlab.errors import ConfigError

PROB_FLOOR = 1e-12


def affine(x, w, b):
    """x @ w + row-broadcast bias, with the broadcast made explicit."""
    n = x.shape[0]
    ones = G.constant(np.ones((n, 1)))
    b_row = G.reshape(b, (1, b.size))
    return G.add(G.matmul(x, w), G.matmul(ones, b_row))


def bce_with_logits(z, target):
    """Numerically stable binary cross-entropy against a constant target.

    loss = relu(z) - target*z + log(1 + exp(-|z|)), elementwise.
    """
    target = float(target)
    if not 0.0 <= target <= 1.0:
        raise ConfigError(f"BCE target must lie in [0, 1], got {target}")
    abs_z = G.add(G.relu(z), G.relu(G.scalar_mul(z, -1.0)))
    softplus = G.log(G.add_scalar(G.exp(G.scalar_mul(abs_z, -1.0)), 1.0))
    return G.add(G.sub(G.relu(z), G.scalar_mul(z, target)), softplus)


def bce_with_logits_array(z, targets):
    """BCE-with-logits against a constant per-element target array."""
    t = G.constant(np.asarray(targets, dtype=np.float64))
    abs_z = G.add(G.relu(z), G.relu(G.scalar_mul(z, -1.0)))
    softplus = G.log(G.add_scalar(G.exp(G.scalar_mul(abs_z, -1.0)), 1.0))
    return G.add(G.sub(G.relu(z), G.mul(z, t)), softplus)


def bce_with_logits_scalar(z_value, target):
    """Closed-form reference for a plain float logit (no tape)."""
    z = float(z_value)
    t = float(target)
    return max(z, 0.0) - z * t + np.log1p(np.exp(-abs(z)))


def safe_log(p):
    """log with a probability floor so saturated softmax rows stay finite."""
    return G.log(G.clip(p, PROB_FLOOR, 2.0))


def cross_entropy_rows(logits, target_idx):
    """Mean negative log-likelihood of integer targets over softmax rows.

    logits: (N, V) tensor; target_idx: (N,) integer array.
    """
    target_idx = np.asarray(target_idx, dtype=np.intp)
    p = G.softmax(logits)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(target_idx.size), target_idx] = 1.0
    picked = G.sum(G.mul(p, G.constant(onehot)), axis=1)
    return G.scalar_mul(G.mean(safe_log(picked)), -1.0)


def kl_rows(p_adv, p_clean):
    """Mean over rows of KL(p_adv || p_clean); p_clean is a constant array."""
    p_clean = np.clip(np.asarray(p_clean, dtype=np.float64), PROB_FLOOR, None)
    log_ratio = G.sub(safe_log(p_adv), G.constant(np.log(p_clean)))
    per_row = G.sum(G.mul(p_adv, log_ratio), axis=1)
    return G.mean(per_row)
