"""Causal layer (fused action/state representations) and the N_e / N_g networks."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import ParamStore, fan_in_uniform


def init_heads(params: ParamStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    d, f, m = cfg.d_h, cfg.d_ff, cfg.num_items
    params.add("theta_a.W", fan_in_uniform(rng, d, (d, d)))
    params.add("theta_a.b", np.zeros(d))
    params.add("theta_s.W", fan_in_uniform(rng, d, (d, d)))
    params.add("theta_s.b", np.zeros(d))
    params.add("theta_e.W1", fan_in_uniform(rng, 2 * d, (2 * d, f)))
    params.add("theta_e.b1", np.zeros(f))
    params.add("theta_e.W2", fan_in_uniform(rng, f, (f, 1)))
    params.add("theta_e.b2", np.zeros(1))
    params.add("theta_g.W1", fan_in_uniform(rng, d + 1, (d + 1, f)))
    params.add("theta_g.b1", np.zeros(f))
    params.add("theta_g.W2", fan_in_uniform(rng, f, (f, m)))
    params.add("theta_g.b2", np.zeros(m))


def _fuse(x, y, W, b, rate, training, rng):
    if x.shape != y.shape:
        raise T.ShapeError(f"cannot fuse streams of shape {x.shape} and {y.shape}")
    h = T.gelu(T.linear(T.add(x, y), W, b))
    return T.dropout(h, rate, training, rng)


def action_representation(params: ParamStore, G, s, rate: float = 0.0, training: bool = False, rng=None):
    """Psi^a = GELU((G + s) W_r1 + b_r1), dropout in training."""
    return _fuse(G, s, params["theta_a.W"], params["theta_a.b"], rate, training, rng)


def state_representation(params: ParamStore, s, a, rate: float = 0.0, training: bool = False, rng=None):
    """Psi^s = GELU((s + a) W_r2 + b_r2), dropout in training."""
    return _fuse(s, a, params["theta_s.W"], params["theta_s.b"], rate, training, rng)


def estimate_reward(params: ParamStore, psi_s, psi_a):
    """Per-position scalar reward estimate from [Psi^s ; Psi^a]; (B, K)."""
    if psi_s.shape != psi_a.shape:
        raise T.ShapeError(f"psi_s {psi_s.shape} and psi_a {psi_a.shape} disagree")
    h = T.gelu(T.linear(T.concat([psi_s, psi_a], axis=-1), params["theta_e.W1"], params["theta_e.b1"]))
    r = T.linear(h, params["theta_e.W2"], params["theta_e.b2"])
    return T.reshape(r, r.shape[:-1])


def generate_action(params: ParamStore, r_hat, psi_a):
    """Item logits (B, K, m) from [Psi^a ; r_hat]."""
    if r_hat.shape != psi_a.shape[:-1]:
        raise T.ShapeError(f"r_hat {r_hat.shape} does not match psi_a {psi_a.shape}")
    x = T.concat([psi_a, T.reshape(r_hat, r_hat.shape + (1,))], axis=-1)
    h = T.gelu(T.linear(x, params["theta_g.W1"], params["theta_g.b1"]))
    return T.linear(h, params["theta_g.W2"], params["theta_g.b2"])
