"""Token embeddings for the RTG, state and action streams."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import ParamStore, fan_in_uniform

STREAMS = ("rtg", "state", "action")

# action id used for the not-yet-chosen action at inference time
UNKNOWN_ACTION = -1


def init_embedding(params: ParamStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    d = cfg.d_h
    params.add("embed.W_G", fan_in_uniform(rng, 1, (1, d)))
    params.add("embed.b_G", np.zeros(d))
    params.add("embed.W_s", fan_in_uniform(rng, cfg.state_dim, (cfg.state_dim, d)))
    params.add("embed.b_s", np.zeros(d))
    params.add("embed.E_a", fan_in_uniform(rng, d, (cfg.num_items, d)))
    # row 0 is the padding slot; timesteps are 1-based
    params.add("embed.P", fan_in_uniform(rng, d, (cfg.max_timestep + 1, d)))
    for s in STREAMS:
        params.add(f"embed.ln_{s}.g", np.ones(d))
        params.add(f"embed.ln_{s}.b", np.zeros(d))


def embed_window(params: ParamStore, cfg: ModelConfig, rtg, states, actions, timesteps,
                 normalize: bool = True):
    """Return the (G0, s0, a0) stream inputs, each (B, K, d_h).

    The same positional row p_t is added to all three streams before the
    per-stream layer norm.  ``UNKNOWN_ACTION`` entries embed as the zero
    vector (plus position).  ``normalize=False`` returns the pre-norm sums.
    """
    timesteps = np.asarray(timesteps)
    actions = np.asarray(actions)
    if timesteps.size and (timesteps.min() < 0 or timesteps.max() > cfg.max_timestep):
        raise IndexError(f"timestep outside [0, {cfg.max_timestep}] (positional table overflow)")
    if actions.size and (actions.min() < UNKNOWN_ACTION or actions.max() >= cfg.num_items):
        raise IndexError(f"action index outside [0, {cfg.num_items})")

    pos = T.embedding(params["embed.P"], timesteps)
    g = np.asarray(rtg, dtype=np.float64)[..., None] / cfg.rtg_scale
    tok_g = T.linear(g, params["embed.W_G"], params["embed.b_G"])
    tok_s = T.linear(np.asarray(states, dtype=np.float64), params["embed.W_s"], params["embed.b_s"])
    known = actions != UNKNOWN_ACTION
    tok_a = T.embedding(params["embed.E_a"], np.where(known, actions, 0))
    if not known.all():
        tok_a = T.mul(tok_a, known[..., None].astype(np.float64))

    out = []
    for name, tok in zip(STREAMS, (tok_g, tok_s, tok_a)):
        x = T.add(tok, pos)
        if not normalize:
            out.append(x)
            continue
        out.append(T.layer_norm(x, params[f"embed.ln_{name}.g"], params[f"embed.ln_{name}.b"], cfg.ln_eps))
    return tuple(out)
