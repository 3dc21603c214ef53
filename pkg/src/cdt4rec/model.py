"""The full model: embeddings -> three-stream trunk -> causal layer -> N_e, N_g."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import heads, tensor as T
from .config import ModelConfig
from .data import Batch
from .embedding import embed_window, init_embedding
from .nn import ParamStore
from .trunk import init_trunk, trunk_forward

PARAM_GROUPS = ("theta_e", "theta_g", "theta_a", "theta_s", "trunk", "embeddings")


def param_group(name: str) -> str:
    head = name.split(".", 1)[0]
    return "embeddings" if head == "embed" else head


@dataclass
class ModelOutput:
    G: T.Tensor
    s: T.Tensor
    a: T.Tensor
    psi_a: T.Tensor
    psi_s: T.Tensor
    r_hat: T.Tensor      # (B, K)
    logits: T.Tensor     # (B, K, m)


class CDT4Rec:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ParamStore()
        rng = np.random.default_rng([seed, 0xC0DE])
        init_embedding(self.params, cfg, rng)
        init_trunk(self.params, cfg, rng)
        heads.init_heads(self.params, cfg, rng)

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {g: [] for g in PARAM_GROUPS}
        for name in self.params:
            out[param_group(name)].append(name)
        return out

    def forward(self, batch: Batch, training: bool = False,
                rng: Optional[np.random.Generator] = None,
                dropout: Optional[float] = None) -> ModelOutput:
        cfg = self.cfg
        if batch.states.shape[-1] != cfg.state_dim:
            raise T.ShapeError(f"batch state dim {batch.states.shape[-1]} != model state_dim {cfg.state_dim}")
        streams = embed_window(self.params, cfg, batch.rtg, batch.states, batch.actions, batch.timesteps)
        G, s, a = trunk_forward(self.params, streams, batch.valid, cfg)
        rate = (cfg.dropout if dropout is None else dropout) if training else 0.0
        psi_a = heads.action_representation(self.params, G, s, rate, training, rng)
        psi_s = heads.state_representation(self.params, s, a, rate, training, rng)
        r_hat = heads.estimate_reward(self.params, psi_s, psi_a)
        logits = heads.generate_action(self.params, r_hat, psi_a)
        return ModelOutput(G, s, a, psi_a, psi_s, r_hat, logits)

    __call__ = forward
