"""Stacked three-stream blocks: masked self-attention, cross-attention, FFN.

Each stream (RTG, state, action) has its own untied parameters.  Every
sublayer is pre-norm: ``x + sublayer(layer_norm(x))``.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .embedding import STREAMS
from .nn import ParamStore, fan_in_uniform


def self_mask(valid: np.ndarray) -> np.ndarray:
    """(B, K, K) visibility: key k is visible to query q iff k <= q and k is valid.

    Padded queries see nothing (their rows come out as zeros).
    """
    valid = np.asarray(valid, dtype=bool)
    K = valid.shape[-1]
    causal = np.tril(np.ones((K, K), dtype=bool))
    return causal & valid[..., None, :] & valid[..., :, None]


def cross_mask(valid: np.ndarray, stream: int, same_step: str = "ordered") -> np.ndarray:
    """(B, K, 2K) visibility for queries of ``stream`` over the other two streams.

    Keys are laid out as [first other stream's K steps, second other's K
    steps], in stream order.  Earlier timesteps are always visible.  At the
    same timestep, "ordered" lets a query see only streams that precede it in
    the G -> s -> a token order; "mutual" lets it see both.
    """
    valid = np.asarray(valid, dtype=bool)
    K = valid.shape[-1]
    strict = np.tril(np.ones((K, K), dtype=bool), k=-1)
    eye = np.eye(K, dtype=bool)
    blocks = []
    for other in range(len(STREAMS)):
        if other == stream:
            continue
        same = same_step == "mutual" or other < stream
        blocks.append(strict | eye if same else strict)
    base = np.concatenate(blocks, axis=-1)
    keys_valid = np.concatenate([valid, valid], axis=-1)
    return base & keys_valid[..., None, :] & valid[..., :, None]


def split_heads(x: T.Tensor, n_heads: int) -> T.Tensor:
    B, K, d = x.shape
    return T.transpose(T.reshape(x, (B, K, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: T.Tensor) -> T.Tensor:
    B, h, K, dk = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, K, h * dk))


def attention(xq, xkv, Wq, Wk, Wv, Wo, mask, n_heads: int, return_weights: bool = False):
    """Multi-head scaled dot-product attention, concat heads, project by Wo."""
    if xq.shape[0] != xkv.shape[0] or xq.shape[-1] != xkv.shape[-1]:
        raise T.ShapeError(f"attention: query {xq.shape} and key/value {xkv.shape} disagree")
    d = xq.shape[-1]
    if d % n_heads:
        raise T.ShapeError(f"d_h={d} not divisible by n_heads={n_heads}")
    q = split_heads(T.matmul(xq, Wq), n_heads)
    k = split_heads(T.matmul(xkv, Wk), n_heads)
    v = split_heads(T.matmul(xkv, Wv), n_heads)
    scores = T.mul(T.matmul(q, T.swap_last(k)), 1.0 / np.sqrt(d // n_heads))
    weights = T.softmax_masked(scores, np.asarray(mask)[:, None, :, :], allow_empty=True)
    out = T.matmul(merge_heads(T.matmul(weights, v)), Wo)
    return (out, weights) if return_weights else out


def init_trunk(params: ParamStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    d, f = cfg.d_h, cfg.d_ff
    out_scale = 1.0 / np.sqrt(2 * cfg.n_layers)
    for layer in range(cfg.n_layers):
        for s in STREAMS:
            pre = f"trunk.{layer}.{s}"
            for sub in ("sa", "ca"):
                params.add(f"{pre}.{sub}.ln.g", np.ones(d))
                params.add(f"{pre}.{sub}.ln.b", np.zeros(d))
                for w in ("Wq", "Wk", "Wv"):
                    params.add(f"{pre}.{sub}.{w}", fan_in_uniform(rng, d, (d, d)))
                params.add(f"{pre}.{sub}.Wo", fan_in_uniform(rng, d, (d, d), out_scale))
            params.add(f"{pre}.ff.ln.g", np.ones(d))
            params.add(f"{pre}.ff.ln.b", np.zeros(d))
            params.add(f"{pre}.ff.W1", fan_in_uniform(rng, d, (d, f)))
            params.add(f"{pre}.ff.b1", np.zeros(f))
            params.add(f"{pre}.ff.W2", fan_in_uniform(rng, f, (f, d), out_scale))
            params.add(f"{pre}.ff.b2", np.zeros(d))


def _ln(params, prefix, x, eps):
    return T.layer_norm(x, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"], eps)


def self_attention(params: ParamStore, prefix: str, x, mask, cfg: ModelConfig):
    """Pre-norm masked self-attention sublayer for one stream; returns x + attn."""
    h = _ln(params, prefix, x, cfg.ln_eps)
    p = lambda w: params[f"{prefix}.{w}"]
    return T.add(x, attention(h, h, p("Wq"), p("Wk"), p("Wv"), p("Wo"), mask, cfg.n_heads))


def cross_attention(params: ParamStore, prefix: str, x, normed_q, others, mask, cfg: ModelConfig):
    """Queries from this stream, keys/values over the time-concatenated other two streams.

    ``normed_q`` is this stream's layer-normed input; ``others`` are the
    layer-normed self-attention outputs of the other two streams.
    """
    if any(o.shape != x.shape for o in others):
        raise T.ShapeError("cross_attention: all streams must share (B, K, d_h)")
    kv = T.concat(others, axis=1)
    p = lambda w: params[f"{prefix}.{w}"]
    return T.add(x, attention(normed_q, kv, p("Wq"), p("Wk"), p("Wv"), p("Wo"), mask, cfg.n_heads))


def ffn(params: ParamStore, prefix: str, x, cfg: ModelConfig):
    """Position-wise GELU feed-forward sublayer; returns x + FFN(layer_norm(x))."""
    h = _ln(params, prefix, x, cfg.ln_eps)
    p = lambda w: params[f"{prefix}.{w}"]
    inner = T.gelu(T.linear(h, p("W1"), p("b1")))
    return T.add(x, T.linear(inner, p("W2"), p("b2")))


def block_forward(params: ParamStore, layer: int, streams, valid, cfg: ModelConfig):
    smask = self_mask(valid)
    after_sa = [self_attention(params, f"trunk.{layer}.{s}.sa", x, smask, cfg)
                for s, x in zip(STREAMS, streams)]
    normed = [_ln(params, f"trunk.{layer}.{s}.ca", x, cfg.ln_eps)
              for s, x in zip(STREAMS, after_sa)]
    after_ca = []
    for i, s in enumerate(STREAMS):
        others = [normed[j] for j in range(len(STREAMS)) if j != i]
        after_ca.append(cross_attention(params, f"trunk.{layer}.{s}.ca", after_sa[i], normed[i],
                                        others, cross_mask(valid, i, cfg.same_step), cfg))
    return tuple(ffn(params, f"trunk.{layer}.{s}.ff", x, cfg) for s, x in zip(STREAMS, after_ca))


def trunk_forward(params: ParamStore, streams, valid, cfg: ModelConfig):
    """Run all blocks bottom-up and return the final (G, s, a) streams."""
    if cfg.n_layers < 1:
        raise ValueError("need at least one block")
    for layer in range(cfg.n_layers):
        streams = block_forward(params, layer, streams, valid, cfg)
    return streams
