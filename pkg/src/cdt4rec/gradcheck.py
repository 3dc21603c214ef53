"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .data import Batch, Trajectory, stack_windows, window_at
from .model import CDT4Rec, PARAM_GROUPS, param_group
from .training import TrainConfig, objective


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def tiny_config(K: int = 2) -> tuple[ModelConfig, TrainConfig]:
    mc = ModelConfig(state_dim=3, num_items=3, max_timestep=6, d_h=4, n_heads=2,
                     n_layers=1, d_ff=8, dropout=0.0)
    return mc, TrainConfig(K=K, batch_size=2, dropout=0.0)


def toy_batch(model_cfg: ModelConfig, K: int, seed: int = 0, batch_size: int = 2) -> Batch:
    """Random windows; the first ends at step 1 so it carries padding whenever K > 1."""
    rng = np.random.default_rng(seed)
    T_len = min(model_cfg.max_timestep, K + 2)
    windows = []
    for b in range(batch_size):
        traj = Trajectory.build(b, rng.standard_normal((T_len, model_cfg.state_dim)),
                                rng.integers(0, model_cfg.num_items, T_len),
                                rng.integers(0, 2, T_len).astype(float))
        end = 1 if b == 0 else T_len
        windows.append(window_at(traj, end, K))
    return stack_windows(windows)


def check_model_gradients(model: CDT4Rec, batch: Batch, cfg: TrainConfig, h: float = 1e-5,
                          corrupt: Optional[str] = None) -> dict[str, float]:
    """Max relative error between tape and finite-difference gradients, per parameter group.

    ``corrupt`` names a group whose analytic gradient is deliberately
    perturbed (negative control for the checker itself).
    """
    params = model.params
    params.zero_grad()
    with T.GradTape() as tape:
        total, _, _ = objective(model, batch, cfg, training=False)
    tape.backward(total)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    params.zero_grad()
    if corrupt is not None:
        if corrupt not in PARAM_GROUPS:
            raise ValueError(f"unknown parameter group {corrupt!r}")
        victim = next(k for k in params if param_group(k) == corrupt)
        analytic[victim] = analytic[victim] + 1e-2 * (1.0 + np.abs(analytic[victim]))

    def loss() -> float:
        return objective(model, batch, cfg, training=False)[0].item()

    worst = {g: 0.0 for g in PARAM_GROUPS}
    for name, p in params.items():
        num = numeric_gradient(loss, p.data, h)
        err = float(relative_error(analytic[name], num).max(initial=0.0))
        g = param_group(name)
        worst[g] = max(worst[g], err)
    return worst
