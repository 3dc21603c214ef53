"""Training loop: length-proportional trajectory sampling, the reward and
action losses, their sum as the objective, AdamW with global-norm clipping,
and resumable checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, TextIO

import numpy as np

from . import archive, tensor as T
from .config import ModelConfig
from .data import Batch, Dataset, Trajectory, sample_trajectories, sample_window, stack_windows
from .model import CDT4Rec

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "cdt4rec-train-state"
METRICS_HEADER = "# iter, loss_total, loss_Ne, loss_Ng, grad_norm\n"


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration: int, batch_ids, detail: str):
        self.iteration = iteration
        self.batch_ids = list(map(int, batch_ids))
        super().__init__(f"non-finite loss at iteration {iteration} "
                         f"(trajectories {self.batch_ids}): {detail}")


@dataclass(frozen=True)
class TrainConfig:
    K: int = 2
    batch_size: int = 64
    n_it: int = 1000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    rtg_gamma: float = 1.0
    dropout: float = 0.1
    seed: int = 0
    lambda_e: float = 1.0
    lambda_g: float = 1.0
    warmup: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.K < 1 or self.batch_size < 1 or self.n_it < 0:
            raise ValueError("need K >= 1, batch_size >= 1, n_it >= 0")
        if self.lambda_e <= 0 or self.lambda_g <= 0:
            raise ValueError("loss weights must be positive")
        if not 0.0 <= self.rtg_gamma <= 1.0:
            raise ValueError("rtg_gamma must lie in [0, 1]")


# -- losses -------------------------------------------------------------------

def loss_reward(r_hat: T.Tensor, batch: Batch) -> T.Tensor:
    """Batch mean of (1/K) * sum over valid positions of (r_k - r_hat_k)^2."""
    B, K = batch.rtg.shape
    err = T.sub(r_hat, batch.target_rewards)
    sq = T.mul(T.square(err), batch.valid.astype(np.float64))
    return T.mul(T.sum_(sq), 1.0 / (B * K))


def loss_action(logits: T.Tensor, batch: Batch) -> T.Tensor:
    """Batch mean of (1/K) * sum over valid positions of -log softmax(logits)[logged action]."""
    B, K = batch.rtg.shape
    targets = np.where(batch.valid, batch.target_actions, 0)
    nll = T.neg(T.gather_last(T.log_softmax(logits), targets))
    return T.mul(T.sum_(T.mul(nll, batch.valid.astype(np.float64))), 1.0 / (B * K))


def objective(model: CDT4Rec, batch: Batch, cfg: TrainConfig, training: bool = True,
              rng: Optional[np.random.Generator] = None):
    out = model(batch, training=training, rng=rng, dropout=cfg.dropout)
    le = loss_reward(out.r_hat, batch)
    lg = loss_action(out.logits, batch)
    total = T.add(T.mul(le, cfg.lambda_e), T.mul(lg, cfg.lambda_g))
    return total, le, lg


# -- optimiser ------------------------------------------------------------------

class AdamW:
    """Adam moments with decoupled weight decay on matrix-shaped parameters."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.dot(p.grad.ravel(), p.grad.ravel()))
    return math.sqrt(total)


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale all gradients so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# -- run state ------------------------------------------------------------------

@dataclass
class TrainState:
    model: CDT4Rec
    optimizer: AdamW
    config: TrainConfig
    iteration: int = 0
    history: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    @classmethod
    def create(cls, model_cfg: ModelConfig, cfg: TrainConfig) -> "TrainState":
        model = CDT4Rec(model_cfg, seed=cfg.seed)
        opt = AdamW(model.params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
        return cls(model, opt, cfg)


def batch_indices(dataset: Dataset, cfg: TrainConfig, iteration: int) -> np.ndarray:
    """Trajectory ids drawn with probability p(tau) for ``iteration``."""
    return sample_trajectories(dataset, cfg.batch_size, np.random.default_rng([cfg.seed, 1, iteration]))


def assemble_batch(dataset: Dataset, cfg: TrainConfig, iteration: int,
                   start_slot: int = 0) -> tuple[np.ndarray, Batch]:
    """Batch for ``iteration`` from RNG streams keyed by (seed, iteration, slot)."""
    idx = batch_indices(dataset, cfg, iteration)
    windows = [sample_window(dataset[i], cfg.K, np.random.default_rng([cfg.seed, 2, iteration, slot]))
               for slot, i in enumerate(idx, start_slot)]
    return idx, stack_windows(windows)


def with_rtg_gamma(dataset: Dataset, gamma: float) -> Dataset:
    if dataset.gamma == gamma:
        return dataset
    trajs = tuple(Trajectory.build(t.user_id, t.states, t.actions, t.rewards, gamma)
                  for t in dataset.trajectories)
    return Dataset(trajs, gamma, dataset.state_dim, dataset.num_items)


def train_steps(state: TrainState, dataset: Dataset, n_steps: int,
                metrics: Optional[TextIO] = None) -> TrainState:
    """Advance ``state`` by ``n_steps`` gradient updates."""
    cfg = state.config
    if not len(dataset):
        raise ValueError("cannot train on an empty dataset")
    dataset = with_rtg_gamma(dataset, cfg.rtg_gamma)
    model, params = state.model, state.model.params
    for _ in range(n_steps):
        it = state.iteration
        idx, batch = assemble_batch(dataset, cfg, it)
        params.zero_grad()
        try:
            with T.GradTape() as tape:
                total, le, lg = objective(model, batch, cfg, training=True,
                                          rng=np.random.default_rng([cfg.seed, 3, it]))
            tape.backward(total)
        except T.NonFiniteError as exc:
            raise TrainingDivergedError(it + 1, idx, str(exc)) from None
        norm = clip_grad_norm(params, cfg.clip_norm)
        if not math.isfinite(norm):
            raise TrainingDivergedError(it + 1, idx, "non-finite gradient norm")
        lr = cfg.lr * min(1.0, (it + 1) / cfg.warmup) if cfg.warmup else cfg.lr
        state.optimizer.step(lr)
        params.zero_grad()
        state.iteration = it + 1
        row = (state.iteration, total.item(), le.item(), lg.item(), norm)
        state.history.append(row)
        if metrics is not None:
            metrics.write(format_metrics_row(row))
    return state


def format_metrics_row(row) -> str:
    it, total, le, lg, norm = row
    return f"{it}, {total!r}, {le!r}, {lg!r}, {norm!r}\n"


def train(dataset: Dataset, model_cfg: ModelConfig, cfg: TrainConfig,
          metrics_path=None) -> TrainState:
    """Fresh run of ``cfg.n_it`` iterations; optionally writes the metrics log."""
    state = TrainState.create(model_cfg, cfg)
    if metrics_path is None:
        return train_steps(state, dataset, cfg.n_it)
    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write(METRICS_HEADER)
        return train_steps(state, dataset, cfg.n_it, fh)


# -- checkpoints ----------------------------------------------------------------

def state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {}
    for name, p in state.model.params.items():
        arrays[f"param/{name}"] = p.data
    for name in state.model.params:
        arrays[f"adam_m/{name}"] = state.optimizer.m[name]
        arrays[f"adam_v/{name}"] = state.optimizer.v[name]
    return arrays


def save_checkpoint(path, state: TrainState) -> None:
    meta = {
        "kind": CHECKPOINT_KIND,
        "model_config": state.model.cfg.to_dict(),
        "train_config": asdict(state.config),
        "iteration": state.iteration,
        "adam_step": state.optimizer.step_count,
    }
    archive.save(path, state_arrays(state), meta)


def load_checkpoint(path) -> TrainState:
    arrays, meta = archive.load(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise archive.ArchiveError(f"{path} is not a training checkpoint")
    state = TrainState.create(ModelConfig(**meta["model_config"]), TrainConfig(**meta["train_config"]))
    params = state.model.params
    for prefix in ("param", "adam_m", "adam_v"):
        for name, p in params.items():
            key = f"{prefix}/{name}"
            if key not in arrays:
                raise archive.ArchiveError(f"checkpoint is missing array {key}")
            if arrays[key].shape != p.shape:
                raise archive.ArchiveError(f"array {key}: shape {arrays[key].shape} != expected {p.shape}")
    for name, p in params.items():
        p.data = arrays[f"param/{name}"].copy()
        state.optimizer.m[name] = arrays[f"adam_m/{name}"].copy()
        state.optimizer.v[name] = arrays[f"adam_v/{name}"].copy()
    state.optimizer.step_count = int(meta["adam_step"])
    state.iteration = int(meta["iteration"])
    return state


def load_model(path) -> CDT4Rec:
    """Model weights from either a training checkpoint or a bare parameter archive."""
    return load_checkpoint(path).model
