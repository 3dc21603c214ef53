"""Model-driven policy for rollouts and top-k ranking metrics."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import Batch, Dataset, window_at
from .embedding import UNKNOWN_ACTION
from .env import Z95, History
from .model import CDT4Rec


def history_batch(histories: Sequence[History], K: int, state_dim: int) -> Batch:
    """Windows over the last K steps of each history; the current action is unknown."""
    B = len(histories)
    rtg = np.zeros((B, K))
    states = np.zeros((B, K, state_dim))
    actions = np.zeros((B, K), dtype=np.int64)
    timesteps = np.zeros((B, K), dtype=np.int64)
    valid = np.zeros((B, K), dtype=bool)
    for b, h in enumerate(histories):
        t = h.t
        lo = max(0, t - K)
        n = t - lo
        sl = slice(K - n, K)
        rtg[b, sl] = h.rtg[lo:t]
        states[b, sl] = np.asarray(h.states[lo:t])
        past = list(h.actions[lo:t - 1]) + [UNKNOWN_ACTION]
        actions[b, sl] = past
        timesteps[b, sl] = np.arange(lo + 1, t + 1)
        valid[b, sl] = True
    return Batch(rtg, states, actions, timesteps, valid, np.zeros((B, K), dtype=np.int64), np.zeros((B, K)))


class ModelPolicy:
    """Greedy policy from the N_g logits at the newest position."""

    def __init__(self, model: CDT4Rec, K: int):
        self.model = model
        self.K = K

    def act_batch(self, histories: Sequence[History], targets) -> list[int]:
        batch = history_batch(histories, self.K, self.model.cfg.state_dim)
        logits = self.model(batch).logits.data[:, -1, :]
        return [int(i) for i in np.argmax(logits, axis=-1)]

    def act(self, history: History, target_rtg: float) -> int:
        return self.act_batch([history], [target_rtg])[0]


def target_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each target; ties go to the lower item index."""
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    own = np.take_along_axis(scores, targets[:, None], axis=1)
    idx = np.arange(scores.shape[1])[None, :]
    ahead = (scores > own) | ((scores == own) & (idx < targets[:, None]))
    return 1 + ahead.sum(axis=1)


def ranking_metrics(scores: np.ndarray, targets: np.ndarray, k: int) -> dict[str, float]:
    """recall@k, precision@k, ndcg@k with one relevant item per row, plus 95% half-widths."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(targets) == 0:
        raise ValueError("empty evaluation set")
    ranks = target_ranks(scores, targets)
    hit = (ranks <= k).astype(np.float64)
    per_row = {
        "recall": hit,
        "precision": hit / k,
        "ndcg": np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0),
    }
    n = len(ranks)
    out: dict[str, float] = {"positions": float(n), "k": float(k)}
    for name, vals in per_row.items():
        out[f"{name}@{k}"] = float(vals.mean())
        sd = float(vals.std(ddof=1)) if n > 1 else 0.0
        out[f"{name}@{k}_half_width"] = float(Z95 * sd / np.sqrt(n))
    return out


def positive_windows(dataset: Dataset, K: int) -> Batch:
    """One window per clicked step, with that step's action hidden from the input."""
    wins = []
    for traj in dataset.trajectories:
        for t in np.flatnonzero(traj.rewards > 0):
            wins.append(window_at(traj, int(t) + 1, K))
    if not wins:
        raise ValueError("empty evaluation set: no positive positions")
    batch = Batch(**{name: np.stack([getattr(w, name) for w in wins]) for name in Batch.__dataclass_fields__})
    hidden = batch.actions.copy()
    hidden[:, -1] = UNKNOWN_ACTION
    return batch.replace(actions=hidden)


def rank_metrics(model: CDT4Rec, dataset: Dataset, k: int = 10, K: int = 2,
                 chunk: int = 1024) -> dict[str, float]:
    """Rank all items by N_g logits at every clicked held-out position."""
    if model.cfg.num_items != dataset.num_items:
        raise ValueError(f"model num_items {model.cfg.num_items} != dataset num_items {dataset.num_items}")
    batch = positive_windows(dataset, K)
    scores = []
    for lo in range(0, batch.size, chunk):
        part = Batch(**{name: getattr(batch, name)[lo:lo + chunk] for name in Batch.__dataclass_fields__})
        scores.append(model(part).logits.data[:, -1, :])
    return ranking_metrics(np.concatenate(scores), batch.target_actions[:, -1], k)
