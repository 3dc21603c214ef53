"""Trajectories, returns-to-go, context windows and the dataset file format."""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence, TextIO

import numpy as np

log = logging.getLogger(__name__)

DATASET_MAGIC = b"CDTDATA\x00"
DATASET_SCHEMA = 1


class DatasetFormatError(ValueError):
    pass


def compute_rtg(rewards: Sequence[float], gamma: float = 1.0) -> np.ndarray:
    """Discounted returns-to-go by the backward recurrence G_t = r_t + gamma * G_{t+1}."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("compute_rtg needs a non-empty 1-d reward sequence")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    out = np.empty_like(r)
    acc = 0.0
    for t in range(r.size - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


class Step(NamedTuple):
    state: np.ndarray
    action: int
    reward: float


@dataclass(frozen=True, eq=False)
class Trajectory:
    user_id: str
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    rtg: np.ndarray

    @classmethod
    def build(cls, user_id, states, actions, rewards, gamma: float = 1.0) -> "Trajectory":
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.int64)
        rewards = np.asarray(rewards, dtype=np.float64)
        if states.ndim != 2 or len(states) != len(actions) or len(actions) != len(rewards):
            raise ValueError("states (T, d_s), actions (T,) and rewards (T,) must align")
        if not np.all(np.isfinite(rewards)):
            raise ValueError("rewards must be finite")
        return cls(str(user_id), states, actions, rewards, compute_rtg(rewards, gamma))

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def steps(self) -> list[Step]:
        return [Step(s, int(a), float(r)) for s, a, r in zip(self.states, self.actions, self.rewards)]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.user_id == other.user_id and all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in ((self.states, other.states), (self.actions, other.actions),
                         (self.rewards, other.rewards), (self.rtg, other.rtg)))


@dataclass(frozen=True, eq=False)
class Dataset:
    trajectories: tuple[Trajectory, ...]
    gamma: float
    state_dim: int
    num_items: int
    probabilities: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        for tr in self.trajectories:
            if tr.states.shape[1] != self.state_dim:
                raise ValueError(f"trajectory {tr.user_id}: state dim {tr.states.shape[1]} != {self.state_dim}")
            if len(tr) and (tr.actions.min() < 0 or tr.actions.max() >= self.num_items):
                raise ValueError(f"trajectory {tr.user_id}: action outside [0, {self.num_items})")
        probs = sampling_distribution(self) if self.trajectories else np.zeros(0)
        object.__setattr__(self, "probabilities", probs)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __getitem__(self, i) -> Trajectory:
        return self.trajectories[i]

    @property
    def lengths(self) -> np.ndarray:
        return np.array([len(t) for t in self.trajectories], dtype=np.int64)

    @property
    def returns(self) -> np.ndarray:
        return np.array([t.rewards.sum() for t in self.trajectories])

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.trajectories[i] for i in indices), self.gamma,
                       self.state_dim, self.num_items)

    def split(self, holdout_fraction: float, rng: np.random.Generator) -> tuple["Dataset", "Dataset"]:
        order = rng.permutation(len(self))
        n_hold = max(1, int(round(holdout_fraction * len(self))))
        return self.subset(sorted(order[n_hold:])), self.subset(sorted(order[:n_hold]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.gamma == other.gamma and self.state_dim == other.state_dim
                and self.num_items == other.num_items
                and len(self) == len(other)
                and all(a == b for a, b in zip(self.trajectories, other.trajectories)))


def sampling_distribution(dataset: Dataset) -> np.ndarray:
    """p(tau) = |tau| / sum |tau| over the dataset."""
    if not dataset.trajectories:
        raise ValueError("sampling distribution of an empty dataset")
    lengths = np.array([len(t) for t in dataset.trajectories], dtype=np.int64)
    return lengths / lengths.sum()


def sample_trajectories(dataset: Dataset, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` trajectory indices with replacement according to p(tau)."""
    return rng.choice(len(dataset), size=n, replace=True, p=dataset.probabilities)


@dataclass(frozen=True, eq=False)
class ContextWindow:
    rtg: np.ndarray            # (K,)
    states: np.ndarray         # (K, d_s)
    actions: np.ndarray        # (K,) int
    timesteps: np.ndarray      # (K,) int, 1-based; 0 marks padding
    valid: np.ndarray          # (K,) bool
    target_actions: np.ndarray
    target_rewards: np.ndarray

    @property
    def K(self) -> int:
        return len(self.rtg)


def window_at(traj: Trajectory, end: int, K: int) -> ContextWindow:
    """The last ``K`` steps ending at 1-based step ``end``, left-padded if short."""
    if K < 1:
        raise ValueError("context length K must be >= 1")
    T = len(traj)
    if not 1 <= end <= T:
        raise ValueError(f"window end {end} outside [1, {T}]")
    start = max(0, end - K)
    n = end - start
    pad = K - n
    d_s = traj.states.shape[1]

    def padded(x, fill_shape=()):
        out = np.zeros((K,) + fill_shape, dtype=x.dtype)
        out[pad:] = x[start:end]
        return out

    timesteps = np.zeros(K, dtype=np.int64)
    timesteps[pad:] = np.arange(start + 1, end + 1)
    valid = np.zeros(K, dtype=bool)
    valid[pad:] = True
    actions = padded(traj.actions)
    rewards = padded(traj.rewards)
    return ContextWindow(
        rtg=padded(traj.rtg),
        states=padded(traj.states, (d_s,)),
        actions=actions,
        timesteps=timesteps,
        valid=valid,
        target_actions=actions.copy(),
        target_rewards=rewards,
    )


def sample_window(traj: Trajectory, K: int, rng: np.random.Generator) -> ContextWindow:
    """Uniform end index in [1, T], then the length-K window ending there."""
    if K < 1:
        raise ValueError("context length K must be >= 1")
    end = int(rng.integers(1, len(traj) + 1))
    return window_at(traj, end, K)


@dataclass(frozen=True, eq=False)
class Batch:
    rtg: np.ndarray            # (B, K)
    states: np.ndarray         # (B, K, d_s)
    actions: np.ndarray        # (B, K)
    timesteps: np.ndarray      # (B, K)
    valid: np.ndarray          # (B, K)
    target_actions: np.ndarray
    target_rewards: np.ndarray

    @property
    def size(self) -> int:
        return self.rtg.shape[0]

    @property
    def K(self) -> int:
        return self.rtg.shape[1]

    def replace(self, **changes) -> "Batch":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return Batch(**fields)


def stack_windows(windows: Sequence[ContextWindow]) -> Batch:
    if not windows:
        raise ValueError("cannot stack an empty list of windows")
    return Batch(**{name: np.stack([getattr(w, name) for w in windows])
                    for name in Batch.__dataclass_fields__})


# -- rating-log ingestion -----------------------------------------------------

@dataclass(frozen=True)
class EmaEncoderConfig:
    dim: int = 16
    decay: float = 0.9
    seed: int = 0


def item_embedding(index: int, cfg: EmaEncoderConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, index])
    return rng.standard_normal(cfg.dim) / np.sqrt(cfg.dim)


def ema_states(actions: Sequence[int], cfg: EmaEncoderConfig) -> np.ndarray:
    """Row t is the EMA of embeddings of items consumed before step t (zeros at t=1)."""
    out = np.zeros((len(actions), cfg.dim))
    s = np.zeros(cfg.dim)
    for t, a in enumerate(actions):
        out[t] = s
        s = cfg.decay * s + (1.0 - cfg.decay) * item_embedding(int(a), cfg)
    return out


@dataclass
class IngestResult:
    dataset: Dataset
    skipped: list[tuple[int, str]]
    item_ids: list[str]

    @property
    def skipped_count(self) -> int:
        return len(self.skipped)


REQUIRED_COLUMNS = ["user", "item", "rating", "timestamp"]


def ingest_ratings(stream: TextIO, max_rating: float, threshold_fraction: float = 0.75,
                   encoder: EmaEncoderConfig = EmaEncoderConfig(), gamma: float = 1.0) -> IngestResult:
    """Turn a user,item,rating,timestamp CSV into per-user binary-feedback trajectories.

    A rating strictly above ``threshold_fraction * max_rating`` is a positive
    (reward 1).  Unknown items get the next free index in order of first
    appearance; malformed rows are skipped and reported with line numbers.
    """
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None:
        raise ValueError("no rows")
    if [h.strip().lower() for h in header] != REQUIRED_COLUMNS:
        raise ValueError(f"expected header {','.join(REQUIRED_COLUMNS)}, got {','.join(header)}")

    cutoff = threshold_fraction * max_rating
    item_index: dict[str, int] = {}
    per_user: dict[str, list[tuple[float, int, float]]] = {}
    skipped: list[tuple[int, str]] = []
    seen_rows = 0
    for row in reader:
        lineno = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        seen_rows += 1
        if len(row) != 4:
            skipped.append((lineno, f"expected 4 fields, got {len(row)}"))
            continue
        user, item = row[0].strip(), row[1].strip()
        try:
            rating = float(row[2])
            stamp = float(row[3])
        except ValueError:
            skipped.append((lineno, "rating/timestamp not numeric"))
            continue
        if not user or not item or not np.isfinite(rating) or not np.isfinite(stamp):
            skipped.append((lineno, "empty or non-finite field"))
            continue
        if not 0.0 <= rating <= max_rating:
            skipped.append((lineno, f"rating {rating} outside [0, {max_rating}]"))
            continue
        idx = item_index.setdefault(item, len(item_index))
        per_user.setdefault(user, []).append((stamp, idx, 1.0 if rating > cutoff else 0.0))
    for lineno, reason in skipped:
        log.warning("skipping line %d: %s", lineno, reason)
    if seen_rows == 0:
        raise ValueError("no rows")

    trajectories = []
    for user, rows in per_user.items():
        rows.sort(key=lambda r: (r[0], r[1]))
        actions = [r[1] for r in rows]
        trajectories.append(Trajectory.build(user, ema_states(actions, encoder), actions,
                                             [r[2] for r in rows], gamma))
    ds = Dataset(tuple(trajectories), gamma, encoder.dim, max(1, len(item_index)))
    return IngestResult(ds, skipped, list(item_index))


def ingest_ratings_file(path, max_rating: float, **kwargs) -> IngestResult:
    with open(path, newline="", encoding="utf-8") as fh:
        return ingest_ratings(fh, max_rating, **kwargs)


# -- binary dataset file ------------------------------------------------------

def dataset_to_bytes(ds: Dataset) -> bytes:
    header = {
        "schema_version": DATASET_SCHEMA,
        "gamma": ds.gamma,
        "state_dim": ds.state_dim,
        "num_items": ds.num_items,
        "num_trajectories": len(ds),
        "user_ids": [t.user_id for t in ds.trajectories],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    if len(ds):
        states = np.concatenate([t.states for t in ds.trajectories])
        actions = np.concatenate([t.actions for t in ds.trajectories])
        rewards = np.concatenate([t.rewards for t in ds.trajectories])
    else:
        states = np.zeros((0, ds.state_dim))
        actions = np.zeros(0, dtype=np.int64)
        rewards = np.zeros(0)
    sections = [ds.lengths.astype("<i8"), states.astype("<f8"), actions.astype("<i8"), rewards.astype("<f8")]
    out = [DATASET_MAGIC, struct.pack("<II", DATASET_SCHEMA, len(head)), head]
    for sec in sections:
        raw = np.ascontiguousarray(sec).tobytes()
        out.append(struct.pack("<Q", len(raw)))
        out.append(raw)
    return b"".join(out)


def dataset_from_bytes(buf: bytes) -> Dataset:
    if buf[:len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise DatasetFormatError("not a dataset file (bad magic / version header)")
    pos = len(DATASET_MAGIC)
    if len(buf) < pos + 8:
        raise DatasetFormatError("truncated dataset file")
    schema, head_len = struct.unpack_from("<II", buf, pos)
    pos += 8
    if schema != DATASET_SCHEMA:
        raise DatasetFormatError(f"dataset schema version {schema} unsupported (expected {DATASET_SCHEMA})")
    if len(buf) < pos + head_len:
        raise DatasetFormatError("truncated dataset file")
    header = json.loads(buf[pos:pos + head_len].decode("utf-8"))
    pos += head_len
    if header.get("schema_version") != DATASET_SCHEMA:
        raise DatasetFormatError("dataset header schema mismatch")
    sections = []
    for dtype in ("<i8", "<f8", "<i8", "<f8"):
        if len(buf) < pos + 8:
            raise DatasetFormatError("truncated dataset file")
        (n,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        if len(buf) < pos + n or n % 8:
            raise DatasetFormatError("truncated dataset file")
        sections.append(np.frombuffer(buf[pos:pos + n], dtype=dtype).astype(dtype[1:]))
        pos += n
    if pos != len(buf):
        raise DatasetFormatError("trailing bytes after dataset sections")
    lengths, states, actions, rewards = sections
    d_s = int(header["state_dim"])
    total = int(lengths.sum())
    if states.size != total * d_s or actions.size != total or rewards.size != total \
            or len(lengths) != header["num_trajectories"]:
        raise DatasetFormatError("dataset sections inconsistent with header")
    states = states.reshape(total, d_s)
    gamma = float(header["gamma"])
    bounds = np.concatenate([[0], np.cumsum(lengths)])
    trajs = tuple(
        Trajectory.build(uid, states[a:b], actions[a:b], rewards[a:b], gamma)
        for uid, a, b in zip(header["user_ids"], bounds[:-1], bounds[1:]))
    return Dataset(trajs, gamma, d_s, int(header["num_items"]))


def save_dataset(path, ds: Dataset) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
