"""Synthetic recommendation MDP.

Users carry a hidden unit preference vector over a latent space; items are
fixed unit embeddings.  A recommended item is clicked with probability
``sigmoid(<pref, e_item> / temperature)``; a click drags the preference
toward the item by ``drift``.  The observable state is a fixed linear view
of an interaction summary that starts at the user's initial preference (the
profile) and is updated as an EMA of signed item embeddings (+ on click,
- on skip).

Policies only get a :class:`History`.  The scripted expert is the one
privileged policy: it is constructed with the environment and reads the
hidden preference through :meth:`RecEnv.hidden_preference`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from .config import build_dataclass, format_kv, parse_kv
from .data import Dataset, Trajectory

SUMMARY_DECAY = 0.9


@dataclass(frozen=True)
class EnvSpec:
    m: int = 50
    d_s: int = 16
    latent_dim: int = 8
    horizon: int = 20
    drift: float = 0.1
    temperature: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if min(self.m, self.d_s, self.latent_dim, self.horizon) < 1:
            raise ValueError("environment dimensions must all be >= 1")
        if not 0.0 <= self.drift < 1.0:
            raise ValueError("drift must lie in [0, 1)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def to_text(self) -> str:
        return format_kv(asdict(self))

    @classmethod
    def from_text(cls, text: str, source: str = "<env spec>") -> "EnvSpec":
        return build_dataclass(cls, parse_kv(text, source))

    @classmethod
    def read(cls, path) -> "EnvSpec":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), str(path))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class EpisodeOver(RuntimeError):
    pass


@dataclass
class Session:
    """One user's live episode (environment-side, never handed to policies)."""
    pref: np.ndarray
    summary: np.ndarray
    rng: np.random.Generator
    t: int = 0
    done: bool = False


@dataclass
class History:
    """What a policy may see: RTG tokens, observed states, past actions/rewards."""
    episode: int
    rtg: list[float] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)

    @property
    def t(self) -> int:
        return len(self.states)


class Policy(Protocol):
    def act(self, history: History, target_rtg: float) -> int: ...


class RecEnv:
    def __init__(self, spec: EnvSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0xE17])
        items = rng.standard_normal((spec.m, spec.latent_dim))
        self.items = items / np.linalg.norm(items, axis=1, keepdims=True)
        self.view = rng.standard_normal((spec.d_s, spec.latent_dim)) / np.sqrt(spec.latent_dim)
        self._live: dict[int, Session] = {}

    @property
    def num_items(self) -> int:
        return self.spec.m

    def observe(self, session: Session) -> np.ndarray:
        return self.view @ session.summary

    def click_probs(self, pref: np.ndarray) -> np.ndarray:
        return sigmoid(self.items @ pref / self.spec.temperature)

    def reset(self, rng: np.random.Generator, episode: Optional[int] = None) -> tuple[Session, np.ndarray]:
        pref = rng.standard_normal(self.spec.latent_dim)
        pref /= np.linalg.norm(pref)
        session = Session(pref=pref, summary=pref.copy(), rng=rng)
        if episode is not None:
            self._live[episode] = session
        return session, self.observe(session)

    def step(self, session: Session, action: int) -> tuple[np.ndarray, float, bool]:
        if session.done:
            raise EpisodeOver("step() on a terminated episode")
        if not 0 <= int(action) < self.spec.m:
            raise IndexError(f"action {action} outside [0, {self.spec.m})")
        e = self.items[int(action)]
        p = sigmoid(float(session.pref @ e) / self.spec.temperature)
        click = bool(session.rng.random() < p)
        if click and self.spec.drift > 0:
            moved = (1.0 - self.spec.drift) * session.pref + self.spec.drift * e
            session.pref = moved / np.linalg.norm(moved)
        sign = 1.0 if click else -1.0
        session.summary = SUMMARY_DECAY * session.summary + (1.0 - SUMMARY_DECAY) * sign * e
        session.t += 1
        session.done = session.t >= self.spec.horizon
        return self.observe(session), float(click), session.done

    def hidden_preference(self, history: History) -> np.ndarray:
        """Privileged accessor for the scripted expert only."""
        return self._live[history.episode].pref

    def release(self, episode: int) -> None:
        self._live.pop(episode, None)


# -- policies -------------------------------------------------------------------

def _step_rng(seed: int, history: History) -> np.random.Generator:
    return np.random.default_rng([seed, history.episode, history.t])


class RandomPolicy:
    def __init__(self, num_items: int, seed: int = 0):
        self.num_items = num_items
        self.seed = seed

    def act(self, history: History, target_rtg: float) -> int:
        return int(_step_rng(self.seed, history).integers(self.num_items))


class OraclePolicy:
    """Greedy argmax of the true click probability, epsilon-uniform exploration."""

    def __init__(self, env: RecEnv, epsilon: float = 0.1, seed: int = 0):
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        self.env = env
        self.epsilon = epsilon
        self.seed = seed

    def greedy(self, pref: np.ndarray) -> int:
        # np.argmax returns the lowest index among ties
        return int(np.argmax(self.env.click_probs(pref)))

    def act(self, history: History, target_rtg: float) -> int:
        rng = _step_rng(self.seed, history)
        explore = rng.random() < self.epsilon
        if explore:
            return int(rng.integers(self.env.num_items))
        return self.greedy(self.env.hidden_preference(history))


# -- rollouts -------------------------------------------------------------------

def next_rtg(g: float, reward: float, gamma: float, target: float) -> float:
    if gamma == 0.0:
        return target
    return (g - reward) / gamma


def rollout(env: RecEnv, policy, episodes: int, target_rtg: float = 0.0,
            seed: int = 0, rtg_gamma: float = 1.0, first_episode: int = 0) -> list[History]:
    """Run ``episodes`` episodes in lockstep and return their full histories.

    Episode ``e`` draws its user and clicks from a generator keyed by
    (spec seed, seed, e), so results do not depend on batching.  A policy
    with ``act_batch(histories, targets)`` is called once per step for all
    live episodes.
    """
    if episodes < 1:
        raise ValueError("need at least one episode")
    ids = range(first_episode, first_episode + episodes)
    sessions, histories = [], []
    for e in ids:
        session, obs = env.reset(np.random.default_rng([env.spec.seed, seed, e]), episode=e)
        sessions.append(session)
        histories.append(History(episode=e, rtg=[float(target_rtg)], states=[obs]))
    try:
        while True:
            live = [i for i, s in enumerate(sessions) if not s.done]
            if not live:
                break
            targets = [target_rtg] * len(live)
            if hasattr(policy, "act_batch"):
                actions = policy.act_batch([histories[i] for i in live], targets)
            else:
                actions = [policy.act(histories[i], target_rtg) for i in live]
            for i, a in zip(live, actions):
                h, s = histories[i], sessions[i]
                obs, r, done = env.step(s, int(a))
                h.actions.append(int(a))
                h.rewards.append(r)
                if not done:
                    h.states.append(obs)
                    h.rtg.append(next_rtg(h.rtg[-1], r, rtg_gamma, target_rtg))
    finally:
        for e in ids:
            env.release(e)
    return histories


def collect_dataset(env: RecEnv, policy, num_trajectories: int, seed: int = 0,
                    gamma: float = 1.0) -> Dataset:
    """Roll out ``policy`` and record (s, a, r) steps with returns-to-go."""
    histories = rollout(env, policy, num_trajectories, seed=seed)
    trajs = tuple(Trajectory.build(f"u{h.episode}", np.array(h.states), h.actions, h.rewards, gamma)
                  for h in histories)
    return Dataset(trajs, gamma, env.spec.d_s, env.spec.m)


@dataclass(frozen=True)
class RolloutMetrics:
    ctr: float
    ctr_half_width: float
    mean_return: float
    return_variance: float
    return_half_width: float
    episodes: int
    steps: int

    def as_dict(self) -> dict:
        return asdict(self)


Z95 = 1.959963984540054


def summarize(histories: Sequence[History]) -> RolloutMetrics:
    returns = np.array([np.sum(h.rewards) for h in histories])
    lengths = np.array([len(h.rewards) for h in histories])
    per_ep = returns / lengths
    n = len(histories)
    ctr = float(returns.sum() / lengths.sum())
    sd_ctr = float(np.std(per_ep, ddof=1)) if n > 1 else 0.0
    var_ret = float(np.var(returns, ddof=1)) if n > 1 else 0.0
    return RolloutMetrics(
        ctr=ctr,
        ctr_half_width=float(Z95 * sd_ctr / np.sqrt(n)),
        mean_return=float(returns.mean()),
        return_variance=var_ret,
        return_half_width=float(Z95 * np.sqrt(var_ret / n)),
        episodes=n,
        steps=int(lengths.sum()),
    )


def evaluate_policy(env: RecEnv, policy, episodes: int, target_rtg: float = 0.0,
                    seed: int = 0, rtg_gamma: float = 1.0) -> RolloutMetrics:
    """CTR and return statistics with 95% normal-approximation half-widths."""
    return summarize(rollout(env, policy, episodes, target_rtg, seed, rtg_gamma))


def default_target_rtg(dataset: Dataset) -> float:
    return 0.9 * float(dataset.returns.max())
