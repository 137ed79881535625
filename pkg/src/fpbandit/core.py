"""Contextual-bandit protocol: environments, history, the round loop and regret.

Every environment is a hidden table: ``contexts`` (N x d1) and a fully
observed ``rewards`` table (N x K) in [0, 1]. Each round draws one row
uniformly with replacement. Agents only ever see the context row and the
reward of the action they picked.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator, Optional, Protocol, Sequence

import numpy as np

from .errors import ContractError, ShapeError

UPDATE_EVERY = 30


@dataclass(frozen=True)
class ActionSet:
    """Drug feature rows, one per action."""

    features: np.ndarray
    ids: tuple = ()

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ShapeError(f"action features must be a non-empty K x d2 matrix, got {feats.shape}")
        if len(np.unique(feats, axis=0)) != feats.shape[0]:
            raise ContractError("action feature rows must be distinct")
        ids = tuple(self.ids) if self.ids else tuple(f"drug_{i}" for i in range(feats.shape[0]))
        if len(ids) != feats.shape[0]:
            raise ShapeError(f"{len(ids)} ids for {feats.shape[0]} actions")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def inputs(self, x_g: np.ndarray) -> np.ndarray:
        """Concatenated ``[x_g || x_d(a)]`` rows for every action."""
        x_g = np.asarray(x_g, dtype=np.float64).reshape(1, -1)
        return np.hstack([np.repeat(x_g, len(self), axis=0), self.features])

    @classmethod
    def one_hot(cls, k: int, ids: Sequence[str] = ()) -> "ActionSet":
        return cls(np.eye(k), tuple(ids))


class HistoryBuffer:
    """Append-only log of (context, action, drug features, reward, round)."""

    def __init__(self, context_dim: int, action_dim: int, capacity: int = 256):
        self.context_dim = context_dim
        self.action_dim = action_dim
        self._n = 0
        self._ctx = np.empty((capacity, context_dim))
        self._drug = np.empty((capacity, action_dim))
        self._act = np.empty(capacity, dtype=np.int64)
        self._rew = np.empty(capacity)
        self._round = np.empty(capacity, dtype=np.int64)

    def __len__(self) -> int:
        return self._n

    def append(self, x_g, action: int, x_d, reward: float, t: int) -> None:
        if not 0.0 <= reward <= 1.0:
            raise ContractError(f"reward {reward} outside [0, 1]")
        if self._n and t <= self._round[self._n - 1]:
            raise ContractError(f"round {t} not after round {self._round[self._n - 1]}")
        if self._n == self._ctx.shape[0]:
            self._grow()
        i = self._n
        self._ctx[i] = x_g
        self._drug[i] = x_d
        self._act[i] = action
        self._rew[i] = reward
        self._round[i] = t
        self._n += 1

    def _grow(self) -> None:
        cap = 2 * self._ctx.shape[0]
        for name in ("_ctx", "_drug", "_act", "_rew", "_round"):
            old = getattr(self, name)
            new = np.empty((cap,) + old.shape[1:], dtype=old.dtype)
            new[: self._n] = old[: self._n]
            setattr(self, name, new)

    @property
    def contexts(self) -> np.ndarray:
        return self._ctx[: self._n]

    @property
    def drug_features(self) -> np.ndarray:
        return self._drug[: self._n]

    @property
    def actions(self) -> np.ndarray:
        return self._act[: self._n]

    @property
    def rewards(self) -> np.ndarray:
        return self._rew[: self._n]

    @property
    def rounds(self) -> np.ndarray:
        return self._round[: self._n]

    def inputs(self) -> np.ndarray:
        return np.hstack([self.contexts, self.drug_features])


@dataclass
class RegretTrace:
    instantaneous: np.ndarray
    chosen: np.ndarray
    oracle: np.ndarray
    collected: np.ndarray
    cumulative: np.ndarray = field(init=False)

    def __post_init__(self):
        self.cumulative = np.cumsum(self.instantaneous)

    @property
    def final(self) -> float:
        return float(self.cumulative[-1])


class Agent(Protocol):
    def choose(self, x_g: np.ndarray) -> int: ...

    def observe(self, x_g: np.ndarray, action: int, reward: float) -> None: ...

    def update(self, history: HistoryBuffer) -> None: ...


class Environment:
    """A hidden reward table replayed row by row."""

    KINDS = ("tabular-replay", "synthetic-linear", "synthetic-nonlinear")

    def __init__(self, kind: str, contexts, rewards, actions: ActionSet, seed: int = 0,
                 name: Optional[str] = None):
        if kind not in self.KINDS:
            raise ContractError(f"unknown environment kind {kind!r}")
        contexts = np.asarray(contexts, dtype=np.float64)
        rewards = np.asarray(rewards, dtype=np.float64)
        if contexts.ndim != 2 or rewards.ndim != 2 or contexts.shape[0] != rewards.shape[0]:
            raise ShapeError(f"contexts {contexts.shape} and rewards {rewards.shape} disagree")
        if rewards.shape[1] != len(actions):
            raise ShapeError(f"reward table has {rewards.shape[1]} columns for {len(actions)} actions")
        if np.isnan(rewards).any():
            raise ContractError("reward table has missing entries; filter it first")
        if rewards.min() < 0.0 or rewards.max() > 1.0:
            raise ContractError("rewards must lie in [0, 1]")
        if not np.all(np.isfinite(contexts)):
            raise ContractError("contexts contain non-finite values")
        self.kind = kind
        self.contexts = contexts
        self.rewards = rewards
        self.actions = actions
        self.seed = seed
        self.name = name or kind

    @property
    def context_dim(self) -> int:
        return self.contexts.shape[1]

    def row_indices(self, T: int, seed: Optional[int] = None) -> np.ndarray:
        rng = np.random.default_rng(self.seed if seed is None else seed)
        return rng.integers(0, self.contexts.shape[0], size=T)

    def stream(self, T: int, seed: Optional[int] = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield ``(context, hidden reward vector)`` for T rounds."""
        for i in self.row_indices(T, seed):
            yield self.contexts[i], self.rewards[i]

    def checksum(self, T: int, seed: Optional[int] = None) -> str:
        idx = self.row_indices(T, seed)
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.contexts[idx]).tobytes())
        h.update(np.ascontiguousarray(self.rewards[idx]).tobytes())
        return h.hexdigest()


class OracleAgent:
    """Test-only agent that is shown the hidden reward vector each round."""

    sees_hidden_rewards = True

    def __init__(self):
        self._rewards = None

    def reveal(self, rewards: np.ndarray) -> None:
        self._rewards = rewards

    def choose(self, x_g):
        return int(np.argmax(self._rewards))

    def observe(self, x_g, action, reward):
        pass

    def update(self, history):
        pass


def run_trial(env: Environment, agent, T: int, seed: Optional[int] = None,
              update_every: int = UPDATE_EVERY) -> tuple[RegretTrace, HistoryBuffer]:
    """Play T rounds; the agent is updated after every ``update_every`` rounds."""
    if T < 1:
        raise ContractError(f"T must be >= 1, got {T}")
    k = len(env.actions)
    history = HistoryBuffer(env.context_dim, env.actions.dim, capacity=max(T, 1))
    inst = np.empty(T)
    chosen = np.empty(T, dtype=np.int64)
    best = np.empty(T, dtype=np.int64)
    collected = np.empty(T)
    peek = getattr(agent, "sees_hidden_rewards", False)
    for t, (x_g, r) in enumerate(env.stream(T, seed)):
        if peek:
            agent.reveal(r)
        a = agent.choose(x_g)
        if not (isinstance(a, (int, np.integer)) and 0 <= a < k):
            raise ContractError(f"agent returned invalid action {a!r} at round {t + 1}")
        a = int(a)
        a_star = int(np.argmax(r))
        reward = float(r[a])
        inst[t] = r[a_star] - reward
        chosen[t], best[t], collected[t] = a, a_star, reward
        agent.observe(x_g, a, reward)
        history.append(x_g, a, env.actions.features[a], reward, t + 1)
        if (t + 1) % update_every == 0:
            agent.update(history)
    return RegretTrace(inst, chosen, best, collected), history


def oracle_value(env: Environment, T: int, seed: Optional[int] = None) -> float:
    """Total reward of the per-round argmax policy on the seed's round sequence."""
    idx = env.row_indices(T, seed)
    return float(env.rewards[idx].max(axis=1).sum())


# -- environment factories ----------------------------------------------------

def _minmax_columns(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.where(hi > lo, (x - lo) / span, 0.5)


def random_fingerprints(k: int, d2: int, rng: np.random.Generator, density: float = 0.25,
                        near_duplicate_pairs: int = 0) -> np.ndarray:
    """Distinct random 0/1 rows; optionally make pairs differ in a single bit."""
    if near_duplicate_pairs * 2 > k:
        raise ContractError("not enough actions for the requested near-duplicate pairs")
    rows: list[np.ndarray] = []
    seen: set[bytes] = set()
    while len(rows) < k:
        if len(rows) % 2 == 1 and len(rows) // 2 < near_duplicate_pairs:
            cand = rows[-1].copy()
            j = rng.integers(d2)
            cand[j] = 1.0 - cand[j]
        else:
            cand = (rng.random(d2) < density).astype(np.float64)
        key = cand.tobytes()
        if key not in seen:
            seen.add(key)
            rows.append(cand)
    return np.array(rows)


def make_synthetic_linear(d1: int, d2: int, k: int, seed: int, n_contexts: int = 1000,
                          near_duplicate_pairs: int = 0) -> Environment:
    """Rewards ``sigmoid(w . [x_g || x_d])`` for a fixed random ``w``."""
    rng = np.random.default_rng(seed)
    contexts = _minmax_columns(rng.normal(size=(n_contexts, d1)))
    actions = ActionSet(random_fingerprints(k, d2, rng, near_duplicate_pairs=near_duplicate_pairs))
    w = rng.normal(size=d1 + d2)
    logits = contexts @ w[:d1][:, None] + (actions.features @ w[d1:])[None, :]
    rewards = np.clip(1.0 / (1.0 + np.exp(-logits)), 0.0, 1.0)
    return Environment("synthetic-linear", contexts, rewards, actions, seed)


class _RewardNet:
    """Fixed random tanh network ``[x_g || x_d] -> 32 -> 32 -> 1``."""

    def __init__(self, d: int, width: int, rng: np.random.Generator):
        self.layers = []
        for fan_in, fan_out in ((d, width), (width, width), (width, 1)):
            w = rng.normal(0.0, 2.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
            self.layers.append((w, rng.normal(0.0, 0.5, size=fan_out)))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        for i, (w, b) in enumerate(self.layers):
            x = x @ w + b
            if i < len(self.layers) - 1:
                x = np.tanh(x)
        return x[..., 0]


def make_synthetic_nonlinear(d1: int, d2: int, k: int, seed: int, n_contexts: int = 1000,
                             width: int = 32, near_duplicate_pairs: int = 0,
                             n_calibration: int = 10_000) -> Environment:
    """Rewards from a fixed random two-hidden-layer tanh network.

    Raw outputs are min-max scaled with the range of a calibration draw of
    random (context, action) pairs and clipped into [0, 1].
    """
    rng = np.random.default_rng(seed)
    contexts = _minmax_columns(rng.normal(size=(n_contexts, d1)))
    actions = ActionSet(random_fingerprints(k, d2, rng, near_duplicate_pairs=near_duplicate_pairs))
    net = _RewardNet(d1 + d2, width, rng)
    # contexts enter in [-1, 1], fingerprint bits in {-0.5, 0.5}
    x = np.concatenate([
        np.repeat(2.0 * contexts[:, None, :] - 1.0, k, axis=1),
        np.repeat(actions.features[None, :, :] - 0.5, n_contexts, axis=0),
    ], axis=2)
    raw = net(x)
    cal = raw[rng.integers(0, n_contexts, n_calibration), rng.integers(0, k, n_calibration)]
    lo, hi = cal.min(), cal.max()
    rewards = np.clip((raw - lo) / (hi - lo), 0.0, 1.0)
    return Environment("synthetic-nonlinear", contexts, rewards, actions, seed)


def make_tabular_replay(contexts, rewards, actions: ActionSet, seed: int = 0,
                        name: Optional[str] = None) -> Environment:
    return Environment("tabular-replay", contexts, rewards, actions, seed, name=name)


def make_constant_table(rewards: Sequence[float], seed: int = 0) -> Environment:
    """One-row table with fixed per-action rewards; contexts are a single zero."""
    r = np.asarray(rewards, dtype=np.float64)[None, :]
    return make_tabular_replay(np.zeros((1, 1)), r, ActionSet.one_hot(r.shape[1]), seed,
                               name="constant")
