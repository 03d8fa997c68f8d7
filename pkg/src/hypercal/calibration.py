"""K-nearest-neighbour calibration model built from an offline log.

The model only ever moves between states that literally appear in the log. From
the current logged state it looks up the ``k`` closest logged transitions that took
the same action (closeness measured in the Laplace embedding), picks one of them at
random with closer ones more likely, and jumps to that transition's next state.
If even the closest one is too far away the episode ends with a pessimistic
default return instead.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numba import njit

from hypercal.datalog import DataLog
from hypercal.envs import EnvSpec, StepOutcome
from hypercal.kdtree import KDTree
from hypercal.seeding import as_generator

MODEL_VERSION = 1
DEFAULT_K = 3
THRESHOLD_QUANTILE = 99.0
MIN_THRESHOLD = 1e-12


class ModelStepOutcome(NamedTuple):
    reward: float
    next_index: int  # -1 after a coverage truncation
    terminal: bool
    restarted: bool
    truncated_by_coverage: bool


def sampling_weights(distances) -> np.ndarray:
    """Normalised ``1 - d_i / sum(d)`` over the finite entries of ``distances``.

    The raw weights sum to ``k - 1``, so dividing by their sum keeps their ratios
    and gives a distribution. A single neighbour gets probability 1; when every
    distance is zero the neighbours are equally likely. Infinite entries (padding
    for actions with fewer than ``k`` logged transitions) get probability 0.
    """
    d = np.asarray(distances, dtype=float)
    out = np.zeros(d.size)
    finite = np.isfinite(d)
    m = int(finite.sum())
    if m == 0:
        return out
    total = d[finite].sum()
    if m == 1 or total == 0.0:
        out[finite] = 1.0 / m
        return out
    w = 1.0 - d[finite] / total
    out[finite] = w / w.sum()
    return out


@njit(cache=True)
def _pick_neighbor(dist, u):
    """Index into ``dist`` sampled with the weights of ``sampling_weights``."""
    k = dist.size
    m = 0
    total = 0.0
    for i in range(k):
        if np.isfinite(dist[i]):
            m += 1
            total += dist[i]
    if m == 1 or total == 0.0:
        j = min(int(u * m), m - 1)
        return j
    # raw weights 1 - d_i/total sum to m - 1
    norm = m - 1.0
    c = 0.0
    for i in range(m):
        c += (1.0 - dist[i] / total) / norm
        if u < c:
            return i
    # u fell in the rounding gap: last neighbour with nonzero weight
    for i in range(m - 1, -1, -1):
        if dist[i] < total:
            return i
    return m - 1


@njit(cache=True)
def model_transition(cache_next, cache_reward, cache_terminal, cache_restart, cache_dist,
                     idx, action, u, threshold, r_default):
    """(reward, next index, terminal, restarted, truncated) for one model step."""
    dist = cache_dist[action, idx]
    if not np.isfinite(dist[0]) or dist[0] > threshold:
        return r_default, -1, True, False, True
    j = _pick_neighbor(dist, u)
    return (cache_reward[action, idx, j], cache_next[action, idx, j],
            cache_terminal[action, idx, j], cache_restart[action, idx, j], False)


def _row_key(row: np.ndarray) -> bytes:
    return np.ascontiguousarray(row, dtype="<f8").tobytes()


def key_table(log: DataLog):
    """Distinct logged states: episode starts first, then next states in log order.

    Returns ``(keys, start_idx, state_idx, next_idx)`` where ``state_idx[t]`` and
    ``next_idx[t]`` are the key rows of transition ``t``'s state and next state.
    """
    index: dict[bytes, int] = {}
    rows = []

    def add(row):
        b = _row_key(row)
        if b not in index:
            index[b] = len(rows)
            rows.append(row)
        return index[b]

    starts = sorted({add(s) for s in log.start_states()})
    next_idx = np.array([add(s) for s in log.next_states], dtype=np.int64)
    # a transition's state is either an episode start or the previous next state
    state_idx = np.empty(len(log), dtype=np.int64)
    for t in range(len(log)):
        state_idx[t] = index[_row_key(log.states[t])] if log.episode_starts[t] else next_idx[t - 1]
    return np.array(rows, dtype=float), np.array(starts, dtype=np.int64), state_idx, next_idx


@dataclass
class CalibrationModel:
    keys: np.ndarray  # raw logged states, one row per key
    embeddings: np.ndarray  # psi(keys)
    start_idx: np.ndarray
    cache_next: np.ndarray  # (n_actions, n_keys, k)
    cache_reward: np.ndarray
    cache_terminal: np.ndarray
    cache_restart: np.ndarray
    cache_dist: np.ndarray  # squared embedding distance, inf for padding
    cache_source: np.ndarray  # logged transition index of each cached neighbour, -1 for padding
    r_default: float
    threshold: float
    k: int
    n_actions: int
    spec: EnvSpec | None = None
    encoder_digest: str = ""
    stats: dict | None = None

    @property
    def n_keys(self) -> int:
        return len(self.keys)

    def start(self, rng) -> tuple[np.ndarray, int]:
        """Uniformly pick a logged start state; returns (state, key index)."""
        rng = as_generator(rng)
        j = min(int(rng.random() * len(self.start_idx)), len(self.start_idx) - 1)
        idx = int(self.start_idx[j])
        return self.keys[idx].copy(), idx

    def step_index(self, idx: int, action: int, rng) -> ModelStepOutcome:
        if not 0 <= action < self.n_actions:
            raise ValueError(f"action must be in [0, {self.n_actions}), got {action}")
        if not 0 <= idx < self.n_keys:
            raise IndexError(f"key index {idx} out of range")
        u = as_generator(rng).random()
        r, nxt, term, restart, trunc = model_transition(
            self.cache_next, self.cache_reward, self.cache_terminal, self.cache_restart,
            self.cache_dist, idx, action, u, self.threshold, self.r_default)
        return ModelStepOutcome(float(r), int(nxt), bool(term), bool(restart), bool(trunc))

    def as_environment(self, seed=None) -> "CalibrationEnv":
        return CalibrationEnv(self, seed)

    # -- persistence -------------------------------------------------------
    def save(self, path) -> None:
        arrays = {name: getattr(self, name) for name in (
            "keys", "embeddings", "start_idx", "cache_next", "cache_reward", "cache_terminal",
            "cache_restart", "cache_dist", "cache_source")}
        meta = dict(version=MODEL_VERSION, r_default=self.r_default, threshold=self.threshold,
                    k=self.k, n_actions=self.n_actions, encoder_digest=self.encoder_digest,
                    spec=None if self.spec is None else self.spec.__dict__)
        with open(path, "wb") as f:
            np.savez(f, meta=np.array(json.dumps(meta)), **arrays)
        with open(f"{path}.json", "w") as f:
            json.dump({**meta, "stats": self.stats or {}}, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "CalibrationModel":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("version") != MODEL_VERSION:
                raise ValueError(f"{path}: unsupported model version {meta.get('version')}")
            arrays = {name: z[name] for name in z.files if name != "meta"}
        spec = EnvSpec(**meta["spec"]) if meta.get("spec") else None
        stats = None
        try:
            with open(f"{path}.json") as f:
                stats = json.load(f).get("stats")
        except FileNotFoundError:
            pass
        return cls(**arrays, r_default=float(meta["r_default"]), threshold=float(meta["threshold"]),
                   k=int(meta["k"]), n_actions=int(meta["n_actions"]), spec=spec,
                   encoder_digest=meta.get("encoder_digest", ""), stats=stats)


def distance(psi_i, a_i: int, psi_j, a_j: int) -> float:
    """Squared embedding distance for equal actions, infinity otherwise."""
    if a_i != a_j:
        return float("inf")
    diff = np.asarray(psi_i, dtype=float) - np.asarray(psi_j, dtype=float)
    return float((diff * diff).sum())


def action_trees(embeddings_of_states: np.ndarray, actions: np.ndarray, n_actions: int):
    """One KD-tree per action over the embedded states of that action's transitions."""
    trees, members = [], []
    for a in range(n_actions):
        rows = np.flatnonzero(actions == a)
        members.append(rows)
        trees.append(KDTree(embeddings_of_states[rows]) if len(rows) else None)
    return trees, members


def loo_threshold(trees, quantile: float = THRESHOLD_QUANTILE) -> float:
    """Quantile of leave-one-out nearest-neighbour distances, pooled over actions."""
    pooled = []
    for tree in trees:
        if tree is None or tree.n < 2:
            continue
        d, i = tree.query(tree.points, 2)
        self_first = i[:, 0] == np.arange(tree.n)
        pooled.append(np.where(self_first, d[:, 1], d[:, 0]))
    if not pooled:
        return float("inf")
    return max(float(np.percentile(np.concatenate(pooled), quantile)), MIN_THRESHOLD)


def build_model(log: DataLog, encoder, n_actions: int, k: int = DEFAULT_K,
                threshold: float | None = None, spec: EnvSpec | None = None) -> CalibrationModel:
    """Key table, per-action trees and the precomputed neighbour cache for every key."""
    if len(log) == 0:
        raise ValueError("cannot build a calibration model from an empty log")
    if k < 1:
        raise ValueError("k must be at least 1")
    log.validate()
    keys, start_idx, state_idx, next_idx = key_table(log)
    emb = np.asarray(encoder(keys), dtype=float)
    trees, members = action_trees(emb[state_idx], log.actions, n_actions)
    missing = [a for a in range(n_actions) if trees[a] is None]
    if missing:
        warnings.warn(f"actions {missing} never appear in the log; the model always truncates them")
    n = len(keys)
    shape = (n_actions, n, k)
    cache_next = np.full(shape, -1, dtype=np.int64)
    cache_source = np.full(shape, -1, dtype=np.int64)
    cache_reward = np.zeros(shape)
    cache_terminal = np.zeros(shape, dtype=np.bool_)
    cache_restart = np.zeros(shape, dtype=np.bool_)
    cache_dist = np.full(shape, np.inf)
    for a, tree in enumerate(trees):
        if tree is None:
            continue
        d, local = tree.query(emb, k)
        valid = local >= 0
        src = np.where(valid, members[a][np.maximum(local, 0)], -1)
        cache_source[a] = src
        cache_dist[a] = np.where(valid, d, np.inf)
        safe = np.maximum(src, 0)
        cache_next[a] = np.where(valid, next_idx[safe], -1)
        cache_reward[a] = np.where(valid, log.rewards[safe], 0.0)
        cache_terminal[a] = valid & log.terminals[safe]
        cache_restart[a] = valid & log.restarts[safe]
    theta = loo_threshold(trees) if threshold is None else float(threshold)
    if not theta > 0:
        raise ValueError("the distance threshold must be positive")
    r_default = float(log.episode_returns().min())
    stats = dict(n_keys=n, n_start_states=int(len(start_idx)), n_transitions=len(log),
                 threshold=theta, r_default=r_default, k=k, missing_actions=missing,
                 per_action_counts=[int(len(m)) for m in members])
    model = CalibrationModel(keys, emb, start_idx, cache_next, cache_reward, cache_terminal,
                             cache_restart, cache_dist, cache_source, r_default, theta, k,
                             n_actions, spec, getattr(encoder, "digest", lambda: "")(), stats)
    model._trees = trees  # kept for cross-checking the cache; not persisted
    model._members = members
    return model


class CalibrationEnv:
    """Environment interface over a calibration model (tracks the current key index)."""

    def __init__(self, model: CalibrationModel, seed=None):
        self.model = model
        self.rng = as_generator(seed)
        self.spec = model.spec
        self.index = -1
        self.truncations = 0
        self.last = None

    def reset(self) -> np.ndarray:
        state, self.index = self.model.start(self.rng)
        return state

    def step(self, action: int) -> StepOutcome:
        if self.index < 0:
            raise RuntimeError("call reset() before step()")
        out = self.model.step_index(self.index, int(action), self.rng)
        self.last = out
        if out.truncated_by_coverage:
            self.truncations += 1
            state = self.model.keys[self.index].copy()
            self.index = -1
            return StepOutcome(state, out.reward, True)
        self.index = out.next_index
        return StepOutcome(self.model.keys[out.next_index].copy(), out.reward, out.terminal, out.restarted)
