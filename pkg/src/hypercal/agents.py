"""Online learners whose hyperparameters get tuned.

Both agents use tile-coded linear approximators. Weights live in compact "slot"
arrays: a slot is allocated the first time a tile index is seen, so memory grows
with the visited part of the (very large) tile table instead of its full size.

Expected Sarsa keeps an *active set* of coordinates whose trace or Adam momentum
is non-negligible. Coordinates leave the set once both the trace and the Adam
step fall below ``PRUNE_TOL``; their moments are decayed lazily (``beta ** gap``)
when they come back, which is what a dense Adam step with zero gradient does.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit

from hypercal.features import TileCoder
from hypercal.seeding import as_generator

ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
PRUNE_TOL = 1e-10


@dataclass(frozen=True)
class Hyperparams:
    """One candidate setting. ``actor_ratio`` is set only for the actor-critic agent."""

    stepsize: float
    beta1: float = 0.0
    temperature: float = 1.0
    optimistic_init: float = 0.0
    trace_decay: float = 0.0
    actor_ratio: float | None = None

    def __post_init__(self):
        if self.stepsize <= 0:
            raise ValueError(f"stepsize must be positive, got {self.stepsize}")
        if not 0 <= self.beta1 < 1:
            raise ValueError(f"beta1 must be in [0, 1), got {self.beta1}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0 <= self.trace_decay <= 1:
            raise ValueError(f"trace_decay must be in [0, 1], got {self.trace_decay}")

    def as_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @property
    def actor_stepsize(self) -> float:
        return self.stepsize * self.actor_ratio


def softmax_policy(qvalues, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(qvalues, dtype=float) / temperature
    z = np.exp(z - z.max())
    return z / z.sum()


def adam_update(m, v, g, t, alpha, beta1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """One Adam step. Returns the new moments and the weight increment (to be *added*)."""
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return m, v, -alpha * m_hat / (np.sqrt(v_hat) + eps)


def sample_action(probs, u: float) -> int:
    c = 0.0
    for a, p in enumerate(probs):
        c += p
        if u < c:
            return a
    # u landed in the rounding gap above the cumulative sum
    return int(np.flatnonzero(np.asarray(probs) > 0)[-1])


class SlotMap:
    """Tile index -> dense slot, growing on demand."""

    def __init__(self):
        self.table: dict[int, int] = {}

    def __len__(self):
        return len(self.table)

    def lookup(self, feats: np.ndarray) -> np.ndarray:
        table = self.table
        return np.array([table.setdefault(f, len(table)) for f in feats.tolist()], dtype=np.int64)

    def find(self, feats: np.ndarray) -> np.ndarray:
        """Slots for known tiles, -1 for unseen ones (no allocation)."""
        return np.array([self.table.get(f, -1) for f in feats.tolist()], dtype=np.int64)


@njit(cache=True)
def _q_values(w, slots, n_actions, base):
    q = np.full(n_actions, base * 1.0)
    for s in slots:
        if s < 0:
            continue
        for b in range(n_actions):
            q[b] += w[s * n_actions + b]
    return q


@njit(cache=True)
def _softmax(q, tau):
    z = q / tau
    z = np.exp(z - z.max())
    return z / z.sum()


@njit(cache=True)
def _sample(p, u):
    c = 0.0
    last = 0
    for a in range(p.size):
        c += p[a]
        if p[a] > 0:
            last = a
        if u < c:
            return a
    return last


@njit(cache=True)
def _esarsa_update(w, z, m, v, last, active, in_active, n_active,
                   slots_s, action, reward, slots_n, terminal,
                   n_actions, base, gamma, lam, alpha, beta1, beta2, eps, tau, t, tol):
    q_sa = base * 1.0
    for s in slots_s:
        q_sa += w[s * n_actions + action]
    target = reward
    if not terminal:
        qn = _q_values(w, slots_n, n_actions, base)
        pn = _softmax(qn, tau)
        expected = 0.0
        for b in range(n_actions):
            expected += pn[b] * qn[b]
        target += gamma * expected
    delta = target - q_sa

    decay = gamma * lam
    for j in range(n_active):
        z[active[j]] *= decay
    for s in slots_s:
        p = s * n_actions + action
        z[p] += 1.0
        if not in_active[p]:
            in_active[p] = True
            active[n_active] = p
            n_active += 1

    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    j = 0
    while j < n_active:
        p = active[j]
        gap = t - 1 - last[p]
        if gap > 0:
            m[p] *= beta1 ** gap
            v[p] *= beta2 ** gap
        g = -delta * z[p]
        m[p] = beta1 * m[p] + (1.0 - beta1) * g
        v[p] = beta2 * v[p] + (1.0 - beta2) * g * g
        step = alpha * (m[p] / bc1) / (math.sqrt(v[p] / bc2) + eps)
        w[p] -= step
        last[p] = t
        if abs(z[p]) < tol and abs(step) < tol:
            z[p] = 0.0
            in_active[p] = False
            n_active -= 1
            active[j] = active[n_active]
        else:
            j += 1
    return delta, n_active


class ExpectedSarsaAgent:
    """Expected Sarsa(lambda) with accumulating traces, a softmax policy and Adam.

    Initial action values equal ``optimistic_init`` everywhere. It is kept as a
    constant offset on top of zero-initialised weights, which is the same function
    class and the same gradients as starting every weight at
    ``optimistic_init / num_tilings`` (exactly ``num_tilings`` features are active).
    Adam moments are updated lazily on the set of coordinates with live traces.
    """

    def __init__(self, hp: Hyperparams, coder: TileCoder, n_actions: int, gamma: float,
                 rng=None, capacity: int = 1024):
        self.hp = hp
        self.coder = coder
        self.n_actions = n_actions
        self.gamma = gamma
        self.rng = as_generator(rng)
        self.slots = SlotMap()
        self.t = 0
        self.n_active = 0
        self._alloc(capacity)
        self.prev_slots = None
        self.prev_action = -1

    def _alloc(self, capacity):
        size = capacity * self.n_actions
        self.capacity = capacity
        self.w = np.zeros(size)
        self.z = np.zeros(size)
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.last = np.zeros(size, dtype=np.int64)
        self.active = np.zeros(size, dtype=np.int64)
        self.in_active = np.zeros(size, dtype=np.bool_)

    def _grow(self):
        old = (self.w, self.z, self.m, self.v, self.last, self.active, self.in_active)
        n = old[0].size
        self._alloc(self.capacity * 2)
        for new, arr in zip((self.w, self.z, self.m, self.v, self.last, self.active,
                             self.in_active), old):
            new[:n] = arr

    def _slots_for(self, state) -> np.ndarray:
        slots = self.slots.lookup(self.coder.encode(state))
        while len(self.slots) > self.capacity:
            self._grow()
        return slots

    def q_values(self, state) -> np.ndarray:
        slots = self.slots.find(self.coder.encode(state))
        return _q_values(self.w, slots, self.n_actions, self.hp.optimistic_init)

    def policy(self, state) -> np.ndarray:
        return softmax_policy(self.q_values(state), self.hp.temperature)

    def act(self, state) -> int:
        return sample_action(self.policy(state), self.rng.random())

    def _choose(self, slots) -> int:
        q = _q_values(self.w, slots, self.n_actions, self.hp.optimistic_init)
        return int(_sample(_softmax(q, self.hp.temperature), self.rng.random()))

    def start(self, state) -> int:
        """Begin an episode: clear traces and pick the first action."""
        act = self.active[: self.n_active]
        self.z[act] = 0.0
        self.prev_slots = self._slots_for(state)
        self.prev_action = self._choose(self.prev_slots)
        return self.prev_action

    def step(self, reward: float, next_state, terminal: bool) -> int:
        """Learn from the last transition; returns the next action (-1 after a terminal)."""
        hp = self.hp
        slots_n = self._slots_for(next_state)
        self.t += 1
        _, self.n_active = _esarsa_update(
            self.w, self.z, self.m, self.v, self.last, self.active, self.in_active,
            self.n_active, self.prev_slots, self.prev_action, float(reward), slots_n,
            bool(terminal), self.n_actions, hp.optimistic_init, self.gamma, hp.trace_decay,
            hp.stepsize, hp.beta1, ADAM_BETA2, ADAM_EPS, hp.temperature, self.t, PRUNE_TOL,
        )
        if terminal:
            self.prev_slots, self.prev_action = None, -1
            return -1
        self.prev_slots = slots_n
        self.prev_action = self._choose(slots_n)
        return self.prev_action

    def freeze(self, rng=None) -> "FixedPolicyAgent":
        frozen_w = self.w.copy()
        slots = SlotMap()
        slots.table = dict(self.slots.table)
        coder, n, base, tau = self.coder, self.n_actions, self.hp.optimistic_init, self.hp.temperature

        def probs(state):
            q = _q_values(frozen_w, slots.find(coder.encode(state)), n, base)
            return _softmax(q, tau)

        return FixedPolicyAgent(probs, n, rng if rng is not None else self.rng)


class ActorCriticAgent:
    """One-step actor-critic: linear critic v(s), softmax actor over linear scores, SGD."""

    def __init__(self, hp: Hyperparams, coder: TileCoder, n_actions: int, gamma: float,
                 rng=None, capacity: int = 1024):
        if hp.actor_ratio is None:
            raise ValueError("actor-critic needs Hyperparams.actor_ratio")
        self.hp = hp
        self.coder = coder
        self.n_actions = n_actions
        self.gamma = gamma
        self.rng = as_generator(rng)
        self.slots = SlotMap()
        self.critic = np.zeros(capacity)
        self.actor = np.zeros((capacity, n_actions))
        self.prev_slots = None
        self.prev_action = -1

    def _slots_for(self, state):
        slots = self.slots.lookup(self.coder.encode(state))
        if len(self.slots) > self.critic.size:
            n = self.critic.size
            self.critic = np.concatenate([self.critic, np.zeros(n)])
            self.actor = np.concatenate([self.actor, np.zeros((n, self.n_actions))])
        return slots

    def _probs(self, slots):
        return softmax_policy(self.actor[slots].sum(axis=0), self.hp.temperature)

    def policy(self, state) -> np.ndarray:
        slots = self.slots.find(self.coder.encode(state))
        scores = self.actor[slots[slots >= 0]].sum(axis=0) if np.any(slots >= 0) else np.zeros(self.n_actions)
        return softmax_policy(scores, self.hp.temperature)

    def value(self, state) -> float:
        slots = self.slots.find(self.coder.encode(state))
        return float(self.critic[slots[slots >= 0]].sum())

    def act(self, state) -> int:
        return sample_action(self.policy(state), self.rng.random())

    def start(self, state) -> int:
        self.prev_slots = self._slots_for(state)
        self.prev_action = sample_action(self._probs(self.prev_slots), self.rng.random())
        return self.prev_action

    def step(self, reward: float, next_state, terminal: bool) -> int:
        slots_n = self._slots_for(next_state)
        s, a = self.prev_slots, self.prev_action
        v_next = 0.0 if terminal else self.critic[slots_n].sum()
        delta = reward + self.gamma * v_next - self.critic[s].sum()
        probs = self._probs(s)
        self.critic[s] += self.hp.stepsize * delta
        grad = -probs
        grad[a] += 1.0
        self.actor[s] += self.hp.actor_stepsize * delta * grad
        if terminal:
            self.prev_slots, self.prev_action = None, -1
            return -1
        self.prev_slots = slots_n
        self.prev_action = sample_action(self._probs(slots_n), self.rng.random())
        return self.prev_action


class FixedPolicyAgent:
    """Non-learning agent that samples from ``probs(state)``."""

    def __init__(self, probs, n_actions: int, rng=None):
        self.probs = probs
        self.n_actions = n_actions
        self.rng = as_generator(rng)

    def policy(self, state) -> np.ndarray:
        return np.asarray(self.probs(state))

    def act(self, state) -> int:
        return int(_sample(np.asarray(self.probs(state), dtype=float), self.rng.random()))

    def start(self, state) -> int:
        return self.act(state)

    def step(self, reward, next_state, terminal) -> int:
        return -1 if terminal else self.act(next_state)


def uniform_policy(n_actions: int, rng=None) -> FixedPolicyAgent:
    p = np.full(n_actions, 1.0 / n_actions)
    return FixedPolicyAgent(lambda state: p, n_actions, rng)


@dataclass(frozen=True)
class AgentFactory:
    """Builds a fresh learner for a given hyperparameter setting and random stream."""

    coder: TileCoder
    n_actions: int
    gamma: float
    kind: str = "sarsa"

    def __call__(self, hp: Hyperparams, rng):
        if self.kind == "sarsa":
            return ExpectedSarsaAgent(hp, self.coder, self.n_actions, self.gamma, rng)
        if self.kind == "actor_critic":
            return ActorCriticAgent(hp, self.coder, self.n_actions, self.gamma, rng)
        raise ValueError(f"unknown agent kind {self.kind!r}")
