"""Measuring how well an agent with given hyperparameters learns in an environment.

One *run* lets a fresh agent interact for ``n_steps`` steps. Episodes end at a
terminal transition or after ``n_cutoff = n_steps // 30`` steps, whichever comes
first, so every run sees at least 30 episodes; a run's score is the mean return
of its completed episodes. The unfinished episode at the end of a run is dropped.

When the environment is a calibration model and the agent is Expected Sarsa, runs
go through a compiled loop that reproduces the generic loop exactly (same random
draws, same arithmetic) but avoids per-step Python overhead.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numba import njit

from hypercal.agents import (
    ADAM_BETA2,
    ADAM_EPS,
    PRUNE_TOL,
    AgentFactory,
    Hyperparams,
    _esarsa_update,
    _q_values,
    _sample,
    _softmax,
)
from hypercal.calibration import CalibrationEnv, CalibrationModel, model_transition
from hypercal.envs import make_env
from hypercal.seeding import content_key, derive_seed

MIN_EPISODES = 30


@dataclass(frozen=True)
class EvalConfig:
    n_steps: int
    n_runs: int
    gamma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < MIN_EPISODES:
            raise ValueError(f"n_steps must be at least {MIN_EPISODES} so that n_cutoff >= 1")
        if self.n_runs < 1:
            raise ValueError("n_runs must be at least 1")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")

    @property
    def n_cutoff(self) -> int:
        return n_cutoff(self.n_steps)


def n_cutoff(n_steps: int) -> int:
    return n_steps // MIN_EPISODES


@dataclass
class PerfRecord:
    hyperparams: Hyperparams
    per_run_returns: list
    seeds: list = field(default_factory=list)
    episodes: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_run_returns))

    @property
    def median(self) -> float:
        return float(np.median(self.per_run_returns))

    def to_json(self) -> dict:
        return dict(kind=type(self.hyperparams).__name__, hyperparams=self.hyperparams.as_dict(),
                    per_run_returns=list(map(float, self.per_run_returns)),
                    mean=self.mean, median=self.median, seeds=self.seeds, episodes=self.episodes)

    @classmethod
    def from_json(cls, d: dict) -> "PerfRecord":
        if d.get("kind", "Hyperparams") == "FQIParams":
            from hypercal.offline import FQIParams

            hp = FQIParams(**d["hyperparams"])
        else:
            hp = Hyperparams(**d["hyperparams"])
        return cls(hp, d["per_run_returns"], d.get("seeds", []),
                   d.get("episodes", []))


def run_seeds(base_seed: int, hp: Hyperparams, run: int):
    """(environment seed, agent seed) of one run; depends only on base seed, hyperparameters and run."""
    key = content_key(hp.as_dict())
    return derive_seed(base_seed, "env", key, run), derive_seed(base_seed, "agent", key, run)


def run_episodes(env, agent, n_steps: int, cutoff: int, gamma: float = 1.0) -> list[float]:
    """Interact for ``n_steps`` steps; returns the returns of completed episodes."""
    returns = []
    state = env.reset()
    action = agent.start(state)
    g, disc, t = 0.0, 1.0, 0
    for _ in range(n_steps):
        out = env.step(action)
        g += disc * out.reward
        disc *= gamma
        t += 1
        if out.terminal or t >= cutoff:
            agent.step(out.reward, out.next_state, out.terminal)
            returns.append(g)
            g, disc, t = 0.0, 1.0, 0
            action = agent.start(env.reset())
        elif out.restarted:
            agent.step(out.reward, out.next_state, False)
            action = agent.start(out.next_state)
        else:
            action = agent.step(out.reward, out.next_state, False)
    return returns


# -- compiled loop for Expected Sarsa inside a calibration model ------------------

@njit(cache=True)
def _sarsa_model_run(key_slots, start_idx, cache_next, cache_reward, cache_terminal, cache_restart,
                     cache_dist, threshold, r_default, n_slots, n_actions, agent_gamma,
                     base, lam, alpha, beta1, tau, n_steps, cutoff, eval_gamma, u_agent, u_env):
    size = n_slots * n_actions
    w = np.zeros(size)
    z = np.zeros(size)
    m = np.zeros(size)
    v = np.zeros(size)
    last = np.zeros(size, dtype=np.int64)
    active = np.zeros(size, dtype=np.int64)
    in_active = np.zeros(size, dtype=np.bool_)
    n_active = 0
    t = 0
    ia = 0
    ie = 0
    returns = np.empty(n_steps)
    n_ret = 0
    n_trunc = 0

    nb = start_idx.size
    j = min(int(u_env[ie] * nb), nb - 1)
    ie += 1
    idx = start_idx[j]
    for p in range(n_active):
        z[active[p]] = 0.0
    slots = key_slots[idx]
    action = _sample(_softmax(_q_values(w, slots, n_actions, base), tau), u_agent[ia])
    ia += 1

    g = 0.0
    disc = 1.0
    ep_t = 0
    for _ in range(n_steps):
        r, nxt, term, restart, trunc = model_transition(
            cache_next, cache_reward, cache_terminal, cache_restart, cache_dist,
            idx, action, u_env[ie], threshold, r_default)
        ie += 1
        if trunc:
            n_trunc += 1
            nxt = idx  # state is irrelevant after a terminal transition
        g += disc * r
        disc *= eval_gamma
        ep_t += 1
        slots_n = key_slots[nxt]
        t += 1
        _, n_active = _esarsa_update(w, z, m, v, last, active, in_active, n_active,
                                     slots, action, r, slots_n, term, n_actions, base,
                                     agent_gamma, lam, alpha, beta1, ADAM_BETA2, ADAM_EPS,
                                     tau, t, PRUNE_TOL)
        if not term:
            # the generic agent picks its next action inside step()
            action = _sample(_softmax(_q_values(w, slots_n, n_actions, base), tau), u_agent[ia])
            ia += 1
        if term or ep_t >= cutoff or restart:
            if term or ep_t >= cutoff:
                returns[n_ret] = g
                n_ret += 1
                g = 0.0
                disc = 1.0
                ep_t = 0
                j = min(int(u_env[ie] * nb), nb - 1)
                ie += 1
                idx = start_idx[j]
            else:
                idx = nxt
            for p in range(n_active):
                z[active[p]] = 0.0
            slots = key_slots[idx]
            action = _sample(_softmax(_q_values(w, slots, n_actions, base), tau), u_agent[ia])
            ia += 1
        else:
            idx = nxt
            slots = slots_n
    return returns[:n_ret], n_trunc


def model_key_slots(model: CalibrationModel, coder) -> tuple[np.ndarray, int]:
    """Compact tile slots for every key state (cached on the model per coder)."""
    cache = model.__dict__.setdefault("_slot_cache", {})
    ck = (id(coder), coder.num_tilings, coder.tiles_per_dim)
    if ck not in cache:
        tiles = coder.encode_many(model.keys)
        uniq, inverse = np.unique(tiles, return_inverse=True)
        cache[ck] = (inverse.reshape(tiles.shape).astype(np.int64), int(len(uniq)))
    return cache[ck]


def sarsa_model_run(model: CalibrationModel, factory: AgentFactory, hp: Hyperparams, n_steps: int,
                    cutoff: int, eval_gamma: float, env_seed, agent_seed):
    """Compiled equivalent of ``run_episodes(model.as_environment(env_seed), factory(hp, agent_seed), ...)``."""
    slots, n_slots = model_key_slots(model, factory.coder)
    # each step draws at most two uniforms from each stream
    u_env = np.random.default_rng(env_seed).random(2 * n_steps + 2)
    u_agent = np.random.default_rng(agent_seed).random(2 * n_steps + 2)
    returns, n_trunc = _sarsa_model_run(
        slots, model.start_idx, model.cache_next, model.cache_reward, model.cache_terminal,
        model.cache_restart, model.cache_dist, float(model.threshold), float(model.r_default),
        n_slots, factory.n_actions, float(factory.gamma), float(hp.optimistic_init),
        float(hp.trace_decay), float(hp.stepsize), float(hp.beta1), float(hp.temperature),
        int(n_steps), int(cutoff), float(eval_gamma), u_agent, u_env)
    return returns.tolist(), int(n_trunc)


# -- public protocol ---------------------------------------------------------------

EnvFactory = Callable[[object], object]


def model_env_factory(model: CalibrationModel) -> EnvFactory:
    def factory(seed):
        return CalibrationEnv(model, seed)

    factory.model = model
    return factory


def real_env_factory(name: str, params=None) -> EnvFactory:
    def factory(seed):
        return make_env(name, seed, params)

    factory.env_name = name
    return factory


def agent_perf_in_env(env_factory: EnvFactory, agent_factory, hp: Hyperparams, config: EvalConfig,
                      fast: bool = True) -> PerfRecord:
    """Average of per-run mean episode returns over ``config.n_runs`` independent runs."""
    per_run, seeds, episodes = [], [], []
    model = getattr(env_factory, "model", None)
    use_fast = (fast and model is not None and isinstance(agent_factory, AgentFactory)
                and agent_factory.kind == "sarsa")
    for run in range(config.n_runs):
        env_seed, agent_seed = run_seeds(config.seed, hp, run)
        if use_fast:
            rets, _ = sarsa_model_run(model, agent_factory, hp, config.n_steps, config.n_cutoff,
                                      config.gamma, env_seed, agent_seed)
        else:
            rets = run_episodes(env_factory(env_seed), agent_factory(hp, np.random.default_rng(agent_seed)),
                                config.n_steps, config.n_cutoff, config.gamma)
        per_run.append(float(np.mean(rets)) if rets else math.nan)
        episodes.append(len(rets))
        seeds.append([int(config.seed), run])
    return PerfRecord(hp, per_run, seeds, episodes)


def true_performance_sweep(env_factory: EnvFactory, agent_factory, candidates: Sequence[Hyperparams],
                           config: EvalConfig, progress=None) -> list[PerfRecord]:
    records = []
    for i, hp in enumerate(candidates):
        records.append(agent_perf_in_env(env_factory, agent_factory, hp, config))
        if progress:
            progress(i, records[-1])
    return records


def select_best(records: Sequence[PerfRecord]) -> Hyperparams:
    """Hyperparameters with the highest mean; the earliest record wins ties."""
    if not records:
        raise ValueError("select_best needs at least one record")
    best = 0
    for i, rec in enumerate(records):
        if rec.mean > records[best].mean:
            best = i
    return records[best].hyperparams


def write_records(records: Sequence[PerfRecord], json_path=None, csv_path=None, extra: dict | None = None):
    if json_path:
        with open(json_path, "w") as f:
            json.dump({**(extra or {}), "records": [r.to_json() for r in records]}, f, indent=2)
    if csv_path:
        names = sorted({k for r in records for k in r.hyperparams.as_dict()})
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([*names, "mean", "median", "n_runs"])
            for r in records:
                hp = r.hyperparams.as_dict()
                w.writerow([*(hp.get(n, "") for n in names), r.mean, r.median, len(r.per_run_returns)])


def read_records(json_path) -> list[PerfRecord]:
    with open(json_path) as f:
        return [PerfRecord.from_json(d) for d in json.load(f)["records"]]
