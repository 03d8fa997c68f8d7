"""Hyperparameter search against a (calibration) environment: grid, random and CEM."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from hypercal.agents import Hyperparams
from hypercal.evaluation import EvalConfig, PerfRecord, agent_perf_in_env, select_best
from hypercal.seeding import as_generator

KINDS = ("continuous", "ordered_discrete", "unordered_discrete")
HP_FIELDS = ("stepsize", "beta1", "temperature", "optimistic_init", "trace_decay", "actor_ratio")


@dataclass(frozen=True)
class HyperRange:
    """A searchable hyperparameter.

    Ordered discrete ranges are searched as a continuous exponent ``h`` in
    ``[lower, upper]`` and turned into a value by rounding ``h`` and, when ``base``
    is set, computing ``base ** h``. Unordered discrete ranges list their ``values``.
    """

    name: str
    kind: str = "continuous"
    lower: float = 0.0
    upper: float = 1.0
    values: tuple = ()
    base: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown range kind {self.kind!r}")
        if self.kind == "unordered_discrete":
            if not self.values:
                raise ValueError(f"{self.name}: unordered discrete range needs values")
        elif not self.lower < self.upper:
            raise ValueError(f"{self.name}: need lower < upper, got [{self.lower}, {self.upper}]")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    @property
    def center(self) -> float:
        return 0.5 * (self.lower + self.upper)


def round_half_away(x: float) -> float:
    return math.copysign(math.floor(abs(x) + 0.5), x)


def round_ordered(value: float, rng_: HyperRange) -> float:
    """Nearest integer exponent (halves away from zero), clamped to the range, then mapped."""
    h = round_half_away(float(value))
    h = min(max(h, math.ceil(rng_.lower)), math.floor(rng_.upper))
    return float(rng_.base ** h) if rng_.base is not None else float(h)


def build_hyperparams(values: dict, fixed: dict | None = None) -> Hyperparams:
    merged = {**(fixed or {}), **values}
    unknown = set(merged) - set(HP_FIELDS)
    if unknown:
        raise ValueError(f"unknown hyperparameters {sorted(unknown)}")
    return Hyperparams(**{k: float(v) for k, v in merged.items()})


def vector_to_hyperparams(x, ranges: Sequence[HyperRange], fixed: dict | None = None) -> Hyperparams:
    vals = {}
    for xi, r in zip(x, ranges):
        vals[r.name] = round_ordered(xi, r) if r.kind == "ordered_discrete" else float(xi)
    return build_hyperparams(vals, fixed)


def grid(**axes) -> list[Hyperparams]:
    """Cartesian product in declaration order: ``grid(stepsize=[...], beta1=[...], ...)``."""
    names = list(axes)
    return [build_hyperparams(dict(zip(names, combo))) for combo in itertools.product(*axes.values())]


# -- grid and random search -----------------------------------------------------------

def evaluate_all(candidates, env_factory, agent_factory, config: EvalConfig, progress=None) -> list[PerfRecord]:
    out = []
    for i, hp in enumerate(candidates):
        out.append(agent_perf_in_env(env_factory, agent_factory, hp, config))
        if progress:
            progress(i, out[-1])
    return out


def grid_search(candidates: Sequence[Hyperparams], env_factory, agent_factory, config: EvalConfig,
                progress=None):
    """Evaluate every candidate; returns (argmax hyperparameters, records)."""
    if not candidates:
        raise ValueError("grid search needs at least one candidate")
    if len(candidates) == 1:
        return candidates[0], []
    records = evaluate_all(candidates, env_factory, agent_factory, config, progress)
    return select_best(records), records


def sample_uniform(ranges: Sequence[HyperRange], n: int, rng) -> np.ndarray:
    rng = as_generator(rng)
    lo = np.array([r.lower for r in ranges])
    hi = np.array([r.upper for r in ranges])
    return lo + (hi - lo) * rng.random((n, len(ranges)))


def random_search(ranges: Sequence[HyperRange], n_samples: int, env_factory, agent_factory,
                  config: EvalConfig, rng=None, fixed: dict | None = None):
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    xs = sample_uniform(ranges, n_samples, rng)
    candidates = [vector_to_hyperparams(x, ranges, fixed) for x in xs]
    if n_samples == 1:
        return candidates[0], []
    records = evaluate_all(candidates, env_factory, agent_factory, config)
    return select_best(records), records


# -- cross-entropy method ---------------------------------------------------------------

def tmvn_sample(mu, cov, lower, upper, n: int, rng=None, max_tries: int = 1000) -> np.ndarray:
    """Draws from N(mu, cov) restricted to the box [lower, upper].

    Each sample is redrawn until it lands in the box; after ``max_tries`` failures
    its coordinates are clamped instead. A zero covariance returns ``mu`` repeated.
    """
    rng = as_generator(rng)
    mu = np.asarray(mu, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    if not np.any(cov):
        return np.tile(mu, (n, 1))
    # eigen-decomposition tolerates positive semi-definite covariances
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    factor = vecs * np.sqrt(np.clip(vals, 0.0, None))
    out = np.empty((n, mu.size))
    for i in range(n):
        for _ in range(max_tries):
            x = mu + factor @ rng.standard_normal(mu.size)
            if np.all(x >= lower) and np.all(x <= upper):
                break
        else:
            x = np.clip(x, lower, upper)
        out[i] = x
    return out


@dataclass(frozen=True)
class CemConfig:
    n_samples: int = 32
    n_top: int = 5
    alpha: float = 0.1
    tol: float = 1e-1
    max_iterations: int = 100
    runs_per_sample: int = 3
    cov_jitter: float = 1e-8


@dataclass
class CemState:
    mu: np.ndarray
    cov: np.ndarray
    mu_ave: np.ndarray
    mu_old_ave: np.ndarray
    iteration: int = 1
    trace: list = field(default_factory=list)


def cem_optimize(ranges: Sequence[HyperRange], objective: Callable[[np.ndarray], float],
                 config: CemConfig = CemConfig(), rng=None, trace_path=None) -> np.ndarray:
    """Incremental CEM over a box; returns the final mean ``mu``.

    Each iteration samples ``n_samples`` points from the truncated normal, moves
    ``mu`` and the covariance a fraction ``alpha`` toward the mean and covariance of
    the ``n_top`` best, and stops once the running average of ``mu`` changes by at
    most ``tol`` or after ``max_iterations`` iterations.
    """
    rng = as_generator(rng)
    lower = np.array([r.lower for r in ranges], dtype=float)
    upper = np.array([r.upper for r in ranges], dtype=float)
    st = CemState(mu=0.5 * (lower + upper), cov=np.diag(upper - lower),
                  mu_ave=np.zeros(len(ranges)), mu_old_ave=np.full(len(ranges), np.inf))
    sink = open(trace_path, "a") if trace_path else None
    try:
        while st.iteration <= config.max_iterations and np.linalg.norm(st.mu_ave - st.mu_old_ave) > config.tol:
            xs = tmvn_sample(st.mu, st.cov, lower, upper, config.n_samples, rng)
            scores = np.array([objective(x) for x in xs], dtype=float)
            order = np.argsort(-scores, kind="stable")[: config.n_top]
            top = xs[order]
            mu_top = top.mean(axis=0)
            cov_top = np.atleast_2d(np.cov(top, rowvar=False)) if len(top) > 1 else np.zeros_like(st.cov)
            cov_top = cov_top + config.cov_jitter * np.eye(len(ranges))
            st.mu = np.clip((1 - config.alpha) * st.mu + config.alpha * mu_top, lower, upper)
            st.cov = (1 - config.alpha) * st.cov + config.alpha * cov_top
            st.mu_old_ave = st.mu_ave
            st.mu_ave = st.mu_ave + (st.mu - st.mu_ave) / st.iteration
            entry = dict(iteration=st.iteration, mu=st.mu.tolist(), cov_diag=np.diag(st.cov).tolist(),
                         best_score=float(scores[order[0]]), best_sample=xs[order[0]].tolist())
            st.trace.append(entry)
            if sink:
                sink.write(json.dumps(entry) + "\n")
            st.iteration += 1
    finally:
        if sink:
            sink.close()
    cem_optimize.last_state = st
    return st.mu


def cem_search(ranges: Sequence[HyperRange], env_factory, agent_factory, config: EvalConfig,
               cem: CemConfig = CemConfig(), rng=None, fixed: dict | None = None, trace_path=None):
    """CEM over the continuous/ordered ranges; one CEM run per unordered-discrete combination.

    Each CEM objective call is a ``cem.runs_per_sample``-run evaluation. When there are
    unordered discrete settings, the final means of the separate CEM runs are compared
    with a full ``config.n_runs`` evaluation and the best is returned.
    """
    rng = as_generator(rng)
    searchable = [r for r in ranges if r.kind != "unordered_discrete"]
    discrete = [r for r in ranges if r.kind == "unordered_discrete"]
    inner = EvalConfig(config.n_steps, cem.runs_per_sample, config.gamma, config.seed)
    results = []
    for combo in itertools.product(*(r.values for r in discrete)):
        fixed_here = {**(fixed or {}), **{r.name: v for r, v in zip(discrete, combo)}}

        def objective(x, fixed_here=fixed_here):
            hp = vector_to_hyperparams(x, searchable, fixed_here)
            return agent_perf_in_env(env_factory, agent_factory, hp, inner).mean

        mu = cem_optimize(searchable, objective, cem, rng, trace_path)
        results.append(vector_to_hyperparams(mu, searchable, fixed_here))
    if len(results) == 1:
        return results[0], []
    records = evaluate_all(results, env_factory, agent_factory, config)
    return select_best(records), records
