"""End-to-end offline-to-online hyperparameter selection, one dataset at a time.

The steps mirror the command-line stages: collect logs with a fixed behaviour
policy, learn a Laplace representation per log, build the calibration model,
search hyperparameters inside it, and deploy the winner in the real environment.
Every random stream is derived from the experiment's master seed and the dataset
index, so a dataset's results do not depend on which other datasets were run.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from hypercal.agents import AgentFactory, FixedPolicyAgent, Hyperparams
from hypercal.calibration import CalibrationModel, build_model
from hypercal.config import ExperimentConfig
from hypercal.datalog import DataLog
from hypercal.envs import make_env
from hypercal.evaluation import (
    PerfRecord,
    agent_perf_in_env,
    model_env_factory,
    real_env_factory,
    true_performance_sweep,
)
from hypercal.features import TileCoder
from hypercal.laplace import LaplaceEncoder, train_laplace
from hypercal.offline import (
    FQI_GRID,
    FQIParams,
    CollectionError,
    collect_log,
    default_coder,
    episode_band,
    fqi_select_and_deploy,
    train_behavior_policy,
)
from hypercal.search import cem_search, grid_search, random_search
from hypercal.seeding import derive_rng, derive_seed

log = logging.getLogger(__name__)


def int_seed(master: int, stream: str, *keys: int) -> int:
    return int(derive_seed(master, stream, *keys).generate_state(1)[0])


def coder_for(cfg: ExperimentConfig) -> TileCoder:
    return default_coder(cfg.env, cfg.num_tilings, cfg.tiles_per_dim)


def agent_factory(cfg: ExperimentConfig, env_name: str | None = None) -> AgentFactory:
    spec = make_env(env_name or cfg.env, 0, cfg.env_params(env_name or cfg.env)).spec
    return AgentFactory(coder_for(cfg), spec.action_count, spec.discount, cfg.agent)


def behavior_policy(cfg: ExperimentConfig, attempts: int = 5) -> FixedPolicyAgent:
    """One frozen behaviour policy per experiment, shared by all of its datasets.

    A learner that never reaches the requested quality is restarted from a fresh
    derived seed, up to ``attempts`` times.
    """
    err = None
    for attempt in range(attempts):
        try:
            return train_behavior_policy(cfg.env, cfg.quality, seed=int_seed(cfg.seed, "behavior", attempt),
                                         n_data=cfg.n_data, band=episode_band(cfg.env, cfg.quality, cfg.n_data),
                                         max_steps=cfg.behavior_max_steps)
        except CollectionError as exc:
            log.warning("behaviour policy attempt %d failed: %s", attempt, exc)
            err = exc
    raise err


def collect_dataset(cfg: ExperimentConfig, policy, index: int) -> DataLog:
    data = collect_log(cfg.env, policy, cfg.n_data, episode_band(cfg.env, cfg.quality, cfg.n_data),
                       seed=int_seed(cfg.seed, "collect", index), max_retries=cfg.max_retries,
                       quality=cfg.quality, env_params=cfg.env_params(cfg.env))
    data.meta["dataset"] = index
    return data


def collect_datasets(cfg: ExperimentConfig, indices=None, policy=None) -> list[DataLog]:
    policy = policy or behavior_policy(cfg)
    return [collect_dataset(cfg, policy, i) for i in (indices if indices is not None else range(cfg.n_datasets))]


def train_representation(cfg: ExperimentConfig, data: DataLog, index: int, history=None) -> LaplaceEncoder:
    return train_laplace(data.trajectories(), cfg.laplace(), derive_rng(cfg.seed, "laplace", index),
                         history=history)


def calibration_model(cfg: ExperimentConfig, data: DataLog, encoder) -> CalibrationModel:
    spec = make_env(cfg.env, 0, cfg.env_params(cfg.env)).spec
    return build_model(data, encoder, spec.action_count, cfg.k, cfg.threshold, spec)


@dataclass
class Selection:
    hyperparams: Hyperparams
    records: list  # model-estimated PerfRecords of the evaluated candidates


def calibrate(cfg: ExperimentConfig, model: CalibrationModel, index: int, method: str | None = None,
              trace_path=None) -> Selection:
    """Pick hyperparameters by searching inside the calibration model."""
    method = method or cfg.method
    env_factory = model_env_factory(model)
    factory = agent_factory(cfg)
    rng = derive_rng(cfg.seed, "search", index)
    if method == "grid":
        best, records = grid_search(cfg.candidates(), env_factory, factory, cfg.inner)
    elif method == "random":
        best, records = random_search(cfg.ranges(), cfg.n_samples, env_factory, factory, cfg.inner, rng,
                                      cfg.fixed())
    elif method == "cem":
        best, records = cem_search(cfg.ranges(), env_factory, factory, cfg.inner, cfg.cem, rng, cfg.fixed(),
                                   trace_path)
    else:
        raise ValueError(f"unknown search method {method!r}")
    return Selection(best, records)


def deploy(cfg: ExperimentConfig, hp: Hyperparams, index: int = 0) -> PerfRecord:
    """Online learning with ``hp`` in the real deployment environment."""
    env_factory = real_env_factory(cfg.deploy_env, cfg.env_params(cfg.deploy_env))
    conf = cfg.deploy
    conf = type(conf)(conf.n_steps, conf.n_runs, conf.gamma, int_seed(cfg.seed, "deploy", index))
    return agent_perf_in_env(env_factory, agent_factory(cfg, cfg.deploy_env), hp, conf)


def fqi_baseline(cfg: ExperimentConfig, train: DataLog, validation: DataLog, index: int) -> PerfRecord:
    grid = [FQIParams(p.stepsize, p.reg, cfg.fqi_iterations, cfg.fqi_sync, cfg.fqi_batch) for p in FQI_GRID]
    conf = cfg.deploy
    conf = type(conf)(conf.n_steps, conf.n_runs, conf.gamma, int_seed(cfg.seed, "deploy", index))
    return fqi_select_and_deploy(train, validation, cfg.deploy_env, coder_for(cfg), conf, grid,
                                 cfg.fqi_epsilon, int_seed(cfg.seed, "fqi", index),
                                 cfg.env_params(cfg.deploy_env))


def true_sweep(cfg: ExperimentConfig, candidates=None, progress=None) -> list[PerfRecord]:
    """Deployment performance of every candidate in the real environment."""
    env_factory = real_env_factory(cfg.deploy_env, cfg.env_params(cfg.deploy_env))
    return true_performance_sweep(env_factory, agent_factory(cfg, cfg.deploy_env),
                                  candidates if candidates is not None else cfg.candidates(),
                                  cfg.deploy, progress)


def random_baseline(sweep: list[PerfRecord], n: int, seed: int) -> list[float]:
    """True performance of one uniformly drawn setting per dataset."""
    if not sweep:
        raise ValueError("random baseline needs a true sweep")
    rng = derive_rng(seed, "baseline", 0)
    return [sweep[int(rng.integers(len(sweep)))].mean for _ in range(n)]


# -- summaries ----------------------------------------------------------------

def box_stats(values) -> dict:
    """Median, linear-interpolation quartiles, 1.5 IQR whiskers and outliers."""
    x = np.asarray([v for v in values if not math.isnan(v)], dtype=float)
    if x.size == 0:
        raise ValueError("no values to summarise")
    q1, med, q3 = np.percentile(x, [25, 50, 75], method="linear")
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = x[(x >= lo) & (x <= hi)]
    return dict(n=int(x.size), median=float(med), q1=float(q1), q3=float(q3), iqr=float(iqr),
                whisker_low=float(inside.min()), whisker_high=float(inside.max()),
                outliers=sorted(float(v) for v in x[(x < lo) | (x > hi)]), mean=float(x.mean()))
