from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hypercal.agents import uniform_policy
from hypercal.datalog import DataLog, LogFormatError, read_header, read_log, write_log
from hypercal.envs import make_env
from hypercal.evaluation import EvalConfig
from hypercal.offline import (
    EPISODE_BANDS,
    FQI_GRID,
    FQIParams,
    LinearQ,
    TileFeaturizer,
    collect_log,
    completed_episodes,
    default_coder,
    epsilon_greedy,
    fqi_loss,
    fqi_select,
    fqi_select_and_deploy,
    fqi_train,
    in_band,
    mstde,
    q_from_features,
    rollout_log,
    train_behavior_policy,
)

# two states, two actions, deterministic: (state, action) -> (next state, reward)
MDP = {(0, 0): (0, 0.0), (0, 1): (1, 1.0), (1, 0): (0, 0.0), (1, 1): (1, 2.0)}
GAMMA = 0.9


def value_iteration(tol=1e-12):
    q = np.zeros((2, 2))
    while True:
        new = np.array([[MDP[s, a][1] + GAMMA * q[MDP[s, a][0]].max() for a in range(2)] for s in range(2)])
        if np.abs(new - q).max() < tol:
            return new
        q = new


def tabular_batch():
    keys = sorted(MDP)
    feats = np.array([[s] for s, _ in keys])
    acts = np.array([a for _, a in keys])
    nxt = np.array([[MDP[k][0]] for k in keys])
    rew = np.array([MDP[k][1] for k in keys])
    return feats, acts, rew, nxt, np.full(len(keys), GAMMA)


def test_tabular_fqi_matches_value_iteration():
    feats, acts, rew, nxt, disc = tabular_batch()
    w = fqi_train(feats, acts, rew, nxt, disc, 2, 2, FQIParams(0.005, 0.0, 60_000, 300, 128), 0)
    assert np.abs(w - value_iteration()).max() < 1e-3


def test_frozen_target_regresses_onto_rewards():
    # the target copy is taken at k = 0 (all zeros) and never refreshed, so targets stay R
    feats, acts, rew, nxt, disc = tabular_batch()
    w = fqi_train(feats, acts, rew, nxt, disc, 2, 2, FQIParams(0.01, 0.0, 5000, 10**9, 128), 0)
    assert np.abs(w - np.array([[0.0, 1.0], [0.0, 2.0]])).max() < 1e-3


@given(st.integers(0, 1000), st.floats(0, 1))
def test_fqi_loss_nonnegative_with_exact_penalty(seed, reg):
    rng = np.random.default_rng(seed)
    feats, acts, rew, nxt, disc = tabular_batch()
    w, tw = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    loss = fqi_loss(w, feats, acts, rew, nxt, disc, tw, reg)
    assert loss >= 0
    assert loss - fqi_loss(w, feats, acts, rew, nxt, disc, tw, 0.0) == pytest.approx(reg * (w**2).sum(), abs=1e-12)
    zero = np.zeros((2, 2))
    assert fqi_loss(zero, feats, acts, np.zeros(4), nxt, disc, zero, reg) == 0.0


def test_fqi_grid_defaults():
    assert len(FQI_GRID) == 15
    p = FQIParams()
    assert (p.iterations, p.sync_every, p.batch_size) == (3000, 100, 128)


def test_missing_features_contribute_nothing():
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(q_from_features(w, np.array([[0, -1], [1, 0]])), [[1, 2], [4, 6]])


@pytest.fixture(scope="module")
def puddle_logs():
    env = make_env("puddleworld", 0)
    return [rollout_log(env, uniform_policy(4, i), 800) for i in range(2)]


def test_fqi_selection_uses_validation_log(puddle_logs):
    train, val = puddle_logs
    coder = default_coder("puddleworld")
    grid = [FQIParams(0.01, 1e-3, 200), FQIParams(1e-4, 1e-3, 200)]
    params, q, scores = fqi_select(train, val, coder, 4, grid, seed=0)
    assert scores[grid.index(params)] == min(scores)
    assert scores[grid.index(params)] == pytest.approx(mstde(q, val))
    assert mstde(q, val) != pytest.approx(mstde(q, train))


def test_fqi_deploy_is_fixed_policy(puddle_logs):
    train, val = puddle_logs
    coder = default_coder("puddleworld")
    rec = fqi_select_and_deploy(train, val, "puddleworld", coder, EvalConfig(600, 2), [FQIParams(0.01, 1e-3, 100)])
    assert rec.hyperparams == FQIParams(0.01, 1e-3, 100) and len(rec.per_run_returns) == 2
    feat = TileFeaturizer(coder, train.states)
    q = LinearQ(np.random.default_rng(0).normal(size=(feat.n_features, 4)), feat)
    w = q.weights.copy()
    pol = epsilon_greedy(q, 4, 0.05, 0)
    p = pol.policy(np.array([0.3, 0.3]))
    assert p.max() == pytest.approx(0.95 + 0.05 / 4) and p.sum() == pytest.approx(1)
    env = make_env("puddleworld", 1)
    a = pol.start(env.reset())
    for _ in range(50):
        out = env.step(a)
        a = pol.step(out.reward, out.next_state, out.terminal)
        if out.terminal:
            a = pol.start(env.reset())
    assert np.array_equal(q.weights, w)


def test_rollout_has_exact_size_and_valid_structure():
    log = rollout_log(make_env("cartpole", 0), uniform_policy(2, 0), 3000)
    assert len(log) == 3000
    log.validate()
    assert completed_episodes(log) == int(log.restarts.sum()) > 0
    # every restart's next state opens the following trajectory
    r = np.flatnonzero(log.restarts[:-1])
    assert np.array_equal(log.next_states[r], log.states[r + 1])


def test_collection_respects_band():
    pol = uniform_policy(2)
    band = EPISODE_BANDS["cartpole", "random", 10000]
    log = collect_log("cartpole", pol, 10000, band, seed=0, quality="random")
    assert in_band(completed_episodes(log), band)
    assert log.meta["episode_band"] == list(band)


def test_random_behaviour_policy_is_uniform():
    pol = train_behavior_policy("acrobot", "random")
    assert np.allclose(pol.policy(np.zeros(6)), 1 / 3)


def test_log_round_trip_and_errors(tmp_path):
    log = rollout_log(make_env("puddleworld", 3), uniform_policy(4, 3), 5000, dict(env="puddleworld"))
    write_log(log, tmp_path / "a.log")
    back = read_log(tmp_path / "a.log")
    assert back.equals(log) and back.meta["env"] == "puddleworld"
    assert read_header(tmp_path / "a.log")["n_data"] == 5000
    blob = (tmp_path / "a.log").read_bytes()
    (tmp_path / "magic.log").write_bytes(b"XXXXXX" + blob[6:])
    with pytest.raises(LogFormatError):
        read_log(tmp_path / "magic.log")
    (tmp_path / "short.log").write_bytes(blob[:-7])
    with pytest.raises(LogFormatError):
        read_log(tmp_path / "short.log")


def test_band_checked_at_write(tmp_path):
    log = rollout_log(make_env("puddleworld", 3), uniform_policy(4, 3), 500)
    log.meta["episode_band"] = [10_000, None]
    with pytest.raises(ValueError):
        write_log(log, tmp_path / "x.log")


def test_empty_log_rejected(tmp_path):
    empty = DataLog(np.zeros((0, 2)), [], [], np.zeros((0, 2)), [], [], [], [])
    with pytest.raises(ValueError):
        write_log(empty, tmp_path / "e.log")
    with pytest.raises(ValueError):
        rollout_log(make_env("puddleworld", 0), uniform_policy(4), 0)


def test_r_default_matches_episode_sums():
    log = rollout_log(make_env("puddleworld", 5), uniform_policy(4, 5), 2000)
    sums = [log.rewards[a:b].sum() for a, b in log.boundaries()]
    assert log.episode_returns().min() == pytest.approx(min(sums))
