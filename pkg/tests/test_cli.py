from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from hypercal.agents import Hyperparams
from hypercal.cli import build_report, main, parse_datasets
from hypercal.config import PRESETS, load_config
from hypercal.envs import ConfigurationError
from hypercal.evaluation import PerfRecord
from hypercal.pipeline import box_stats, random_baseline

TINY = """
[experiment]
name = tiny
env = puddleworld
quality = medium
n_data = 500
n_datasets = 2
[laplace]
preset = puddleworld-small
max_steps = 200
check_interval = 100
hidden = 16, 16
[grid]
stepsize = 0.01, 0.1
temperature = 1, 10
trace_decay = 0.1
[eval]
inner_steps = 600
inner_runs = 2
deploy_steps = 600
deploy_runs = 2
[fqi]
enabled = true
iterations = 30
"""


def test_presets_load_and_grids_have_expected_sizes():
    for name in PRESETS:
        cfg = load_config(preset=name)
        assert cfg.name == name
        assert len(cfg.candidates()) in (30, 54)
    cfg = load_config(preset="exp1-acrobot")
    assert len(cfg.candidates()) == 54 and cfg.inner.n_cutoff == 500
    assert cfg.deploy.n_steps == 15000 and cfg.n_datasets == 30
    desk = load_config(preset="exp1-acrobot", desk_scale=True)
    assert desk.n_datasets == 5 and desk.inner.n_runs == 5
    assert load_config(preset="exp1-puddleworld").deploy.n_steps == 30000
    assert load_config(preset="exp3-acrobot-changed").deploy_env == "acrobot-changed"
    cem = load_config(preset="exp5-puddleworld-cem")
    assert cem.method == "cem" and cem.cem.max_iterations == 30 and cem.cem.tol == 0 and len(cem.candidates()) == 30
    assert [r.name for r in cem.ranges()] == ["temperature", "stepsize"]


def test_config_errors_and_overrides(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(preset="nope")
    with pytest.raises(ConfigurationError):
        load_config(overrides={"experiment.env": "mountaincar"})
    cfg = load_config(overrides={"env.noise_std": "0.02", "experiment.env": "puddleworld"})
    assert cfg.env_params().noise_std == 0.02
    p = tmp_path / "c.ini"
    p.write_text(TINY)
    assert load_config(path=p).laplace().hidden == (16, 16)
    assert load_config(path=p).digest() != load_config(path=p, overrides={"experiment.seed": 3}).digest()


def test_parse_datasets():
    assert parse_datasets(None, 3) == [0, 1, 2]
    assert parse_datasets("0-2,5", 10) == [0, 1, 2, 5]


def test_box_stats_against_reference_percentiles():
    rng = np.random.default_rng(0)
    x = np.append(rng.normal(size=37), 25.0)
    s = box_stats(x)
    srt = np.sort(x)

    def pct(p):  # linear interpolation between closest ranks
        pos = p / 100 * (len(srt) - 1)
        lo = int(np.floor(pos))
        return srt[lo] + (srt[min(lo + 1, len(srt) - 1)] - srt[lo]) * (pos - lo)

    assert s["q1"] == pytest.approx(pct(25)) and s["median"] == pytest.approx(pct(50))
    assert s["q3"] == pytest.approx(pct(75))
    assert 25.0 in s["outliers"]
    one = box_stats([3.5])
    assert one["median"] == 3.5 and one["iqr"] == 0.0


def test_random_baseline_draws_from_sweep():
    sweep = [PerfRecord(Hyperparams(0.1 * (i + 1)), [float(i)]) for i in range(6)]
    vals = random_baseline(sweep, 1000, 0)
    assert set(vals) <= set(range(6)) and len(set(vals)) == 6
    assert random_baseline(sweep, 5, 0) == vals[:5]


def test_report_on_empty_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        build_report(tmp_path)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    outs = []
    for name in ("a", "b"):
        out = root / name
        assert main(["pipeline", "--config", str(cfg), "--out", str(out)]) == 0
        outs.append(out)
    return cfg, outs


def test_pipeline_outputs_and_manifest(runs):
    cfg, (out, _) = runs
    manifest = json.loads((out / "manifest.json").read_text())
    listed = [a for e in manifest["entries"] for a in e["artifacts"]]
    on_disk = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    assert sorted(listed) == on_disk  # every artifact traced by exactly one entry
    report = json.loads((out / "report.json").read_text())
    assert set(report["methods"]) == {"calibration-grid", "fqi"}
    assert "[experiment]" in report["config"]


def test_pipeline_is_deterministic(runs):
    _, (a, b) = runs
    for rel in ("deploy/dataset_000.json", "deploy/dataset_001.json", "fqi/dataset_001.json",
                "calibration/dataset_000.json"):
        assert (a / rel).read_text() == (b / rel).read_text()
    assert (a / "logs/dataset_001.log").read_bytes() == (b / "logs/dataset_001.log").read_bytes()


def test_rerun_refuses_without_force(runs, capsys):
    cfg, (out, _) = runs
    assert main(["collect", "--config", str(cfg), "--out", str(out)]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["collect", "--config", str(cfg), "--out", str(out), "--seed", "5"]) == 2


def test_sweep_and_report_with_baseline(runs):
    cfg, (_, out) = runs
    assert main(["sweep-true", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["report", "--config", str(cfg), "--out", str(out), "--force"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert "random" in report["methods"] and report["baselines"]["best"] >= report["baselines"]["worst"]
    assert Path(out / "report.csv").read_text().startswith("method,")
