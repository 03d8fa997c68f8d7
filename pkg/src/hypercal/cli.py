"""Command-line front end: ``hypercal <command> --config FILE|PRESET --out DIR``.

Stages write their artifacts below ``--out`` and register every file in
``manifest.json`` together with the configuration hash, seeds and timestamps.
A stage refuses to overwrite an existing artifact unless ``--force`` is given;
``pipeline`` reuses artifacts of earlier stages produced with the same config.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

from hypercal import pipeline as pl
from hypercal.agents import Hyperparams
from hypercal.calibration import CalibrationModel
from hypercal.config import PRESETS, ExperimentConfig, load_config
from hypercal.datalog import read_log, write_log
from hypercal.envs import ConfigurationError
from hypercal.evaluation import PerfRecord, read_records, write_records
from hypercal.laplace import LaplaceEncoder

log = logging.getLogger("hypercal")

COMMANDS = ("collect", "train-rep", "build-model", "sweep-true", "calibrate", "deploy", "report", "pipeline")


class ArtifactExists(RuntimeError):
    pass


class Manifest:
    """Index of every artifact under an output directory."""

    def __init__(self, out: Path, cfg: ExperimentConfig, force: bool):
        self.out = out
        self.path = out / "manifest.json"
        self.force = force
        self.cfg = cfg
        if self.path.exists():
            with open(self.path) as f:
                self.data = json.load(f)
            if self.data.get("config_hash") != cfg.digest():
                if not force:
                    raise ArtifactExists(
                        f"{out} holds results of a different configuration "
                        f"({self.data.get('config_hash')} != {cfg.digest()}); use --force or another --out")
                self.data = self._fresh()
        else:
            self.data = self._fresh()

    def _fresh(self) -> dict:
        return dict(config_hash=self.cfg.digest(), config=self.cfg.text(), entries=[])

    def owner(self, rel: str):
        for e in self.data["entries"]:
            if rel in e["artifacts"]:
                return e
        return None

    def begin(self, command: str, datasets) -> dict:
        entry = dict(command=command, config_hash=self.cfg.digest(), master_seed=self.cfg.seed,
                     datasets=list(datasets), artifacts=[], failures={},
                     started=time.strftime("%Y-%m-%dT%H:%M:%S"), finished=None)
        self.data["entries"].append(entry)
        return entry

    def target(self, entry: dict, rel: str) -> Path:
        """Claim an output path for ``entry``; refuses to clobber unless forced."""
        path = self.out / rel
        if path.exists() and not self.force:
            raise ArtifactExists(f"{path} exists; rerun with --force to overwrite")
        for e in self.data["entries"]:
            if e is not entry and rel in e["artifacts"]:
                e["artifacts"].remove(rel)
        if rel not in entry["artifacts"]:
            entry["artifacts"].append(rel)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def finish(self, entry: dict) -> None:
        entry["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        self.data["entries"] = [e for e in self.data["entries"] if e["artifacts"] or e is entry or e["failures"]]
        self.save()

    def save(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        with open(tmp, "w") as f:
            json.dump(self.data, f, indent=2)
        os.replace(tmp, self.path)


# -- artifact paths --------------------------------------------------------------

def log_rel(i): return f"logs/dataset_{i:03d}.log"
def enc_rel(i): return f"encoders/dataset_{i:03d}.enc"
def model_rel(i): return f"models/dataset_{i:03d}.npz"
def calib_rel(i): return f"calibration/dataset_{i:03d}.json"
def deploy_rel(i): return f"deploy/dataset_{i:03d}.json"
def fqi_rel(i): return f"fqi/dataset_{i:03d}.json"


SWEEP_REL = "true_sweep.json"


def parse_datasets(text: str | None, n: int) -> list[int]:
    if not text:
        return list(range(n))
    out = []
    for part in text.split(","):
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return sorted(set(out))


class Runner:
    def __init__(self, args):
        overrides = dict(kv.split("=", 1) for kv in (args.set or []))
        if args.seed is not None:
            overrides["experiment.seed"] = args.seed
        src = args.config
        if src in PRESETS:
            self.cfg = load_config(preset=src, desk_scale=args.desk_scale, overrides=overrides)
        else:
            self.cfg = load_config(path=src, desk_scale=args.desk_scale, overrides=overrides)
        self.out = Path(args.out)
        self.args = args
        self.manifest = Manifest(self.out, self.cfg, args.force)
        self.datasets = parse_datasets(args.datasets, self.cfg.n_datasets)
        self.reuse = False  # pipeline mode: load compatible earlier artifacts instead of refusing
        self._policy = None

    # each stage returns {dataset: object}; per-dataset failures are logged and skipped
    def _stage(self, command, datasets, work):
        entry = self.manifest.begin(command, datasets)
        results = {}
        try:
            for i in datasets:
                try:
                    results[i] = work(entry, i)
                except ArtifactExists:
                    raise
                except Exception as exc:  # noqa: BLE001 - one dataset must not sink the batch
                    log.error("%s: dataset %d failed: %s", command, i, exc)
                    entry["failures"][str(i)] = f"{type(exc).__name__}: {exc}"
        finally:
            self.manifest.finish(entry)
        return results

    def _existing(self, rel: str) -> bool:
        return self.reuse and (self.out / rel).exists() and self.manifest.owner(rel) is not None

    def collect(self, datasets=None):
        def work(entry, i):
            if self._existing(log_rel(i)):
                return read_log(self.out / log_rel(i))
            path = self.manifest.target(entry, log_rel(i))
            if self._policy is None:
                try:
                    self._policy = pl.behavior_policy(self.cfg)
                except Exception as exc:  # noqa: BLE001 - remembered so later datasets fail fast
                    self._policy = exc
            if isinstance(self._policy, Exception):
                raise self._policy
            data = pl.collect_dataset(self.cfg, self._policy, i)
            write_log(data, path)
            log.info("dataset %d: %d transitions, %s completed episodes", i, len(data),
                     data.meta.get("completed_episodes"))
            return data
        return self._stage("collect", datasets or self.datasets, work)

    def train_rep(self, datasets=None):
        def work(entry, i):
            if self._existing(enc_rel(i)):
                return LaplaceEncoder.load(self.out / enc_rel(i))
            data = read_log(self.out / log_rel(i))
            path = self.manifest.target(entry, enc_rel(i))
            enc = pl.train_representation(self.cfg, data, i)
            enc.save(path)
            return enc
        return self._stage("train-rep", datasets or self.datasets, work)

    def build_model(self, datasets=None):
        def work(entry, i):
            if self._existing(model_rel(i)):
                return CalibrationModel.load(self.out / model_rel(i))
            data = read_log(self.out / log_rel(i))
            enc = LaplaceEncoder.load(self.out / enc_rel(i))
            path = self.manifest.target(entry, model_rel(i))
            self.manifest.target(entry, model_rel(i) + ".json")
            model = pl.calibration_model(self.cfg, data, enc)
            model.save(path)
            log.info("dataset %d: model with %d keys, threshold %.4g, R_default %.4g", i, model.n_keys,
                     model.threshold, model.r_default)
            return model
        return self._stage("build-model", datasets or self.datasets, work)

    def calibrate(self, datasets=None, method=None):
        method = method or self.cfg.method

        def work(entry, i):
            if self._existing(calib_rel(i)):
                with open(self.out / calib_rel(i)) as f:
                    return json.load(f)
            model = CalibrationModel.load(self.out / model_rel(i))
            path = self.manifest.target(entry, calib_rel(i))
            csv_path = self.manifest.target(entry, calib_rel(i)[:-5] + ".csv")
            trace = None
            if method == "cem":
                trace = self.manifest.target(entry, calib_rel(i)[:-5] + ".cem.jsonl")
                trace.unlink(missing_ok=True)
            sel = pl.calibrate(self.cfg, model, i, method, trace)
            extra = dict(dataset=i, method=method, selected=sel.hyperparams.as_dict(), config=self.cfg.text())
            write_records(sel.records, path, csv_path, extra)
            log.info("dataset %d: selected %s", i, sel.hyperparams.as_dict())
            return extra
        return self._stage("calibrate", datasets or self.datasets, work)

    def deploy(self, datasets=None):
        def work(entry, i):
            with open(self.out / calib_rel(i)) as f:
                calib = json.load(f)
            hp = Hyperparams(**calib["selected"])
            out = {}
            if not self._existing(deploy_rel(i)):
                path = self.manifest.target(entry, deploy_rel(i))
                rec = pl.deploy(self.cfg, hp, i)
                _write_json(path, dict(dataset=i, method=f"calibration-{calib['method']}",
                                       config=self.cfg.text(), record=rec.to_json()))
                out["calibration"] = rec.mean
            if self.cfg.fqi_enabled and not self._existing(fqi_rel(i)):
                others = [j for j in range(self.cfg.n_datasets) if j != i and (self.out / log_rel(j)).exists()]
                if not others:
                    raise RuntimeError("FQI needs a second dataset as the validation log")
                # the next dataset (cyclically) is the validation log
                later = [j for j in others if j > i]
                val = later[0] if later else others[0]
                path = self.manifest.target(entry, fqi_rel(i))
                rec = pl.fqi_baseline(self.cfg, read_log(self.out / log_rel(i)),
                                      read_log(self.out / log_rel(val)), i)
                _write_json(path, dict(dataset=i, method="fqi", validation_dataset=val,
                                       config=self.cfg.text(), record=rec.to_json()))
                out["fqi"] = rec.mean
            return out
        return self._stage("deploy", datasets or self.datasets, work)

    def sweep_true(self):
        entry = self.manifest.begin("sweep-true", [])
        try:
            if self._existing(SWEEP_REL):
                return read_records(self.out / SWEEP_REL)
            path = self.manifest.target(entry, SWEEP_REL)
            csv_path = self.manifest.target(entry, "true_sweep.csv")
            records = pl.true_sweep(self.cfg, progress=lambda i, r: log.info(
                "true sweep %d: %s -> %.2f", i, r.hyperparams.as_dict(), r.mean))
            write_records(records, path, csv_path, dict(config=self.cfg.text()))
            return records
        finally:
            self.manifest.finish(entry)

    def report(self, sweep_path=None):
        entry = self.manifest.begin("report", [])
        try:
            summary = build_report(self.out, sweep_path, self.cfg)
            path = self.manifest.target(entry, "report.json")
            _write_json(path, summary)
            csv_path = self.manifest.target(entry, "report.csv")
            write_report_csv(summary, csv_path)
            return summary
        finally:
            self.manifest.finish(entry)


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2)


def build_report(out: Path, sweep_path=None, cfg: ExperimentConfig | None = None) -> dict:
    methods: dict[str, list] = {}
    for sub in ("deploy", "fqi"):
        for p in sorted((out / sub).glob("dataset_*.json")) if (out / sub).exists() else []:
            with open(p) as f:
                d = json.load(f)
            methods.setdefault(d["method"], []).append(float(d["record"]["mean"]))
    if not methods:
        raise FileNotFoundError(f"no deployment results under {out}; run 'deploy' first")
    summary = dict(config=cfg.text() if cfg else None, methods={}, baselines={})
    for name, values in methods.items():
        summary["methods"][name] = dict(values=values, **pl.box_stats(values))
    sweep_path = Path(sweep_path) if sweep_path else out / SWEEP_REL
    if sweep_path.exists():
        sweep = read_records(sweep_path)
        means = [r.mean for r in sweep]
        n = max(len(v) for v in methods.values())
        rand = pl.random_baseline(sweep, n, cfg.seed if cfg else 0)
        summary["methods"]["random"] = dict(values=rand, **pl.box_stats(rand))
        best = sweep[int(max(range(len(means)), key=means.__getitem__))]
        summary["baselines"] = dict(best=max(means), worst=min(means), median=float(sorted(means)[len(means) // 2]),
                                    best_hyperparams=best.hyperparams.as_dict(), sweep=str(sweep_path))
    return summary


def write_report_csv(summary: dict, path) -> None:
    cols = ["method", "n", "median", "q1", "q3", "iqr", "whisker_low", "whisker_high", "mean", "outliers"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for name, s in summary["methods"].items():
            w.writerow([name, *(s[c] for c in cols[1:-1]), ";".join(map(str, s["outliers"]))])
        for name, v in summary["baselines"].items():
            if isinstance(v, float):
                w.writerow([f"baseline:{name}", "", v, "", "", "", "", "", "", ""])


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hypercal", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("method", nargs="?", choices=("grid", "random", "cem"),
                   help="search method for 'calibrate'/'pipeline' (default: from config)")
    p.add_argument("--config", required=True, help=f"INI file or preset name ({', '.join(sorted(PRESETS))})")
    p.add_argument("--out", default="results", help="output directory (default: %(default)s)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--datasets", help="dataset indices, e.g. '0-4' or '0,2'")
    p.add_argument("--desk-scale", action="store_true", help="apply the config's [desk] reductions")
    p.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    p.add_argument("--sweep", help="true-sweep JSON used by 'report' (default: OUT/true_sweep.json)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        runner = Runner(args)
        if args.method:
            runner.cfg.method = args.method
        cmd = args.command
        if cmd == "collect":
            runner.collect()
        elif cmd == "train-rep":
            runner.train_rep()
        elif cmd == "build-model":
            runner.build_model()
        elif cmd == "calibrate":
            runner.calibrate(method=args.method)
        elif cmd == "deploy":
            runner.deploy()
        elif cmd == "sweep-true":
            runner.sweep_true()
        elif cmd == "report":
            summary = runner.report(args.sweep)
            print(json.dumps({k: {kk: vv for kk, vv in v.items() if kk != "values"}
                              for k, v in summary["methods"].items()}, indent=2))
        elif cmd == "pipeline":
            if all((runner.out / deploy_rel(i)).exists() for i in runner.datasets) and not args.force:
                raise ArtifactExists(f"deployment results already exist under {runner.out}; use --force")
            runner.reuse = not args.force
            runner.collect()
            runner.train_rep()
            runner.build_model()
            runner.calibrate(method=args.method)
            runner.deploy()
            summary = runner.report(args.sweep)
            for name, s in summary["methods"].items():
                print(f"{name:24s} median {s['median']:10.2f}  IQR [{s['q1']:.2f}, {s['q3']:.2f}]  n={s['n']}")
        failures = {e["command"]: e["failures"] for e in runner.manifest.data["entries"] if e["failures"]}
        if failures:
            print(f"some datasets failed: {json.dumps(failures)}", file=sys.stderr)
            return 1
        return 0
    except (ArtifactExists, ConfigurationError, FileNotFoundError) as exc:
        print(f"hypercal: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
