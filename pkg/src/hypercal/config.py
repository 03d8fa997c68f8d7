"""Experiment configuration: flat INI files with sections, plus shipped presets.

Every value that shapes a result (environment constants, grids, ranges, budgets)
lives here so that reports can echo the exact configuration they came from.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, fields, replace

from hypercal.envs import ENV_NAMES, ConfigurationError, default_params
from hypercal.evaluation import EvalConfig
from hypercal.laplace import LaplaceTrainConfig, preset as laplace_preset
from hypercal.search import CemConfig, HyperRange, grid

SARSA_GRIDS = {
    "acrobot": dict(stepsize=[0.003, 0.03, 0.3], beta1=[0.0, 0.9], temperature=[1.0, 10.0, 100.0],
                    optimistic_init=[0.0, 4.0, 8.0], trace_decay=[0.8]),
    "puddleworld": dict(stepsize=[0.01, 0.03, 0.1], beta1=[0.0, 0.9], temperature=[1.0, 10.0, 100.0],
                        optimistic_init=[0.0, 8.0, 16.0], trace_decay=[0.1]),
    "cartpole": dict(stepsize=[0.03, 0.1, 0.3], beta1=[0.0, 0.9], temperature=[0.1, 1.0, 10.0],
                     optimistic_init=[0.0, 6.0, 12.0], trace_decay=[0.023]),
}
SARSA_GRIDS["acrobot-changed"] = SARSA_GRIDS["acrobot"]

# (tau, alpha) grids compared against CEM, with the other hyperparameters fixed
CEM_COMPARISON_GRIDS = {
    "acrobot": dict(stepsize=[0.001, 0.003, 0.01, 0.03, 0.1], temperature=[0.0001, 1, 2, 3, 4, 5]),
    "puddleworld": dict(stepsize=[0.001, 0.003, 0.01, 0.03, 0.1], temperature=[1, 2, 4, 6, 8, 10]),
}
CEM_FIXED = {
    "acrobot": dict(beta1=0.0, optimistic_init=0.0, trace_decay=0.8),
    "puddleworld": dict(beta1=0.0, optimistic_init=0.0, trace_decay=0.1),
}
# continuous CEM / random-search ranges; the open lower end of the stepsize range is
# represented by a small positive bound
CEM_RANGES = {
    "acrobot": [HyperRange("temperature", "continuous", 0.0001, 5.0),
                HyperRange("stepsize", "continuous", 1e-4, 0.1)],
    "puddleworld": [HyperRange("temperature", "continuous", 0.0001, 10.0),
                    HyperRange("stepsize", "continuous", 1e-4, 1.0)],
}

ACTOR_CRITIC_GRID = dict(stepsize=[0.001, 0.003, 0.01, 0.03, 0.1, 0.3],
                         actor_ratio=[0.001, 0.003, 0.01, 0.03, 0.1, 0.3])

DEFAULTS = """
[experiment]
name = experiment
env = acrobot
deploy_env =
quality = near_optimal
n_data = 5000
n_datasets = 30
seed = 0
agent = sarsa
behavior_max_steps = 400000
max_retries = 50

[features]
num_tilings = 16
tiles_per_dim = 8

[laplace]
preset =

[model]
k = 3
threshold = auto

[search]
method = grid
grid = sarsa
n_samples = 100
cem_iterations = 100
cem_tol = 0.1
cem_samples = 32
cem_top = 5
cem_alpha = 0.1
runs_per_sample = 3

[eval]
inner_steps = 15000
inner_runs = 10
deploy_steps = 15000
deploy_runs = 30
gamma = 1.0

[fqi]
enabled = false
epsilon = 0.05
iterations = 3000
sync_every = 100
batch_size = 128

[grid]

[ranges]

[fixed]

[env]
"""

PRESETS = {
    # Experiment 1 analogue: near-optimal Acrobot data, 54-way Sarsa grid.
    "exp1-acrobot": """
[experiment]
name = exp1-acrobot
env = acrobot
quality = near_optimal
n_data = 5000
n_datasets = 30
[eval]
inner_steps = 15000
inner_runs = 10
deploy_steps = 15000
deploy_runs = 30
[fqi]
enabled = true
[desk]
experiment.n_datasets = 5
eval.inner_runs = 5
eval.deploy_runs = 5
""",
    "exp1-puddleworld": """
[experiment]
name = exp1-puddleworld
env = puddleworld
quality = near_optimal
n_data = 5000
[eval]
inner_steps = 30000
deploy_steps = 30000
[fqi]
enabled = true
[desk]
experiment.n_datasets = 3
eval.inner_steps = 15000
eval.deploy_steps = 15000
eval.inner_runs = 3
eval.deploy_runs = 5
""",
    # Experiment 2 analogue: medium-policy Puddle World logs of different sizes.
    "exp2-puddleworld-500": """
[experiment]
name = exp2-puddleworld-500
env = puddleworld
quality = medium
n_data = 500
[laplace]
preset = puddleworld-small
[eval]
inner_steps = 30000
deploy_steps = 30000
[desk]
experiment.n_datasets = 3
eval.inner_steps = 15000
eval.deploy_steps = 15000
eval.inner_runs = 3
eval.deploy_runs = 5
""",
    "exp2-puddleworld-5000": """
[experiment]
name = exp2-puddleworld-5000
env = puddleworld
quality = medium
n_data = 5000
[laplace]
preset = puddleworld-small
[eval]
inner_steps = 30000
deploy_steps = 30000
[desk]
experiment.n_datasets = 3
eval.inner_steps = 15000
eval.deploy_steps = 15000
eval.inner_runs = 3
eval.deploy_runs = 5
""",
    # Experiment 3: collect on Acrobot, deploy on the changed Acrobot.
    "exp3-acrobot-changed": """
[experiment]
name = exp3-acrobot-changed
env = acrobot
deploy_env = acrobot-changed
quality = near_optimal
n_data = 5000
[fqi]
enabled = true
[desk]
experiment.n_datasets = 3
eval.inner_runs = 3
eval.deploy_runs = 5
""",
    # Experiment 4: Cartpole with near-optimal / random data.
    "exp4-cartpole-near": """
[experiment]
name = exp4-cartpole-near
env = cartpole
quality = near_optimal
n_data = 10000
[eval]
inner_steps = 15000
deploy_steps = 15000
[desk]
experiment.n_datasets = 3
eval.inner_steps = 6000
eval.deploy_steps = 6000
eval.inner_runs = 3
eval.deploy_runs = 3
""",
    "exp4-cartpole-random": """
[experiment]
name = exp4-cartpole-random
env = cartpole
quality = random
n_data = 10000
[eval]
inner_steps = 15000
deploy_steps = 15000
[desk]
experiment.n_datasets = 3
eval.inner_steps = 6000
eval.deploy_steps = 6000
eval.inner_runs = 3
eval.deploy_runs = 3
""",
    # Experiment 5: CEM over continuous (tau, alpha) on the small Puddle World log.
    "exp5-puddleworld-cem": """
[experiment]
name = exp5-puddleworld-cem
env = puddleworld
quality = medium
n_data = 500
[laplace]
preset = puddleworld-small
[search]
method = cem
grid = cem-comparison
cem_iterations = 30
# the fixed iteration budget is spent: the running-average stop rule would end the
# search after two iterations on these ranges
cem_tol = 0
runs_per_sample = 5
[eval]
inner_steps = 30000
deploy_steps = 30000
[desk]
experiment.n_datasets = 3
search.cem_iterations = 10
search.runs_per_sample = 3
eval.inner_steps = 15000
eval.deploy_steps = 15000
eval.inner_runs = 3
eval.deploy_runs = 5
""",
}


def _read(text_or_parser) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case
    cp.read_string(DEFAULTS)
    if isinstance(text_or_parser, configparser.ConfigParser):
        for section in text_or_parser.sections():
            if not cp.has_section(section):
                cp.add_section(section)
            for k, v in text_or_parser.items(section, raw=True):
                cp.set(section, k, v)
    elif text_or_parser:
        cp.read_string(text_or_parser)
    return cp


def load_config(path=None, preset: str | None = None, desk_scale: bool = False,
                overrides: dict | None = None) -> "ExperimentConfig":
    """Defaults <- preset <- file <- desk-scale section <- explicit ``section.key`` overrides."""
    cp = _read(None)
    if preset:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; available: {sorted(PRESETS)}")
        cp.read_string(PRESETS[preset])
    if path:
        with open(path) as f:
            cp.read_string(f.read())
    merged = dict(overrides or {})
    if desk_scale and cp.has_section("desk"):
        merged = {**dict(cp.items("desk")), **merged}
    for dotted, value in merged.items():
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigurationError(f"override {dotted!r} must look like section.key")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key, str(value))
    return ExperimentConfig(cp)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def parse_range(name: str, text: str) -> HyperRange:
    """``continuous LOW HIGH`` | ``ordered LOW HIGH [BASE]`` | ``unordered V1 V2 ...``."""
    parts = text.replace(",", " ").split()
    kind = parts[0]
    if kind == "continuous":
        return HyperRange(name, "continuous", float(parts[1]), float(parts[2]))
    if kind == "ordered":
        base = float(parts[3]) if len(parts) > 3 else None
        return HyperRange(name, "ordered_discrete", float(parts[1]), float(parts[2]), base=base)
    if kind == "unordered":
        return HyperRange(name, "unordered_discrete", values=tuple(float(v) for v in parts[1:]))
    raise ConfigurationError(f"range {name}: unknown kind {kind!r}")


class ExperimentConfig:
    """Typed view over the merged INI configuration."""

    def __init__(self, cp: configparser.ConfigParser):
        self.cp = cp
        ex = cp["experiment"]
        self.name = ex.get("name")
        self.env = ex.get("env")
        self.deploy_env = ex.get("deploy_env") or self.env
        for e in (self.env, self.deploy_env):
            if e not in ENV_NAMES:
                raise ConfigurationError(f"unknown environment {e!r}; expected one of {ENV_NAMES}")
        self.quality = ex.get("quality")
        self.n_data = ex.getint("n_data")
        self.n_datasets = ex.getint("n_datasets")
        self.seed = ex.getint("seed")
        self.agent = ex.get("agent")
        self.behavior_max_steps = ex.getint("behavior_max_steps")
        self.max_retries = ex.getint("max_retries")
        self.num_tilings = cp.getint("features", "num_tilings")
        self.tiles_per_dim = cp.getint("features", "tiles_per_dim")
        self.k = cp.getint("model", "k")
        th = cp.get("model", "threshold")
        self.threshold = None if th.strip() in ("", "auto") else float(th)
        s = cp["search"]
        self.method = s.get("method")
        if self.method not in ("grid", "random", "cem"):
            raise ConfigurationError(f"unknown search method {self.method!r}")
        self.n_samples = s.getint("n_samples")
        self.cem = CemConfig(n_samples=s.getint("cem_samples"), n_top=s.getint("cem_top"),
                             alpha=s.getfloat("cem_alpha"), tol=s.getfloat("cem_tol"),
                             max_iterations=s.getint("cem_iterations"),
                             runs_per_sample=s.getint("runs_per_sample"))
        e = cp["eval"]
        self.gamma = e.getfloat("gamma")
        self.inner = EvalConfig(e.getint("inner_steps"), e.getint("inner_runs"), self.gamma, self.seed)
        self.deploy = EvalConfig(e.getint("deploy_steps"), e.getint("deploy_runs"), self.gamma, self.seed)
        f = cp["fqi"]
        self.fqi_enabled = f.getboolean("enabled")
        self.fqi_epsilon = f.getfloat("epsilon")
        self.fqi_iterations = f.getint("iterations")
        self.fqi_sync = f.getint("sync_every")
        self.fqi_batch = f.getint("batch_size")

    # -- derived objects -----------------------------------------------------
    def laplace(self) -> LaplaceTrainConfig:
        sec = self.cp["laplace"]
        name = sec.get("preset") or self.env
        cfg = laplace_preset(name)
        over = {}
        for fld in fields(LaplaceTrainConfig):
            if fld.name in sec and sec.get(fld.name).strip():
                raw = sec.get(fld.name)
                if fld.name == "hidden":
                    over[fld.name] = tuple(int(x) for x in _floats(raw))
                elif fld.type in ("int", int) or isinstance(getattr(cfg, fld.name), int):
                    over[fld.name] = int(float(raw))
                else:
                    over[fld.name] = float(raw)
        return replace(cfg, **over)

    def grid_axes(self) -> dict:
        axes = {k: _floats(v) for k, v in self.cp.items("grid") if v.strip()}
        if axes:
            return axes
        which = self.cp.get("search", "grid")
        if which == "cem-comparison":
            return {**CEM_COMPARISON_GRIDS[self.env.replace("-changed", "")],
                    **{k: [v] for k, v in self.fixed().items()}}
        if self.agent == "actor_critic":
            return ACTOR_CRITIC_GRID
        return SARSA_GRIDS[self.env]

    def candidates(self):
        return grid(**self.grid_axes())

    def ranges(self) -> list[HyperRange]:
        items = [(k, v) for k, v in self.cp.items("ranges") if v.strip()]
        if items:
            return [parse_range(k, v) for k, v in items]
        return CEM_RANGES[self.env.replace("-changed", "")]

    def fixed(self) -> dict:
        items = {k: float(v) for k, v in self.cp.items("fixed") if v.strip()}
        return items or dict(CEM_FIXED.get(self.env.replace("-changed", ""), {}))

    def env_params(self, name: str | None = None):
        name = name or self.env
        params = default_params(name)
        for k, v in self.cp.items("env"):
            if not v.strip():
                continue
            if not hasattr(params, k):
                raise ConfigurationError(f"{name} has no parameter {k!r}")
            cur = getattr(params, k)
            setattr(params, k, type(cur)(float(v)) if isinstance(cur, (int, float)) else cur)
        return params

    def text(self) -> str:
        buf = io.StringIO()
        self.cp.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()[:16]
