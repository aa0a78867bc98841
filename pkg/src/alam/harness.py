"""Experiment configuration, run directories, aggregation and analysis.

A run directory ``<out>/<agent>/<env>/seed_<n>/`` holds

* ``metrics.csv``  one row per evaluation (see :mod:`alam.logs`),
* ``events.jsonl`` dual updates, penalty bumps, evaluations, aborts,
* ``config.json``  the resolved agent/env configuration,
* ``final.ckpt``   networks at the end of training,
* ``state.pkl``    resumable trainer state, removed once the run completes.

``<out>/manifest.json`` indexes every run an experiment launched.
"""

from __future__ import annotations

import json
import math
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .actor import GaussianPolicy
from .agents import STRATEGIES, AgentConfig, Trainer, evaluate
from .envs import ENVIRONMENTS, Env, make_env
from .errors import ConfigurationError, UsageError
from .logs import read_metrics
from .multiplier import MultiplierNet
from .nn import load_checkpoint

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class ExperimentConfig:
    agents: list[str]
    envs: list[str]
    seeds: list[int]
    out: Path
    agent: dict[str, Any] = field(default_factory=dict)
    env_options: dict[str, dict[str, Any]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.out = Path(self.out)
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigurationError("seed list must be nonempty")
        if not self.agents or not self.envs:
            raise ConfigurationError("need at least one agent and one environment")
        for a in self.agents:
            if a not in STRATEGIES:
                raise ConfigurationError(f"unknown agent {a!r}; choose from {list(STRATEGIES)}")
        for e in self.envs:
            if e not in ENVIRONMENTS:
                raise ConfigurationError(f"unknown environment {e!r}; choose from {sorted(ENVIRONMENTS)}")
        AgentConfig.from_dict(self.agent)  # validate early

    def agent_config(self, seed: int) -> AgentConfig:
        return AgentConfig.from_dict({**self.agent, "seed": seed})

    def make_env(self, name: str) -> Env:
        return make_env(name, **self.env_options.get(name, {}))

    def runs(self) -> list[tuple[str, str, int]]:
        # seed-major, so paired agent comparisons complete together
        return [(a, e, s) for s in self.seeds for e in self.envs for a in self.agents]


def parse_value(text: str) -> Any:
    """Read a CLI override value with TOML syntax; bare words stay strings."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(doc: dict, overrides: Iterable[str]) -> dict:
    """Apply ``section.key=value`` assignments to a parsed config document."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        parts = key.strip().split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = parse_value(value.strip())
    return doc


def config_from_document(doc: Mapping[str, Any]) -> ExperimentConfig:
    exp = dict(doc.get("experiment", {}))
    unknown = set(exp) - {"agents", "envs", "seeds", "out"}
    if unknown:
        raise ConfigurationError(f"unknown experiment keys: {sorted(unknown)}")
    try:
        return ExperimentConfig(
            agents=list(exp["agents"]), envs=list(exp["envs"]), seeds=list(exp["seeds"]),
            out=exp.get("out", "runs"), agent=dict(doc.get("agent", {})),
            env_options={k: dict(v) for k, v in doc.get("env", {}).items()},
        )
    except KeyError as err:
        raise ConfigurationError(f"missing [experiment] key {err.args[0]!r}") from None


def load_config(path: str | Path, overrides: Iterable[str] = ()) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as err:
        raise ConfigurationError(f"cannot read config {path}: {err}") from None
    return config_from_document(apply_overrides(doc, overrides))


def run_dir(out: str | Path, agent: str, env: str, seed: int) -> Path:
    return Path(out) / agent / env / f"seed_{seed}"


def run_single(agent: str, env_name: str, env_options: Mapping[str, Any], config: AgentConfig,
               directory: str | Path, force: bool = False, resume: bool = False) -> str:
    """Train one (agent, env, seed) into ``directory``; returns its final status."""
    directory = Path(directory)
    state = directory / "state.pkl"
    if (directory / "final.ckpt").exists() and not force:
        if resume:
            return "complete"
        raise ConfigurationError(f"{directory} already holds a finished run; pass --force to overwrite")
    if resume and state.exists() and not force:
        trainer = Trainer.load_state(state)
        if trainer.config != config:
            raise ConfigurationError(f"{directory}: saved state was trained with a different config")
    else:
        if directory.exists() and any(directory.iterdir()):
            if not force and not resume:
                raise ConfigurationError(f"{directory} is not empty; pass --force to overwrite")
            shutil.rmtree(directory)
        directory.mkdir(parents=True, exist_ok=True)
        snapshot = {"agent": agent, "env": env_name, "env_options": dict(env_options),
                    "config": config.to_dict()}
        (directory / "config.json").write_text(json.dumps(snapshot, sort_keys=True, indent=2) + "\n")
        trainer = Trainer(make_env(env_name, **env_options), config, agent, directory)
    trainer.train(resume_path=state)
    state.unlink(missing_ok=True)
    return "complete"


def _run_job(job: tuple) -> tuple[str, str]:
    agent, env_name, env_options, cfg_dict, directory, force, resume = job
    try:
        status = run_single(agent, env_name, env_options, AgentConfig.from_dict(cfg_dict),
                            directory, force, resume)
    except Exception as err:  # recorded in the manifest, surfaced by the caller
        status = f"failed: {type(err).__name__}: {err}"
    return str(directory), status


def max_workers(n_jobs: int) -> int:
    raw = os.environ.get("ALAM_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigurationError(f"ALAM_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, n_jobs))


def run_experiment(config: ExperimentConfig, force: bool = False, resume: bool = False) -> Path:
    """Train every (agent, env, seed) of ``config`` and write the manifest.

    Runs execute in up to ``ALAM_THREADS`` worker processes (default 1).
    """
    out = config.out
    manifest_path = out / "manifest.json"
    if manifest_path.exists() and not (force or resume):
        raise ConfigurationError(f"{out} already holds an experiment; pass --force or --resume")
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for agent, env_name, seed in config.runs():
        d = run_dir(out, agent, env_name, seed)
        jobs.append((agent, env_name, config.env_options.get(env_name, {}),
                     config.agent_config(seed).to_dict(), d, force, resume))
    n = max_workers(len(jobs))
    if n == 1:
        results = [_run_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_run_job, jobs))
    status = dict(results)
    manifest = {
        "runs": [
            {"agent": a, "env": e, "seed": s, "dir": str(run_dir(out, a, e, s).relative_to(out)),
             "status": status[str(run_dir(out, a, e, s))]}
            for a, e, s in config.runs()
        ],
        "agent": config.agent,
        "env_options": config.env_options,
    }
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    failed = [r for r in manifest["runs"] if r["status"] != "complete"]
    if failed:
        raise RuntimeError(f"{len(failed)} run(s) failed; first: {failed[0]['dir']}: {failed[0]['status']}")
    return out


# -- analysis -----------------------------------------------------------------


def run_info(directory: str | Path) -> dict:
    return json.loads((Path(directory) / "config.json").read_text())


def final_fraction_mean(values: Sequence[float], fraction: float = 0.1) -> float:
    """Mean over the last ``fraction`` of a series (at least one point)."""
    if len(values) == 0:
        raise UsageError("empty series")
    k = max(1, int(math.ceil(fraction * len(values))))
    return float(np.mean(values[-k:]))


def t_interval(samples: Sequence[float], level: float = 0.95) -> tuple[float, float]:
    """``(mean, half_width)`` of a Student-t interval; zero width for one sample."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise UsageError("no samples")
    if x.size == 1:
        return float(x[0]), 0.0
    half = stats.t.ppf(0.5 + level / 2, x.size - 1) * x.std(ddof=1) / math.sqrt(x.size)
    return float(x.mean()), float(half)


def aggregate_normalized(run_dirs: Iterable[str | Path], fraction: float = 0.1) -> dict[str, dict]:
    """Min-max normalized final performance per agent with 95% t-intervals.

    Each run contributes its final-``fraction`` averages of return and cost.
    Per environment, the bounds are the smallest and largest seed-averaged
    value over agents. For every seed the normalized values are averaged
    across environments, and the interval is taken over seeds.
    """
    finals: dict[tuple[str, str], dict[int, tuple[float, float]]] = {}
    for d in run_dirs:
        info = run_info(d)
        m = read_metrics(Path(d) / "metrics.csv")
        seed = int(info["config"]["seed"])
        finals.setdefault((info["agent"], info["env"]), {})[seed] = (
            final_fraction_mean(m["episode_return"], fraction),
            final_fraction_mean(m["episode_cost"], fraction),
        )
    agents = sorted({a for a, _ in finals})
    envs = sorted({e for _, e in finals})
    if len(agents) < 2:
        raise UsageError("normalization needs at least two agents")

    bounds = {}
    for e in envs:
        per_agent = [np.mean(list(finals[(a, e)].values()), axis=0) for a in agents if (a, e) in finals]
        lo, hi = np.min(per_agent, axis=0), np.max(per_agent, axis=0)
        bounds[e] = (lo, hi)

    def norm(v: np.ndarray, e: str) -> np.ndarray:
        lo, hi = bounds[e]
        span = hi - lo
        return np.where(span > 0, (v - lo) / np.where(span > 0, span, 1.0), 0.5)

    summary = {}
    for a in agents:
        seeds = set.intersection(*(set(finals[(a, e)]) for e in envs if (a, e) in finals))
        if not seeds:
            raise UsageError(f"agent {a} has no seed shared by all its environments")
        per_seed = np.array([
            np.mean([norm(np.array(finals[(a, e)][s]), e) for e in envs if (a, e) in finals], axis=0)
            for s in sorted(seeds)
        ])
        r_mean, r_ci = t_interval(per_seed[:, 0])
        c_mean, c_ci = t_interval(per_seed[:, 1])
        summary[a] = {"return": r_mean, "return_ci": r_ci, "cost": c_mean, "cost_ci": c_ci,
                      "n_seeds": len(seeds), "envs": [e for e in envs if (a, e) in finals]}
    return summary


def oscillation_metric(log, window: int = 10) -> float:
    """Mean rolling standard deviation (``ddof=1``) of episode cost over the second half.

    ``log`` is a metrics file path, a column mapping from
    :func:`alam.logs.read_metrics`, or a plain cost series. Only windows lying
    entirely inside the second half of the series are used.
    """
    if isinstance(log, (str, Path)):
        log = read_metrics(log)
    series = np.asarray(log["episode_cost"] if isinstance(log, Mapping) else log, dtype=np.float64)
    if window < 2:
        raise UsageError("window must be at least 2")
    tail = series[len(series) // 2 :]
    if len(tail) < window:
        raise UsageError(f"second half has {len(tail)} points, window needs {window}")
    windows = np.lib.stride_tricks.sliding_window_view(tail, window)
    # shifting by a member of each window keeps constant windows exactly at zero
    windows = windows - windows[:, :1]
    return float(np.mean(windows.std(axis=1, ddof=1)))


# -- checkpoints --------------------------------------------------------------


def load_policy(checkpoint: str | Path, env: Env) -> GaussianPolicy:
    nets, _ = load_checkpoint(checkpoint)
    spec = env.spec
    return GaussianPolicy(spec.state_dim, spec.action_low, spec.action_high, net=nets["policy"])


def load_multiplier(checkpoint: str | Path) -> MultiplierNet:
    nets, _ = load_checkpoint(checkpoint)
    if "multiplier" not in nets:
        raise UsageError(f"{checkpoint} holds no multiplier network")
    net = nets["multiplier"]
    return MultiplierNet(net.arch.input_dim, net=net)


def evaluate_checkpoint(checkpoint: str | Path, env: Env, episodes: int = 20, seed: int = 0) -> dict:
    return evaluate(env, load_policy(checkpoint, env), episodes, seed).to_dict()


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid over two free state dimensions."""

    dims: tuple[int, ...] = (0, 1)
    low: tuple[float, ...] = (-2.0, -2.0)
    high: tuple[float, ...] = (2.0, 2.0)
    num: tuple[int, ...] = (41, 41)

    def __post_init__(self) -> None:
        if not (len(self.dims) == len(self.low) == len(self.high) == len(self.num) == 2):
            raise UsageError("a heatmap grid needs exactly two free dimensions")
        if min(self.num) < 1:
            raise UsageError("grid needs at least one point per axis")

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        axes = [np.linspace(lo, hi, n) if n > 1 else np.array([lo])
                for lo, hi, n in zip(self.low, self.high, self.num)]
        g1, g2 = np.meshgrid(axes[0], axes[1], indexing="xy")
        return g1.ravel(), g2.ravel()


def lambda_grid(multiplier: MultiplierNet, state_dim: int, grid: GridSpec,
                fixed: Mapping[int, float]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x1, x2 = grid.points()
    states = np.zeros((x1.size, state_dim))
    for dim, value in fixed.items():
        if dim in grid.dims:
            raise UsageError(f"dimension {dim} is both free and fixed")
        states[:, dim] = value
    states[:, grid.dims[0]] = x1
    states[:, grid.dims[1]] = x2
    return x1, x2, multiplier(states)


def export_lambda_heatmap(checkpoint: str | Path, env: Env, grid: GridSpec,
                          fixed_settings: Sequence[Mapping[int, float]], out_dir: str | Path) -> list[Path]:
    """Write one ``x1,x2,lambda`` CSV per fixed-dimension setting. Reads the checkpoint only."""
    multiplier = load_multiplier(checkpoint)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for fixed in fixed_settings:
        x1, x2, lam = lambda_grid(multiplier, env.spec.state_dim, grid, fixed)
        tag = "_".join(f"d{k}={v:g}" for k, v in sorted(fixed.items())) or "free"
        path = out_dir / f"lambda_{tag}.csv"
        with open(path, "w") as fh:
            fh.write("x1,x2,lambda\n")
            for a, b, c in zip(x1, x2, lam):
                fh.write(f"{float(a)!r},{float(b)!r},{float(c)!r}\n")
        paths.append(path)
    return paths


def hazard_lambda_ratio(checkpoint: str | Path, env, grid: GridSpec = GridSpec(),
                        velocity: tuple[float, float] = (0.0, 0.0), far: float = 3.0) -> dict:
    """Mean multiplier inside hazard disks over mean multiplier ``far`` radii from every hazard."""
    multiplier = load_multiplier(checkpoint)
    x1, x2, lam = lambda_grid(multiplier, env.spec.state_dim, grid, {2: velocity[0], 3: velocity[1]})
    ratio = env.hazard_distance_ratio(np.stack([x1, x2], axis=1))
    inside, outside = lam[ratio < 1.0], lam[ratio >= far]
    if inside.size == 0 or outside.size == 0:
        raise UsageError("grid does not cover both hazard interiors and far regions")
    return {"inside": float(inside.mean()), "far": float(outside.mean()),
            "ratio": float(inside.mean() / outside.mean()), "n_inside": int(inside.size),
            "n_far": int(outside.size)}
