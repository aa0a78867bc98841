"""Training loops: SAC with a pluggable safety mechanism.

All agents share one :class:`Trainer`; the safety strategy decides the
penalty added to the actor loss and what happens every ``m_lambda``
gradient steps.

========== ============================================================
strategy   safety mechanism
========== ============================================================
sac        none
sac-lag    scalar multiplier, projected ascent on mean batch violation
sac-lagnet multiplier network, ascent weighted by ``F_hat - d``
sac-alam   multiplier network regressed onto ``max(lam + rho F, 0)``
sac-alam-ga as sac-alam but one ascent step on ``lam * max(-lam/rho, F)``
========== ============================================================
"""

from __future__ import annotations

import dataclasses
import json
import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import autodiff as ad
from .actor import GaussianPolicy, Temperature, policy_loss, temperature_step
from .critics import Batch, CriticEnsemble, cost_critic_loss, feasibility_estimate, reward_critic_loss
from .envs import Env, rollout
from .errors import ConfigurationError, NonFiniteError, UsageError
from .logs import MetricRow, append_event, write_metrics
from .multiplier import (
    INITIAL_MULTIPLIER,
    MultiplierNet,
    PenaltyState,
    augmented_terms,
    effective_residual,
    lagrangian_terms,
    multiplier_ascent_step,
    multiplier_regression_step,
    penalty_update,
    violation_metric,
)
from .nn import save_checkpoint
from .optim import Adam, soft_update

STRATEGIES = ("sac", "sac-lag", "sac-lagnet", "sac-alam", "sac-alam-ga")


@dataclass
class AgentConfig:
    gamma: float = 0.99
    hidden: tuple[int, ...] = (256, 256)
    lr: float = 1e-4
    multiplier_lr: float = 1e-5
    total_steps: int = 100_000
    buffer_size: int = 2_000_000
    batch_size: int = 256
    target_entropy: float | None = None  # None means -dim(A)
    m_lambda: int = 200
    k_samples: int = 5
    dual_steps: int = 5
    rho_max: float = 5.0
    sigma: float = 1.01
    rho0: float = 1.0
    tolerance: float = 0.1
    tau: float = 0.005
    updates_per_step: int = 1
    warmup_steps: int = 5000
    eval_interval: int = 5000
    eval_episodes: int = 20
    seed: int = 0
    init_alpha: float = 1.0
    lag_lr: float = 3e-3
    lambda_init: float = INITIAL_MULTIPLIER
    target_mode: str = "live"
    lagnet_dual_steps: int = 5
    record_wall_time: bool = False
    precision: str = "float64"  # arithmetic inside the dense layers

    def __post_init__(self) -> None:
        self.hidden = tuple(int(h) for h in self.hidden)
        positive = ("lr", "multiplier_lr", "total_steps", "buffer_size", "batch_size", "m_lambda",
                    "k_samples", "dual_steps", "rho_max", "rho0", "tau", "updates_per_step",
                    "eval_interval", "eval_episodes", "init_alpha", "lag_lr", "lagnet_dual_steps")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in [0, 1)")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigurationError("hidden layout needs at least one positive width")
        if self.sigma <= 1.0 or self.rho0 > self.rho_max:
            raise ConfigurationError("need sigma > 1 and rho0 <= rho_max")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigurationError("tau must lie in (0, 1]")
        if self.warmup_steps < 0 or self.tolerance < 0 or self.lambda_init <= 0:
            raise ConfigurationError("warmup, tolerance must be >= 0 and lambda_init > 0")
        if self.precision not in ("float64", "float32"):
            raise ConfigurationError(f"precision must be float64 or float32, got {self.precision!r}")
        if self.target_mode not in ("live", "snapshot"):
            raise ConfigurationError(f"unknown target_mode {self.target_mode!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AgentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown agent options: {sorted(unknown)}")
        return cls(**dict(d))

    def replace(self, **kw) -> "AgentConfig":
        return dataclasses.replace(self, **kw)


class ReplayBuffer:
    """Ring buffer of transitions with uniform sampling.

    Storage grows geometrically up to ``capacity`` so desk-scale runs do not
    allocate the full table up front.
    """

    _FIELDS = ("states", "actions", "rewards", "costs", "next_states", "dones", "state_costs")

    def __init__(self, state_dim: int, action_dim: int, capacity: int = 2_000_000) -> None:
        self.state_dim, self.action_dim, self.capacity = state_dim, action_dim, int(capacity)
        self.size = 0
        self._next = 0
        self._alloc(min(self.capacity, 4096))

    def _alloc(self, n: int) -> None:
        shapes = {"states": (n, self.state_dim), "actions": (n, self.action_dim),
                  "next_states": (n, self.state_dim)}
        old = {f: getattr(self, "_" + f, None) for f in self._FIELDS}
        for f in self._FIELDS:
            arr = np.zeros(shapes.get(f, (n,)))
            if old[f] is not None:
                arr[: self.size] = old[f][: self.size]
            setattr(self, "_" + f, arr)
        self._allocated = n

    def __len__(self) -> int:
        return self.size

    def add(self, state, action, reward, cost, next_state, done, state_cost) -> None:
        if self.size == self._allocated and self._allocated < self.capacity:
            self._alloc(min(self.capacity, 2 * self._allocated))
        i = self._next
        self._states[i] = state
        self._actions[i] = action
        self._rewards[i] = reward
        self._costs[i] = cost
        self._next_states[i] = next_state
        self._dones[i] = done
        self._state_costs[i] = state_cost
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise UsageError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, size=n)

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        idx = self._indices(n, rng)
        return Batch(*(getattr(self, "_" + f)[idx] for f in self._FIELDS))

    def sample_states(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self._states[self._indices(n, rng)]


# -- safety strategies ------------------------------------------------------


class Safety:
    """No constraint handling: plain SAC."""

    name = "sac"
    uses_penalty_factor = False

    def __init__(self, trainer: "Trainer") -> None:
        self.t = trainer
        self.penalty_state: PenaltyState | None = None

    def penalty(self, states: np.ndarray):
        return None

    def dual_update(self) -> dict:
        return {}

    def mean_lambda(self, states: np.ndarray) -> float:
        return 0.0

    def networks(self) -> dict:
        return {}

    def extra(self) -> dict:
        return {}

    @property
    def rho(self) -> float:
        return self.penalty_state.rho if self.penalty_state is not None else float("nan")


class ScalarLagrangian(Safety):
    name = "sac-lag"

    def __init__(self, trainer):
        super().__init__(trainer)
        self.lam = trainer.config.lambda_init

    def penalty(self, states):
        return lambda f: lagrangian_terms(np.full(len(states), self.lam), f)

    def dual_update(self):
        states = self.t.dual_states()
        g = float(np.mean(self.t.shifted_feasibility(states)))
        self.lam = max(0.0, self.lam + self.t.config.lag_lr * g)
        return {"violation": g, "lambda": self.lam}

    def mean_lambda(self, states):
        return self.lam

    def extra(self):
        return {"lambda": self.lam}


class _NetworkMultiplier(Safety):
    def __init__(self, trainer):
        super().__init__(trainer)
        cfg = trainer.config
        self.multiplier = MultiplierNet(trainer.env.spec.state_dim, cfg.hidden, trainer.rng_init,
                                        init_value=cfg.lambda_init)
        self.optimizer = Adam(self.multiplier.params.size, lr=cfg.multiplier_lr, name="multiplier")

    def mean_lambda(self, states):
        return float(np.mean(self.multiplier(states)))

    def networks(self):
        return {"multiplier": self.multiplier.net}


class LagrangianNet(_NetworkMultiplier):
    name = "sac-lagnet"

    def penalty(self, states):
        lam = self.multiplier(states)
        return lambda f: lagrangian_terms(lam, f)

    def dual_update(self):
        losses = multiplier_ascent_step(
            self.t.dual_states, self.multiplier, lambda s, lam: self.t.shifted_feasibility(s),
            self.t.config.lagnet_dual_steps, self.optimizer,
        )
        return {"loss": float(np.mean(losses))}


class AugmentedLagrangian(_NetworkMultiplier):
    name = "sac-alam"
    uses_penalty_factor = True

    def __init__(self, trainer):
        super().__init__(trainer)
        cfg = trainer.config
        self.penalty_state = PenaltyState.initial(cfg.rho0, cfg.sigma, cfg.rho_max)

    def penalty(self, states):
        lam, rho = self.multiplier(states), self.penalty_state.rho
        return lambda f: augmented_terms(lam, f, rho)

    def _multiplier_steps(self) -> list[float]:
        cfg = self.t.config
        return multiplier_regression_step(self.t.dual_states, self.multiplier, self.t.shifted_feasibility,
                                          self.penalty_state.rho, cfg.dual_steps, self.optimizer,
                                          cfg.target_mode)

    def dual_update(self):
        losses = self._multiplier_steps()
        # penalty check on a fresh batch, after the dual steps
        v = violation_metric(self.t.dual_states(), self.multiplier, self.t.shifted_feasibility,
                             self.penalty_state.rho)
        before = self.penalty_state.rho
        self.penalty_state = penalty_update(self.penalty_state, v)
        return {"loss": float(np.mean(losses)), "v": v, "rho_before": before, "rho": self.penalty_state.rho}

    def extra(self):
        return {"rho": self.penalty_state.rho}


class AugmentedLagrangianAscent(AugmentedLagrangian):
    name = "sac-alam-ga"

    def _multiplier_steps(self):
        rho = self.penalty_state.rho
        weight = lambda s, lam: effective_residual(lam, self.t.shifted_feasibility(s), rho)  # noqa: E731
        return multiplier_ascent_step(self.t.dual_states, self.multiplier, weight, 1, self.optimizer)


_STRATEGY_CLASSES = {cls.name: cls for cls in
                     (Safety, ScalarLagrangian, LagrangianNet, AugmentedLagrangian, AugmentedLagrangianAscent)}


# -- trainer ------------------------------------------------------------------


@dataclass
class EvalRecord:
    return_mean: float
    return_std: float
    cost_mean: float
    cost_std: float
    violation_mean: float
    violation_std: float
    max_h: float
    episodes: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate(env: Env, policy, episodes: int, rng_seed) -> EvalRecord:
    """Deterministic-action rollouts of ``policy`` (squashed mean if it has one)."""
    act = policy.deterministic if hasattr(policy, "deterministic") else policy
    stats = rollout(env, act, episodes, rng_seed)
    return EvalRecord(
        float(np.mean(stats.returns)), float(np.std(stats.returns)),
        float(np.mean(stats.total_cost)), float(np.std(stats.total_cost)),
        float(np.mean(stats.violation_fraction)), float(np.std(stats.violation_fraction)),
        float(np.max(stats.max_h)), episodes,
    )


@dataclass
class TrainResult:
    rows: list[MetricRow]
    events: list[dict]
    checkpoint: Path | None
    rho_history: tuple[float, ...] = ()
    final_eval: EvalRecord | None = None
    extra: dict = field(default_factory=dict)


class Trainer:
    """Soft actor-critic whose constraint handling is delegated to ``strategy``.

    Random streams (initialization, exploration, replay sampling, update
    noise, dual updates, evaluation, logging) are spawned from one seed so a
    run is reproducible bit for bit.
    """

    def __init__(self, env: Env, config: AgentConfig, strategy: str = "sac-alam",
                 out_dir: str | Path | None = None) -> None:
        if strategy not in _STRATEGY_CLASSES:
            raise ConfigurationError(f"unknown agent {strategy!r}; choose from {STRATEGIES}")
        self.env, self.config, self.strategy_name = env, config, strategy
        self.out_dir = Path(out_dir) if out_dir is not None else None
        ss = np.random.SeedSequence(config.seed)
        streams = [np.random.default_rng(s) for s in ss.spawn(7)]
        (self.rng_init, self.rng_env, self.rng_act, self.rng_batch,
         self.rng_update, self.rng_dual, self.rng_log) = streams
        self.eval_seed = int(ss.generate_state(1)[0])

        spec = env.spec
        h = config.hidden
        self.policy = GaussianPolicy(spec.state_dim, spec.action_low, spec.action_high, h, self.rng_init)
        self.critics = CriticEnsemble.build(spec.state_dim, spec.action_dim, h, self.rng_init)
        target_h = config.target_entropy if config.target_entropy is not None else -float(spec.action_dim)
        self.temperature = Temperature(target_h, config.init_alpha, config.lr)
        self.buffer = ReplayBuffer(spec.state_dim, spec.action_dim, config.buffer_size)
        self.opt = {name: Adam(net.params.size, lr=config.lr, name=name)
                    for name, net in [("policy", self.policy.net), *self.critics.online().items()]}
        self.safety = _STRATEGY_CLASSES[strategy](self)

        self.env_step = 0
        self.grad_step = 0
        self._state = env.reset(self.rng_env)
        self._t = 0
        self.rows: list[MetricRow] = []
        self.events: list[dict] = []
        self._acc = self._fresh_acc()
        self._elapsed = 0.0

    # helpers used by strategies
    def dual_states(self) -> np.ndarray:
        return self.buffer.sample_states(self.config.batch_size, self.rng_dual)

    def shifted_feasibility(self, states: np.ndarray) -> np.ndarray:
        return feasibility_estimate(states, self.policy, self.critics, self.config.k_samples,
                                    self.rng_dual) - self.config.tolerance

    @staticmethod
    def _fresh_acc() -> dict[str, list[float]]:
        return {"policy": [], "q": [], "qc": [], "multiplier": []}

    def _event(self, kind: str, **payload) -> None:
        ev = {"event": kind, "env_step": self.env_step, "grad_step": self.grad_step, **payload}
        self.events.append(ev)
        if self.out_dir is not None:
            append_event(self.out_dir / "events.jsonl", ev)

    # one gradient step of every network
    def update(self) -> None:
        cfg, ens, rng = self.config, self.critics, self.rng_update
        batch = self.buffer.sample(cfg.batch_size, self.rng_batch)
        alpha = self.temperature.alpha

        p1, p2 = ens.q1.leaf(), ens.q2.leaf()
        l1, l2 = reward_critic_loss(batch, ens, self.policy, alpha, cfg.gamma, rng, (p1, p2))
        g1, g2 = ad.grad(l1 + l2, [p1, p2])
        self.opt["q1"].step(ens.q1.params, g1)
        self.opt["q2"].step(ens.q2.params, g2)

        c1, c2 = ens.qc1.leaf(), ens.qc2.leaf()
        lc1, lc2 = cost_critic_loss(batch, ens, self.policy, cfg.gamma, rng, (c1, c2))
        g1, g2 = ad.grad(lc1 + lc2, [c1, c2])
        self.opt["qc1"].step(ens.qc1.params, g1)
        self.opt["qc2"].step(ens.qc2.params, g2)

        theta = self.policy.net.leaf()
        loss_pi, parts = policy_loss(batch.states, self.policy, ens, alpha, cfg.k_samples, rng,
                                     self.safety.penalty(batch.states), cfg.tolerance, theta)
        (g,) = ad.grad(loss_pi, [theta])
        self.opt["policy"].step(self.policy.net.params, g)
        temperature_step(parts["log_probs"], self.temperature)

        losses = (loss_pi.item(), 0.5 * (l1.item() + l2.item()), 0.5 * (lc1.item() + lc2.item()))
        if not all(np.isfinite(losses)):
            raise NonFiniteError("non-finite loss", {"policy": losses[0], "q": losses[1], "qc": losses[2],
                                                     "alpha": alpha, "grad_step": self.grad_step})
        self._acc["policy"].append(losses[0])
        self._acc["q"].append(losses[1])
        self._acc["qc"].append(losses[2])

        self.grad_step += 1
        if self.grad_step % cfg.m_lambda == 0 and self.strategy_name != "sac":
            info = self.safety.dual_update()
            if "loss" in info:
                self._acc["multiplier"].append(info["loss"])
            self._event("dual_update", **info)
            if info.get("rho", 0.0) > info.get("rho_before", np.inf):
                self._event("rho_bump", rho_before=info["rho_before"], rho=info["rho"])

        for target, online in ens.target_pairs():
            soft_update(target.params, online.params, cfg.tau)

    def _act(self, state: np.ndarray) -> np.ndarray:
        spec = self.env.spec
        if self.env_step < self.config.warmup_steps:
            return self.rng_act.uniform(spec.action_low, spec.action_high)
        a, _ = self.policy.sample(state[None], self.rng_act)
        return a[0]

    def _evaluate_and_log(self) -> EvalRecord:
        rec = evaluate(self.env, self.policy, self.config.eval_episodes, self.eval_seed)
        probe = self.buffer.sample_states(self.config.batch_size, self.rng_log)
        mean = lambda xs: float(np.mean(xs)) if xs else float("nan")  # noqa: E731
        row = MetricRow(
            env_step=self.env_step,
            episode_return=rec.return_mean,
            episode_cost=rec.cost_mean,
            violation_fraction=rec.violation_mean,
            rho=self.safety.rho,
            mean_lambda=self.safety.mean_lambda(probe),
            loss_policy=mean(self._acc["policy"]),
            loss_q=mean(self._acc["q"]),
            loss_qc=mean(self._acc["qc"]),
            loss_multiplier=mean(self._acc["multiplier"]),
            wall_time=self._elapsed if self.config.record_wall_time else None,
        )
        self.rows.append(row)
        self._acc = self._fresh_acc()
        self._event("eval", wall_time=self._elapsed, **rec.to_dict())
        return rec

    def networks(self) -> dict:
        nets = {"policy": self.policy.net, **self.critics.online(),
                "q1_target": self.critics.q1_target, "q2_target": self.critics.q2_target,
                "qc1_target": self.critics.qc1_target, "qc2_target": self.critics.qc2_target}
        nets.update(self.safety.networks())
        return nets

    def checkpoint_extra(self) -> dict:
        return {"agent": self.strategy_name, "env": getattr(self.env, "name", type(self.env).__name__),
                "env_step": self.env_step, "log_alpha": float(self.temperature.log_alpha[0]),
                "config": self.config.to_dict(), **self.safety.extra()}

    def save_checkpoint(self, path: str | Path) -> Path:
        save_checkpoint(path, self.networks(), self.checkpoint_extra())
        return Path(path)

    def save_state(self, path: str | Path) -> None:
        """Pickle the full trainer (networks, optimizers, buffer, random streams)."""
        tmp = Path(str(path) + ".tmp")
        with open(tmp, "wb") as fh:
            pickle.dump(self, fh, protocol=pickle.HIGHEST_PROTOCOL)
        tmp.replace(path)

    @staticmethod
    def load_state(path: str | Path) -> "Trainer":
        with open(path, "rb") as fh:
            trainer = pickle.load(fh)
        if not isinstance(trainer, Trainer):
            raise ConfigurationError(f"{path} does not hold a trainer state")
        return trainer

    def _dump_abort(self, err: NonFiniteError) -> None:
        self._event("abort", message=str(err), diagnostics=err.diagnostics)
        if self.out_dir is not None:
            self.save_checkpoint(self.out_dir / "abort.ckpt")
            write_metrics(self.out_dir / "metrics.csv", self.rows)

    def train(self, steps: int | None = None, resume_path: str | Path | None = None) -> TrainResult:
        """Run until ``steps`` (default ``config.total_steps``) environment steps."""
        cfg = self.config
        total = cfg.total_steps if steps is None else int(steps)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        last_eval = None
        t0 = time.perf_counter() - self._elapsed
        previous_precision = ad.get_mlp_precision()
        ad.set_mlp_precision(cfg.precision)
        try:
            while self.env_step < total:
                state = self._state
                action = self._act(state)
                res = self.env.step(state, action, self._t)
                self.buffer.add(state, self.env.clip_action(action),
                                res.reward, res.cost, res.next_state, float(res.done),
                                float(self.env.cost(state[None])[0]))
                self.env_step += 1
                if res.done:
                    self._state, self._t = self.env.reset(self.rng_env), 0
                else:
                    self._state, self._t = res.next_state, self._t + 1
                if self.env_step >= cfg.warmup_steps and len(self.buffer) >= cfg.batch_size:
                    for _ in range(cfg.updates_per_step):
                        self.update()
                if self.env_step % cfg.eval_interval == 0 or self.env_step == total:
                    self._elapsed = time.perf_counter() - t0
                    last_eval = self._evaluate_and_log()
                    if self.out_dir is not None:
                        write_metrics(self.out_dir / "metrics.csv", self.rows)
                        if resume_path is not None:
                            self.save_state(resume_path)
        except NonFiniteError as err:
            self._dump_abort(err)
            raise
        finally:
            ad.set_mlp_precision(previous_precision)
        ckpt = None
        if self.out_dir is not None:
            ckpt = self.save_checkpoint(self.out_dir / "final.ckpt")
        pen = self.safety.penalty_state
        return TrainResult(self.rows, self.events, ckpt, pen.history if pen is not None else (),
                           last_eval, self.safety.extra())


def train_agent(env: Env, config: AgentConfig, agent: str, rng_seed: int | None = None,
                out_dir: str | Path | None = None) -> TrainResult:
    if rng_seed is not None:
        config = config.replace(seed=int(rng_seed))
    return Trainer(env, config, agent, out_dir).train()


def train_sac(env, config, rng_seed=None, out_dir=None) -> TrainResult:
    return train_agent(env, config, "sac", rng_seed, out_dir)


def train_sac_alam(env, config, rng_seed=None, out_dir=None) -> TrainResult:
    return train_agent(env, config, "sac-alam", rng_seed, out_dir)


def train_sac_lagnet(env, config, rng_seed=None, out_dir=None) -> TrainResult:
    return train_agent(env, config, "sac-lagnet", rng_seed, out_dir)


def train_sac_lag(env, config, rng_seed=None, out_dir=None) -> TrainResult:
    return train_agent(env, config, "sac-lag", rng_seed, out_dir)


def train_sac_alam_ga(env, config, rng_seed=None, out_dir=None) -> TrainResult:
    return train_agent(env, config, "sac-alam-ga", rng_seed, out_dir)


def config_json(config: AgentConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True, indent=2)
