"""Deterministic constrained control tasks.

Each environment exposes dynamics ``f``, reward ``r``, constraint ``h`` and the
indicator cost ``c(x) = 1[h(x) > 0]``. The batch methods work on ``(n, dim)``
arrays so that many episodes can be simulated in lock-step; the single-state
methods are thin wrappers.

Reward, cost and ``h`` are all reported for the state *reached* by a step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, NonFiniteError


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    horizon: int
    dt: float

    def __post_init__(self) -> None:
        if not (np.all(np.isfinite(self.action_low)) and np.all(np.isfinite(self.action_high))):
            raise ConfigurationError("action bounds must be finite")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    reward: float
    cost: float
    h_value: float
    done: bool


@dataclass
class RolloutStats:
    returns: np.ndarray
    total_cost: np.ndarray
    max_h: np.ndarray
    violation_fraction: np.ndarray

    def summary(self) -> dict[str, float]:
        return {
            "return_mean": float(self.returns.mean()),
            "return_std": float(self.returns.std()),
            "cost_mean": float(self.total_cost.mean()),
            "cost_std": float(self.total_cost.std()),
            "violation_fraction": float(self.violation_fraction.mean()),
            "max_h": float(self.max_h.max()),
        }


class Env:
    name = "env"
    spec: EnvSpec

    # subclasses implement the batch versions
    def sample_initial(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def dynamics(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def reward(self, states: np.ndarray, actions: np.ndarray, next_states: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def h(self, states: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def cost(self, states: np.ndarray) -> np.ndarray:
        return (self.h(states) > 0).astype(np.float64)

    def clip_action(self, actions: np.ndarray) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.float64)
        if not np.all(np.isfinite(actions)):
            raise NonFiniteError("non-finite action", {"action": actions.tolist()})
        return np.clip(actions, self.spec.action_low, self.spec.action_high)

    def step_batch(self, states: np.ndarray, actions: np.ndarray):
        """Returns ``(next_states, reward, cost, h)`` for a batch."""
        actions = self.clip_action(actions)
        nxt = self.dynamics(states, actions)
        hv = self.h(nxt)
        return nxt, self.reward(states, actions, nxt), (hv > 0).astype(np.float64), hv

    def reset(self, rng_seed: int | np.random.Generator) -> np.ndarray:
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        return self.sample_initial(rng, 1)[0]

    def step(self, state: np.ndarray, action: np.ndarray, t: int = 0) -> StepResult:
        nxt, r, c, hv = self.step_batch(np.asarray(state, dtype=np.float64)[None], np.atleast_1d(action)[None])
        return StepResult(nxt[0], float(r[0]), float(c[0]), float(hv[0]), t + 1 >= self.spec.horizon)


class DoubleIntegrator(Env):
    """1-D point on a line; must keep ``|p| <= p_max`` while regulating to 0."""

    name = "double-integrator"

    def __init__(self, dt: float = 0.05, p_max: float = 1.0, a_max: float = 2.0,
                 horizon: int = 200, init_range: float = 0.5, action_weight: float = 0.1) -> None:
        self.p_max = p_max
        self.init_range = init_range
        self.action_weight = action_weight
        self.spec = EnvSpec(2, 1, np.array([-a_max]), np.array([a_max]), horizon, dt)

    def sample_initial(self, rng, n):
        s = np.zeros((n, 2))
        s[:, 0] = rng.uniform(-self.init_range, self.init_range, size=n)
        return s

    def dynamics(self, states, actions):
        dt = self.spec.dt
        p, v = states[:, 0], states[:, 1]
        return np.stack([p + dt * v, v + dt * actions[:, 0]], axis=1)

    def reward(self, states, actions, next_states):
        return -next_states[:, 0] ** 2 - self.action_weight * actions[:, 0] ** 2

    def h(self, states):
        return np.abs(states[:, 0]) - self.p_max


@dataclass(frozen=True)
class Hazard:
    x: float
    y: float
    radius: float


DEFAULT_HAZARDS = (Hazard(0.0, 0.0, 0.5), Hazard(0.3, 1.1, 0.3), Hazard(0.3, -1.1, 0.3))


class _PointMass(Env):
    """Planar point mass with linear drag: ``v' = v + dt (gain a - drag v)``.

    The arena is the square ``|x|, |y| <= arena``. Walls are inelastic: a
    position is clipped to the square and the velocity component pushing
    outward is zeroed. Without walls a policy can drift arbitrarily far and the
    critics then bootstrap from their own extrapolation.
    """

    def __init__(self, dt: float, horizon: int, gain: float, drag: float, arena: float) -> None:
        if not arena > 0:
            raise ConfigurationError("arena half-width must be positive")
        self.gain = gain
        self.drag = drag
        self.arena = float(arena)
        self.spec = EnvSpec(4, 2, -np.ones(2), np.ones(2), horizon, dt)

    def dynamics(self, states, actions):
        dt = self.spec.dt
        pos, vel = states[:, :2], states[:, 2:]
        pos = pos + dt * vel
        vel = vel + dt * (self.gain * actions - self.drag * vel)
        L = self.arena
        vel = np.where((pos >= L) & (vel > 0) | (pos <= -L) & (vel < 0), 0.0, vel)
        return np.concatenate([np.clip(pos, -L, L), vel], axis=1)


class PointGoalHazards(_PointMass):
    """Reach a fixed goal; three circular hazards sit across the direct route.

    Reward is the decrease in distance to the goal. ``h`` is the largest
    penetration depth over hazards, ``max_i (r_i - |p - c_i|)``.
    """

    name = "point-goal"

    def __init__(self, hazards: Sequence[Hazard] = DEFAULT_HAZARDS, goal=(1.5, 0.0),
                 start=(-1.5, 0.0), start_noise: float = 0.1, dt: float = 0.05,
                 horizon: int = 400, gain: float = 4.0, drag: float = 2.0, arena: float = 3.0) -> None:
        super().__init__(dt, horizon, gain, drag, arena)
        self.hazards = tuple(h if isinstance(h, Hazard) else Hazard(*h) for h in hazards)
        if not self.hazards:
            raise ConfigurationError("at least one hazard is required")
        self.goal = np.asarray(goal, dtype=np.float64)
        self.start = np.asarray(start, dtype=np.float64)
        self.start_noise = start_noise
        if np.any(np.abs(self.goal) > self.arena) or np.any(np.abs(self.start) + start_noise > self.arena):
            raise ConfigurationError("goal and start region must lie inside the arena")
        self._centers = np.array([[hz.x, hz.y] for hz in self.hazards])
        self._radii = np.array([hz.radius for hz in self.hazards])
        # the whole start box must be safe
        nearest = np.min(np.linalg.norm(self._centers - self.start, axis=1) - self._radii)
        if nearest <= np.sqrt(2) * start_noise:
            raise ConfigurationError("start region intersects a hazard")

    def sample_initial(self, rng, n):
        s = np.zeros((n, 4))
        s[:, :2] = self.start + rng.uniform(-self.start_noise, self.start_noise, size=(n, 2))
        return s

    def reward(self, states, actions, next_states):
        d0 = np.linalg.norm(states[:, :2] - self.goal, axis=1)
        d1 = np.linalg.norm(next_states[:, :2] - self.goal, axis=1)
        return d0 - d1

    def h(self, states):
        pos = states[:, None, :2]
        dist = np.linalg.norm(pos - self._centers[None], axis=2)
        return np.max(self._radii[None] - dist, axis=1)

    def hazard_distance_ratio(self, points: np.ndarray) -> np.ndarray:
        """Per point, ``min_i |p - c_i| / r_i``; below 1 means inside a hazard."""
        dist = np.linalg.norm(points[:, None, :] - self._centers[None], axis=2)
        return np.min(dist / self._radii[None], axis=1)


class PointCircle(_PointMass):
    """Run counter-clockwise around a circle of radius ``R`` without crossing ``|x| = x_lim``."""

    name = "point-circle"

    def __init__(self, radius: float = 1.0, x_lim: float = 0.7, start_noise: float = 0.1,
                 dt: float = 0.05, horizon: int = 300, gain: float = 4.0, drag: float = 2.0,
                 arena: float = 3.0) -> None:
        super().__init__(dt, horizon, gain, drag, arena)
        if start_noise >= x_lim:
            raise ConfigurationError("start region must lie inside the boundaries")
        self.radius = radius
        self.x_lim = x_lim
        self.start_noise = start_noise

    def sample_initial(self, rng, n):
        s = np.zeros((n, 4))
        s[:, :2] = rng.uniform(-self.start_noise, self.start_noise, size=(n, 2))
        return s

    def reward(self, states, actions, next_states):
        x, y = next_states[:, 0], next_states[:, 1]
        vx, vy = next_states[:, 2], next_states[:, 3]
        r = np.sqrt(x * x + y * y)
        return (-vx * y + vy * x) / (1.0 + np.abs(r - self.radius))

    def h(self, states):
        return np.abs(states[:, 0]) - self.x_lim


ENVIRONMENTS: dict[str, Callable[..., Env]] = {
    DoubleIntegrator.name: DoubleIntegrator,
    PointGoalHazards.name: PointGoalHazards,
    PointCircle.name: PointCircle,
}


def make_env(name: str, **kwargs) -> Env:
    try:
        factory = ENVIRONMENTS[name]
    except KeyError:
        raise ConfigurationError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")
    if name == PointGoalHazards.name and "hazards" in kwargs:
        kwargs["hazards"] = [Hazard(*h) if not isinstance(h, Hazard) else h for h in kwargs["hazards"]]
    return factory(**kwargs)


def rollout(env: Env, policy: Callable[[np.ndarray], np.ndarray], episodes: int,
            rng_seed: int | np.random.Generator, initial_states: np.ndarray | None = None) -> RolloutStats:
    """Simulate ``episodes`` full-horizon episodes in lock-step.

    ``policy`` maps a ``(n, state_dim)`` batch to ``(n, action_dim)`` actions.
    Sums are undiscounted.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    states = env.sample_initial(rng, episodes) if initial_states is None else np.array(initial_states, dtype=np.float64)
    horizon = env.spec.horizon
    ret = np.zeros(len(states))
    cost = np.zeros(len(states))
    max_h = np.full(len(states), -np.inf)
    for _ in range(horizon):
        actions = np.asarray(policy(states), dtype=np.float64).reshape(len(states), env.spec.action_dim)
        states, r, c, hv = env.step_batch(states, actions)
        ret += r
        cost += c
        np.maximum(max_h, hv, out=max_h)
    return RolloutStats(ret, cost, max_h, cost / horizon)
