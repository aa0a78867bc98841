"""State-dependent multipliers, the ALaM dual update and the penalty schedule.

The closed forms here work on plain arrays so the exact tabular solver
and the network-based agents share them verbatim:

* slack ``p = max(-lam/rho - F, 0)`` minimizes ``lam (F + p) + rho/2 (F + p)^2``
  over ``p >= 0``;
* dual target ``max(lam + rho F, 0)`` equals ``lam + rho (F + p)``;
* the augmented per-state term is ``lam m + rho/2 m^2`` with
  ``m = max(-lam/rho, F)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, UsageError
from .nn import Architecture, NetworkHandle, inverse_softplus

INITIAL_MULTIPLIER = 0.05


def slack(lam, F, rho):
    return np.maximum(-np.asarray(lam) / rho - F, 0.0)


def dual_target(lam, F, rho):
    return np.maximum(np.asarray(lam) + rho * np.asarray(F), 0.0)


def effective_residual(lam, F, rho):
    """``max(-lam/rho, F)``, i.e. ``F + slack``."""
    return np.maximum(-np.asarray(lam) / rho, F)


def augmented_terms(lam, F, rho: float) -> ad.Tensor:
    """Per-state ``lam m + rho/2 m^2``; ``lam`` is held constant, ``F`` may carry a graph."""
    lam = ad.stop_gradient(lam)
    m = ad.maximum(-lam / rho, F)
    return lam * m + (0.5 * rho) * ad.square(m)


def lagrangian_terms(lam, F) -> ad.Tensor:
    """Per-state ``lam * F`` with ``lam`` held constant (plain Lagrangian)."""
    return ad.stop_gradient(lam) * F


def violation_from_values(lam, F, rho: float) -> float:
    """Root mean square of ``max(F, -lam/rho)``."""
    m = effective_residual(lam, F, rho)
    if np.size(m) == 0:
        raise UsageError("violation metric needs a nonempty batch")
    return float(np.sqrt(np.mean(np.square(m))))


class MultiplierNet:
    """``lambda_w: state -> [0, inf)`` via a softplus-output MLP."""

    def __init__(self, state_dim: int, hidden=(256, 256), rng: np.random.Generator | None = None,
                 init_value: float = INITIAL_MULTIPLIER, net: NetworkHandle | None = None) -> None:
        if net is None:
            arch = Architecture(state_dim, 1, hidden, "nonneg")
            net = NetworkHandle(arch, rng=rng, final_scale=1e-2,
                                final_bias=inverse_softplus(init_value))
        if net.arch.output != "nonneg" or net.arch.output_dim != 1:
            raise ConfigurationError("multiplier network needs a single nonneg output")
        self.net = net

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    def __call__(self, states: np.ndarray) -> np.ndarray:
        return self.net.forward(np.atleast_2d(states))[:, 0]

    def apply(self, states, params: ad.Tensor | None = None) -> ad.Tensor:
        return self.net.apply(np.atleast_2d(states), params)[:, 0]

    def snapshot(self) -> "MultiplierNet":
        return MultiplierNet(self.net.arch.input_dim, net=self.net.clone())


class LookupMultiplier:
    """One free multiplier per integer state id; used for exact tabular checks."""

    def __init__(self, init) -> None:
        self.params = np.array(init, dtype=np.float64)

    def _idx(self, states) -> np.ndarray:
        return np.asarray(states).reshape(-1).astype(int)

    def __call__(self, states) -> np.ndarray:
        return self.params[self._idx(states)]

    def apply(self, states, params: ad.Tensor | None = None) -> ad.Tensor:
        p = params if params is not None else ad.Tensor(self.params)
        return p[self._idx(states)]

    def snapshot(self) -> "LookupMultiplier":
        return LookupMultiplier(self.params)


FeasibilityFn = Callable[[np.ndarray], np.ndarray]


def _draw(batch_states) -> np.ndarray:
    return batch_states() if callable(batch_states) else batch_states


def regression_loss(states, multiplier, targets: np.ndarray, params: ad.Tensor | None = None) -> ad.Tensor:
    """``mean((lambda_w(x) - sg(target))^2)``."""
    return ad.mean(ad.square(multiplier.apply(states, params) - ad.stop_gradient(targets)))


def multiplier_regression_step(batch_states, multiplier, feasibility_fn: FeasibilityFn, rho: float,
                               n_steps: int, optimizer, target_mode: str = "live") -> list[float]:
    """Regress ``multiplier`` toward the dual target ``max(lam + rho F, 0)``.

    ``batch_states`` is an array or a zero-argument callable returning a fresh
    batch for every step; ``feasibility_fn`` returns the (tolerance-shifted)
    feasibility estimate for a batch, freshly evaluated each step.

    ``target_mode="live"`` (default) puts the network being trained inside
    the stop-gradient target, as the loss reads literally. ``"snapshot"``
    freezes ``lam`` at its value when the cycle started, so each cycle is one
    approximate projected dual step.
    """
    if target_mode not in ("snapshot", "live"):
        raise ConfigurationError(f"unknown target mode {target_mode!r}")
    reference = multiplier.snapshot() if target_mode == "snapshot" else multiplier
    losses = []
    for _ in range(n_steps):
        states = _draw(batch_states)
        targets = dual_target(reference(states), feasibility_fn(states), rho)
        leaf = ad.param(multiplier.params)
        loss = regression_loss(states, multiplier, targets, leaf)
        (g,) = ad.grad(loss, [leaf])
        optimizer.step(multiplier.params, g)
        losses.append(loss.item())
    return losses


def ascent_loss(states, multiplier, weights: np.ndarray, params: ad.Tensor | None = None) -> ad.Tensor:
    """``-mean(lambda_w(x) * sg(weight(x)))``: descending it ascends the weighted multiplier."""
    return -ad.mean(multiplier.apply(states, params) * ad.stop_gradient(weights))


def multiplier_ascent_step(batch_states, multiplier, weight_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
                           n_steps: int, optimizer) -> list[float]:
    """Dual gradient ascent on multiplier parameters.

    ``weight_fn(states, lam)`` gives the per-state ascent weight: the
    violation ``F - d`` for a plain multiplier network, or ``max(-lam/rho, F)``
    (the exact derivative of the augmented Lagrangian in ``lam``).
    """
    losses = []
    for _ in range(n_steps):
        states = _draw(batch_states)
        weights = weight_fn(states, multiplier(states))
        leaf = ad.param(multiplier.params)
        loss = ascent_loss(states, multiplier, weights, leaf)
        (g,) = ad.grad(loss, [leaf])
        optimizer.step(multiplier.params, g)
        losses.append(loss.item())
    return losses


def violation_metric(batch_states: np.ndarray, multiplier, feasibility_fn: FeasibilityFn, rho: float) -> float:
    if len(batch_states) == 0:
        raise UsageError("violation metric needs a nonempty batch")
    return violation_from_values(multiplier(batch_states), feasibility_fn(batch_states), rho)


@dataclass(frozen=True)
class PenaltyState:
    rho: float = 1.0
    sigma: float = 1.01
    rho_max: float = 5.0
    rho0: float = 1.0
    history: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.sigma <= 1.0:
            raise ConfigurationError("sigma must exceed 1")
        if not 0.0 < self.rho0 <= self.rho <= self.rho_max:
            raise ConfigurationError("need 0 < rho0 <= rho <= rho_max")

    @classmethod
    def initial(cls, rho0: float = 1.0, sigma: float = 1.01, rho_max: float = 5.0) -> "PenaltyState":
        return cls(rho0, sigma, rho_max, rho0, (rho0,))


def penalty_update(pen: PenaltyState, v: float) -> PenaltyState:
    """Grow ``rho`` by ``sigma`` (capped at ``rho_max``) when ``v > 1/rho``."""
    rho = min(pen.sigma * pen.rho, pen.rho_max) if v > 1.0 / pen.rho else pen.rho
    return dataclasses.replace(pen, rho=rho, history=pen.history + (rho,))
