"""Squashed-Gaussian policy, entropy temperature and the actor losses."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .critics import CriticEnsemble, feasibility_from_samples
from .nn import Architecture, NetworkHandle
from .optim import Adam

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
_LOG2 = np.log(2.0)


class GaussianPolicy:
    """``a = center + half_range * tanh(mean + std * eps)``."""

    def __init__(self, state_dim: int, action_low, action_high, hidden=(256, 256),
                 rng: np.random.Generator | None = None, net: NetworkHandle | None = None) -> None:
        self.low = np.asarray(action_low, dtype=np.float64)
        self.high = np.asarray(action_high, dtype=np.float64)
        self.action_dim = self.low.size
        self.center = 0.5 * (self.high + self.low)
        self.half_range = 0.5 * (self.high - self.low)
        self._log_scale = float(np.sum(np.log(self.half_range)))
        if net is None:
            arch = Architecture(state_dim, 2 * self.action_dim, hidden, "squashed-gaussian-head")
            net = NetworkHandle(arch, rng=rng)
        self.net = net

    def head(self, states, params: ad.Tensor | None = None) -> tuple[ad.Tensor, ad.Tensor]:
        out = self.net.apply(states, params)
        d = self.action_dim
        return out[:, :d], ad.clip(out[:, d:], LOG_STD_MIN, LOG_STD_MAX)

    def rsample(self, states, eps: np.ndarray, params: ad.Tensor | None = None, repeats: int = 1):
        """Reparameterized ``(action, log_prob)`` as graph tensors.

        With ``repeats > 1`` the head is evaluated once per state and reused
        for ``repeats`` stacked noise blocks (``eps`` has ``repeats * n`` rows).
        """
        mean, log_std = self.head(states, params)
        if repeats > 1:
            mean, log_std = ad.tile_rows(mean, repeats), ad.tile_rows(log_std, repeats)
        u = mean + ad.exp(log_std) * eps
        action = self.center + self.half_range * ad.tanh(u)
        # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
        squash = 2.0 * (_LOG2 - u - ad.softplus(-2.0 * u))
        per_dim = -0.5 * eps * eps - log_std - _HALF_LOG_2PI - squash
        logp = ad.sum_(per_dim, axis=1) - self._log_scale
        return action, logp

    def sample(self, states: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        states = np.atleast_2d(states)
        eps = rng.standard_normal((len(states), self.action_dim))
        a, logp = self.rsample(states, eps)
        return a.data, logp.data

    def log_prob(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Density of given in-bounds actions (inverse of the squash)."""
        mean, log_std = self.head(np.atleast_2d(states))
        t = np.clip((actions - self.center) / self.half_range, -1 + 1e-12, 1 - 1e-12)
        u = np.arctanh(t)
        eps = (u - mean.data) / np.exp(log_std.data)
        squash = np.log1p(-t * t)
        per_dim = -0.5 * eps * eps - log_std.data - _HALF_LOG_2PI - squash
        return per_dim.sum(axis=1) - self._log_scale

    def deterministic(self, states: np.ndarray) -> np.ndarray:
        mean, _ = self.head(np.atleast_2d(states))
        return self.center + self.half_range * np.tanh(mean.data)

    __call__ = deterministic


class Temperature:
    """Entropy coefficient ``alpha = exp(log_alpha)`` tuned toward a target entropy."""

    def __init__(self, target_entropy: float, init_alpha: float = 1.0, lr: float = 1e-4) -> None:
        self.log_alpha = np.array([np.log(init_alpha)])
        self.target_entropy = float(target_entropy)
        self.optimizer = Adam(1, lr=lr, name="temperature")

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))


def temperature_loss(log_probs: np.ndarray, temperature: Temperature,
                     log_alpha: ad.Tensor | None = None) -> ad.Tensor:
    """``mean(alpha * (-log pi - H))``; ``log_probs`` are constants here."""
    la = log_alpha if log_alpha is not None else ad.Tensor(temperature.log_alpha)
    slack = ad.Tensor(-np.asarray(log_probs) - temperature.target_entropy)
    return ad.mean(ad.exp(la) * slack)


def temperature_step(log_probs: np.ndarray, temperature: Temperature) -> float:
    leaf = ad.param(temperature.log_alpha)
    loss = temperature_loss(log_probs, temperature, leaf)
    (g,) = ad.grad(loss, [leaf])
    temperature.optimizer.step(temperature.log_alpha, g)
    return loss.item()


PenaltyFn = Callable[[ad.Tensor], ad.Tensor]


def policy_loss(states: np.ndarray, policy: GaussianPolicy, ensemble: CriticEnsemble, alpha: float,
                k: int, rng: np.random.Generator, penalty: PenaltyFn | None = None,
                tolerance: float = 0.0, params: ad.Tensor | None = None):
    """SAC actor loss plus an optional per-state safety penalty.

    ``penalty`` receives the tolerance-shifted feasibility estimate
    ``F_hat(x) - tolerance`` as a graph tensor (gradient reaches the policy
    through the reparameterized samples) and returns per-state penalty terms;
    their batch mean is added to the loss.

    Returns ``(loss, parts)`` where ``parts`` holds the SAC term, the penalty
    mean, the batch log-probs and the shifted feasibility values.
    """
    n = len(states)
    n_samples = 1 + (k if penalty is not None else 0)
    eps = rng.standard_normal((n_samples * n, policy.action_dim))
    actions, logp = policy.rsample(states, eps, params, repeats=n_samples)

    a0 = actions[:n]
    sa = ad.concat([ad.Tensor(states), a0], axis=1)
    q = ad.minimum(ensemble.q1.apply(sa), ensemble.q2.apply(sa))[:, 0]
    sac_term = ad.mean(alpha * logp[:n] - q)
    parts = {"sac": sac_term.item(), "log_probs": logp.data[:n], "penalty": 0.0, "feasibility": None}
    if penalty is None:
        return sac_term, parts

    f_hat = feasibility_from_samples(ensemble, states, actions[n:], k) - tolerance
    pen = ad.mean(penalty(f_hat))
    parts["penalty"] = pen.item()
    parts["feasibility"] = f_hat.data
    return sac_term + pen, parts
