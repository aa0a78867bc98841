"""Clipped double reward/cost critics and the Monte Carlo feasibility estimate.

Reward targets take the *min* over the two target critics, cost targets the
*max*: both choices lean toward the pessimistic side of their quantity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import autodiff as ad
from .errors import UsageError
from .nn import Architecture, NetworkHandle


class Policy(Protocol):
    def sample(self, states: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        ...


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray  # c(x') for the reached state
    next_states: np.ndarray
    dones: np.ndarray
    state_costs: np.ndarray  # c(x) for the state the action was taken in

    def __len__(self) -> int:
        return len(self.states)


@dataclass
class CriticEnsemble:
    q1: NetworkHandle
    q2: NetworkHandle
    qc1: NetworkHandle
    qc2: NetworkHandle
    q1_target: NetworkHandle
    q2_target: NetworkHandle
    qc1_target: NetworkHandle
    qc2_target: NetworkHandle

    @classmethod
    def build(cls, state_dim: int, action_dim: int, hidden=(256, 256),
              rng: np.random.Generator | None = None) -> "CriticEnsemble":
        rng = rng if rng is not None else np.random.default_rng(0)
        reward_arch = Architecture(state_dim + action_dim, 1, hidden, "identity")
        cost_arch = Architecture(state_dim + action_dim, 1, hidden, "nonneg")
        q1, q2 = NetworkHandle(reward_arch, rng=rng), NetworkHandle(reward_arch, rng=rng)
        qc1, qc2 = NetworkHandle(cost_arch, rng=rng), NetworkHandle(cost_arch, rng=rng)
        return cls(q1, q2, qc1, qc2, q1.clone(), q2.clone(), qc1.clone(), qc2.clone())

    def online(self) -> dict[str, NetworkHandle]:
        return {"q1": self.q1, "q2": self.q2, "qc1": self.qc1, "qc2": self.qc2}

    def target_pairs(self):
        return [(self.q1_target, self.q1), (self.q2_target, self.q2),
                (self.qc1_target, self.qc1), (self.qc2_target, self.qc2)]


def _sa(states, actions) -> np.ndarray:
    return np.concatenate([states, actions], axis=1)


def _check_batch(batch: Batch) -> None:
    if len(batch) == 0:
        raise UsageError("empty batch")


def reward_backup(rewards, q1_next, q2_next, logp_next, alpha: float, gamma: float) -> np.ndarray:
    return rewards + gamma * (np.minimum(q1_next, q2_next) - alpha * logp_next)


def cost_backup(state_costs, qc1_next, qc2_next, gamma: float) -> np.ndarray:
    return state_costs + gamma * np.maximum(qc1_next, qc2_next)


def reward_target(batch: Batch, ensemble: CriticEnsemble, policy: Policy, alpha: float,
                  gamma: float, rng: np.random.Generator) -> np.ndarray:
    """``y = r + gamma * (min_i Qbar_i(x', a') - alpha * log pi(a'|x'))`` with a fresh ``a'``."""
    a_next, logp_next = policy.sample(batch.next_states, rng)
    sa = _sa(batch.next_states, a_next)
    return reward_backup(batch.rewards, ensemble.q1_target(sa)[:, 0], ensemble.q2_target(sa)[:, 0],
                         logp_next, alpha, gamma)


def cost_target(batch: Batch, ensemble: CriticEnsemble, policy: Policy, gamma: float,
                rng: np.random.Generator) -> np.ndarray:
    """``y = c(x) + gamma * max_i Qbar^c_i(x', a')``."""
    a_next, _ = policy.sample(batch.next_states, rng)
    sa = _sa(batch.next_states, a_next)
    return cost_backup(batch.state_costs, ensemble.qc1_target(sa)[:, 0], ensemble.qc2_target(sa)[:, 0], gamma)


def _pair_mse(net1: NetworkHandle, net2: NetworkHandle, sa: np.ndarray, y: np.ndarray,
              p1: ad.Tensor | None, p2: ad.Tensor | None) -> tuple[ad.Tensor, ad.Tensor]:
    yt = ad.Tensor(y[:, None])
    l1 = ad.mean(ad.square(net1.apply(sa, p1) - yt))
    l2 = ad.mean(ad.square(net2.apply(sa, p2) - yt))
    return l1, l2


def reward_critic_loss(batch: Batch, ensemble: CriticEnsemble, policy: Policy, alpha: float,
                       gamma: float, rng: np.random.Generator, params=(None, None)):
    """Mean squared TD error of each reward critic; targets carry no gradient.

    ``params`` optionally supplies differentiable leaves for ``(q1, q2)``.
    """
    _check_batch(batch)
    y = reward_target(batch, ensemble, policy, alpha, gamma, rng)
    return _pair_mse(ensemble.q1, ensemble.q2, _sa(batch.states, batch.actions), y, *params)


def cost_critic_loss(batch: Batch, ensemble: CriticEnsemble, policy: Policy, gamma: float,
                     rng: np.random.Generator, params=(None, None)):
    _check_batch(batch)
    y = cost_target(batch, ensemble, policy, gamma, rng)
    return _pair_mse(ensemble.qc1, ensemble.qc2, _sa(batch.states, batch.actions), y, *params)


def pessimistic_cost(ensemble: CriticEnsemble, states, actions) -> ad.Tensor:
    """``max_i Q^c_i(x, a)`` on online critics, differentiable in the inputs only."""
    sa = ad.concat([ad.as_tensor(states), ad.as_tensor(actions)], axis=1)
    return ad.maximum(ensemble.qc1.apply(sa), ensemble.qc2.apply(sa))[:, 0]


def feasibility_from_samples(ensemble: CriticEnsemble, states: np.ndarray, actions, k: int) -> ad.Tensor:
    """Average the pessimistic cost-Q over ``k`` action samples per state.

    ``actions`` holds ``k`` stacked blocks of ``len(states)`` rows each and may
    be a graph tensor so that gradients reach the policy.
    """
    n = len(states)
    tiled = np.tile(states, (k, 1))
    qc = pessimistic_cost(ensemble, tiled, actions)
    return ad.mean(ad.reshape(qc, (k, n)), axis=0)


def feasibility_estimate(states: np.ndarray, policy: Policy, ensemble: CriticEnsemble, k: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Monte Carlo ``F_hat(x) = mean_k max_i Q^c_i(x, a_k)``, ``a_k ~ pi(.|x)``."""
    if k < 1:
        raise UsageError("need at least one Monte Carlo sample")
    states = np.atleast_2d(states)
    actions, _ = policy.sample(np.tile(states, (k, 1)), rng)
    return feasibility_from_samples(ensemble, states, actions, k).data
