"""Numerical self-checks shared by the ``selftest`` command and the test suite.

Each check returns a small result record; none of them raise on failure so
that callers can report every outcome.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import tabular
from .actor import GaussianPolicy, Temperature, policy_loss, temperature_loss
from .critics import Batch, CriticEnsemble, cost_backup, cost_critic_loss, reward_critic_loss
from .multiplier import MultiplierNet, augmented_terms, dual_target, regression_loss, slack


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.threshold)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: {self.value:.3e} <= {self.threshold:.1e}{extra}"


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + h
        fp = f(x)
        x.flat[i] = old - h
        fm = f(x)
        x.flat[i] = old
        g.flat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradient_error(loss_of: Callable[[ad.Tensor], ad.Tensor], x0: np.ndarray, h: float = 1e-5) -> float:
    """Relative distance between the tape gradient and central differences."""
    leaf = ad.param(x0)
    (g,) = ad.grad(loss_of(leaf), [leaf])
    fd = central_difference(lambda x: loss_of(ad.Tensor(x)).item(), x0, h)
    return relative_error(g, fd)


# -- small random instantiations of every loss ---------------------------------


def _setup(seed: int, state_dim: int = 3, action_dim: int = 2, hidden=(8, 8), n: int = 12):
    rng = np.random.default_rng(seed)
    policy = GaussianPolicy(state_dim, -np.ones(action_dim), np.ones(action_dim), hidden, rng)
    ens = CriticEnsemble.build(state_dim, action_dim, hidden, rng)
    for net in [*ens.online().values(), ens.q1_target, ens.q2_target, ens.qc1_target, ens.qc2_target]:
        net.params += 0.3 * rng.standard_normal(net.params.size)
    batch = Batch(
        states=rng.standard_normal((n, state_dim)),
        actions=rng.uniform(-1, 1, (n, action_dim)),
        rewards=rng.standard_normal(n),
        costs=rng.integers(0, 2, n).astype(float),
        next_states=rng.standard_normal((n, state_dim)),
        dones=np.zeros(n),
        state_costs=rng.integers(0, 2, n).astype(float),
    )
    return rng, policy, ens, batch


def gradient_errors(seed: int) -> dict[str, float]:
    """Relative gradient error of each loss on one random small instantiation."""
    rng, policy, ens, batch = _setup(seed)
    noise_seed = int(rng.integers(1 << 31))
    out = {}

    def critic(which: int):
        def loss(p):
            params = (p, None) if which == 0 else (None, p)
            l1, l2 = reward_critic_loss(batch, ens, policy, 0.2, 0.99, np.random.default_rng(noise_seed), params)
            return l1 if which == 0 else l2
        return loss

    out["reward_critic"] = max(gradient_error(critic(0), ens.q1.params),
                               gradient_error(critic(1), ens.q2.params))

    def cost_critic(p):
        l1, _ = cost_critic_loss(batch, ens, policy, 0.99, np.random.default_rng(noise_seed), (p, None))
        return l1

    out["cost_critic"] = gradient_error(cost_critic, ens.qc1.params)

    multiplier = MultiplierNet(batch.states.shape[1], (8, 8), rng)
    multiplier.net.params += 0.3 * rng.standard_normal(multiplier.params.size)
    lam = multiplier(batch.states)
    rho = float(rng.uniform(0.5, 5.0))

    def actor(p):
        pen = lambda f: augmented_terms(lam, f, rho)  # noqa: E731
        loss, _ = policy_loss(batch.states, policy, ens, 0.2, 5, np.random.default_rng(noise_seed),
                              pen, 0.1, p)
        return loss

    out["policy"] = gradient_error(actor, policy.net.params)

    temp = Temperature(-2.0, init_alpha=float(rng.uniform(0.1, 2.0)))
    _, logp = policy.sample(batch.states, rng)
    out["temperature"] = gradient_error(lambda la: temperature_loss(logp, temp, la), temp.log_alpha)

    targets = dual_target(lam, rng.normal(0.0, 0.5, len(lam)), rho)
    out["multiplier"] = gradient_error(lambda p: regression_loss(batch.states, multiplier, targets, p),
                                       multiplier.params)

    problem = tabular.random_problem(rng, 6)
    lam_t = rng.uniform(0, 1, problem.n_states)
    u0 = rng.uniform(-1, 1, problem.n_decisions)
    analytic = problem.augmented_gradient(u0, lam_t, rho)
    fd = central_difference(lambda u: problem.augmented_objective(u, lam_t, rho), u0)
    out["augmented_toy"] = relative_error(analytic, fd)
    return out


def check_gradients(n_instances: int = 5, tol: float = 1e-4, seed0: int = 0) -> list[CheckResult]:
    worst: dict[str, float] = {}
    for s in range(seed0, seed0 + n_instances):
        for name, err in gradient_errors(s).items():
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(f"gradient {name}", err, tol, f"{n_instances} instances") for name, err in worst.items()]


def check_slack(n: int = 1000, seed: int = 0, step: float = 1e-4) -> list[CheckResult]:
    """Closed-form slack versus grid minimization over ``p in [0, 10]``."""
    rng = np.random.default_rng(seed)
    lam = rng.uniform(0.0, 5.0, n)
    F = rng.uniform(-5.0, 5.0, n)
    rho = rng.uniform(0.1, 10.0, n)
    grid = np.arange(0.0, 10.0 + step / 2, step)
    p_closed = slack(lam, F, rho)
    worst = 0.0
    for i in range(n):
        r = F[i] + grid
        obj = lam[i] * r + 0.5 * rho[i] * r * r
        worst = max(worst, abs(grid[np.argmin(obj)] - min(p_closed[i], 10.0)))
    identity = np.max(np.abs(dual_target(lam, F, rho) - (lam + rho * (F + p_closed))))
    return [CheckResult("slack vs grid argmin", worst, step, f"{n} triples"),
            CheckResult("dual target identity", float(identity), 1e-12)]


def chain_problem(n: int = 5, gamma: float = 0.99, seed: int = 0):
    """A deterministic ``n``-state chain: costs, successor map and the exact value.

    State ``i`` moves to ``i + 1``; the last state loops on itself.
    """
    rng = np.random.default_rng(seed)
    costs = rng.integers(0, 2, n).astype(float)
    costs[-1] = 1.0
    succ = np.minimum(np.arange(n) + 1, n - 1)
    P = np.zeros((n, n))
    P[np.arange(n), succ] = 1.0
    exact = np.linalg.solve(np.eye(n) - gamma * P, costs)
    return costs, succ, exact


def check_contraction(gamma: float = 0.99, tol: float = 1e-8) -> CheckResult:
    """Iterate the pessimistic cost backup from zero; error relative to the start error."""
    costs, succ, exact = chain_problem(5, gamma)
    sweeps = math.ceil(math.log(tol) / math.log(gamma))
    F = np.zeros_like(costs)
    for _ in range(sweeps):
        F = cost_backup(costs, F[succ], F[succ], gamma)
    err = float(np.max(np.abs(F - exact)) / np.max(np.abs(exact)))
    return CheckResult("bellman contraction", err, tol, f"{sweeps} sweeps")


def check_tabular(n_problems: int = 20, seed: int = 0, max_iter: int = 500) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = {"dual step": 0.0, "kkt": 0.0, "oracle u": 0.0, "oracle lambda": 0.0, "fejer increase": 0.0}
    iters = []
    for _ in range(n_problems):
        n = int(rng.integers(2, 21))
        pr = tabular.random_problem(rng, n)
        run = tabular.run_alam(pr, max_iter=max_iter, dual_tol=1e-10)
        fin = run.final
        u_star, lam_star = tabular.oracle_solve(pr)
        worst["dual step"] = max(worst["dual step"], fin.dual_step)
        worst["kkt"] = max(worst["kkt"], max(tabular.kkt_residual(pr, fin.u, fin.lam)))
        worst["oracle u"] = max(worst["oracle u"], float(np.max(np.abs(fin.u - u_star))))
        worst["oracle lambda"] = max(worst["oracle lambda"], float(np.max(np.abs(fin.lam - lam_star))))
        dist = np.linalg.norm(run.lambdas - lam_star, axis=1)
        worst["fejer increase"] = max(worst["fejer increase"], float(np.max(np.diff(dist), initial=0.0)))
        iters.append(fin.k)
    detail = f"{n_problems} problems, at most {max(iters)} iterations"
    return [
        CheckResult("tabular dual step", worst["dual step"], 1e-6, detail),
        CheckResult("tabular kkt residual", worst["kkt"], 1e-4),
        CheckResult("tabular oracle u", worst["oracle u"], 1e-4),
        CheckResult("tabular oracle lambda", worst["oracle lambda"], 1e-4),
        # distances are recomputed from iterates that carry ~1e-12 primal error
        CheckResult("tabular fejer monotone", worst["fejer increase"], 1e-9),
    ]


def run_all() -> list[CheckResult]:
    return [*check_gradients(), *check_slack(), check_contraction(), *check_tabular()]
