"""Exact augmented-Lagrangian iterations on finite convex programs.

A :class:`ConvexToyProblem` has one bounded scalar decision per state,

    maximize   J(u) = -1/2 u'Qu + b'u
    subject to F_i(u) = (Au - c)_i <= 0   for every state i,
               lo <= u <= hi,

with ``Q`` positive definite. The dual variables are one multiplier per
state; the box stays in the primal as the compact action set.

:func:`alam_iterate` performs one exact primal/dual/penalty cycle.
:func:`oracle_solve` solves the same program by dual coordinate descent
(Hildreth's method), an unrelated algorithm, to provide ground truth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ConfigurationError, ConvergenceError
from .multiplier import PenaltyState, dual_target, penalty_update, violation_from_values


@dataclass(frozen=True)
class ConvexToyProblem:
    Q: np.ndarray
    b: np.ndarray
    A: np.ndarray
    c: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        n = self.b.size
        if self.Q.shape != (n, n) or self.A.shape != (self.c.size, n):
            raise ConfigurationError("inconsistent problem dimensions")
        if np.min(np.linalg.eigvalsh(0.5 * (self.Q + self.Q.T))) <= 0:
            raise ConfigurationError("Q must be positive definite (J concave)")
        if np.any(self.lo > self.hi):
            raise ConfigurationError("empty box")

    @property
    def n_states(self) -> int:
        return self.c.size

    @property
    def n_decisions(self) -> int:
        return self.b.size

    def objective(self, u: np.ndarray) -> float:
        return float(-0.5 * u @ self.Q @ u + self.b @ u)

    def constraints(self, u: np.ndarray) -> np.ndarray:
        return self.A @ u - self.c

    def augmented_objective(self, u: np.ndarray, lam: np.ndarray, rho: float) -> float:
        """``-J(u) + |max(0, lam + rho F)|^2 / (2 rho) - |lam|^2 / (2 rho)``."""
        shifted = np.maximum(lam + rho * self.constraints(u), 0.0)
        return -self.objective(u) + (shifted @ shifted - lam @ lam) / (2.0 * rho)

    def augmented_gradient(self, u: np.ndarray, lam: np.ndarray, rho: float) -> np.ndarray:
        shifted = np.maximum(lam + rho * self.constraints(u), 0.0)
        return self.Q @ u - self.b + self.A.T @ shifted

    def lipschitz(self, rho: float) -> float:
        return float(np.linalg.norm(self.Q, 2) + rho * np.linalg.norm(self.A, 2) ** 2)


def random_problem(rng: np.random.Generator, n: int, box: float = 3.0,
                   curvature: tuple[float, float] = (0.1, 1.0)) -> ConvexToyProblem:
    """Strictly feasible random instance with ``cond(Q) <= curvature[1] / curvature[0]``.

    The unconstrained maximizer is pushed away from a known interior feasible
    point so that a good share of the state constraints are active.
    """
    V, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.exp(rng.uniform(np.log(curvature[0]), np.log(curvature[1]), size=n))
    Q = (V * eig) @ V.T
    Q = 0.5 * (Q + Q.T)
    A = np.eye(n) + 0.3 * rng.standard_normal((n, n)) / np.sqrt(n)
    u_feas = rng.uniform(-1.0, 1.0, size=n)
    c = A @ u_feas + rng.uniform(0.2, 1.0, size=n)
    u_free = u_feas + 1.5 * rng.standard_normal(n)
    b = Q @ u_free
    lo, hi = np.full(n, -box), np.full(n, box)
    return ConvexToyProblem(Q, b, A, c, lo, hi)


def primal_solve(problem: ConvexToyProblem, lam: np.ndarray, rho: float, tol: float = 1e-12,
                 u0: np.ndarray | None = None, max_iter: int = 500_000) -> np.ndarray:
    """Minimize the augmented objective over the box by projected gradient."""
    if tol <= 0:
        raise ConfigurationError("tol must be positive")
    p = problem
    u0 = np.zeros(p.n_decisions) if u0 is None else np.asarray(u0, dtype=np.float64)
    step = 1.0 / p.lipschitz(rho)
    u, res, _ = _kernels.projected_gradient(
        p.Q, p.b, p.A, p.c, np.asarray(lam, dtype=np.float64), float(rho),
        p.lo, p.hi, u0, step, tol, max_iter,
    )
    if not res <= tol:
        raise ConvergenceError("projected gradient did not converge", float(res))
    return u


@dataclass(frozen=True)
class AlamIterate:
    u: np.ndarray
    lam: np.ndarray
    penalty: PenaltyState
    k: int = 0
    violation: float = float("nan")
    dual_step: float = float("nan")

    @property
    def rho(self) -> float:
        return self.penalty.rho


def initial_iterate(problem: ConvexToyProblem, rho0: float = 1.0, sigma: float = 1.01,
                    rho_max: float = 5.0, lam0: np.ndarray | None = None) -> AlamIterate:
    lam = np.zeros(problem.n_states) if lam0 is None else np.asarray(lam0, dtype=np.float64)
    return AlamIterate(np.zeros(problem.n_decisions), lam, PenaltyState.initial(rho0, sigma, rho_max))


def alam_iterate(problem: ConvexToyProblem, it: AlamIterate, tol: float = 1e-12) -> AlamIterate:
    """One exact cycle: primal minimization, projected dual step, penalty check."""
    rho = it.penalty.rho
    u = primal_solve(problem, it.lam, rho, tol, u0=it.u)
    F = problem.constraints(u)
    lam = dual_target(it.lam, F, rho)
    v = violation_from_values(it.lam, F, rho)
    return AlamIterate(u, lam, penalty_update(it.penalty, v), it.k + 1, v,
                       float(np.linalg.norm(lam - it.lam)))


@dataclass
class AlamRun:
    iterates: list[AlamIterate] = field(default_factory=list)

    @property
    def final(self) -> AlamIterate:
        return self.iterates[-1]

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([it.lam for it in self.iterates])

    @property
    def dual_steps(self) -> np.ndarray:
        return np.array([it.dual_step for it in self.iterates[1:]])

    def rows(self, problem: ConvexToyProblem) -> list[dict]:
        return [
            {
                "k": it.k,
                "dual_step": it.dual_step,
                "violation": it.violation,
                "rho": it.rho,
                "objective": problem.objective(it.u),
                "max_violation": float(np.max(problem.constraints(it.u))),
            }
            for it in self.iterates[1:]
        ]

    def write_csv(self, path: str | Path, problem: ConvexToyProblem) -> None:
        rows = self.rows(problem)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["k"])
            w.writeheader()
            for row in rows:
                w.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})


def run_alam(problem: ConvexToyProblem, max_iter: int = 10_000, dual_tol: float = 1e-10,
             tol: float = 1e-12, start: AlamIterate | None = None) -> AlamRun:
    """Iterate until ``|lam^{k+1} - lam^k| < dual_tol`` or ``max_iter`` cycles."""
    run = AlamRun([start if start is not None else initial_iterate(problem)])
    for _ in range(max_iter):
        nxt = alam_iterate(problem, run.final, tol)
        run.iterates.append(nxt)
        if nxt.dual_step < dual_tol:
            break
    return run


def kkt_residual(problem: ConvexToyProblem, u: np.ndarray, lam: np.ndarray) -> tuple[float, float, float, float]:
    """Euclidean norms of (stationarity, primal infeasibility, dual infeasibility, complementarity).

    Stationarity is measured by the projected-gradient map so that the box's
    normal cone is accounted for.
    """
    grad_l = problem.Q @ u - problem.b + problem.A.T @ lam
    stat = np.linalg.norm(u - np.clip(u - grad_l, problem.lo, problem.hi))
    F = problem.constraints(u)
    return (
        float(stat),
        float(np.linalg.norm(np.maximum(F, 0.0))),
        float(np.linalg.norm(np.maximum(-lam, 0.0))),
        float(np.linalg.norm(lam * F)),
    )


def oracle_solve(problem: ConvexToyProblem, tol: float = 1e-15, max_sweeps: int = 2_000_000):
    """Ground-truth ``(u*, lam*)`` by Hildreth's dual coordinate descent.

    Box limits are dualized alongside the state constraints; only the state
    multipliers are returned.
    """
    p = problem
    n, m = p.n_decisions, p.n_states
    if n > 20:
        raise ConfigurationError("oracle is meant for n <= 20")
    eye = np.eye(n)
    G = np.vstack([p.A, eye, -eye])
    h = np.concatenate([p.c, p.hi, -p.lo])
    Qinv = np.linalg.inv(p.Q)
    P = G @ Qinv @ G.T
    q = G @ Qinv @ p.b - h
    diag = np.diag(P).copy()
    mu, delta, _ = _kernels.hildreth(P, q, diag, np.zeros(G.shape[0]), tol, max_sweeps)
    if not np.all(np.isfinite(mu)) or np.max(mu) > 1e9:
        raise ConvergenceError("dual diverged; problem looks infeasible", float(np.max(mu)))
    u = Qinv @ (p.b - G.T @ mu)
    if np.max(G @ u - h) > 1e-6:
        raise ConvergenceError("no feasible point found", float(np.max(G @ u - h)))
    return u, mu[:m]


def one_state_problem() -> ConvexToyProblem:
    """``J(u) = -u^2``, ``F(u) = 1 - u``: optimum ``u* = 1`` with ``lam* = 2``."""
    return ConvexToyProblem(np.array([[2.0]]), np.array([0.0]), np.array([[-1.0]]),
                            np.array([-1.0]), np.array([-5.0]), np.array([5.0]))

