import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from alam import _kernels, tabular
from alam.checks import check_tabular
from alam.errors import ConfigurationError, ConvergenceError
from alam.multiplier import dual_target, slack
from alam.tabular import (
    AlamIterate,
    ConvexToyProblem,
    initial_iterate,
    kkt_residual,
    one_state_problem,
    oracle_solve,
    primal_solve,
    random_problem,
    run_alam,
)


def slack_problem(rng, n=4):
    """Constraints far from binding; the box holds the unconstrained optimum."""
    pr = random_problem(rng, n)
    u_free = np.linalg.solve(pr.Q, pr.b)
    return ConvexToyProblem(pr.Q, pr.b, pr.A, pr.A @ u_free + 5.0, np.full(n, -50.0), np.full(n, 50.0)), u_free


def coordinate_search(f, u0, lo, hi, step=1.0, min_step=1e-11):
    """Gradient-free compass search; box-constrained by clipping."""
    u = np.clip(np.array(u0, dtype=np.float64), lo, hi)
    fu = f(u)
    while step > min_step:
        improved = False
        for i in range(u.size):
            for sgn in (1.0, -1.0):
                trial = u.copy()
                trial[i] = np.clip(trial[i] + sgn * step, lo[i], hi[i])
                ft = f(trial)
                if ft < fu:
                    u, fu, improved = trial, ft, True
                    break
        if not improved:
            step *= 0.5
    return u, fu


def test_problem_validation():
    with pytest.raises(ConfigurationError):
        ConvexToyProblem(-np.eye(2), np.zeros(2), np.eye(2), np.ones(2), -np.ones(2), np.ones(2))
    with pytest.raises(ConfigurationError):
        ConvexToyProblem(np.eye(2), np.zeros(2), np.eye(3), np.ones(2), -np.ones(2), np.ones(2))
    with pytest.raises(ConfigurationError):
        ConvexToyProblem(np.eye(1), np.zeros(1), np.eye(1), np.ones(1), np.ones(1), -np.ones(1))


def test_random_problems_are_strictly_feasible_and_well_conditioned():
    rng = np.random.default_rng(0)
    for n in (2, 7, 20):
        pr = random_problem(rng, n)
        eig = np.linalg.eigvalsh(pr.Q)
        assert eig.min() > 0 and eig.max() / eig.min() <= 10.0 + 1e-9
        u, _ = oracle_solve(pr)
        assert np.all(pr.constraints(u) <= 1e-8)


def test_primal_with_inactive_penalty_is_unconstrained_optimum():
    pr, u_free = slack_problem(np.random.default_rng(1))
    u = primal_solve(pr, np.zeros(pr.n_states), 3.0)
    np.testing.assert_allclose(u, u_free, atol=1e-9)


def test_one_state_primal_with_large_rho_reaches_boundary():
    pr = one_state_problem()
    # with lam = 0 the penalized optimum is u = rho / (2 + rho)
    u = primal_solve(pr, np.zeros(1), 1e4)
    assert abs(u[0] - 1.0) < 3e-4
    assert u[0] == pytest.approx(1e4 / (2 + 1e4), rel=1e-10)


def test_primal_matches_coordinate_search():
    rng = np.random.default_rng(2)
    for _ in range(3):
        pr = random_problem(rng, 10)
        lam = rng.uniform(0, 1, 10)
        rho = float(rng.uniform(0.5, 5))
        u = primal_solve(pr, lam, rho)
        f = lambda x: pr.augmented_objective(x, lam, rho)  # noqa: E731
        _, f_cs = coordinate_search(f, np.zeros(10), pr.lo, pr.hi)
        assert f(u) <= f_cs + 1e-9
        assert abs(f(u) - f_cs) < 1e-6


def test_primal_tolerance_and_iteration_cap():
    pr = random_problem(np.random.default_rng(3), 5)
    with pytest.raises(ConfigurationError):
        primal_solve(pr, np.zeros(5), 1.0, tol=0.0)
    with pytest.raises(ConvergenceError) as info:
        primal_solve(pr, np.zeros(5), 1.0, max_iter=3)
    assert info.value.args


def test_projected_dual_update_example():
    # Q = I, A = I: the primal optimum is u = (1, 1), so F(u) = (0.3, -0.2)
    pr = ConvexToyProblem(np.eye(2), np.array([1.3, 1.0]), np.eye(2), np.array([0.7, 1.2]),
                          np.full(2, -5.0), np.full(2, 5.0))
    it = tabular.alam_iterate(pr, initial_iterate(pr))
    np.testing.assert_allclose(it.u, [1.0, 1.0], atol=1e-10)
    np.testing.assert_allclose(pr.constraints(it.u), [0.3, -0.2], atol=1e-10)
    np.testing.assert_allclose(it.lam, [0.3, 0.0], atol=1e-10)
    assert it.k == 1 and it.rho == 1.0  # v = 0.3 below 1/rho


def test_kkt_point_is_a_fixed_point():
    pr = random_problem(np.random.default_rng(4), 6)
    u_star, lam_star = oracle_solve(pr)
    start = AlamIterate(u_star, lam_star, initial_iterate(pr).penalty)
    nxt = tabular.alam_iterate(pr, start)
    np.testing.assert_allclose(nxt.u, u_star, atol=1e-9)
    np.testing.assert_allclose(nxt.lam, lam_star, atol=1e-9)


def test_ten_state_run_converges():
    pr = random_problem(np.random.default_rng(5), 10)
    run = run_alam(pr, max_iter=500)
    assert run.final.dual_step < 1e-6
    steps = run.dual_steps
    # square-summable steps: partial sums level off
    partial = np.cumsum(steps**2)
    assert partial[-1] - partial[len(partial) // 2] < 1e-6 * partial[-1] + 1e-12


def test_one_state_oracle_and_kkt():
    pr = one_state_problem()
    u, lam = oracle_solve(pr)
    np.testing.assert_allclose([u[0], lam[0]], [1.0, 2.0], atol=1e-10)
    assert max(kkt_residual(pr, u, lam)) <= 1e-8
    assert kkt_residual(pr, u + 0.1, lam)[0] > 0


def test_fully_slack_problem():
    pr, u_free = slack_problem(np.random.default_rng(6))
    u, lam = oracle_solve(pr)
    np.testing.assert_allclose(u, u_free, atol=1e-9)
    np.testing.assert_array_equal(lam, np.zeros(pr.n_states))
    assert max(kkt_residual(pr, u_free, np.zeros(pr.n_states))) < 1e-12


def test_oracle_rejects_infeasible_problem():
    # u <= -1 and -u <= -1 cannot both hold
    pr = ConvexToyProblem(np.eye(1), np.zeros(1), np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0]),
                          np.full(1, -5.0), np.full(1, 5.0))
    with pytest.raises(ConvergenceError):
        oracle_solve(pr, max_sweeps=10_000)


def test_iterates_keep_multiplier_identities():
    pr = random_problem(np.random.default_rng(7), 8)
    run = run_alam(pr, max_iter=50)
    for prev, nxt in zip(run.iterates, run.iterates[1:]):
        assert np.all(nxt.lam >= 0)
        F = pr.constraints(nxt.u)
        np.testing.assert_allclose(nxt.lam, dual_target(prev.lam, F, prev.rho), atol=0)
        np.testing.assert_allclose(nxt.lam, prev.lam + prev.rho * (F + slack(prev.lam, F, prev.rho)),
                                   atol=1e-12)
    rhos = [it.rho for it in run.iterates]
    assert np.all(np.diff(rhos) >= 0)


def test_twenty_problem_theory_check():
    results = check_tabular()
    for r in results:
        assert r.passed, r.line()


def test_csv_export(tmp_path):
    pr = random_problem(np.random.default_rng(8), 4)
    run = run_alam(pr, max_iter=30)
    path = tmp_path / "conv.csv"
    run.write_csv(path, pr)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["k", "dual_step", "violation", "rho", "objective", "max_violation"]
    assert len(rows) == len(run.iterates) - 1
    assert float(rows[-1]["dual_step"]) == run.final.dual_step


def _kernel_args(rng, n=6):
    pr = random_problem(rng, n)
    lam = rng.uniform(0, 1, n)
    return (pr.Q, pr.b, pr.A, pr.c, lam, 2.0, pr.lo, pr.hi, np.zeros(n), 1.0 / pr.lipschitz(2.0), 1e-12, 100_000)


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")
def test_numba_and_numpy_kernels_agree():
    rng = np.random.default_rng(9)
    args = _kernel_args(rng)
    u_a, r_a, k_a = _kernels._pg_loops(*args)
    u_b, r_b, k_b = _kernels._pg_numpy(*args)
    np.testing.assert_allclose(u_a, u_b, atol=1e-12)
    assert abs(k_a - k_b) <= 1
    P = rng.standard_normal((8, 8))
    P = P @ P.T + np.eye(8)
    q = rng.standard_normal(8)
    mu_a, _, s_a = _kernels._hildreth_loops(P, q, np.diag(P).copy(), np.zeros(8), 1e-14, 100_000)
    mu_b, _, s_b = _kernels._hildreth_numpy(P, q, np.diag(P).copy(), np.zeros(8), 1e-14, 100_000)
    np.testing.assert_allclose(mu_a, mu_b, atol=1e-12)


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, ALAM_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "from alam import _kernels; print(_kernels.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "numpy"


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")
def test_kernel_benchmark_script_runs():
    script = os.path.join(os.path.dirname(__file__), os.pardir, "benchmarks", "bench_kernels.py")
    out = subprocess.run([sys.executable, script, "--sizes", "4", "--repeat", "1"],
                         capture_output=True, text=True, check=True)
    lines = out.stdout.splitlines()
    assert lines[0].split()[:2] == ["kernel", "n"] and len(lines) == 3
