import numpy as np
import pytest

from alam.agents import AgentConfig, ReplayBuffer, Trainer, evaluate, train_agent
from alam.envs import DoubleIntegrator, rollout
from alam.errors import ConfigurationError, NonFiniteError, UsageError
from alam.logs import METRIC_COLUMNS, read_events, read_metrics
from alam.nn import load_checkpoint


def tiny(**kw):
    base = dict(hidden=(8,), batch_size=16, warmup_steps=50, total_steps=300, eval_interval=100,
                eval_episodes=2, m_lambda=20, buffer_size=10_000)
    base.update(kw)
    return AgentConfig(**base)


def as_csv(rows):
    """Rows as the serialized text, so NaN cells compare equal."""
    import io
    import csv
    from dataclasses import astuple

    from alam.logs import _fmt

    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(v) for v in astuple(r)])
    return buf.getvalue()


def params_of(trainer):
    return {k: v.params.copy() for k, v in trainer.networks().items()}


# -- replay buffer -------------------------------------------------------------


def test_buffer_ring_overwrites_oldest():
    buf = ReplayBuffer(2, 1, capacity=3)
    for i in range(5):
        buf.add([i, i], [i], i, 0.0, [i + 1, i + 1], 0.0, 0.0)
    assert len(buf) == 3
    rewards = set(buf.sample(200, np.random.default_rng(0)).rewards.tolist())
    assert rewards == {2.0, 3.0, 4.0}


def test_buffer_grows_past_first_allocation():
    buf = ReplayBuffer(1, 1, capacity=10_000)
    for i in range(5000):
        buf.add([i], [0.0], float(i), 0.0, [i], 0.0, 0.0)
    assert len(buf) == 5000
    assert buf.sample(1000, np.random.default_rng(1)).rewards.max() > 4096


def test_buffer_sampling_is_uniform_and_empty_buffer_refuses():
    buf = ReplayBuffer(1, 1, capacity=100)
    with pytest.raises(UsageError):
        buf.sample(1, np.random.default_rng(0))
    for i in range(10):
        buf.add([i], [0.0], float(i), 0.0, [i], 0.0, 0.0)
    draws = buf.sample(100_000, np.random.default_rng(2)).rewards
    counts = np.bincount(draws.astype(int), minlength=10)
    # binomial sd of each count is about 95
    assert np.all(np.abs(counts - 10_000) < 500)


def test_stored_costs_agree_with_constraint():
    tr = Trainer(DoubleIntegrator(), tiny(total_steps=400, warmup_steps=400), "sac")
    tr.train()
    b = tr.buffer
    s, nxt = b._states[: len(b)], b._next_states[: len(b)]
    env = tr.env
    np.testing.assert_array_equal(b._costs[: len(b)], env.cost(nxt))
    np.testing.assert_array_equal(b._state_costs[: len(b)], env.cost(s))
    assert b._costs[: len(b)].sum() > 0  # uniform exploration does leave the safe set


# -- configuration ---------------------------------------------------------------


def test_default_config_holds_table_values():
    c = AgentConfig()
    assert (c.gamma, c.hidden, c.lr, c.multiplier_lr, c.batch_size) == (0.99, (256, 256), 1e-4, 1e-5, 256)
    assert (c.m_lambda, c.k_samples, c.dual_steps, c.rho_max, c.sigma) == (200, 5, 5, 5.0, 1.01)
    assert (c.rho0, c.tolerance, c.buffer_size) == (1.0, 0.1, 2_000_000)


@pytest.mark.parametrize("bad", [dict(lr=0.0), dict(gamma=1.0), dict(hidden=()), dict(sigma=1.0),
                                 dict(rho0=6.0), dict(tau=1.5), dict(precision="float16"),
                                 dict(target_mode="frozen"), dict(lambda_init=0.0)])
def test_config_validation(bad):
    with pytest.raises(ConfigurationError):
        AgentConfig(**bad)


def test_config_round_trip_and_unknown_keys():
    c = tiny(seed=3)
    assert AgentConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigurationError):
        AgentConfig.from_dict({"learning_rate": 1e-3})
    with pytest.raises(ConfigurationError):
        Trainer(DoubleIntegrator(), tiny(), "sac-pid")


# -- schedule --------------------------------------------------------------------


def test_no_updates_before_warmup():
    tr = Trainer(DoubleIntegrator(), tiny(warmup_steps=120, eval_interval=60), "sac-alam")
    tr.train(119)
    assert tr.grad_step == 0
    tr.train(130)
    assert tr.grad_step == 130 - 120 + 1


def test_multiplier_frozen_when_period_exceeds_run():
    cfg = tiny(m_lambda=301)
    tr = Trainer(DoubleIntegrator(), cfg, "sac-alam")
    before = tr.safety.multiplier.params.copy()
    res = tr.train()
    assert np.array_equal(tr.safety.multiplier.params, before)
    assert not [e for e in res.events if e["event"] == "dual_update"]
    assert res.rho_history == (1.0,)
    lam = [r.mean_lambda for r in res.rows]
    np.testing.assert_allclose(lam, 0.05, rtol=0.2)


def test_alam_and_ga_identical_until_first_dual_update():
    cfg = tiny(m_lambda=200, total_steps=249, warmup_steps=50)
    a = Trainer(DoubleIntegrator(), cfg, "sac-alam")
    g = Trainer(DoubleIntegrator(), cfg, "sac-alam-ga")
    a.train(248)  # 199 gradient steps
    g.train(248)
    pa, pg = params_of(a), params_of(g)
    assert pa.keys() == pg.keys()
    for k in pa:
        assert pa[k].tobytes() == pg[k].tobytes(), k
    assert [r.episode_return for r in a.rows] == [r.episode_return for r in g.rows]
    a.train(249)
    g.train(249)
    assert a.safety.multiplier.params.tobytes() != g.safety.multiplier.params.tobytes()


# -- scalar Lagrangian -----------------------------------------------------------


def scalar_lag_trainer(**kw):
    tr = Trainer(DoubleIntegrator(), tiny(**kw), "sac-lag")
    tr.train(60)  # fills the buffer
    return tr


def test_scalar_multiplier_decays_to_zero_and_sticks():
    tr = scalar_lag_trainer(lambda_init=0.05, lag_lr=1e-2)
    tr.shifted_feasibility = lambda s: np.full(len(s), -0.1)
    lams = [tr.safety.dual_update()["lambda"] for _ in range(80)]
    assert lams[0] == pytest.approx(0.05 - 1e-3)
    assert min(lams) == 0.0 and lams[-30:] == [0.0] * 30
    assert all(x >= 0 for x in lams)


def test_scalar_multiplier_grows_by_lr_times_violation():
    tr = scalar_lag_trainer(lambda_init=0.2, lag_lr=3e-3)
    delta = 0.4
    tr.shifted_feasibility = lambda s: np.full(len(s), delta)
    lams = [tr.safety.lam] + [tr.safety.dual_update()["lambda"] for _ in range(5)]
    np.testing.assert_allclose(np.diff(lams), 3e-3 * delta, rtol=1e-12)


# -- whole runs -------------------------------------------------------------------


@pytest.mark.parametrize("agent", ["sac", "sac-lag", "sac-lagnet", "sac-alam", "sac-alam-ga"])
def test_training_is_bit_reproducible(agent):
    cfg = tiny(total_steps=200)
    r1 = train_agent(DoubleIntegrator(), cfg, agent)
    r2 = train_agent(DoubleIntegrator(), cfg, agent)
    assert as_csv(r1.rows) == as_csv(r2.rows) and len(r1.rows) == 2
    r3 = train_agent(DoubleIntegrator(), cfg, agent, rng_seed=1)
    assert as_csv(r3.rows) != as_csv(r1.rows)


def test_penalty_trace_of_alam_run(tmp_path):
    # tight tolerance and a cheap cadence make the penalty fire
    cfg = tiny(total_steps=400, m_lambda=5, tolerance=0.0, warmup_steps=60)
    res = train_agent(DoubleIntegrator(), cfg, "sac-alam", out_dir=tmp_path)
    h = np.array(res.rho_history)
    n_dual = (400 - 60 + 1) // 5
    assert len(h) == n_dual + 1
    assert np.all(np.diff(h) >= 0) and h.max() <= 5.0
    grew = h[1:] > h[:-1]
    assert grew.any()
    np.testing.assert_allclose(h[1:][grew] / h[:-1][grew], 1.01, rtol=1e-12)
    bumps = read_events(tmp_path / "events.jsonl", "rho_bump")
    assert len(bumps) == grew.sum()
    assert [b["rho"] for b in bumps] == list(h[1:][grew])
    duals = read_events(tmp_path / "events.jsonl", "dual_update")
    assert all((d["v"] > 1 / d["rho_before"]) == (d["rho"] > d["rho_before"]) for d in duals)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert rows["rho"][-1] == h[-1]


def test_run_directory_contents(tmp_path):
    res = train_agent(DoubleIntegrator(), tiny(), "sac-lagnet", out_dir=tmp_path)
    m = read_metrics(tmp_path / "metrics.csv")
    assert m["env_step"] == [100.0, 200.0, 300.0]
    assert np.isnan(m["rho"]).all()
    nets, extra = load_checkpoint(res.checkpoint)
    assert {"policy", "q1", "q2", "qc1", "qc2", "multiplier", "qc2_target"} <= set(nets)
    assert extra["agent"] == "sac-lagnet" and extra["env_step"] == 300


def test_non_finite_loss_aborts_with_state_dump(tmp_path):
    tr = Trainer(DoubleIntegrator(), tiny(), "sac-alam", tmp_path)
    tr.train(100)
    tr.critics.q1.params[:] = np.nan
    with pytest.raises(NonFiniteError) as info:
        tr.train(200)
    # the optimizer guard sees the poisoned gradient first
    assert "q1" in str(info.value) and info.value.diagnostics["n_bad"] > 0
    assert (tmp_path / "abort.ckpt").exists()
    abort = read_events(tmp_path / "events.jsonl", "abort")
    assert len(abort) == 1 and abort[0]["env_step"] == 101
    assert len(read_metrics(tmp_path / "metrics.csv")["env_step"]) == 1


def test_resumed_run_matches_uninterrupted(tmp_path):
    cfg = tiny(total_steps=300)
    full = Trainer(DoubleIntegrator(), cfg, "sac-alam")
    full.train()
    part = Trainer(DoubleIntegrator(), cfg, "sac-alam", tmp_path)
    part.train(200, resume_path=tmp_path / "state.pkl")
    back = Trainer.load_state(tmp_path / "state.pkl")
    back.train()
    assert as_csv(back.rows) == as_csv(full.rows)
    for k, v in params_of(full).items():
        assert v.tobytes() == params_of(back)[k].tobytes()


# -- evaluation -------------------------------------------------------------------


def test_evaluate_matches_rollout_of_deterministic_policy():
    tr = Trainer(DoubleIntegrator(), tiny(), "sac")
    env = tr.env
    rec = evaluate(env, tr.policy, 6, 11)
    stats = rollout(env, tr.policy.deterministic, 6, 11)
    assert rec.return_mean == pytest.approx(np.mean(stats.returns), rel=1e-15)
    assert rec.return_std == pytest.approx(np.std(stats.returns), rel=1e-15)
    assert rec.cost_mean == np.mean(stats.total_cost)
    assert rec.violation_mean == np.mean(stats.violation_fraction)
    assert rec.max_h == np.max(stats.max_h)


def test_single_episode_evaluation_has_no_spread():
    env = DoubleIntegrator()
    pol = lambda s: -np.clip(s[:, :1] + s[:, 1:], -2, 2)  # noqa: E731
    rec = evaluate(env, pol, 1, 4)
    stats = rollout(env, pol, 1, 4)
    assert rec.return_mean == stats.returns[0] and rec.return_std == 0.0
    assert rec.cost_mean == stats.total_cost[0] and rec.episodes == 1


def test_stationary_safe_policy_has_zero_cost():
    rec = evaluate(DoubleIntegrator(), lambda s: np.zeros((len(s), 1)), 20, 0)
    assert rec.cost_mean == 0.0 and rec.violation_mean == 0.0 and rec.max_h <= -0.5
