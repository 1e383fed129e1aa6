"""Smoke test for the trialwatch extension.

    pip install --no-build-isolation crates/python
    python python/smoke.py
"""

import tempfile
from pathlib import Path

import numpy as np

import trialwatch as tw


def check_link():
    assert abs(tw.rho(0.0) - 0.5) < 1e-12
    assert abs(tw.rho(-1e3) - 0.2) < 1e-12
    assert abs(tw.rho(1e3) - 0.8) < 1e-12
    try:
        tw.rho(0.0, l_min=0.9)
    except tw.TrialwatchError:
        pass
    else:
        raise AssertionError("bad asymptotes accepted")


def check_smooth_probability():
    rng = np.random.default_rng(5)
    mu = np.array([0.3, -0.2])
    sigma = np.array([[0.5, 0.1], [0.1, 0.4]])
    s = np.array([1.0, 0.5])
    got = tw.smooth_probability(mu.tolist(), sigma.tolist(), s.tolist())
    beta = rng.multivariate_normal(mu, sigma, size=400_000)
    x = beta @ s
    mc = np.mean(0.2 + 0.6 / (1.0 + np.exp(-x)))
    assert abs(got - mc) < 2e-3, (got, mc)


def check_blr():
    rng = np.random.default_rng(9)
    d, n, sigma2 = 3, 40, 0.7
    mu0 = rng.normal(size=d)
    s0 = np.eye(d) * 2.0
    phi = rng.normal(size=(n, d))
    r = phi @ np.array([0.5, -1.0, 0.2]) + rng.normal(scale=0.3, size=n)
    mu, sigma = tw.posterior_update_blr(mu0.tolist(), s0.tolist(), phi.tolist(), r.tolist(), sigma2)
    prec = np.linalg.inv(s0) + phi.T @ phi / sigma2
    want_sigma = np.linalg.inv(prec)
    want_mu = want_sigma @ (np.linalg.inv(s0) @ mu0 + phi.T @ r / sigma2)
    assert np.allclose(mu, want_mu, atol=1e-10)
    assert np.allclose(sigma, want_sigma, atol=1e-10)


def check_actions():
    draws = [tw.draw_action(0.3, seed) for seed in range(1000)]
    assert draws == [tw.draw_action(0.3, seed) for seed in range(1000)]
    assert abs(sum(draws) / len(draws) - 0.3) < 0.05
    try:
        tw.draw_action(0.3, 1000)
    except tw.TrialwatchError:
        pass
    else:
        raise AssertionError("out-of-range seed accepted")


def check_simulation():
    cfg = tw.RunConfig("miwaves", participants=5, trial_days=10, fault_plan="incident-replay")
    sim = tw.Simulation(cfg)
    assert sim.step() == "advanced"
    sim.run_to_end()
    assert sim.finished
    status = sim.status()
    assert status["finished"] and status["profile"] == "miwaves"
    issues = sim.issues()
    assert issues and {i["severity"] for i in issues} <= {"RED", "YELLOW", "GREEN"}
    pid = sim.participants()[0]["participant_id"]
    for d in sim.decisions(pid):
        assert 0.2 - 1e-12 <= d["prob"] <= 0.8 + 1e-12 or d["source"] == "FALLBACK"
    assert sim.table_names()
    try:
        sim.decisions("nobody")
    except tw.TrialwatchError as e:
        assert "not found" in str(e)
    else:
        raise AssertionError("unknown participant accepted")


def check_run_directory():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = tw.RunConfig.from_toml('profile = "oralytics"\nparticipants = 4\ntrial_days = 8\nseed = 3\n')
        cfg = cfg.with_overrides({"seed": "4"})
        assert cfg.seed == 4
        out = Path(tmp) / "run"
        runner = tw.Runner(cfg, out)
        runner.step()
        runner.inject({"kind": "RL_CRASH"})
        summary = runner.run_to_completion()
        assert summary["steps"] > 0 and summary["decisions"] > 0
        report = tw.verify_run(out)
        assert report["mismatches"] == [] and report["checked_probs"] > 0
        assert tw.replay_run(out)["identical"]
        tables = tw.restore_snapshot(out, 2)
        assert any(rows for rows in tables.values())
        try:
            tw.queue_injection(out, {"kind": "RL_CRASH"})
        except tw.TrialwatchError:
            pass
        else:
            raise AssertionError("injection into a finished run accepted")


if __name__ == "__main__":
    for check in (check_link, check_smooth_probability, check_blr, check_actions, check_simulation, check_run_directory):
        check()
        print(f"ok {check.__name__}")
    print("smoke passed")
