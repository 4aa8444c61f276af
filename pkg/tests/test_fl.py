import math

import numpy as np
import pytest

from umaircomp.agp import aligned_rank_one_design
from umaircomp.fl import (
    FlError,
    FlHistory,
    QuadraticTask,
    SUMMARY_COLUMNS,
    centralized_gd,
    demodulate,
    local_gd,
    modulate,
    run_federated,
    run_replicas,
    target_global,
    transmit_round,
    write_summary_csv,
)
from umaircomp.rng import complex_gaussian, make_rng
from umaircomp.system import ChannelSet, SystemConfig, TransceiverDesign, generate_channels, normalized_mse


def fl_config(task, N=4, noise=0.0, gamma=1.0):
    return SystemConfig(N=N, K=task.K, P0=1.0, sigma_b2=noise, sigma_u2=noise, alpha=task.alpha,
                        pathloss=1.0, gamma=gamma, S=task.M // 2)


def aligned(ch, cfg):
    return aligned_rank_one_design(ch, cfg)


def rand_c(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


# ---------------------------------------------------------------- task

def unit_task():
    """Loss |x - 1|^2 / 2 per coordinate, M = 2."""
    s = math.sqrt(2.0)
    return QuadraticTask(A=(s * np.eye(2),), y=(s * np.ones(2),), mu0=0.0)


def test_task_validation():
    with pytest.raises(ValueError, match="even"):
        QuadraticTask(A=(np.eye(3),), y=(np.ones(3),))
    with pytest.raises(ValueError, match="positive definite"):
        QuadraticTask(A=(np.zeros((2, 2)),), y=(np.ones(2),))


def test_loss_matches_closed_form():
    task = QuadraticTask.synthetic(K=3, M=6, seed=1)
    rng = np.random.default_rng(1)
    for _ in range(10):
        x = rng.normal(size=6)
        assert task.loss(x) == pytest.approx(task.loss_quadratic(x), rel=1e-12, abs=1e-12)


def test_gradient_at_optimum_vanishes():
    task = QuadraticTask.synthetic(K=2, M=8, seed=2)
    assert np.linalg.norm(task.grad(task.theta_star)) <= 1e-12


def test_curvature_by_power_iteration():
    task = QuadraticTask.synthetic(K=2, M=8, seed=3)
    H = task.hessian
    rng = np.random.default_rng(3)

    def power(A):
        x = rng.normal(size=A.shape[0])
        for _ in range(20000):
            x = A @ x
            x /= np.linalg.norm(x)
        return float(x @ A @ x)

    L = power(H)
    mu = L - power(L * np.eye(8) - H)
    assert L == pytest.approx(task.L, rel=1e-8)
    assert mu == pytest.approx(task.mu, rel=1e-8)
    assert task.smoothness >= max(task.L, task.L_users)


def test_heterogeneity_zero_for_identical_data():
    rng = np.random.default_rng(4)
    a, y = rng.normal(size=(20, 4)), rng.normal(size=20)
    task = QuadraticTask(A=(a, a), y=(y, y), mu0=0.1)
    assert abs(task.gamma_heterogeneity) <= 1e-12
    assert QuadraticTask.synthetic(K=2, M=4, seed=4).gamma_heterogeneity > 0


# ---------------------------------------------------------------- local steps

def test_local_gd_examples():
    task = unit_task()
    x0 = np.zeros(2)
    assert np.array_equal(local_gd(x0, task, 0, 0, 0.5), x0)
    assert np.allclose(local_gd(x0, task, 0, 1, 1.0), [1, 1], atol=1e-15)


def test_local_gd_closed_form():
    task = QuadraticTask.synthetic(K=2, M=8, seed=5)
    x0 = np.random.default_rng(5).normal(size=8)
    eps = 1 / task.L
    for k in range(2):
        direct = x0 - eps * (task._d["H_users"][k] @ x0 - task._d["c_users"][k])
        assert np.allclose(local_gd(x0, task, k, 1, eps), direct, atol=1e-12, rtol=0)


# ---------------------------------------------------------------- modulation

def test_modulate_examples():
    assert np.allclose(modulate([1, 2], 1.0, 1.0), [(1 + 2j) / math.sqrt(2)])
    assert np.array_equal(modulate(np.zeros(4), 0.3j, 2.0), np.zeros(2))
    rng = np.random.default_rng(6)
    x, t, eta = rng.normal(size=10), 0.4 - 0.7j, 0.8
    s = modulate(x, t, eta)
    assert np.sum(np.abs(s) ** 2) == pytest.approx(abs(t) ** 2 * x @ x / (2 * eta))
    with pytest.raises(ValueError):
        modulate(x, t, 0.0)
    with pytest.raises(ValueError):
        modulate(np.ones(3), t, 1.0)


def test_demodulate_examples():
    assert np.array_equal(demodulate(np.array([1 + 1j]), 0.0, 1.0), [0, 0])
    rng = np.random.default_rng(7)
    x, t, eta = rng.normal(size=6), 0.5 + 0.2j, 1.3
    assert np.allclose(demodulate(modulate(x, t, eta), 1 / t, eta), x, atol=1e-12)


# ---------------------------------------------------------------- link

def test_transmit_scalar_chain():
    cfg = SystemConfig(N=1, K=1, P0=1, sigma_b2=0, sigma_u2=0, alpha=[1], pathloss=1, S=3)
    ch = ChannelSet([[0.3 + 0.4j]], [[0.6 - 0.8j]])
    d = TransceiverDesign(np.ones((1, 1)), np.ones(1), np.ones(1), "identity")
    s = np.array([[1, 1j, -2]])
    y = transmit_round(s, d, ch, cfg, (0, 0))
    assert np.allclose(y, np.conj(0.6 - 0.8j) * (0.3 + 0.4j) * s)


def test_transmit_noise_variance():
    S = 100000
    cfg = SystemConfig(N=3, K=2, P0=1, sigma_b2=0.2, sigma_u2=[0.05, 0.3], alpha=[0.5, 0.5],
                       pathloss=1, gamma=0.7, S=S)
    ch = generate_channels(cfg, 8)
    rng = np.random.default_rng(8)
    F = np.exp(1j * rng.uniform(0, 2 * np.pi, (3, 3)))
    d = TransceiverDesign(F, np.ones(2), np.ones(2), "fully-connected")
    y = transmit_round(np.zeros((2, S)), d, ch, cfg, (8, 0))
    gF = ch.G.conj().T @ F
    expect = cfg.gamma * cfg.sigma_b2 * np.sum(np.abs(gF) ** 2, axis=1) + cfg.sigma_u2
    assert np.allclose(np.mean(np.abs(y) ** 2, axis=1), expect, rtol=0.03)


def test_transmit_affine_under_fixed_noise():
    cfg = SystemConfig(N=3, K=2, P0=1, sigma_b2=0.2, sigma_u2=0.1, alpha=[0.5, 0.5], pathloss=1, S=4)
    ch = generate_channels(cfg, 9)
    rng = np.random.default_rng(9)
    d = TransceiverDesign(rand_c(rng, 3, 3), np.ones(2), np.ones(2), "unconstrained-digital")
    a, b = rand_c(rng, 2, 4), rand_c(rng, 2, 4)
    key = (9, 3, 1)
    T = lambda s: transmit_round(s, d, ch, cfg, key)
    zero = T(np.zeros((2, 4)))
    assert np.allclose(T(a + b) - zero, (T(a) - zero) + (T(b) - zero), atol=1e-12)
    assert np.array_equal(T(a), T(a))


def test_round_trip_unit_gain():
    task = QuadraticTask.synthetic(K=2, M=6, seed=10)
    cfg = fl_config(task, N=4)
    ch = generate_channels(cfg, 10)
    d = aligned(ch, cfg)
    rng = np.random.default_rng(10)
    X = rng.normal(size=(2, 6))
    eta = float(np.mean(np.sum(X ** 2, axis=1)) / 6)
    s = np.stack([modulate(X[k], d.t[k], eta) for k in range(2)])
    y = transmit_round(s, d, ch, cfg, (0, 0))
    theta = target_global(X, cfg.alpha)
    for k in range(2):
        assert np.allclose(demodulate(y[k], d.r[k], eta), theta, atol=1e-12)


def test_alignment_error_matches_mse_single_user():
    # one user, zero noise: a complex gain c gives exactly |c - alpha|^2 ||theta||^2
    cfg = SystemConfig(N=2, K=1, P0=1, sigma_b2=0, sigma_u2=0, alpha=[1], pathloss=1, S=4)
    ch = generate_channels(cfg, 11)
    rng = np.random.default_rng(11)
    d = TransceiverDesign(rand_c(rng, 2, 2), np.array([0.8 + 0.1j]), np.array([0.3 - 0.2j]), "unconstrained-digital")
    x = rng.normal(size=8)
    eta = float(x @ x / 8)
    y = transmit_round(modulate(x, d.t[0], eta)[None, :], d, ch, cfg, (0, 0))
    err = np.sum((demodulate(y[0], d.r[0], eta) - x) ** 2)
    assert err == pytest.approx(2 * cfg.S * eta * normalized_mse(d, ch, cfg)[0], rel=1e-10)


def test_target_global_examples():
    assert np.array_equal(target_global([[1.0, 2.0]], [1.0]), [1.0, 2.0])
    assert np.array_equal(target_global([[1.0, -2.0], [-1.0, 2.0]], [0.5, 0.5]), [0, 0])
    rng = np.random.default_rng(12)
    X, a = rng.normal(size=(3, 5)), rng.dirichlet(np.ones(3))
    assert np.allclose(target_global(X, a), sum(a[k] * X[k] for k in range(3)), atol=1e-15)


# ---------------------------------------------------------------- federated loop

def test_exact_recovery_matches_centralized_gd():
    task = QuadraticTask.synthetic(K=2, M=8, seed=13)
    cfg = fl_config(task)
    step = 1 / task.smoothness
    h = run_federated(task, cfg, aligned, R=20, E=1, step=step, seed=13)
    x = np.zeros(8)
    for i, rec in enumerate(h.records):
        x = centralized_gd(task, x, 1, step)
        assert np.allclose(rec["theta"], x, atol=1e-10, rtol=0)
    for k in range(2):
        assert np.allclose(h.final_params[k], centralized_gd(task, np.zeros(8), 20, step), atol=1e-10, rtol=0)


def test_single_round_is_one_gd_step():
    task = QuadraticTask.synthetic(K=2, M=4, seed=14)
    cfg = fl_config(task)
    h = run_federated(task, cfg, aligned, R=1, E=1, step=0.5, seed=14)
    assert np.allclose(h.records[0]["theta"], centralized_gd(task, np.zeros(4), 1, 0.5), atol=1e-12)


def test_run_federated_errors():
    task = QuadraticTask.synthetic(K=2, M=4, seed=15)
    cfg = fl_config(task)
    with pytest.raises(ValueError):
        run_federated(task, cfg, aligned, R=0, E=1, step=0.1, seed=0)
    with pytest.raises(ValueError):
        run_federated(task, cfg.replace(S=3), aligned, R=1, E=1, step=0.1, seed=0)

    def broken(ch, config):
        raise RuntimeError("boom")

    with pytest.raises(FlError, match="round 0"):
        run_federated(task, cfg, broken, R=2, E=1, step=0.1, seed=0)


def test_realized_error_matches_analytic_mse():
    task = QuadraticTask.synthetic(K=2, M=8, seed=16)
    cfg = fl_config(task, noise=0.05)
    hs = run_replicas(task, cfg, aligned, R=1, E=1, step=1 / task.smoothness, seed=16, replicas=1000,
                      x0=np.ones(8), record_params=False)
    realized = np.mean([h.records[0]["err_realized"] for h in hs], axis=0)
    analytic = np.array(hs[0].records[0]["mse_analytic"])
    assert np.allclose(realized, analytic, rtol=0.05)


def test_determinism_and_jsonl(tmp_path):
    task = QuadraticTask.synthetic(K=2, M=4, seed=17)
    cfg = fl_config(task, noise=0.01)
    a = run_federated(task, cfg, "identity", R=3, E=2, step=0.3, seed=5, replica=2)
    b = run_federated(task, cfg, "identity", R=3, E=2, step=0.3, seed=5, replica=2)
    assert a.records == b.records
    assert a.step_rule == "const:0.3"
    path = tmp_path / "h.jsonl"
    a.to_jsonl(path)
    back = FlHistory.from_jsonl(path)
    assert back.records == a.records
    assert back.final_loss == a.final_loss
    csv_path = tmp_path / "s.csv"
    write_summary_csv([a], csv_path)
    lines = csv_path.read_text().splitlines()
    assert lines[0].split(",") == list(SUMMARY_COLUMNS)
    assert len(lines) == 4


def test_noise_streams_independent_of_replica():
    g0 = complex_gaussian(make_rng((1, 0, 1, 0)), (5,), 1.0)
    g1 = complex_gaussian(make_rng((1, 0, 1, 1)), (5,), 1.0)
    assert not np.allclose(g0, g1)
