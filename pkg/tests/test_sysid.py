import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from mssmpc.diffnet import ContractError
from mssmpc.plant import Dataset, generate_training_data
from mssmpc.sysid import (FitReport, TrainConfig, active_windows, entropy_upper_limit, init_model, mean_log_likelihood,
                          split_windows, train, vasicek_entropy, window_nll)


def test_vasicek_gaussian_and_uniform():
    rng = np.random.default_rng(0)
    assert vasicek_entropy(rng.standard_normal(1000)) == pytest.approx(0.5 * np.log(2 * np.pi * np.e), abs=0.05)
    assert vasicek_entropy(rng.uniform(size=1000)) == pytest.approx(0.0, abs=0.05)
    # scaling by a adds log a
    x = rng.standard_normal(1000)
    assert vasicek_entropy(3 * x) - vasicek_entropy(x) == pytest.approx(np.log(3), abs=1e-9)


def test_vasicek_handles_ties_and_small_samples():
    assert np.isfinite(vasicek_entropy(np.r_[np.zeros(10), np.ones(10)]))
    with pytest.raises(ContractError):
        vasicek_entropy([1.0])


def test_window_nll_by_hand(toy):
    rng = np.random.default_rng(0)
    u = rng.uniform(0, 1, (2, 6))
    y = rng.standard_normal((2, 6))
    got = float(window_nll(toy, jnp.asarray(u), jnp.asarray(y)))
    total = []
    for b in range(2):
        z = np.asarray(toy.encode(u[b, :3], y[b, :3]))
        for k in range(3, 6):
            total.append(norm.logpdf(y[b, k], loc=z[0], scale=0.1))
            z = np.asarray(toy.step(z, u[b, k]))
    assert got == pytest.approx(-np.mean(total), rel=1e-12)


def test_split_windows_disjoint():
    d = generate_training_data(0, length=300, reps=2)
    tr, va = split_windows(d, lag=5, T_sub=10, val_fraction=0.2)
    assert tr.s.max() + 15 <= 240 and va.s.min() >= 240 and va.s.max() + 15 <= 300
    assert len(tr) == 2 * (240 - 15 + 1)


def test_active_windows_drop_absorbed_histories():
    d = generate_training_data(0, length=60, reps=2)
    d.y[1, 20:] = 0.0
    tr, _ = split_windows(d, lag=5, T_sub=10, val_fraction=0.0)
    kept = active_windows(d, tr, lag=5, threshold=1e-3)
    hist_max = np.array([np.abs(d.y[r, s:s + 5]).max() for r, s in zip(kept.r, kept.s)])
    assert np.all(hist_max > 1e-3)
    assert not np.any((kept.r == 1) & (kept.s >= 20))
    assert len(active_windows(d, tr, lag=5, threshold=0.0)) == len(tr)


def test_short_training_improves_validation(tmp_path):
    d = generate_training_data(1, length=600, reps=2)
    m0 = init_model(d, 0, n_z=2, n_g=2, lag=5, enc_hidden=(8,), f_hidden=(4,), head_hidden=(8,))
    cfg = TrainConfig(epochs_adam=60, epochs_quasi_newton=20, batch=32, T_sub=10, eval_every=10,
                      val_windows=64, qn_windows=64)
    m, rep = train(m0, d, cfg)
    assert rep.best_val_nll < rep.initial_val_nll
    assert rep.epochs_adam_run == 60 and not rep.aborted
    rep.save(tmp_path / "r.json")
    assert FitReport.load(tmp_path / "r.json").best_val_nll == rep.best_val_nll
    assert m.z_mean is not None


def test_loglik_of_exact_gaussian_model(toy):
    # outputs drawn from the model's own predictive pdf: the score equals the Gaussian log-density
    S, n = 200, toy.lag
    u = np.full(n + 5, 0.4)
    rng = np.random.default_rng(2)
    y = np.zeros((S, n + 5))
    for s in range(S):
        z = np.asarray(toy.encode(u[:n], np.zeros(n)))
        y[s, :n] = 0.0
        for k in range(n, n + 5):
            y[s, k] = z[0] + 0.1 * rng.standard_normal()
            z = np.asarray(toy.step(z, u[k]))
    ens = Dataset(u=u, y=y)
    ll = mean_log_likelihood(toy, ens, 5)
    z = np.asarray(toy.encode(u[:n], np.zeros(n)))
    ref = []
    for k in range(n, n + 5):
        ref.append(norm.logpdf(y[:, k], loc=z[0], scale=0.1))
        z = np.asarray(toy.step(z, u[k]))
    assert ll == pytest.approx(np.mean(ref), rel=1e-12)
    with pytest.raises(ContractError):
        mean_log_likelihood(toy, ens, 6)


@pytest.fixture(scope="module")
def test_ensemble():
    from mssmpc.plant import generate_test_ensemble
    return generate_test_ensemble(5, 4 + 8, S=1000)


def test_pooled_score_matches_own_score_for_identical_encodings(toy, test_ensemble):
    ens = Dataset(u=test_ensemble.u[:8], y=test_ensemble.y[:300, :8])
    assert mean_log_likelihood(toy, ens, 5) == pytest.approx(mean_log_likelihood(toy, ens, 5, pooled=False),
                                                             rel=1e-12)


@given(sigma=st.floats(0.05, 2.0), bias=st.floats(-1.0, 1.0))
def test_pooled_score_below_entropy_limit(small_model, test_ensemble, sigma, bias):
    # cross-entropy >= entropy for any predictive pdf shared by all realizations
    from mssmpc.mss_model import linear_model

    A, B = np.array([[0.5, 0.1], [0.0, 0.6]]), np.array([[1.0], [0.5]])
    m = linear_model(A, B, [1.0, 0.0, 0.0], sigma=sigma, lag=4, enc_bias=[bias, 0.0])
    limit = entropy_upper_limit(test_ensemble, 8, lag=4)
    assert mean_log_likelihood(m, test_ensemble, 8) <= limit + 0.05
    assert mean_log_likelihood(small_model, test_ensemble, 8) <= limit + 0.05


def test_entropy_upper_limit_needs_many_realizations():
    d = generate_training_data(0, length=40, reps=10)
    with pytest.raises(ContractError):
        entropy_upper_limit(d, 5, lag=15)
