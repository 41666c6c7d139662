"""Exit criteria of the toolkit, each checked at its stated tolerance.

Every test records one pass/fail line (printed in the terminal summary) before
asserting. The suite is slow (closed loops, certification); select or skip it
with ``-m acceptance`` / ``-m "not acceptance"``. Criterion 1 scores the frozen
benchmark model and its training report; set ``MSSMPC_RETRAIN=1`` to retrain
from scratch first.
"""

import json
import os
import time
from importlib import resources

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from scipy.stats import norm

from mssmpc import cases
from mssmpc.diffnet import ParamVector, grad_wrt_params, init_mlp, jacobian_wrt_input, mlp_forward, norm_cdf
from mssmpc.gmm import ChanceSpec, DiagGMM, kl_mc, kl_terms, prob_leq, sample, scalar_gmm
from mssmpc.harness import monte_carlo, steady_state_pdf
from mssmpc.mss_model import build_model, linear_model
from mssmpc.plant import generate_test_ensemble
from mssmpc.reachability import certify_roi, dense_grid_check
from mssmpc.setpoint import Polytope, Setpoint
from mssmpc.smpc import SetpointMPC, ocp_setpoint
from mssmpc.sysid import FitReport, entropy_upper_limit, mean_log_likelihood, train_benchmark, vasicek_entropy
from mssmpc.terminal import design, verify_decrease

from conftest import TOY_A, TOY_B, TOY_C, record

pytestmark = [pytest.mark.slow, pytest.mark.acceptance]

RUNS, STEPS = 10, 500


# ---------------------------------------------------------------------------
# shared benchmark objects


@pytest.fixture(scope="session")
def bench():
    return cases.load_benchmark_model()


@pytest.fixture(scope="session")
def case1(bench):
    return cases.case1(bench)


@pytest.fixture(scope="session")
def case2(bench):
    return cases.case2(bench)


@pytest.fixture(scope="session")
def case2_second(bench, case2):
    return cases.case2_second(bench, case2)


@pytest.fixture(scope="session")
def toy_ctrl():
    toy = linear_model(TOY_A, TOY_B, TOY_C, sigma=0.1, lag=3)
    U = Polytope.box([0.0], [5.0])
    z_bar = np.linalg.solve(np.eye(2) - TOY_A, TOY_B)[:, 0] * 0.5
    sp = Setpoint(z_bar, np.array([0.5]), 0.0, 0.0, True, 2)
    td = design(toy, sp, np.eye(2), np.eye(1), ChanceSpec(), U, n_samples=2000)
    return SetpointMPC(toy, sp, td, 3, np.eye(2), np.eye(1), ChanceSpec(), U)


@pytest.fixture(scope="session")
def toy_certificate(toy_ctrl):
    z_bar = toy_ctrl.z_bar
    t0 = time.perf_counter()
    cert = certify_roi(toy_ctrl, z_bar - 4.0, z_bar + 4.0)
    return cert, time.perf_counter() - t0


def _mean_solve_time(records):
    """Mean per-step solve time; the first control step of each run carries JIT compilation."""
    times = [r.solve_time[r.lag + 1:] for r in records if r.error is None and r.y.size]
    return float(np.mean(np.concatenate(times))) if times else float("inf")


# ---------------------------------------------------------------------------
# 1. identification quality


def test_c01_identification_quality(bench):
    t_train = None
    if os.environ.get("MSSMPC_RETRAIN") == "1":
        t0 = time.perf_counter()
        model, rep = train_benchmark(0)
        t_train = time.perf_counter() - t0
        epochs = rep.epochs_adam_run
    else:
        model = bench
        doc = json.loads((resources.files("mssmpc") / "data" / "benchmark_fit.json").read_text())
        rep = FitReport.from_json(doc)
        t_train, epochs = rep.wall_clock, rep.epochs_adam_run
    n_bar = 50
    lls, limits = [], []
    for seed in range(100, 105):
        ens = generate_test_ensemble(seed, model.lag + n_bar, S=1000)
        lls.append(mean_log_likelihood(model, ens, n_bar))
        limits.append(entropy_upper_limit(ens, n_bar, lag=model.lag))
    ll, limit = float(np.mean(lls)), float(np.mean(limits))
    ok_level = ll >= 0.75
    ok_gap = abs(limit - ll) <= 0.20
    ok_time = t_train <= 45 * 60 and epochs >= 2000
    ok = ok_level and ok_gap and ok_time
    record(1, ok, f"LL {ll:.3f} (>= 0.75 {ok_level}); upper limit {limit:.3f}, gap {limit - ll:.3f} "
                  f"(<= 0.20 {ok_gap}); training {t_train:.0f} s, {epochs} Adam epochs ({ok_time})")
    assert ok


# ---------------------------------------------------------------------------
# 2. entropy estimator


def test_c02_vasicek_entropy():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    h_n = vasicek_entropy(rng.standard_normal(1000))
    h_u = vasicek_entropy(rng.uniform(size=1000))
    dt = time.perf_counter() - t0
    err_n = abs(h_n - 0.5 * np.log(2 * np.pi * np.e))
    err_u = abs(h_u)
    ok = err_n <= 0.05 and err_u <= 0.05 and dt < 10
    record(2, ok, f"normal error {err_n:.4f}; uniform error {err_u:.4f}; {dt:.3f} s")
    assert ok


# ---------------------------------------------------------------------------
# 3. mixture CDF


def test_c03_gmm_cdf_against_monte_carlo():
    rng = np.random.default_rng(3)
    n = 10**6
    t0 = time.perf_counter()
    worst = 0.0
    failures = 0
    for _ in range(50):
        k = int(rng.integers(1, 6))
        w = rng.dirichlet(np.ones(k))
        mu = rng.normal(0.0, 2.0, k)
        sd = rng.uniform(0.2, 2.0, k)
        # threshold at a random quantile of a pilot sample keeps p away from 0 and 1
        labels = rng.choice(k, size=n, p=w)
        ys = rng.normal(mu[labels], sd[labels])
        y_max = float(np.quantile(ys[:1000], rng.uniform(0.05, 0.95)))
        p = float(prob_leq(scalar_gmm(w, mu, sd), jnp.array([y_max])))
        freq = float(np.mean(ys <= y_max))
        tol = 3 * np.sqrt(p * (1 - p) / n)
        worst = max(worst, abs(freq - p) / tol)
        failures += abs(freq - p) > tol
    dt = time.perf_counter() - t0
    ok = failures == 0 and dt < 60
    record(3, ok, f"{failures}/50 mixtures outside 3 sigma; worst |freq - p| / tol {worst:.2f}; {dt:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 4. KL estimator


def _kl_gauss(m1, s1, m2, s2):
    return np.log(s2 / s1) + (s1**2 + (m1 - m2) ** 2) / (2 * s2**2) - 0.5


def test_c04_kl_estimator():
    M = 10**5
    rng = np.random.default_rng(4)
    pairs = [(0.0, 1.0, 1.0, 2.0), (0.5, 0.3, -0.5, 1.0), (2.0, 1.5, 2.0, 1.0), (-1.0, 0.5, 0.0, 0.8),
             (0.0, 2.0, 3.0, 2.5)]
    errs = []
    for m1, s1, m2, s2 in pairs:
        ys = rng.normal(m1, s1, (M, 1))
        est = kl_mc(ys, norm.logpdf(ys[:, 0], m1, s1), scalar_gmm([1.0], [m2], [s2]))
        errs.append(abs(est.value - _kl_gauss(m1, s1, m2, s2)))
    g = scalar_gmm([0.3, 0.7], [-1.0, 1.5], [0.5, 0.8])
    ys = sample(g, M, rng)
    log_ref = np.log(0.3 * norm.pdf(ys[:, 0], -1.0, 0.5) + 0.7 * norm.pdf(ys[:, 0], 1.5, 0.8))
    self_kl = abs(kl_mc(ys, log_ref, g).value)
    ok = max(errs) <= 0.05 and self_kl <= 4 / np.sqrt(M)
    record(4, ok, f"max Gaussian error {max(errs):.4f} over {len(pairs)} pairs; self-KL {self_kl:.2e} "
                  f"(bound {4 / np.sqrt(M):.2e})")
    assert ok


# ---------------------------------------------------------------------------
# 5. autodiff against central differences


def _fd(f, x, h=1e-6):
    x = np.asarray(x, float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h * max(1.0, abs(x[i]))
        cols.append((np.atleast_1d(f(x + e)) - np.atleast_1d(f(x - e))) / (2 * e[i]))
    return np.stack(cols, axis=-1)


def _rel(a, b):
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def test_c05_autodiff_against_finite_differences():
    rng = np.random.default_rng(5)
    cases_per_class = 100
    worst = {}

    # scalar special functions
    f_cdf = jax.jit(lambda x: norm_cdf(x))
    worst["norm_cdf"] = max(_rel(jacobian_wrt_input(lambda x: norm_cdf(x), x), _fd(lambda v: np.asarray(f_cdf(v)), x))
                            for x in rng.uniform(-4, 4, (cases_per_class, 1)))

    # network input Jacobians
    errs = []
    for _ in range(cases_per_class):
        net = init_mlp(rng, [3, 6, 2])
        x = rng.standard_normal(3)
        fwd = jax.jit(lambda v, net=net: mlp_forward(net, v))
        errs.append(_rel(jacobian_wrt_input(fwd, x), _fd(lambda v: np.asarray(fwd(v)), x)))
    worst["mlp_jacobian"] = max(errs)

    # parameter gradients of a network loss
    errs = []
    for _ in range(cases_per_class):
        pv = ParamVector.from_nets({"f": init_mlp(rng, [2, 4, 1])})
        xs = rng.standard_normal((5, 2))

        def loss(flat, pv=pv, xs=xs):
            return jnp.sum(jnp.tanh(mlp_forward(pv.to_nets(flat)["f"], xs)) ** 2)

        lj = jax.jit(loss)
        errs.append(_rel(grad_wrt_params(loss, pv).grad, _fd(lambda f: float(lj(jnp.asarray(f))), pv.flat)[0]))
    worst["param_gradient"] = max(errs)

    # meta-state transition Jacobians of a random model
    model = build_model(np.random.default_rng(50), n_z=3, n_g=3, lag=4, enc_hidden=(6,), f_hidden=(6,),
                        head_hidden=(6,))
    step = jax.jit(lambda zu: model.step(zu[:3], zu[3:]))
    errs = [_rel(jacobian_wrt_input(lambda zu: model.step(zu[:3], zu[3:]), zu), _fd(lambda v: np.asarray(step(v)), zu))
            for zu in np.column_stack([rng.standard_normal((cases_per_class, 3)),
                                       rng.uniform(0, 5, cases_per_class)])]
    worst["model_step"] = max(errs)

    # chance probability with respect to mixture parameters
    def cdf_of(theta):
        w = jax.nn.softmax(theta[:3])
        return prob_leq(DiagGMM(w, theta[3:6, None], jnp.exp(theta[6:9])[:, None]), jnp.array([0.3]))

    cj = jax.jit(cdf_of)
    errs = [_rel(grad_wrt_params(cdf_of, th).grad, _fd(lambda v: float(cj(v)), th)[0])
            for th in rng.normal(0, 0.7, (cases_per_class, 9))]
    worst["chance_probability"] = max(errs)

    # Monte-Carlo KL with respect to mixture parameters
    ys = jnp.asarray(rng.normal(0.5, 1.0, (200, 1)))
    log_p = jnp.asarray(norm.logpdf(np.asarray(ys[:, 0]), 0.5, 1.0))

    def kl_of(theta):
        w = jax.nn.softmax(theta[:2])
        return kl_terms(log_p, DiagGMM(w, theta[2:4, None], jnp.exp(theta[4:6])[:, None]), ys)

    kj = jax.jit(kl_of)
    errs = [_rel(grad_wrt_params(kl_of, th).grad, _fd(lambda v: float(kj(v)), th)[0])
            for th in rng.normal(0, 0.5, (cases_per_class, 6))]
    worst["kl_estimate"] = max(errs)

    ok = max(worst.values()) <= 1e-5
    record(5, ok, "; ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (bound 1e-5, {cases_per_class} each)")
    assert ok


# ---------------------------------------------------------------------------
# 6. terminal design


def _dare_residual(td):
    A, B, P, R = td.A, td.B, td.P, td.R
    Qe = td.Q + td.eps * np.eye(td.Q.shape[0])
    S = R + B.T @ P @ B
    return float(np.linalg.norm(A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(S, B.T @ P @ A) + Qe - P))


def test_c06_terminal_design(bench, case1, case2):
    t0 = time.perf_counter()
    parts, ok = [], True
    for c in (case1, case2):
        td = c.terminal
        res = _dare_residual(td)
        passed, worst = verify_decrease(bench, td, c.setpoint, td.Q, td.R, 10_000, c.spec, cases.U_BOX, seed=11)
        ok &= res <= 1e-9 and passed
        parts.append(f"case {c.name}: DARE residual {res:.1e}, decrease {passed} (worst {worst:.1e}), "
                     f"gamma {td.gamma:.3g}, u_bar {float(c.setpoint.u[0]):.3f}")
    g1 = case1.terminal.gamma
    ok_band = 0.05 <= g1 <= 0.5
    ok = ok and ok_band
    dt = time.perf_counter() - t0
    record(6, ok, "; ".join(parts) + f"; case-1 gamma in [0.05, 0.5] {ok_band}; {dt:.0f} s checks")
    assert ok


# ---------------------------------------------------------------------------
# 7. case 1 closed loop


def test_c07_case1_closed_loop(bench, case1):
    t0 = time.perf_counter()
    recs = monte_carlo(lambda i: case1.policy(), bench.lag, RUNS, STEPS, seed=7)
    wall = time.perf_counter() - t0
    ss = steady_state_pdf(recs, y_max=case1.spec.y_max)
    modes = np.asarray(ss.summary["modes"])
    ok_modes = modes.size == 2 and all(np.any(np.abs(modes - t) <= 0.1) for t in (2.5, 2.9))
    p = ss.summary["p_leq_y_max"]
    t_step = _mean_solve_time(recs)
    errors = sum(r.error is not None for r in recs)
    ok = ok_modes and p >= 0.85 and t_step <= 0.5 and wall < 30 * 60 and errors == 0
    record(7, ok, f"modes {np.round(modes, 3).tolist()} (two near 2.5 and 2.9: {ok_modes}); "
                  f"P(y <= 3.5) {p:.3f}; mean {ss.summary['mean']:.3f}; solve {1e3 * t_step:.0f} ms/step; "
                  f"{wall / 60:.1f} min; failed runs {errors}")
    assert ok


# ---------------------------------------------------------------------------
# 8. case 2 closed loop and N = 1 brute force


def _one_step_grid(c: SetpointMPC, z0, us):
    """Cost and feasibility of the one-step OCP on an input grid, evaluated directly."""
    m, td = c.model, c.terminal

    def one(u):
        u = jnp.atleast_1d(u)
        z1 = m.step(jnp.asarray(z0), u)
        g = m.output_pdf(jnp.asarray(z0), u)
        return z1, g.w, g.mu[:, 0], g.sigma[:, 0]

    z1, w, mu, sd = (np.asarray(a) for a in jax.jit(jax.vmap(one))(jnp.asarray(us)))
    d1 = z1 - c.z_bar
    dz0 = np.asarray(z0) - c.z_bar
    vf = np.einsum("ki,ij,kj->k", d1, td.P, d1)
    J = dz0 @ c.Q @ dz0 + c.R[0, 0] * (us - c.u_bar[0]) ** 2 + vf
    p = np.sum(w * norm.cdf((c.spec.y_max - mu) / sd), axis=1)
    feas = (vf <= td.gamma) & (p >= c.spec.p_max)
    return J, feas


def _brute_force_check(c: SetpointMPC, rng, n_states=20, n_grid=10_000):
    lo, hi = c.U.bounding_box()
    us = np.linspace(lo[0], hi[0], n_grid)
    one = SetpointMPC(c.model, c.setpoint, c.terminal, 1, c.Q, c.R, c.spec, c.U)
    A, B, P = c.terminal.A, c.terminal.B, c.terminal.P
    mismatches, n_feasible = 0, 0
    for _ in range(n_states):
        # perturbations scaled so the linearized one-step image sits near the terminal boundary
        d = rng.standard_normal(c.z_bar.size)
        scale = np.sqrt(max(c.terminal.gamma, 1e-12) / max(float((A @ d) @ P @ (A @ d)), 1e-300))
        z0 = c.z_bar + d * scale * rng.uniform(0.0, 2.0)
        J, feas = _one_step_grid(one, z0, us)
        one.reset()
        st = ocp_setpoint(one, z0)
        if feas.any():
            n_feasible += 1
            i = int(np.argmin(np.where(feas, J, np.inf)))
            cell = float(np.max(np.abs(np.diff(J[max(i - 1, 0):i + 2])))) + 1e-9
            if st.status not in ("optimal", "candidate") or abs(st.J - J[i]) > cell:
                mismatches += 1
        elif st.status in ("optimal", "candidate"):
            # the feasible set may be narrower than one grid cell; the solution must verify directly
            _, fs = _one_step_grid(one, z0, np.atleast_1d(st.u_seq[0]))
            if not (fs[0] or _near_feasible(one, z0, st.u_seq[0])):
                mismatches += 1
    return mismatches, n_feasible


def _near_feasible(c, z0, u, tol=1e-8):
    z1 = np.asarray(c.model.step(jnp.asarray(z0), jnp.atleast_1d(u)))
    d = z1 - c.z_bar
    g = c.model.output_pdf(jnp.asarray(z0), jnp.atleast_1d(u))
    p = float(np.sum(np.asarray(g.w) * norm.cdf((c.spec.y_max - np.asarray(g.mu[:, 0])) / np.asarray(g.sigma[:, 0]))))
    return d @ c.terminal.P @ d <= c.terminal.gamma + tol and p >= c.spec.p_max - tol


def test_c08_case2_closed_loop(bench, case2, case2_second):
    t0 = time.perf_counter()
    recs = monte_carlo(lambda i: case2.policy(), bench.lag, RUNS, STEPS, seed=8)
    wall = time.perf_counter() - t0
    ss = steady_state_pdf(recs, y_max=case2.spec.y_max)
    mean, p = ss.summary["mean"], ss.summary["p_leq_y_max"]
    ok_mean, ok_p = abs(mean - 1.0) <= 0.05, p >= 0.75
    target = case2 if case2.terminal.gamma > 0 or case2_second is None else case2_second
    mism, n_feas = _brute_force_check(target.controller, np.random.default_rng(8))
    ok_grid = mism == 0
    ok = ok_mean and ok_p and ok_grid
    record(8, ok, f"steady mean {mean:.3f} (|mean - 1| <= 0.05 {ok_mean}); P(y <= 1.4) {p:.3f} ({ok_p}); "
                  f"N=1 grid mismatches {mism}/20 ({n_feas} grid-feasible states, gamma "
                  f"{target.terminal.gamma:.2g}); solve {1e3 * _mean_solve_time(recs):.0f} ms/step; "
                  f"{wall / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------------------
# 9. reachability soundness


def _grid_violations(ctrl, cert):
    return sum(len(dense_grid_check(ctrl, r, per_axis=5, evaluator=cert._evaluator)) for r in cert.passed)


def _overlap(a, b):
    return any(np.all(ra.lo < rb.hi) and np.all(rb.lo < ra.hi) for ra in a.passed for rb in b.passed)


def test_c09_reachability_soundness(bench, case2, case2_second, toy_certificate, toy_ctrl):
    t0 = time.perf_counter()
    toy_cert, t_toy = toy_certificate
    bad_toy = _grid_violations(toy_ctrl, toy_cert)
    certs = []
    half = 0.5 * np.asarray(bench.z_std)
    for c in (case2, case2_second):
        if c is None:
            continue
        # the refinement budget bounds the runtime when little or nothing passes
        certs.append(certify_roi(c.controller, c.setpoint.z - half, c.setpoint.z + half, max_rects=150))
    bad_bench = sum(_grid_violations(c.controller, cert) for c, cert in zip((case2, case2_second), certs))
    n_passed = [len(cert.passed) for cert in certs]
    nonempty = len(certs) == 2 and sum(n_passed) > 0
    disjoint = len(certs) < 2 or not _overlap(*certs)
    dt = time.perf_counter() - t0
    ok = bad_toy == 0 and bad_bench == 0 and len(toy_cert.passed) > 0 and nonempty and disjoint and dt < 30 * 60
    record(9, ok, f"toy: {len(toy_cert.passed)} passed rectangles, {bad_toy} grid violations, {t_toy:.0f} s; "
                  f"benchmark: passed {n_passed} (complete {[c.complete for c in certs]}), {bad_bench} grid "
                  f"violations, union nonempty {nonempty}, disjoint {disjoint}; {dt / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------------------
# 10. tracking


def _monotone_after(offset, switches, horizon=50, rtol=1e-6):
    worst = 0.0
    for s in switches:
        v = offset[s:s + horizon]
        v = v[np.isfinite(v)]
        inc = np.diff(v) - rtol * np.maximum(1.0, np.abs(v[:-1]))
        worst = max(worst, float(np.max(inc, initial=-np.inf)))
    return worst <= 0, worst


def test_c10_tracking(bench):
    c3 = cases.case3(bench)
    c4 = cases.case4(bench)
    t0 = time.perf_counter()
    r3 = monte_carlo(lambda i: c3.policy(), bench.lag, 1, c3.steps, seed=10)[0]
    r4 = monte_carlo(lambda i: c4.policy(), bench.lag, 1, c4.steps, seed=11)[0]
    wall = time.perf_counter() - t0
    assert r3.error is None and r4.error is None, (r3.error, r4.error)
    sw3 = [bench.lag, cases.CASE3_SWITCH]
    sw4 = [bench.lag, 200, 400, 600, 800, 1000]
    mono3, w3 = _monotone_after(r3.offset, sw3)
    mono4, w4 = _monotone_after(r4.offset, sw4)
    a, b = cases.CASE4_INFEASIBLE
    y_win = r4.y[a + 1:b + 1]
    p_win = float(np.mean(y_win <= cases.CASE4_Y_MAX))
    # saturation: the predicted chance margin of the applied input is active on most of the window
    active = float(np.mean(r4.margins[a:b] >= -0.02))
    t_step = _mean_solve_time([r3, r4])
    statuses = {s: r3.status.count(s) + r4.status.count(s) for s in set(r3.status) | set(r4.status)}
    ok = mono3 and mono4 and p_win >= 0.85 and active >= 0.8 and t_step <= 1.0
    record(10, ok, f"V_r monotone after switches: case 3 {mono3} (worst rise {w3:.1e}), case 4 {mono4} "
                   f"(worst rise {w4:.1e}); window P(y <= 3) {p_win:.3f}; chance margin active on "
                   f"{100 * active:.0f}% of window; solve {1e3 * t_step:.0f} ms/step; statuses {statuses}; "
                   f"{wall / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------------------
# 11. descent property


def test_c11_descent_property(toy_certificate, toy_ctrl):
    cert, _ = toy_certificate
    assert cert.passed
    rng = np.random.default_rng(12)
    c = toy_ctrl
    worst, n_checked = -np.inf, 0
    for _ in range(20):
        r = cert.passed[int(rng.integers(len(cert.passed)))]
        z = rng.uniform(r.lo, r.hi)
        c.reset()
        st = ocp_setpoint(c, z)
        for _ in range(30):
            if st.status != "optimal":
                break
            u = st.u_seq[0]
            ell = c.stage_cost(z, u)
            z = np.asarray(c.model.step(z, u))
            nxt = ocp_setpoint(c, z)
            if nxt.status in ("optimal", "candidate"):
                worst = max(worst, nxt.J - (st.J - ell))
                n_checked += 1
            st = nxt
    ok = n_checked > 0 and worst <= 1e-6
    record(11, ok, f"{n_checked} optimal steps over 20 rollouts on the linear toy; worst "
                   f"J(z+) - J(z) + l {worst:.1e} (bound 1e-6)")
    assert ok
