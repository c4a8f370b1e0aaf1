"""Per-block estimation: extended scores, the quadratic objective, fitting."""

import dataclasses

import numpy as np
import pytest
import scipy.linalg

from scmfit.errors import ConfigurationError, DataError, NumericError
from scmfit.model import BasisSpec, BlockModel, Link
from scmfit.partition import LongData, Partition, from_balanced_arrays, split
from scmfit.qif import (
    Correlation,
    _r2_apply,
    block_fit_from_json,
    block_fit_to_json,
    chol_ridge,
    correlation_basis_matrix,
    estimate_dispersion,
    evaluate_block,
    fit_block,
    qif_objective,
)
from scmfit.simulate import generate, make_scenario

LINEAR = BlockModel(basis=BasisSpec(degrees=(1,)), link=Link.IDENTITY, n_scalar=0)


def _one_block(data: LongData, edges=(-15.0, 15.0)):
    (block,) = split(data, Partition(tuple(edges)))
    return block


def _linear_data(n=40, m=6, seed=0, sigma=1.0, link=Link.IDENTITY):
    rng = np.random.default_rng(seed)
    times = np.linspace(-15.0, 15.0, m)
    X = np.ones((n, m, 1))
    Z = np.empty((n, m, 0))
    s = (times + 15.0) / 30.0
    lin = 1.0 + 0.5 * s
    if link is Link.IDENTITY:
        y = lin + sigma * rng.standard_normal((n, m))
    else:
        y = rng.poisson(np.exp(lin), (n, m)).astype(float)
    return from_balanced_arrays(times=times, y=y, X=X, Z=Z)


def test_correlation_parse_and_bases():
    assert Correlation.parse(" AR1 ") is Correlation.AR1
    assert Correlation.INDEPENDENCE.n_bases == 1
    assert Correlation.EXCHANGEABLE.n_bases == 2
    with pytest.raises(ConfigurationError):
        Correlation.parse("toeplitz")


def test_basis_matrices():
    np.testing.assert_array_equal(
        correlation_basis_matrix(Correlation.AR1, 3, 2),
        [[0, 1, 0], [1, 0, 1], [0, 1, 0]],
    )
    np.testing.assert_array_equal(
        correlation_basis_matrix(Correlation.EXCHANGEABLE, 3, 2),
        np.ones((3, 3)) - np.eye(3),
    )
    np.testing.assert_array_equal(correlation_basis_matrix(Correlation.AR1, 4, 1), np.eye(4))
    with pytest.raises(DataError):
        correlation_basis_matrix(Correlation.INDEPENDENCE, 3, 2)
    with pytest.raises(DataError):
        correlation_basis_matrix(Correlation.AR1, 3, 3)


@pytest.mark.parametrize("corr", [Correlation.AR1, Correlation.EXCHANGEABLE])
def test_r2_apply_matches_dense_matrix(corr):
    rng = np.random.default_rng(3)
    v = rng.standard_normal((5, 2))
    R2 = correlation_basis_matrix(corr, 5, 2)
    np.testing.assert_allclose(_r2_apply(corr, v), R2 @ v, atol=1e-14)


@pytest.mark.parametrize("corr", [Correlation.INDEPENDENCE, Correlation.AR1, Correlation.EXCHANGEABLE])
@pytest.mark.parametrize("link", [Link.IDENTITY, Link.LOG])
def test_scores_match_dense_brute_force(corr, link):
    # oracle: per-subject dense R_w algebra, no batching shortcuts
    block = _one_block(_linear_data(n=12, m=5, seed=4, link=link))
    model = dataclasses.replace(LINEAR, link=link)
    theta = np.array([0.8, 0.6])
    phi = 2.5 if link is Link.IDENTITY else 1.0
    ev = evaluate_block(theta, block, corr, model, dispersion=phi)
    design = block.design(model)
    k, w = model.dim_block, corr.n_bases
    scores = np.zeros((block.n_present, w * k))
    jac = np.zeros((w * k, k))
    for i in range(block.n_present):
        sl = block.rows(i)
        D, y = design[sl], block.y[sl]
        lin = D @ theta
        mu = lin if link is Link.IDENTITY else np.exp(lin)
        A = np.eye(len(y)) * phi if link is Link.IDENTITY else np.diag(mu)
        half = np.diag(np.sqrt(np.diag(A)))
        half_inv = np.diag(1.0 / np.sqrt(np.diag(A)))
        # d mu / d theta = A^e D with e = 0 (identity) or 1 (log)
        dmu = D if link is Link.IDENTITY else np.diag(mu) @ D
        for wi in range(w):
            Rw = correlation_basis_matrix(corr, len(y), wi + 1)
            rows = slice(wi * k, (wi + 1) * k)
            scores[i, rows] = dmu.T @ half_inv @ Rw @ half_inv @ (y - mu)
            jac[rows] -= dmu.T @ half_inv @ Rw @ half_inv @ dmu
    np.testing.assert_allclose(ev.scores, scores, atol=1e-10)
    np.testing.assert_allclose(ev.gbar, scores.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(ev.jac, jac / block.n_present, atol=1e-10)
    np.testing.assert_allclose(ev.C, scores.T @ scores / block.n_present, atol=1e-10)


def test_balanced_and_ragged_paths_agree():
    block = _one_block(_linear_data(n=10, m=4, seed=9))
    assert block.balanced

    class _ForcedRagged(type(block)):
        balanced = property(lambda self: False)

    ragged = _ForcedRagged(
        **{f.name: getattr(block, f.name) for f in dataclasses.fields(block) if f.name != "_design_cache"}
    )
    for corr in Correlation:
        a = evaluate_block(np.array([1.0, 0.5]), block, corr, LINEAR, 2.0)
        b = evaluate_block(np.array([1.0, 0.5]), ragged, corr, LINEAR, 2.0)
        # einsum batching reorders sums, so agreement is to roundoff only
        np.testing.assert_allclose(a.scores, b.scores, atol=1e-13)
        np.testing.assert_allclose(a.jac, b.jac, atol=1e-13)


def test_identity_jacobian_matches_central_differences():
    # identity link: gbar is linear in theta, so FD recovers jac exactly
    block = _one_block(_linear_data(n=15, m=5, seed=1))
    theta = np.array([0.3, -0.2])
    ev = evaluate_block(theta, block, Correlation.AR1, LINEAR, 1.7)
    h = 1e-6
    fd = np.empty_like(ev.jac)
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        up = evaluate_block(theta + e, block, Correlation.AR1, LINEAR, 1.7).gbar
        dn = evaluate_block(theta - e, block, Correlation.AR1, LINEAR, 1.7).gbar
        fd[:, j] = (up - dn) / (2 * h)
    np.testing.assert_allclose(ev.jac, fd, rtol=1e-6, atol=1e-9)


def test_log_jacobian_matches_central_differences_at_zero_residual():
    # the residual-only convention coincides with the full derivative
    # exactly where y = mu, which pins down the log-link weighting
    block = _one_block(_linear_data(n=8, m=4, seed=2))
    model = dataclasses.replace(LINEAR, link=Link.LOG)
    theta = np.array([0.4, 0.3])
    exact = from_balanced_arrays(
        times=block.times[block.rows(0)],
        y=np.exp(block.design(model) @ theta).reshape(8, 4),
        X=np.ones((8, 4, 1)),
        Z=np.empty((8, 4, 0)),
    )
    zblock = _one_block(exact)
    ev = evaluate_block(theta, zblock, Correlation.AR1, model)
    assert np.max(np.abs(ev.gbar)) < 1e-12
    h = 1e-6
    fd = np.empty_like(ev.jac)
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        up = evaluate_block(theta + e, zblock, Correlation.AR1, model).gbar
        dn = evaluate_block(theta - e, zblock, Correlation.AR1, model).gbar
        fd[:, j] = (up - dn) / (2 * h)
    np.testing.assert_allclose(ev.jac, fd, rtol=1e-6, atol=1e-8)


def test_objective_value_and_fixed_C_gradient():
    block = _one_block(_linear_data(n=20, m=5, seed=6))
    theta = np.array([1.2, 0.1])
    value, grad, C = qif_objective(theta, block, Correlation.EXCHANGEABLE, LINEAR, 1.3)
    assert value >= 0.0
    # independent recomputation of the quadratic form
    ev = evaluate_block(theta, block, Correlation.EXCHANGEABLE, LINEAR, 1.3)
    cho, ridge = chol_ridge(ev.C)
    expect = block.n_present * ev.gbar @ np.linalg.solve(ev.C + ridge * np.eye(len(ev.gbar)), ev.gbar)
    assert abs(value - expect) < 1e-8 * max(1.0, abs(expect))
    # FD of the frozen-C form N gbar(theta)' (C0+ridge)^{-1} gbar(theta)
    cinv = lambda v: scipy.linalg.cho_solve(cho, v)  # noqa: E731
    n = block.n_present

    def frozen(th):
        g = evaluate_block(th, block, Correlation.EXCHANGEABLE, LINEAR, 1.3).gbar
        return n * g @ cinv(g)

    h = 1e-6
    fd = np.array(
        [
            (frozen(theta + h * np.eye(2)[j]) - frozen(theta - h * np.eye(2)[j])) / (2 * h)
            for j in range(2)
        ]
    )
    np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-7)


def test_objective_zero_on_noiseless_data():
    data = _linear_data(n=10, m=5, seed=0, sigma=0.0)
    block = _one_block(data)
    value, grad, _ = qif_objective(np.array([1.0, 0.5]), block, Correlation.AR1, LINEAR)
    assert abs(value) < 1e-18
    assert np.max(np.abs(grad)) < 1e-12


def test_single_block_independence_identity_is_wls():
    data = _linear_data(n=30, m=6, seed=11, sigma=2.0)
    block = _one_block(data)
    fit = fit_block(block, Correlation.INDEPENDENCE, LINEAR)
    assert fit.converged
    design = block.design(LINEAR)
    ols, *_ = np.linalg.lstsq(design, block.y, rcond=None)
    np.testing.assert_allclose(fit.theta, ols, atol=1e-8)


def test_broken_stick_block_recovery():
    scn = make_scenario("broken-stick", n_subjects=400)
    blocks = split(generate(scn, seed=77, rep=0), Partition(scn.edges))
    model = BlockModel(basis=BasisSpec(degrees=(1,)), link=Link.IDENTITY, n_scalar=0)
    fit = fit_block(blocks[0], Correlation.EXCHANGEABLE, model)
    assert fit.converged
    # left block of |t| on [-15, 0): value 15 at the left edge, drop of 15
    np.testing.assert_allclose(fit.theta, [15.0, -15.0], atol=1.0)
    assert fit.objective >= 0.0


def test_fit_from_truth_converges_quickly():
    scn = make_scenario("broken-stick", n_subjects=300)
    blocks = split(generate(scn, seed=5, rep=1), Partition(scn.edges))
    model = BlockModel(basis=BasisSpec(degrees=(1,)), link=Link.IDENTITY, n_scalar=0)
    fit = fit_block(blocks[1], Correlation.EXCHANGEABLE, model, init=np.array([0.0, 15.0]))
    assert fit.converged
    assert fit.iterations <= 3


def test_fit_does_not_worsen_initial_objective():
    # descent check with a small relative slack: near the root the
    # objective can wobble at O(1/N^2) while the score norm still falls
    data = _linear_data(n=25, m=6, seed=13, sigma=3.0)
    block = _one_block(data)
    start, *_ = np.linalg.lstsq(block.design(LINEAR), block.y, rcond=None)
    v0, _, _ = qif_objective(start, block, Correlation.AR1, LINEAR, 9.0)
    fit = fit_block(block, Correlation.AR1, LINEAR)
    assert fit.objective <= v0 * (1 + 1e-8) + 1e-12


def test_fit_block_is_deterministic():
    data = _linear_data(n=20, m=5, seed=21, sigma=1.5)
    a = fit_block(_one_block(data), Correlation.AR1, LINEAR)
    b = fit_block(_one_block(data), Correlation.AR1, LINEAR)
    np.testing.assert_array_equal(a.theta, b.theta)
    np.testing.assert_array_equal(a.C, b.C)
    assert a.objective == b.objective


def test_block_fit_json_round_trip():
    fit = fit_block(_one_block(_linear_data(n=10, m=4, seed=30)), Correlation.AR1, LINEAR)
    clone = block_fit_from_json(block_fit_to_json(fit))
    np.testing.assert_array_equal(clone.theta, fit.theta)
    np.testing.assert_array_equal(clone.scores, fit.scores)
    np.testing.assert_array_equal(clone.jac, fit.jac)
    np.testing.assert_array_equal(clone.subject_index, fit.subject_index)
    assert clone.objective == fit.objective
    assert clone.converged == fit.converged
    assert clone.dispersion == fit.dispersion


def test_too_few_subjects_is_data_error():
    data = _linear_data(n=1, m=5, seed=2)
    with pytest.raises(DataError):
        fit_block(_one_block(data), Correlation.AR1, LINEAR)


def test_dispersion_estimate():
    data = _linear_data(n=50, m=6, seed=8, sigma=0.0)
    block = _one_block(data)
    theta = np.array([1.0, 0.5])
    assert estimate_dispersion(block, LINEAR, theta) == 1.0  # noiseless fallback
    noisy = _one_block(_linear_data(n=500, m=6, seed=8, sigma=2.0))
    start, *_ = np.linalg.lstsq(noisy.design(LINEAR), noisy.y, rcond=None)
    phi = estimate_dispersion(noisy, LINEAR, start)
    assert 3.0 < phi < 5.0  # around sigma^2 = 4


def test_chol_ridge_properties():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((4, 4))
    C = A @ A.T
    cho, ridge = chol_ridge(C)
    x = rng.standard_normal(4)
    np.testing.assert_allclose(
        scipy.linalg.cho_solve(cho, (C + ridge * np.eye(4)) @ x), x, atol=1e-10
    )
    cho0, ridge0 = chol_ridge(np.zeros((3, 3)))
    assert ridge0 > 0  # absolute fallback for a zero trace
    with pytest.raises(NumericError):
        chol_ridge(np.array([[np.nan, 0.0], [0.0, 1.0]]))
