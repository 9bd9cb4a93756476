import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lilad.data import Context
from lilad.errors import ContractError, EnforcementError
from lilad.models import ArchConfig, Conditioned, IclDynamicsModel, IclLyapunovModel
from lilad.stability import (MAX_ITER, Branch, attenuate_batch, attenuated_predict, compute_gamma,
                             compute_gamma_batch, decrease_condition, expected_iterations, h_function)


def V_sq(y):
    return (np.asarray(y) ** 2).sum(axis=-1)


def G_scale(a):
    return lambda x: a * np.asarray(x)


BETA = 0.95


def test_decrease_condition_stubs():
    assert decrease_condition(G_scale(0.5), V_sq, np.array([1.0])) == pytest.approx(0.25 - 0.95)
    assert decrease_condition(G_scale(0.5), V_sq, np.array([1.0])) == pytest.approx(-0.7)
    assert decrease_condition(G_scale(2.0), V_sq, np.array([1.0])) == pytest.approx(3.05)


def test_h_function_quadratic():
    for g in (0.0, 0.25, 0.5, 1.0):
        assert h_function(G_scale(2.0), V_sq, np.array([1.0]), g) == pytest.approx(4 * g * g - 0.95)
    with pytest.raises(ContractError):
        h_function(G_scale(2.0), V_sq, np.array([1.0]), 1.5)


def test_bisection_closed_form():
    res = compute_gamma(G_scale(2.0), V_sq, np.array([1.0]), beta=BETA)
    assert res.branch is Branch.BISECTED
    assert abs(res.gamma - math.sqrt(0.95) / 2) <= 1e-6
    assert res.gamma == pytest.approx(0.487340, abs=1e-6)
    assert res.iterations <= MAX_ITER and res.iterations == expected_iterations()
    assert res.decrease_margin <= 0
    out, r = attenuated_predict(G_scale(2.0), V_sq, np.array([1.0]), beta=BETA)
    assert out[0] == pytest.approx(2 * math.sqrt(0.95) / 2, abs=2e-6)
    assert out[0] == pytest.approx(0.97468, abs=1e-5)


def test_passthrough_origin_and_tie():
    r = compute_gamma(G_scale(0.5), V_sq, np.array([1.0, -2.0]))
    assert r.branch is Branch.PASSTHROUGH and r.gamma == 1.0 and r.iterations == 0
    r = compute_gamma(G_scale(2.0), V_sq, np.zeros(3))
    assert r.branch is Branch.ORIGIN and r.gamma == 0.0
    r = compute_gamma(G_scale(0.5), V_sq, np.array([1.0]), beta=0.25)
    assert r.branch is Branch.PASSTHROUGH and r.gamma == 1.0


def test_contract_errors():
    with pytest.raises(ContractError):
        compute_gamma(G_scale(2.0), V_sq, np.array([1.0]), tol_root=0.0)
    with pytest.raises(ContractError):
        compute_gamma(G_scale(2.0), V_sq, np.array([1.0]), grid_cells=0)


def test_non_finite_model_output_raises():
    with pytest.raises(EnforcementError):
        compute_gamma(lambda x: np.full_like(np.asarray(x), np.inf), V_sq, np.array([1.0]))


def test_missing_sign_change_raises():
    # V(0) > beta V(x): violates the zero-at-origin premise, so the grid finds no H <= 0
    with pytest.raises(EnforcementError):
        compute_gamma(G_scale(2.0), lambda y: V_sq(y) + 100.0, np.array([1.0]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=2), st.floats(0.0, 3.0), st.floats(0.05, 0.99))
def test_enforcement_soundness_scaled_stub(x, a, beta):
    x = np.array(x)
    if np.linalg.norm(x) < 1e-6:
        return
    out, r = attenuated_predict(G_scale(a), V_sq, x, beta=beta)
    assert 0.0 <= r.gamma <= 1.0
    assert V_sq(out) - beta * V_sq(x) <= 1e-8
    if a * a <= beta:
        assert r.branch is Branch.PASSTHROUGH
    else:
        # the closed form is gamma* = sqrt(beta) / a; bisection keeps the feasible left end
        assert r.gamma <= math.sqrt(beta) / a + 1e-12
        assert math.sqrt(beta) / a - r.gamma <= 1e-9


def test_batch_branch_fractions():
    X = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    res = compute_gamma_batch(G_scale(2.0), V_sq, X)
    assert [res[i].branch for i in range(3)] == [Branch.ORIGIN, Branch.BISECTED, Branch.BISECTED]
    fr = res.fractions()
    assert fr["ORIGIN"] == pytest.approx(1 / 3) and sum(fr.values()) == pytest.approx(1.0)


ARCH = ArchConfig(state_dim=2, embed_dim=16, num_blocks=2, num_heads=2, max_context=8)


@pytest.fixture(scope="module")
def bound_models():
    rng = np.random.default_rng(0)
    ctx = Context(rng.normal(size=(6, 2)), rng.normal(size=(6, 2)))
    G = Conditioned(IclDynamicsModel(ARCH, seed=3), ctx)
    V = Conditioned(IclLyapunovModel(ARCH, seed=4), ctx)
    return G, V


def test_model_pair_h0_negative_and_sound(bound_models):
    G, V = bound_models
    X = np.random.default_rng(1).uniform(-2, 2, size=(1000, 2))
    h0 = h_function(G, V, X, 0.0)
    assert np.all(h0 < 0)
    out, res = attenuate_batch(G, V, X)
    assert np.all(V(out) - BETA * V(X) <= 1e-8)
    assert np.all((res.gamma >= 0) & (res.gamma <= 1))
    assert res.iterations.max() <= MAX_ITER


def test_model_pair_certificate_along_rollout(bound_models):
    G, V = bound_models
    x = np.array([1.3, -0.7])
    v0 = V(x)
    for k in range(1, 60):
        x, _ = attenuated_predict(G, V, x)
        assert V(x) <= BETA ** k * v0 + 1e-6 / (1 - BETA)


def test_model_with_context_argument():
    rng = np.random.default_rng(2)
    ctx = Context(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))
    G, V = IclDynamicsModel(ARCH, seed=5), IclLyapunovModel(ARCH, seed=6)
    r = compute_gamma(G, V, np.array([0.4, 0.2]), context=ctx)
    r2 = compute_gamma(Conditioned(G, ctx), Conditioned(V, ctx), np.array([0.4, 0.2]))
    assert r.gamma == r2.gamma
    with pytest.raises(ContractError):
        compute_gamma(G, V, np.array([0.4, 0.2]))
