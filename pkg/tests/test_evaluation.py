import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lilad.data import Context
from lilad.errors import ContractError, RolloutError
from lilad.evaluation import (EvalProtocol, EvalRecord, build_table, certificate_holds, evaluate,
                              instantiate_test_tasks, mae_rmse, model_rollout)
from lilad.models import ArchConfig, IclDynamicsModel, IclLyapunovModel
from lilad.systems import make_system


def test_mae_rmse_example():
    mae, rmse = mae_rmse(np.array([[1.0, 2.0]]), np.array([[0.0, 0.0]]))
    assert mae == 1.5
    assert rmse == pytest.approx(math.sqrt(2.5))
    with pytest.raises(ContractError):
        mae_rmse(np.zeros((2, 2)), np.zeros((3, 2)))


@given(arrays(np.float64, (5, 3), elements=st.floats(-10, 10)), arrays(np.float64, (5, 3), elements=st.floats(-10, 10)))
def test_rmse_dominates_mae(a, b):
    mae, rmse = mae_rmse(a, b)
    assert rmse >= mae - 1e-12 and mae >= 0


def _rec(mae, task=0, method="m"):
    return EvalRecord(method, "sp", task, 0, mae, mae * 2)


def test_table_stats_and_order_invariance():
    t = build_table([_rec(0.3), _rec(0.3), _rec(0.3)])
    assert t.cell("m", "sp")["mae_std"] == 0.0 and t.cell("m", "sp")["mae_mean"] == pytest.approx(0.3)
    vals = np.random.default_rng(0).uniform(size=20)
    recs = [_rec(v, i) for i, v in enumerate(vals)]
    a = build_table(recs).to_json()
    assert a == build_table(recs[::-1]).to_json()
    row = build_table(recs).cell("m", "sp")
    assert row["mae_mean"] == pytest.approx(vals.mean()) and row["mae_std"] == pytest.approx(vals.std())
    with pytest.raises(ContractError):
        build_table([])


def test_protocol_shape_and_determinism():
    spec = make_system("sp")
    p = EvalProtocol(context_source_pairs=200)
    assert p.total_trajectories == 20
    a, b = instantiate_test_tasks(spec, p), instantiate_test_tasks(spec, p)
    assert len(a) == 5 and all(t.initial_states.shape == (4, 2) and t.context.j == 32 for t in a)
    for ta, tb in zip(a, b):
        np.testing.assert_array_equal(ta.context.x, tb.context.x)
        np.testing.assert_array_equal(ta.initial_states, tb.initial_states)
    assert all(t.context.j == 0 for t in instantiate_test_tasks(spec, EvalProtocol(context_len=0)))
    assert EvalProtocol().steps_for(make_system("pde")) == 100


def test_model_rollout_wiring():
    ident = lambda X: np.asarray(X)
    tr = model_rollout(ident, np.array([1.0, 2.0]), 5)
    assert tr.states.shape == (6, 2) and not tr.diverged
    np.testing.assert_array_equal(tr.states, np.tile([1.0, 2.0], (6, 1)))
    assert model_rollout(ident, np.array([1.0, 2.0]), 0).states.shape == (1, 2)
    half = model_rollout(lambda X: 0.5 * X, np.array([[1.0], [4.0]]), 3)
    np.testing.assert_array_equal(half[1].states[:, 0], [4.0, 2.0, 1.0, 0.5])


def test_model_rollout_divergence_flag():
    def blowup(X):
        X = np.asarray(X)
        return np.where(np.abs(X) > 100, np.inf, X * 10)
    trs = model_rollout(blowup, np.array([[1.0], [0.0]]), 6)
    assert trs[0].diverged and len(trs[0]) == 4
    assert not trs[1].diverged and len(trs[1]) == 7
    with pytest.raises(RolloutError):
        model_rollout(blowup, np.array([1.0]), 6, strict=True)


def test_certificate_holds():
    assert certificate_holds(np.array([1.0, 0.9, 0.8]), 0.95)
    assert not certificate_holds(np.array([1.0, 1.0]), 0.95)


def test_evaluate_small_end_to_end(tmp_path):
    spec = make_system("sp")
    arch = ArchConfig(state_dim=2, embed_dim=8, num_blocks=1, num_heads=2, max_context=8)
    G, V = IclDynamicsModel(arch, seed=0), IclLyapunovModel(arch, seed=1)
    p = EvalProtocol(num_test_systems=2, initial_states_per_system=2, rollout_steps=15, context_len=8,
                     context_source_pairs=100)
    res = evaluate(spec, p, "lilad", G, V)
    assert len(res.records) == 4
    assert all(r.certificate_ok for r in res.records)
    assert len(res.gamma_log) == 4 * 15
    res.write(tmp_path)
    assert (tmp_path / "metrics.json").exists() and (tmp_path / "trajectories.npz").exists()
    lin = evaluate(spec, p, "stable-linear")
    assert all(r.final_norm_ratio < 1 for r in lin.records)
    icl = evaluate(spec, p, "plain-icl", G)
    assert all(r.certificate_ok is None for r in icl.records)
    with pytest.raises(ContractError):
        evaluate(spec, p, "lilad", G)
    with pytest.raises(ContractError):
        evaluate(spec, p, "maml")
