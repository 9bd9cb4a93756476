import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lilad.data import Prompt, generate_pool, prefix
from lilad.errors import ContractError, TrainingError
from lilad.models import ArchConfig, IclDynamicsModel, IclLyapunovModel
from lilad.systems import make_system
from lilad.tensor import Tensor
from lilad.training import (DYN, LYAP, Batch, TrainConfig, TrainLog, batch_from_prefixes, dynamics_loss,
                            lyapunov_loss, phase_of, sample_batch, train, violation_rate)

TINY = ArchConfig(state_dim=2, embed_dim=8, num_blocks=1, num_heads=2, max_context=4)


def sq_norm(y):
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y))
    return (y * y).sum(axis=-1)


def scale(a):
    return lambda q: q * a


def one_pair_batch(q, target, d=1):
    return Batch(np.zeros((1, 0, d)), np.zeros((1, 0, d)), np.full((1, 1, d), q), np.full((1, 1, d), target),
                 np.zeros((1, 1), dtype=int))


@pytest.fixture(scope="module")
def pool():
    return generate_pool(make_system("sp"), 3, 40, seed=2, rollout_steps=10)


# -- schedule -------------------------------------------------------------------------------------

def test_phase_examples():
    assert phase_of(0, 1) == DYN and phase_of(0, 99) == DYN
    assert phase_of(7, 5) == LYAP
    assert phase_of(10, 5) == DYN
    with pytest.raises(ContractError):
        phase_of(-1, 5)


@given(st.integers(0, 10_000), st.integers(1, 500))
def test_phase_is_periodic(k, ksw):
    assert phase_of(k, ksw) == phase_of(k + 2 * ksw, ksw)
    assert phase_of(k, ksw) != phase_of(k + ksw, ksw)


def test_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(beta=1.0)
    with pytest.raises(ContractError):
        TrainConfig(total_steps=10, switch_interval=20)
    with pytest.raises(ContractError):
        TrainConfig.from_dict({"bogus": 1})
    cfg = TrainConfig(total_steps=40, switch_interval=10, lam=0.3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# -- losses with stubs -------------------------------------------------------------------------------

def test_dynamics_loss_hand_example():
    b = one_pair_batch(1.0, 0.5)
    loss = dynamics_loss(lambda q: q * 0.7, sq_norm, b, lam=1.0, beta=0.95)
    assert float(loss.data) == pytest.approx(0.2)
    # lam = 0 leaves only the prediction error, and V is not needed
    assert float(dynamics_loss(lambda q: q * 0.7, None, b, lam=0.0, beta=0.95).data) == pytest.approx(0.2)
    # the unsquared norm is used
    b2 = Batch(np.zeros((1, 0, 2)), np.zeros((1, 0, 2)), np.array([[[1.0, 1.0]]]), np.array([[[4.0, 5.0]]]),
               np.zeros((1, 1), dtype=int))
    assert float(dynamics_loss(lambda q: q, None, b2, 0.0, 0.95).data) == pytest.approx(5.0)
    assert float(dynamics_loss(lambda q: q, None, b2, 0.0, 0.95, squared=True).data) == pytest.approx(25.0)


def test_dynamics_loss_perfect_predictor_is_zero():
    b = one_pair_batch(1.0, 0.5)
    assert float(dynamics_loss(scale(0.5), sq_norm, b, lam=1.0, beta=0.95).data) == 0.0


def test_lyapunov_loss_examples():
    b = one_pair_batch(1.0, 0.0)
    assert float(lyapunov_loss(scale(0.5), sq_norm, b, 0.95).data) == 0.0
    assert float(lyapunov_loss(scale(2.0), sq_norm, b, 0.95).data) == pytest.approx(3.05)


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(0.0, 3.0), st.floats(0.01, 0.99), st.floats(0, 2))
def test_hinge_non_negative(q, a, beta, lam):
    b = one_pair_batch(q, 0.1)
    assert float(lyapunov_loss(scale(a), sq_norm, b, beta).data) >= 0.0
    err = float(dynamics_loss(scale(a), None, b, 0.0, beta).data)
    assert float(dynamics_loss(scale(a), sq_norm, b, lam, beta).data) >= err - 1e-15


def _prefixes(qs):
    return [prefix(Prompt(np.array([[q, 0.5]]), np.array([[0.0, 0.0]])), 0) for q in qs]


def test_violation_rate_stubs_and_order_invariance():
    ps = _prefixes([1.0, -2.0, 0.3, 4.0])
    assert violation_rate(scale(0.5), sq_norm, ps, 0.95) == 0.0
    assert violation_rate(scale(2.0), sq_norm, ps, 0.95) == 1.0
    # mixed: stretch only the first coordinate, so small |q| rows do not violate
    def mixed(q):
        return q * np.array([1.2, 0.1])
    r = violation_rate(mixed, sq_norm, ps, 0.95)
    assert r == violation_rate(mixed, sq_norm, ps[::-1], 0.95)
    assert r == 0.75
    with pytest.raises(ContractError):
        violation_rate(scale(2.0), sq_norm, [], 0.95)


def test_batch_from_prefixes_pads_contexts():
    pr = Prompt(np.arange(8.0).reshape(4, 2), np.arange(8.0).reshape(4, 2) + 100)
    b = batch_from_prefixes([prefix(pr, 0), prefix(pr, 3)])
    assert b.cx.shape == (2, 3, 2)
    np.testing.assert_array_equal(b.limits[:, 0], [0, 6])
    np.testing.assert_array_equal(b.queries[:, 0], [pr.x[0], pr.x[3]])


def test_sample_batch_modes(pool):
    rng = np.random.default_rng(0)
    b = sample_batch(pool, 5, 4, rng, all_positions=True)
    assert b.queries.shape == (4, 5, 2) and b.cx.shape == (4, 4, 2)
    np.testing.assert_array_equal(b.limits[0], [0, 2, 4, 6, 8])
    np.testing.assert_array_equal(b.queries[:, :4], b.cx)
    b = sample_batch(pool, 5, 4, rng)
    assert b.queries.shape == (4, 1, 2) and np.all(b.limits <= 8)


# -- the loop ---------------------------------------------------------------------------------------

def _models(seed=0):
    return IclDynamicsModel(TINY, seed=seed), IclLyapunovModel(TINY, seed=seed + 1)


def test_zero_steps_leaves_models_unchanged(pool):
    G, V = _models()
    g0, v0 = G.state_copy(), V.state_copy()
    res = train(pool, G, V, TrainConfig(total_steps=0, switch_interval=1, seed=1))
    assert len(res.log) == 0
    assert all(np.array_equal(g0[k], G.params[k].data) for k in g0)
    assert all(np.array_equal(v0[k], V.params[k].data) for k in v0)


def test_schedule_and_freeze(pool):
    G, V = _models()
    ksw = 3
    snaps = []
    holder = {}

    def progress(rec):
        snaps.append((rec["phase"], holder["G"].state_copy(), holder["V"].state_copy()))

    holder.update(G=G, V=V)
    before = (G.state_copy(), V.state_copy())
    res = train(pool, G, V, TrainConfig(total_steps=4 * ksw, switch_interval=ksw, optimizer="adam", seed=3),
                progress=progress)
    assert res.log.phases == [DYN] * ksw + [LYAP] * ksw + [DYN] * ksw + [LYAP] * ksw
    prev_g, prev_v = before
    for phase, g, v in snaps:
        frozen, prev = (v, prev_v) if phase == DYN else (g, prev_g)
        moved, prev_m = (g, prev_g) if phase == DYN else (v, prev_v)
        assert all(frozen[k].tobytes() == prev[k].tobytes() for k in frozen)
        assert any(moved[k].tobytes() != prev_m[k].tobytes() for k in moved)
        prev_g, prev_v = g, v


def test_determinism(pool):
    cfg = TrainConfig(total_steps=6, switch_interval=2, optimizer="adam", seed=4, all_positions=True)
    a = train(pool, *_models(), cfg).log.losses
    b = train(pool, *_models(), cfg).log.losses
    assert a == b
    c = train(pool, *_models(), TrainConfig(total_steps=6, switch_interval=2, optimizer="adam", seed=5,
                                            all_positions=True)).log.losses
    assert a != c


def test_resume_matches_uninterrupted(pool, tmp_path):
    full_cfg = TrainConfig(total_steps=8, switch_interval=2, optimizer="adam", seed=6)
    Gf, Vf = _models()
    full = train(pool, Gf, Vf, full_cfg)
    Gh, Vh = _models()
    half = train(pool, Gh, Vh, TrainConfig(total_steps=4, switch_interval=2, optimizer="adam", seed=6))
    rest = train(pool, Gh, Vh, full_cfg, start_step=4, opt_dyn=half.opt_dyn, opt_lyap=half.opt_lyap,
                 rng_state=half.rng_state, log=half.log)
    assert rest.log.losses == full.log.losses
    assert all(Gf.params[k].data.tobytes() == Gh.params[k].data.tobytes() for k in Gf.params)


def test_nan_aborts_and_restores_last_good(pool, tmp_path):
    bad_pool = generate_pool(make_system("sp"), 2, 40, seed=2, rollout_steps=10)
    originals = [t.fx.copy() for t in bad_pool.tasks]

    def poison(rec):
        if rec["step"] == 5:
            for t in bad_pool.tasks:
                t.fx[:] = np.nan

    cfg = TrainConfig(total_steps=8, switch_interval=4, optimizer="adam", seed=7, checkpoint_every=4,
                      early_stop=False)
    G, V = _models()
    with pytest.raises(TrainingError, match="batch 6"):
        train(bad_pool, G, V, cfg, out_dir=tmp_path, progress=poison)
    for t, fx in zip(bad_pool.tasks, originals):
        t.fx[:] = fx
    Gr, Vr = _models()
    train(bad_pool, Gr, Vr, TrainConfig(total_steps=4, switch_interval=4, optimizer="adam", seed=7))
    assert all(G.params[k].data.tobytes() == Gr.params[k].data.tobytes() for k in G.params)
    assert len(TrainLog.read_jsonl(tmp_path / "train_log.jsonl")) == 6
    assert (tmp_path / "G.ckpt").exists() and (tmp_path / "V.ckpt").exists()
