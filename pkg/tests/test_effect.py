import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pastquantum.effect import (
    backward_pass,
    diffusive_backstep,
    jump_backstep,
    linear_diffusive_backincrement,
    run_backward,
)
from pastquantum.errors import InvalidParameter, InvalidRecord, NonFiniteIncrement
from pastquantum.filtering import (
    Interruption,
    Propagator,
    linear_diffusive_increment,
    sample_diffusive_record,
    sample_jump_record,
)
from pastquantum.model import COUNTING, DIFFUSIVE, UNOBSERVED, Channel, Model, ScenarioConfig, build_jumping_atom, build_rabi_spin
from pastquantum.paststate import smooth
from pastquantum.qops import DensityMatrix, EffectMatrix, min_eigenvalue
from oracles import DOWN, SM, SZ, UP, random_density, random_effect, random_hermitian

IDENTITY = EffectMatrix(np.eye(2))


def assert_proportional(a, b, atol=1e-14):
    a, b = np.asarray(a), np.asarray(b)
    np.testing.assert_allclose(a / np.trace(a), b / np.trace(b), atol=atol)


def test_trivial_model_leaves_effect_unchanged():
    m = Model(np.zeros((2, 2)), (Channel(np.zeros((2, 2)), DIFFUSIVE),))
    E = EffectMatrix(random_effect(np.random.default_rng(0), 2))
    out = diffusive_backstep(E, m, 0.4, 1e-3)
    assert_proportional(out.op, E.op)


def test_unobserved_channel_preserves_identity():
    m = Model(np.zeros((2, 2)), (Channel(np.zeros((2, 2)), DIFFUSIVE), Channel(SM, UNOBSERVED)))
    out = diffusive_backstep(IDENTITY, m, 0.1, 1e-3)
    np.testing.assert_allclose(out.op, np.eye(2), atol=1e-15)


def test_identity_is_tilted_by_the_record():
    k, eta, dt, dY = 2.0, 0.5, 1e-3, 0.04
    m = build_rabi_spin(0, k, eta)
    lin = linear_diffusive_backincrement(np.eye(2), m, dY, dt)
    # c^dag c dt cancels the drift exactly, leaving only the record tilt
    np.testing.assert_allclose(lin, np.eye(2) + 2 * np.sqrt(eta * k) * SZ * dY, atol=1e-15)
    out = diffusive_backstep(IDENTITY, m, dY, dt)
    assert_proportional(out.op, np.eye(2) + 2 * np.sqrt(eta * k) * SZ * dY)
    assert np.trace(out.op).real == pytest.approx(2.0)


def test_counting_backsteps():
    gamma, dt = 1.5, 1e-3
    m = Model(np.zeros((2, 2)), (Channel(np.sqrt(gamma) * SM, COUNTING),))
    assert_proportional(jump_backstep(IDENTITY, m, [0], dt).op, np.diag([1 - gamma * dt, 1.0]))
    assert_proportional(jump_backstep(IDENTITY, m, [1], dt).op, UP)
    with pytest.raises(InvalidRecord):
        jump_backstep(IDENTITY, m, [3], dt)
    with pytest.raises(InvalidParameter):
        diffusive_backstep(IDENTITY, m, 0.0, dt)


def test_backstep_rejects_non_finite_increment():
    with pytest.raises(NonFiniteIncrement):
        diffusive_backstep(IDENTITY, build_rabi_spin(1j, 1.0), np.inf, 1e-3)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["euler", "kraus"]))
def test_backward_step_is_adjoint_of_forward_step(seed, scheme):
    rng = np.random.default_rng(seed)
    chi = complex(*rng.normal(size=2))
    m = build_rabi_spin(chi, rng.uniform(0.1, 3), rng.uniform(0.1, 1))
    rho, E = random_density(rng, 2), random_effect(rng, 2)
    dt = 1e-3
    dY = rng.normal(0, np.sqrt(dt), size=1)
    prop = Propagator(m, dt, scheme)
    lhs = np.trace(prop.forward(rho[None], dY)[0] @ E)
    rhs = np.trace(rho @ prop.backward(E[None], dY)[0])
    assert lhs == pytest.approx(rhs, abs=1e-13)


def test_single_step_adjoint_with_counting_and_hops():
    rng = np.random.default_rng(4)
    m = build_jumping_atom(ScenarioConfig(omega_a=1 + 1j))
    rho, E = random_density(rng, 4), random_effect(rng, 4)
    prop = Propagator(m, 1e-3, "kraus")
    for click in (-1, 0):
        c = np.array([click])
        lhs = np.trace(prop.forward(rho[None], None, c)[0] @ E)
        rhs = np.trace(rho @ prop.backward(E[None], None, c)[0])
        assert lhs == pytest.approx(rhs, abs=1e-13)


def test_linear_increments_are_mutually_adjoint():
    rng = np.random.default_rng(6)
    m = build_rabi_spin(2 - 1j, 1.3, 0.8)
    rho, E = random_density(rng, 2), random_hermitian(rng, 2)
    lhs = np.trace(linear_diffusive_increment(rho, m, 0.02, 1e-3) @ E)
    rhs = np.trace(rho @ linear_diffusive_backincrement(E, m, 0.02, 1e-3))
    assert lhs == pytest.approx(rhs, abs=1e-15)


def test_final_effect_is_identity_and_positive():
    m = build_rabi_spin(3j, 2.0)
    record, _ = sample_diffusive_record(m, DensityMatrix(UP), 3.0, 1e-3, seed=2)
    bwd = run_backward(record, m)
    np.testing.assert_array_equal(bwd.ops[-1], np.eye(2))
    assert bwd.log_norms[-1] == 0
    np.testing.assert_allclose(np.einsum("nii->n", bwd.ops).real, 2.0, atol=1e-12)
    assert min(min_eigenvalue(e) for e in bwd.ops[::25]) > -1e-8


@pytest.mark.parametrize("scheme", ["kraus", "euler"])
def test_record_probability_is_conserved(scheme):
    dt = 1e-3
    m = build_rabi_spin(3j, 2.0)
    record, _ = sample_diffusive_record(m, DensityMatrix(UP), 3.0, dt, seed=9, scheme=scheme)
    it = Interruption.at_time(1.2, dt, [UP, DOWN])
    traj = smooth(record, m, DensityMatrix(UP), scheme=scheme)
    ol = traj.overlap_log()
    assert np.ptp(ol) < 1e-10
    # with an unread projective measurement the total splits into two branches
    traj_i = smooth(record, m, DensityMatrix(UP), [it], scheme=scheme)
    ol_i = traj_i.overlap_log()
    assert np.ptp(ol_i[: it.step]) < 1e-10 and np.ptp(ol_i[it.step:]) < 1e-10


def test_counting_record_probability_is_conserved():
    m = build_jumping_atom(ScenarioConfig())
    rho0 = DensityMatrix(np.kron(np.eye(2) / 2, DOWN))
    record, _, _ = sample_jump_record(m, rho0, 10.0, 1e-2, seed=3)
    ol = smooth(record, m, rho0).overlap_log()
    assert np.ptp(ol) < 1e-10


def test_backward_pass_batched_matches_single():
    m = build_rabi_spin(3j, 2.0)
    recs = [sample_diffusive_record(m, DensityMatrix(UP), 0.5, 1e-3, seed=s)[0] for s in range(3)]
    dY = np.stack([r.dY for r in recs])
    effects, logs, _ = backward_pass(m, 1e-3, dY)
    for b, r in enumerate(recs):
        single = run_backward(r, m)
        np.testing.assert_allclose(effects[b], single.ops, atol=1e-14)
        np.testing.assert_allclose(logs[b], single.log_norms, atol=1e-12)


def test_backward_pass_stop_leaves_prefix_unset():
    m = build_rabi_spin(3j, 2.0)
    dY = np.zeros((1, 10))
    effects, _, _ = backward_pass(m, 1e-3, dY, stop=4)
    assert np.all(effects[0, :4] == 0)
    np.testing.assert_allclose(np.trace(effects[0, 4]).real, 2.0)
