import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pastquantum.errors import ImpossibleObservation, InvalidParameter, TooLargeForEnumeration
from pastquantum.hmm import (
    HmmModel,
    check_equivalence,
    embed_hmm,
    embedded_passes,
    hmm_joint_oracle,
    hmm_posteriors,
    load_hmm,
    random_hmm,
    save_hmm,
)
from pastquantum.qops import MeasurementSpec, check_completeness

TWO_STATE = HmmModel(
    transition=np.array([[0.7, 0.3], [0.2, 0.8]]),
    emission=np.array([[0.9, 0.1], [0.2, 0.8]]),
    initial=np.array([0.6, 0.4]),
)


def test_two_state_single_observation_by_hand():
    post = hmm_posteriors(TWO_STATE, [0])
    # predicted (0.5, 0.5); weighted by P(y=0|i) = (0.9, 0.2)
    np.testing.assert_allclose(post.alpha[1], np.array([0.45, 0.10]) / 0.55, atol=1e-15)
    assert np.exp(post.log_likelihood) == pytest.approx(0.55, abs=1e-15)
    # beta_0(i) = sum_j P(j|i) P(0|j) = (0.69, 0.34)
    np.testing.assert_allclose(post.beta[0], np.array([0.69, 0.34]) / 1.03, atol=1e-15)
    np.testing.assert_allclose(post.smoothed[0], np.array([0.414, 0.136]) / 0.55, atol=1e-15)
    np.testing.assert_array_equal(post.beta[1], [1.0, 1.0])


def test_single_state_chain_is_certain():
    m = HmmModel(np.ones((1, 1)), np.array([[0.25, 0.75]]), np.ones(1))
    post = hmm_posteriors(m, [1, 0, 1])
    np.testing.assert_array_equal(post.smoothed, np.ones((4, 1)))
    assert np.exp(post.log_likelihood) == pytest.approx(0.75 * 0.25 * 0.75)


def test_uninformative_emissions_leave_beta_flat():
    rng = np.random.default_rng(0)
    m = HmmModel(rng.dirichlet(np.ones(3), size=3), np.full((3, 2), 0.5), rng.dirichlet(np.ones(3)))
    post = hmm_posteriors(m, [0, 1, 1, 0])
    np.testing.assert_allclose(post.beta[:-1], 1 / 3, atol=1e-15)
    np.testing.assert_allclose(post.smoothed[0], m.initial, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4), st.integers(2, 3), st.integers(0, 7))
def test_forward_backward_matches_enumeration(seed, n, k, T):
    rng = np.random.default_rng(seed)
    m = random_hmm(rng, n, k)
    y = rng.integers(0, k, T)
    post = hmm_posteriors(m, y)
    filtered, smoothed, like = hmm_joint_oracle(m, y)
    np.testing.assert_allclose(post.filtered, filtered, atol=1e-12)
    np.testing.assert_allclose(post.smoothed, smoothed, atol=1e-12)
    assert post.log_likelihood == pytest.approx(np.log(like), abs=1e-12)


def test_embedding_maps_are_complete():
    m = random_hmm(np.random.default_rng(1), 3, 3)
    rho0, chain_map, obs_map = embed_hmm(m)
    np.testing.assert_allclose(np.diag(rho0.op).real, m.initial)
    check_completeness(MeasurementSpec((chain_map(),)), tol=1e-13)
    check_completeness(MeasurementSpec(tuple(obs_map(y) for y in range(3))), tol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4), st.integers(2, 3))
def test_embedding_reproduces_classical_passes(seed, n, k):
    rng = np.random.default_rng(seed)
    m = random_hmm(rng, n, k)
    y = rng.integers(0, k, 20)
    rep = check_equivalence(m, y)
    assert rep.passed, rep.to_dict()
    assert rep.off_diagonal <= 1e-14


def test_embedded_likelihood():
    emb = embedded_passes(TWO_STATE, [0])
    assert np.exp(emb.rho_log[-1]) * np.trace(emb.rho[-1]).real == pytest.approx(0.55, abs=1e-15)


def test_impossible_observation():
    m = HmmModel(np.eye(2), np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([0.5, 0.5]))
    with pytest.raises(ImpossibleObservation):
        hmm_posteriors(m, [0, 1])
    with pytest.raises(ImpossibleObservation):
        embedded_passes(m, [1])
    with pytest.raises(ImpossibleObservation):
        hmm_joint_oracle(m, [1])


def test_model_validation():
    with pytest.raises(InvalidParameter):
        HmmModel(np.array([[0.5, 0.6], [0.5, 0.5]]), np.full((2, 2), 0.5), np.array([0.5, 0.5]))
    with pytest.raises(InvalidParameter):
        HmmModel(np.eye(2), np.full((2, 2), 0.6), np.array([0.5, 0.5]))
    with pytest.raises(InvalidParameter):
        HmmModel(np.eye(2), np.full((3, 2), 0.5), np.array([0.5, 0.5]))
    with pytest.raises(InvalidParameter):
        hmm_posteriors(TWO_STATE, [0, 2])
    with pytest.raises(InvalidParameter):
        hmm_posteriors(TWO_STATE, [0.5])


def test_enumeration_limit():
    m = random_hmm(np.random.default_rng(2), 4, 2)
    with pytest.raises(TooLargeForEnumeration):
        hmm_joint_oracle(m, np.zeros(20, dtype=int))


def test_empty_observation_sequence():
    post = hmm_posteriors(TWO_STATE, [])
    np.testing.assert_allclose(post.smoothed, [TWO_STATE.initial])
    assert check_equivalence(TWO_STATE, []).passed


def test_save_load_round_trip(tmp_path):
    path = tmp_path / "m.json"
    save_hmm(path, TWO_STATE, [0, 1, 1], description="toy")
    m, y = load_hmm(path)
    np.testing.assert_array_equal(m.transition, TWO_STATE.transition)
    np.testing.assert_array_equal(y, [0, 1, 1])
    path.write_text(json.dumps([1, 2]))
    with pytest.raises(InvalidParameter):
        load_hmm(path)
    path.write_text(json.dumps({"transition": [[1.0]]}))
    with pytest.raises(InvalidParameter):
        load_hmm(path)
