import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quaddyn import quat

seeds = st.integers(0, 2**32 - 1)


def rand_q(seed, n=None):
    return quat.random(np.random.default_rng(seed), n)


def test_identity_is_neutral():
    q = rand_q(0, 100)
    np.testing.assert_array_equal(quat.hamilton_product(quat.IDENTITY, q), q)
    np.testing.assert_array_equal(quat.hamilton_product(q, quat.IDENTITY), q)


def test_inverse_gives_identity():
    q = rand_q(1, 100)
    prod = quat.hamilton_product(q, quat.inverse(q))
    np.testing.assert_allclose(prod, np.tile(quat.IDENTITY, (100, 1)), atol=1e-12)


def test_product_matches_matrix_composition():
    rng = np.random.default_rng(2)
    a, b = quat.random(rng, 1000), quat.random(rng, 1000)
    lhs = quat.to_rotation_matrix(quat.hamilton_product(a, b))
    rhs = quat.to_rotation_matrix(a) @ quat.to_rotation_matrix(b)
    assert np.abs(lhs - rhs).max() < 1e-12


def test_basic_values():
    np.testing.assert_array_equal(quat.inverse(quat.IDENTITY), quat.IDENTITY)
    np.testing.assert_array_equal(quat.normalize([2.0, 0, 0, 0]), quat.IDENTITY)
    qz = quat.from_axis_angle([0, 0, 1], np.pi / 2)
    np.testing.assert_allclose(quat.rotate_vector(qz, [1.0, 0, 0]), [0, 1, 0], atol=1e-12)


def test_normalize_rejects_near_zero():
    with pytest.raises(quat.DegenerateQuaternionError):
        quat.normalize([1e-9, 0, 0, 0])


@given(seeds)
@settings(max_examples=100)
def test_associativity(seed):
    a, b, c = rand_q(seed, 3)
    lhs = quat.hamilton_product(quat.hamilton_product(a, b), c)
    rhs = quat.hamilton_product(a, quat.hamilton_product(b, c))
    assert np.abs(lhs - rhs).max() < 1e-12


@given(seeds)
@settings(max_examples=100)
def test_rotate_vector_matches_matrix(seed):
    rng = np.random.default_rng(seed)
    q, v = quat.random(rng), rng.standard_normal(3)
    np.testing.assert_allclose(quat.rotate_vector(q, v), quat.to_rotation_matrix(q) @ v, atol=1e-12)


@given(seeds)
@settings(max_examples=100)
def test_unit_norm_after_constructors(seed):
    rng = np.random.default_rng(seed)
    qs = [
        quat.random(rng),
        quat.normalize(rng.standard_normal(4) * 10),
        quat.compose(quat.random(rng), quat.random(rng)),
        quat.exp_map(rng.standard_normal(3)),
        quat.from_axis_angle(rng.standard_normal(3), rng.uniform(-4, 4)),
        quat.slerp(quat.random(rng), quat.random(rng), rng.uniform()),
    ]
    for q in qs:
        assert abs(np.linalg.norm(q) - 1) < 1e-9


def test_error_angle_is_half_rotation_angle():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        phi = rng.uniform(1e-6, np.pi - 1e-6)
        axis = rng.standard_normal(3)
        q_pred = quat.random(rng)
        q_gt = quat.hamilton_product(quat.from_axis_angle(axis, phi), q_pred)
        assert abs(quat.error_angle(q_gt, q_pred) - phi / 2) < 1e-10


@given(seeds)
@settings(max_examples=200)
def test_error_angle_properties(seed):
    rng = np.random.default_rng(seed)
    a, b, g = quat.random(rng, 3)
    assert quat.error_angle(a, a) == 0.0
    assert quat.error_angle(a, -a) == quat.error_angle(a, a)
    assert 0 <= quat.error_angle(a, b) <= np.pi / 2
    assert abs(quat.error_angle(a, b) - quat.error_angle(b, a)) < 1e-12
    ga, gb = quat.hamilton_product(g, a), quat.hamilton_product(g, b)
    assert abs(quat.error_angle(ga, gb) - quat.error_angle(a, b)) < 1e-12


def test_error_angle_of_identical_is_zero_exactly_for_identity():
    assert quat.error_angle(quat.IDENTITY, quat.IDENTITY) == 0.0
    assert quat.error_angle(quat.IDENTITY, -quat.IDENTITY) == 0.0


@given(seeds)
@settings(max_examples=100)
def test_log_exp_roundtrip(seed):
    rng = np.random.default_rng(seed)
    rotvec = rng.standard_normal(3)
    rotvec *= rng.uniform(0, np.pi * 0.99) / np.linalg.norm(rotvec)
    q = quat.exp_map(rotvec)
    np.testing.assert_allclose(quat.log_map(q), rotvec / 2, atol=1e-12)


def test_rotation_matrix_roundtrip():
    rng = np.random.default_rng(4)
    for q in quat.random(rng, 200):
        back = quat.from_rotation_matrix(quat.to_rotation_matrix(q))
        np.testing.assert_allclose(back, quat.canonicalize(q), atol=1e-12)


def test_canonicalize_and_continuity():
    q = rand_q(5, 50)
    c = quat.canonicalize(-q)
    assert (c[:, 0] >= 0).all()
    flips = np.where(np.arange(50) % 3 == 0, -1.0, 1.0)[:, None]
    # a smooth path with random sign flips comes back continuous
    path = quat.slerp(np.tile(q[0], (50, 1)), np.tile(q[1], (50, 1)), np.linspace(0, 1, 50))
    cont = quat.make_continuous(path * flips)
    assert (np.sum(cont[1:] * cont[:-1], axis=1) >= 0).all()
    np.testing.assert_array_equal(np.abs(cont), np.abs(path))


def test_slerp_endpoints_and_midpoint():
    rng = np.random.default_rng(6)
    a = quat.random(rng)
    b = quat.hamilton_product(quat.from_axis_angle([1, 2, 3], 1.0), a)
    np.testing.assert_allclose(quat.slerp(a, b, 0.0), a, atol=1e-12)
    np.testing.assert_allclose(quat.slerp(a, b, 1.0), b, atol=1e-12)
    mid = quat.slerp(a, b, 0.5)
    assert abs(quat.error_angle(mid, a) - 0.25) < 1e-12


def test_jpl_conversion_composes_in_reverse():
    rng = np.random.default_rng(7)
    a, b = quat.random(rng, 2)
    # JPL products compose in the opposite order
    lhs = quat.jpl_to_hamilton(quat.hamilton_product(b, a))
    rhs = quat.hamilton_product(quat.jpl_to_hamilton(a), quat.jpl_to_hamilton(b))
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
