import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import minimize_scalar

from bifsmn.binarize import (
    BitMatrix, binarize_weights, pack, scale_factor, sign_binarize, ste_grad, unpack,
)
from bifsmn.errors import IntegrityError

RAGGED = [1, 63, 64, 65, 127, 128]


def test_sign_convention_including_negative_zero():
    b = sign_binarize([[0.0, -0.0, 2.5, -3.1]])
    np.testing.assert_array_equal(unpack(b), [[1, 1, 1, -1]])
    assert b.bits[0, 0] == 0b0111


@pytest.mark.parametrize("cols", RAGGED)
def test_all_positive_sets_logical_bits_only(cols):
    b = sign_binarize(np.ones((3, cols)))
    assert b.words_per_row == -(-cols // 64)
    np.testing.assert_array_equal(unpack(b), np.ones((3, cols)))
    assert not np.any(b.bits & ~b.pad_mask())


def test_negation_flips_all_but_zeros(rng):
    m = rng.standard_normal((5, 70)).astype(np.float32)
    m[0, :5] = 0.0
    pos, neg = unpack(sign_binarize(m)), unpack(sign_binarize(-m))
    nonzero = m != 0
    np.testing.assert_array_equal(pos[nonzero], -neg[nonzero])
    np.testing.assert_array_equal(pos[~nonzero], neg[~nonzero])


def test_scale_factor_values():
    assert scale_factor([0.5, -1.5, 1.0]) == pytest.approx(1.0)
    assert scale_factor([-2.5] * 7) == pytest.approx(2.5)


def test_scale_factor_is_least_squares_optimum(rng):
    for _ in range(20):
        w = rng.standard_normal(rng.integers(1, 40))
        s = np.where(w >= 0, 1.0, -1.0)
        res = minimize_scalar(lambda a: np.sum((w - a * s) ** 2), bracket=(0.0, 5.0), method="golden", tol=1e-10)
        assert scale_factor(w) == pytest.approx(res.x, abs=1e-4)


def test_binarize_weights_single_row_is_composition(rng):
    w = rng.standard_normal((1, 33)).astype(np.float32)
    sbt = binarize_weights(w)
    assert sbt.bits == sign_binarize(w)
    assert sbt.alpha[0] == pytest.approx(scale_factor(w[0]), rel=1e-6)


def test_rebinarize_is_idempotent(rng):
    w = rng.standard_normal((6, 65)).astype(np.float32)
    w[2] = 0.0
    first = binarize_weights(w)
    second = binarize_weights(first.reconstruct())
    assert second.bits == first.bits
    np.testing.assert_array_equal(second.alpha, first.alpha)


def test_scaled_reconstruction_beats_unit_scale(rng):
    for scale in (0.1, 3.0):
        w = scale * rng.standard_normal((4, 50)).astype(np.float32)
        sbt = binarize_weights(w)
        unit = np.where(w >= 0, 1.0, -1.0)
        err_scaled = np.linalg.norm(w - sbt.reconstruct(), axis=1)
        err_unit = np.linalg.norm(w - unit, axis=1)
        assert np.all(err_scaled <= err_unit + 1e-6)


def test_ste_boundaries():
    assert ste_grad(0.5, 3.0) == 3.0
    assert ste_grad(1.0, 3.0) == 3.0
    assert ste_grad(-1.0, 3.0) == 3.0
    assert ste_grad(1.0001, 3.0) == 0.0


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_ste_is_even(x, g):
    assert ste_grad(x, g) == ste_grad(-x, g)


@pytest.mark.parametrize("cols", RAGGED)
def test_pack_unpack_round_trip(cols, rng):
    m = rng.standard_normal((4, cols))
    b = sign_binarize(m)
    assert pack(unpack(b)) == b
    np.testing.assert_array_equal(unpack(b), np.where(m >= 0, 1.0, -1.0))
    b.check_pads()


def test_bit_order_is_lsb_first_per_word():
    row = -np.ones((1, 130))
    row[0, [0, 63, 64, 129]] = 1
    b = pack(row)
    assert b.bits[0, 0] == (1 | (1 << 63))
    assert b.bits[0, 1] == 1
    assert b.bits[0, 2] == 2


def test_bits_are_immutable_and_pads_checked():
    b = sign_binarize(np.ones((1, 3)))
    with pytest.raises(ValueError):
        b.bits[0, 0] = 0
    bad = BitMatrix(np.array([[0xFF]], dtype=np.uint64), 1, 3)
    with pytest.raises(IntegrityError):
        bad.check_pads()


@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.sampled_from(RAGGED)),
              elements=st.floats(-10, 10, width=32)))
def test_unpack_is_sign_case_analysis(m):
    b = sign_binarize(m)
    u = unpack(b)
    assert set(np.unique(u)) <= {-1.0, 1.0}
    np.testing.assert_array_equal(u, np.where(m >= 0, 1.0, -1.0))
    assert not np.any(b.bits & ~b.pad_mask())
