import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bifsmn.errors import ShapeError
from bifsmn.tensor import as_matrix, l2_norm, matmul_ref, stddev


def triple_loop(a, b):
    out = [[0.0] * len(b[0]) for _ in a]
    for i in range(len(a)):
        for j in range(len(b[0])):
            for k in range(len(b)):
                out[i][j] += float(a[i][k]) * float(b[k][j])
    return np.array(out)


def test_matmul_identity(rng):
    m = rng.standard_normal((3, 4)).astype(np.float32)
    np.testing.assert_array_equal(matmul_ref(np.eye(3), m), m)


def test_matmul_hand_case():
    out = matmul_ref([[1, 2], [3, 4]], [[0], [1]])
    np.testing.assert_array_equal(out, [[2], [4]])


def test_matmul_matches_triple_loop(rng):
    a = rng.standard_normal((7, 5)).astype(np.float32)
    b = rng.standard_normal((5, 3)).astype(np.float32)
    np.testing.assert_allclose(matmul_ref(a, b), triple_loop(a, b), rtol=1e-6, atol=1e-6)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul_ref(np.ones((2, 3)), np.ones((2, 3)))


def test_constructor_rejects_non_finite():
    with pytest.raises(ValueError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(ShapeError):
        as_matrix([1.0, 2.0])


def test_matmul_bilinear(rng):
    a = rng.standard_normal((4, 6))
    b = rng.standard_normal((6, 5))
    c = rng.standard_normal((6, 5))
    lhs = matmul_ref(a, b + c)
    rhs = matmul_ref(a, b).astype(np.float64) + matmul_ref(a, c)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-5)


def test_l2_norm_cases():
    assert l2_norm(np.zeros((3, 3))) == 0
    assert l2_norm([[3, 4]]) == pytest.approx(5.0)


finite = arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3))


@given(finite, st.floats(-10, 10))
def test_l2_norm_homogeneous(m, c):
    assert l2_norm(c * m) == pytest.approx(abs(c) * l2_norm(m), rel=1e-9, abs=1e-9)


@given(finite, finite)
def test_l2_norm_triangle(a, b):
    assert l2_norm(a + b) <= l2_norm(a) + l2_norm(b) + 1e-9


def test_stddev_cases():
    assert stddev(np.ones((3, 3))) == 0
    assert stddev([[1, -1]]) == pytest.approx(1.0)


@settings(max_examples=50)
@given(finite, st.floats(-100, 100))
def test_stddev_translation_and_norm_identity(m, c):
    assert stddev(m + c) == pytest.approx(stddev(m), rel=1e-6, abs=1e-6)
    centred = m - m.mean()
    assert stddev(m) == pytest.approx(l2_norm(centred) / np.sqrt(m.size), rel=1e-6, abs=1e-12)
