import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import numeric_grad, rel_err
from msvar.fields import (
    as_field,
    forward_diff,
    forward_diff_adjoint,
    masked_mean,
    read_field_text,
    read_pgm,
    tv_value_and_grad,
    write_field_text,
    write_pgm,
    write_ppm,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def step_field():
    f = np.zeros((8, 8))
    f[:, 4:] = 1.0
    return f


def test_constant_field_has_zero_differences():
    gx, gy = forward_diff(np.full((5, 7), 5.0))
    assert not gx.any() and not gy.any()


def test_column_step_differences():
    gx, gy = forward_diff(step_field())
    assert np.count_nonzero(gx == 1.0) == 8
    assert np.count_nonzero(gx) == 8
    assert not gy.any()


def test_single_pixel_differences():
    gx, gy = forward_diff(np.array([[3.0]]))
    assert gx.tolist() == [[0.0]] and gy.tolist() == [[0.0]]


def test_adjoint_identity(rng):
    f = rng.normal(size=(6, 9))
    px, py = rng.normal(size=(2, 6, 9))
    gx, gy = forward_diff(f)
    lhs = np.sum(gx * px) + np.sum(gy * py)
    rhs = np.sum(f * forward_diff_adjoint(px, py))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_tv_constant_is_zero():
    value, grad = tv_value_and_grad(np.full((6, 6), 0.3))
    assert value == 0.0
    assert not grad.any()


def test_tv_step_matches_brute_force_sum():
    f, eps = step_field(), 1e-6
    total = 0.0
    for i in range(8):
        for j in range(8):
            dx = f[i, j + 1] - f[i, j] if j + 1 < 8 else 0.0
            dy = f[i + 1, j] - f[i, j] if i + 1 < 8 else 0.0
            total += math.sqrt(dx * dx + dy * dy + eps * eps) - eps
    value, _ = tv_value_and_grad(f, eps)
    assert value == pytest.approx(total, abs=1e-12)
    assert value == pytest.approx(8.0, abs=1e-4)


@pytest.mark.parametrize("eps", [0.0, -1.0])
def test_tv_rejects_nonpositive_eps(eps):
    with pytest.raises(ValueError):
        tv_value_and_grad(np.zeros((3, 3)), eps)


def test_tv_stack_sums_channels(rng):
    f = rng.uniform(size=(3, 5, 5))
    total = sum(tv_value_and_grad(ch)[0] for ch in f)
    assert tv_value_and_grad(f)[0] == pytest.approx(total, rel=1e-12)


@given(arrays(np.float64, (8, 8), elements=st.floats(0, 1)),
       st.floats(-5, 5), st.sampled_from([1e-3, 1e-2, 0.1]))
def test_tv_nonnegative_and_shift_invariant(f, shift, eps):
    v, _ = tv_value_and_grad(f, eps)
    v_shift, _ = tv_value_and_grad(f + shift, eps)
    assert v >= 0
    assert v_shift == pytest.approx(v, rel=1e-9, abs=1e-9)


@given(st.integers(0, 2**32 - 1), st.sampled_from([1e-2, 0.1, 1.0]))
def test_tv_gradient_matches_finite_differences(seed, eps):
    f = np.random.default_rng(seed).uniform(size=(8, 8))
    _, grad = tv_value_and_grad(f, eps)
    num = numeric_grad(lambda x: tv_value_and_grad(x, eps)[0], f, h=1e-5)
    assert rel_err(num, grad) < 1e-4


def test_masked_mean_examples():
    assert masked_mean(np.full((3, 3), 2.0), np.ones((3, 3))) == (2.0, False)
    assert masked_mean(np.arange(4.0).reshape(2, 2), np.zeros((2, 2))) == (0.0, True)
    mean, degenerate = masked_mean(np.array([[1.0, 2.0], [3.0, 4.0]]),
                                   np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert mean == 3.5 and not degenerate


def test_masked_mean_shape_mismatch():
    with pytest.raises(ValueError):
        masked_mean(np.zeros((2, 2)), np.zeros((2, 3)))


@given(arrays(np.float64, (4, 5), elements=finite),
       arrays(np.float64, (4, 5), elements=st.floats(0, 1)))
def test_masked_mean_within_range(f, w):
    mean, degenerate = masked_mean(f, w)
    if w.sum() >= 1e-12:
        assert not degenerate
        assert f.min() - 1e-9 <= mean <= f.max() + 1e-9


def test_as_field_validation():
    with pytest.raises(ValueError):
        as_field(np.zeros(3))
    with pytest.raises(ValueError):
        as_field(np.array([[np.nan]]))


@pytest.mark.parametrize("bits", [8, 16])
def test_pgm_round_trip(tmp_path, bits):
    maxval = 2**bits - 1
    f = np.random.default_rng(0).integers(0, maxval + 1, size=(5, 7)) / maxval
    write_pgm(tmp_path / "a.pgm", f, bits=bits)
    np.testing.assert_allclose(read_pgm(tmp_path / "a.pgm"), f, atol=1e-12)


def test_pgm_integer_labels_and_comments(tmp_path):
    labels = np.array([[0, 1, 2], [3, 2, 1]], dtype=float)
    write_pgm(tmp_path / "l.pgm", labels, normalized=False)
    assert read_pgm(tmp_path / "l.pgm", normalize=False).tolist() == labels.tolist()
    raw = b"P5\n# comment\n2 1\n255\n" + bytes([0, 255])
    (tmp_path / "c.pgm").write_bytes(raw)
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[0.0, 1.0]]


def test_pgm_bad_file_raises_oserror(tmp_path):
    (tmp_path / "bad.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(OSError):
        read_pgm(tmp_path / "bad.pgm")
    with pytest.raises(OSError):
        read_pgm(tmp_path / "missing.pgm")


def test_ppm_header(tmp_path):
    write_ppm(tmp_path / "x.ppm", np.zeros((3, 4, 3)))
    data = (tmp_path / "x.ppm").read_bytes()
    assert data.startswith(b"P6\n4 3\n255\n")
    assert len(data) == len(b"P6\n4 3\n255\n") + 36


def test_field_text_round_trip(tmp_path, rng):
    f = rng.normal(size=(3, 4))
    write_field_text(tmp_path / "f.txt", f)
    assert np.array_equal(read_field_text(tmp_path / "f.txt"), f)
    (tmp_path / "g.txt").write_text("FIELD 2 2\n1\n2\n3\n")
    with pytest.raises(ValueError):
        read_field_text(tmp_path / "g.txt")
