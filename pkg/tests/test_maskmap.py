import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import numeric_grad, rel_err
from msvar.maskmap import BINARY, CARDIAC, MaskMapSpec, apply_mapping, mapping_backward


def pixel(values):
    return np.array(values, dtype=float)[:, None, None]


@pytest.mark.parametrize("psi, phi", [
    ((1, 1, 0), (1, 0, 0, 0)),
    ((0, 1, 0), (0, 1, 0, 0)),
    ((0, 0, 0), (0, 0, 0, 1)),
    ((0, 0, 1), (0, 0, 1, 0)),
])
def test_cardiac_pure_classes(psi, phi):
    assert apply_mapping(pixel(psi))[:, 0, 0].tolist() == list(phi)


def test_backward_single_pixel_example():
    dphi = np.zeros((4, 1, 1))
    dphi[1] = 1.0
    dpsi = mapping_backward(pixel((0.5, 0.5, 0.5)), dphi)
    assert dpsi[:, 0, 0].tolist() == [-0.5, 0.5, 0.0]


def test_backward_zero_gradient(rng):
    assert not mapping_backward(rng.uniform(size=(3, 4, 4)), np.zeros((4, 4, 4))).any()


def test_backward_matches_finite_differences(rng):
    psi = rng.uniform(size=(3, 4, 4))
    dphi = rng.normal(size=(4, 4, 4))
    num = numeric_grad(lambda p: np.sum(apply_mapping(p) * dphi), psi)
    assert rel_err(num, mapping_backward(psi, dphi)) < 1e-5


def test_shape_errors():
    with pytest.raises(ValueError):
        apply_mapping(np.zeros((2, 3, 3)), CARDIAC)
    with pytest.raises(ValueError):
        mapping_backward(np.zeros((3, 3, 3)), np.zeros((3, 3, 3)))


def test_spec_validation_and_parse():
    with pytest.raises(ValueError):
        MaskMapSpec(2, ((1, 3),))
    with pytest.raises(ValueError):
        MaskMapSpec(2, ((1, -1),))
    spec = MaskMapSpec.parse("1; 2,-1; 3; -2,-3", "1,2")
    assert (spec.rules, spec.inclusions) == (CARDIAC.rules, CARDIAC.inclusions)
    assert MaskMapSpec.parse(CARDIAC.format()).rules == CARDIAC.rules


def test_binary_spec_is_complementary(rng):
    psi = rng.uniform(size=(1, 5, 5))
    phi = apply_mapping(psi, BINARY)
    np.testing.assert_allclose(phi.sum(axis=0), 1.0, atol=1e-15)


@given(st.integers(0, 2**32 - 1))
def test_values_stay_in_unit_interval(seed):
    psi = np.random.default_rng(seed).uniform(size=(3, 5, 5))
    phi = apply_mapping(psi)
    assert phi.min() >= 0.0 and phi.max() <= 1.0


@given(st.integers(0, 2**32 - 1))
def test_partition_of_unity_on_consistent_binary(seed):
    r = np.random.default_rng(seed)
    psi2 = r.integers(2, size=(6, 6)).astype(float)
    psi1 = psi2 * r.integers(2, size=(6, 6))
    psi3 = (1 - psi2) * r.integers(2, size=(6, 6))
    phi = apply_mapping(np.stack([psi1, psi2, psi3]))
    assert np.array_equal(phi.sum(axis=0), np.ones((6, 6)))


@st.composite
def small_specs(draw):
    n_channels = draw(st.integers(1, 3))
    terms = st.lists(st.integers(1, n_channels), min_size=1, max_size=n_channels, unique=True)
    rules = []
    for _ in range(draw(st.integers(1, 4))):
        chans = draw(terms)
        signs = draw(st.lists(st.booleans(), min_size=len(chans), max_size=len(chans)))
        rules.append(tuple(c if s else -c for c, s in zip(chans, signs)))
    return MaskMapSpec(n_channels, tuple(rules))


@given(small_specs(), st.integers(0, 2**32 - 1))
def test_backward_matches_finite_differences_for_any_spec(spec, seed):
    r = np.random.default_rng(seed)
    psi = r.uniform(size=(spec.n_channels, 3, 3))
    dphi = r.normal(size=(spec.n_classes, 3, 3))
    num = numeric_grad(lambda p: np.sum(apply_mapping(p, spec) * dphi), psi)
    assert rel_err(num, mapping_backward(psi, dphi, spec)) < 1e-6


@given(small_specs(), st.integers(0, 2**32 - 1), st.floats(0.01, 0.5))
def test_monotone_in_each_channel(spec, seed, delta):
    r = np.random.default_rng(seed)
    psi = r.uniform(0, 0.5, size=(spec.n_channels, 2, 2))
    base = apply_mapping(psi, spec)
    for k in range(spec.n_channels):
        bumped = psi.copy()
        bumped[k] += delta
        diff = apply_mapping(bumped, spec) - base
        for n, rule in enumerate(spec.rules):
            if k + 1 in rule:
                assert np.all(diff[n] >= -1e-15)
            elif -(k + 1) in rule:
                assert np.all(diff[n] <= 1e-15)
            else:
                assert np.all(diff[n] == 0)
