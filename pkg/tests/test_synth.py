import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msvar.energies import intensity_constraint
from msvar.fields import masked_mean
from msvar.maskmap import CARDIAC, apply_mapping
from msvar.synth import (
    LV,
    RV,
    GenerationError,
    PositionClassifier,
    SynthConfig,
    bias_field,
    check_mapping_consistency,
    dataset,
    generate_confusable_phantom,
    generate_pair,
    load_dataset,
    psi_from_labels,
    save_dataset,
)

seeds = st.integers(0, 2**32 - 1)
geometries = st.sampled_from(["cardiac", "shapes"])


def test_clean_image_is_piecewise_constant():
    cfg = SynthConfig(noise_sigma=0.0, bias_amplitude=0.0)
    pair = generate_pair(cfg, seed=4)
    c = np.array(pair.provenance["intensities"])
    assert np.array_equal(pair.image, np.einsum("n,nij->ij", c, pair.labels))
    assert intensity_constraint(pair.image, pair.labels).value == 0.0


def test_same_seed_same_pair():
    a, b = generate_pair(SynthConfig(), 9), generate_pair(SynthConfig(), 9)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.labels, b.labels)
    assert a.position_class == b.position_class


def test_confusable_classes_share_intensity():
    gaps = []
    for seed in range(10):
        pair = generate_confusable_phantom(SynthConfig(), seed, position=3)
        lv, _ = masked_mean(pair.image, pair.labels[LV])
        rv, _ = masked_mean(pair.image, pair.labels[RV])
        gaps.append(abs(lv - rv))
    assert np.mean(gaps) < 0.05


@given(seeds, geometries, st.booleans(), st.sampled_from([32, 64]))
def test_labels_are_binary_partition_and_mapping_consistent(seed, geometry, confusable, size):
    pair = generate_pair(SynthConfig(size=size, geometry=geometry, confusable=confusable), seed)
    labels = pair.labels
    assert np.all((labels == 0) | (labels == 1))
    assert np.array_equal(labels.sum(axis=0), np.ones(labels.shape[1:]))
    assert np.array_equal(apply_mapping(psi_from_labels(labels), CARDIAC), labels)
    assert check_mapping_consistency(labels)
    assert pair.image.min() >= 0.0 and pair.image.max() <= 1.0


@given(seeds, geometries)
def test_noise_and_bias_free_pairs_have_zero_intensity_spread(seed, geometry):
    cfg = SynthConfig(geometry=geometry, noise_sigma=0.0, bias_amplitude=0.0)
    pair = generate_pair(cfg, seed)
    assert intensity_constraint(pair.image, pair.labels).value == 0.0


@given(seeds, st.floats(0.0, 0.9))
def test_bias_field_range(seed, a):
    b, _ = bias_field(np.random.default_rng(seed), (16, 16), a)
    assert b.min() >= 1 - a - 1e-12 and b.max() <= 1 + a + 1e-12


def test_invalid_configs():
    with pytest.raises(GenerationError):
        SynthConfig(size=4)
    with pytest.raises(ValueError):
        SynthConfig(bias_amplitude=0.95)
    with pytest.raises(ValueError):
        SynthConfig(intensity_ranges=((0.5, 0.4),) * 4)
    with pytest.raises(ValueError):
        generate_pair(SynthConfig(), 0, position=5)


def test_spread_scaled_doubles_width():
    wide = SynthConfig().spread_scaled(2)
    for (lo, hi), (wlo, whi) in zip(SynthConfig().intensity_ranges, wide.intensity_ranges):
        mid, half = (lo + hi) / 2, hi - lo  # doubled half-width
        assert (wlo, whi) == pytest.approx((max(0.0, mid - half), min(1.0, mid + half)))


def test_untrained_classifier_is_uniform():
    pair = generate_pair(SynthConfig(), 0)
    np.testing.assert_allclose(PositionClassifier().predict_proba(pair.labels), 0.2)


def test_classifier_beats_uniform_baseline():
    cfg = SynthConfig()
    train = [generate_pair(cfg, 1000 + i) for i in range(200)]
    held = [generate_pair(cfg, 5000 + i) for i in range(100)]
    clf = PositionClassifier().fit(train, iters=1000)
    sigma = math.sqrt(0.2 * 0.8 / len(held))
    assert clf.accuracy(held) > 0.2 + 3 * sigma
    assert clf.loss(held) < math.log(5)


def test_dataset_split_sizes():
    assert dataset(SynthConfig(size=32)).sizes() == (10, 15, 10)
    assert dataset(SynthConfig(size=32), 0, 0, 0).sizes() == (0, 0, 0)


def test_dataset_is_deterministic_and_unlabeled_has_no_labels():
    a = dataset(SynthConfig(size=32), 2, 2, 2, seed=3)
    b = dataset(SynthConfig(size=32), 2, 2, 2, seed=3)
    for split in ("labeled", "unlabeled", "test"):
        for x, y in zip(getattr(a, split), getattr(b, split)):
            assert np.array_equal(x.image, y.image)
    assert all(item.labels is None for item in a.unlabeled)
    assert all(item.labels is not None for item in a.test)


def test_dataset_round_trip(tmp_path):
    bundle = dataset(SynthConfig(size=32), 2, 1, 2, seed=1)
    save_dataset(bundle, tmp_path)
    back = load_dataset(tmp_path)
    assert back.sizes() == (2, 1, 2)
    for x, y in zip(bundle.test, back.test):
        np.testing.assert_allclose(x.image, y.image, atol=1 / 65535)
        assert np.array_equal(x.labels, y.labels)
        assert x.position_class == y.position_class
    with pytest.raises(OSError):
        load_dataset(tmp_path / "nowhere")
