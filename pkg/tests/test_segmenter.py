import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import rel_err
from msvar import segmenter
from msvar.energies import LossWeights, soft_dice_loss
from msvar.maskmap import CARDIAC, apply_mapping
from msvar.segmenter import (
    Adam,
    SegModel,
    TrainConfig,
    TrainingError,
    backward,
    forward,
    load_training_state,
    predict,
    save_checkpoint,
    train,
)
from msvar.synth import SynthConfig, dataset, generate_pair, item_seed
from msvar.variational import harden


@pytest.fixture(scope="module")
def pairs():
    return [generate_pair(SynthConfig(size=32), item_seed(0, "labeled", i)) for i in range(10)]


@pytest.fixture(scope="module")
def small_bundle():
    return dataset(SynthConfig(size=16, bias_amplitude=0.1), 3, 3, 0, seed=2)


def random_heads(model, seed=0):
    r = np.random.default_rng(seed)
    for k in ("seg_w", "seg_b", "bias_w", "bias_b"):
        model.params[k] = r.normal(scale=0.5, size=model.params[k].shape)
    model.touch()
    return model


def test_fresh_model_outputs_one_half(rng):
    psi, bias, _ = forward(SegModel(3, seed=1), rng.uniform(size=(9, 7)))
    assert psi.shape == (3, 9, 7) and bias.shape == (9, 7)
    assert np.all(psi == 0.5) and np.all(bias == 0.5)


def test_fresh_model_predicts_first_class(rng):
    image = rng.uniform(size=(6, 6))
    phi, labels = predict(SegModel(3), image)
    np.testing.assert_array_equal(phi[:, 0, 0], [0.5, 0.25, 0.5, 0.25])
    assert labels.shape == image.shape and not labels.any()


def test_forward_is_deterministic_and_in_range(rng):
    image = rng.uniform(size=(2, 10, 10))
    a = forward(random_heads(SegModel(3, seed=5)), image)
    b = forward(random_heads(SegModel(3, seed=5)), image)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert a[0].shape == (2, 3, 10, 10)
    assert 0 < a[0].min() and a[0].max() < 1 and 0 < a[1].min() and a[1].max() < 1


def test_undersized_input():
    with pytest.raises(ValueError):
        forward(SegModel(), np.zeros((2, 5)))


def test_zero_upstream_gives_zero_gradients(rng):
    model = random_heads(SegModel())
    _, _, cache = forward(model, rng.uniform(size=(8, 8)))
    grads = backward(model, cache, np.zeros((3, 8, 8)), np.zeros((8, 8)))
    assert all(not g.any() for g in grads.values())


def test_backward_is_linear_in_upstream(rng):
    model = random_heads(SegModel())
    _, _, cache = forward(model, rng.uniform(size=(8, 8)))
    gp, gb = rng.normal(size=(3, 8, 8)), rng.normal(size=(8, 8))
    one = backward(model, cache, gp, gb)
    two = backward(model, cache, 2 * gp, 2 * gb)
    assert all(np.array_equal(2 * one[k], two[k]) for k in one)


def test_stale_cache_is_rejected(rng):
    model = SegModel()
    _, _, cache = forward(model, rng.uniform(size=(5, 5)))
    Adam(model.params).step(model, {k: np.ones_like(v) for k, v in model.params.items()})
    with pytest.raises(ValueError):
        backward(model, cache, np.zeros((3, 5, 5)), np.zeros((5, 5)))


def test_backward_matches_finite_differences_on_dice_loss(rng):
    model = random_heads(SegModel(3, seed=3, width=4))
    image = rng.uniform(size=(8, 8))
    target = (np.arange(4)[:, None, None] == rng.integers(4, size=(8, 8))).astype(float)

    def loss():
        psi, _, _ = forward(model, image)
        return soft_dice_loss(apply_mapping(psi), target).value

    psi, _, cache = forward(model, image)
    from msvar.maskmap import mapping_backward
    g_psi = mapping_backward(psi, soft_dice_loss(apply_mapping(psi), target).grad_phi)
    grads = backward(model, cache, g_psi, np.zeros((8, 8)))
    h = 1e-4
    for name, p in model.params.items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = loss()
            p[idx] = orig - h
            down = loss()
            p[idx] = orig
            num[idx] = (up - down) / (2 * h)
        assert rel_err(num, grads[name]) < 1e-3, name


def test_adam_zero_gradient_is_a_no_op():
    model = random_heads(SegModel())
    before = {k: v.copy() for k, v in model.params.items()}
    opt = Adam(model.params, lr=0.1)
    for _ in range(3):
        opt.step(model, {k: np.zeros_like(v) for k, v in model.params.items()})
    assert all(np.array_equal(before[k], model.params[k]) for k in before)


def test_supervised_training_halves_dice_loss(pairs):
    def mean_loss(m):
        return np.mean([soft_dice_loss(apply_mapping(forward(m, p.image)[0]), p.labels).value
                        for p in pairs])

    model = SegModel(3, seed=0)
    start = mean_loss(model)
    cfg = TrainConfig(learning_rate=1e-3, total_iters=200, pretrain_iters=200,
                      weights=LossWeights(beta=0.0, gamma=0.0))
    train(model, pairs, (), cfg)
    assert mean_loss(model) <= 0.5 * start


def test_log_components_sum_to_total(small_bundle):
    cfg = TrainConfig(learning_rate=1e-3, total_iters=6, pretrain_iters=2, batch_size=4,
                      weights=LossWeights(beta=0.5, gamma=0.3))
    _, log = train(SegModel(), small_bundle.labeled, small_bundle.unlabeled, cfg)
    assert [r["phase"] for r in log] == ["pretrain"] * 2 + ["joint"] * 4
    for rec in log:
        assert abs(rec["sup"] + rec["un"] + rec["ai"] - rec["total"]) <= 1e-9
    assert all(rec["transforms"] for rec in log[2:])


def test_no_labels_with_alpha_zero(small_bundle):
    w = LossWeights(alpha=0.0, beta=0.5, gamma=0.3)
    cfg = TrainConfig(learning_rate=1e-3, total_iters=4, pretrain_iters=2, batch_size=2,
                      weights=w)
    _, log = train(SegModel(), [], small_bundle.unlabeled, cfg)
    assert len(log) == 4
    for rec in log:
        assert rec["sup"] == 0.0
        assert rec["total"] == rec["un"] + rec["ai"]
    with pytest.raises(ValueError):
        train(SegModel(), [], small_bundle.unlabeled, TrainConfig())


def test_training_is_reproducible(small_bundle, tmp_path):
    cfg = TrainConfig(learning_rate=1e-3, total_iters=5, pretrain_iters=2, batch_size=2)
    runs = []
    for k in range(2):
        model, log = train(SegModel(seed=4), small_bundle.labeled, small_bundle.unlabeled, cfg,
                           log_path=tmp_path / f"log{k}.tsv")
        runs.append((model, log))
    assert (tmp_path / "log0.tsv").read_bytes() == (tmp_path / "log1.tsv").read_bytes()
    for k in runs[0][0].params:
        assert np.array_equal(runs[0][0].params[k], runs[1][0].params[k])


def test_resume_is_bit_exact(small_bundle, tmp_path):
    cfg = TrainConfig(learning_rate=1e-3, total_iters=6, pretrain_iters=2, batch_size=2)
    full, full_log = train(SegModel(seed=1), small_bundle.labeled, small_bundle.unlabeled, cfg)

    half_cfg = TrainConfig(learning_rate=1e-3, total_iters=3, pretrain_iters=2, batch_size=2)
    model = SegModel(seed=1)
    opt = Adam(model.params, 1e-3)
    train(model, small_bundle.labeled, small_bundle.unlabeled, half_cfg, optimizer=opt)
    save_checkpoint(model, tmp_path / "half.ckpt", opt, 3)
    model, opt, step = load_training_state(tmp_path / "half.ckpt")
    assert step == 3
    resumed, log = train(model, small_bundle.labeled, small_bundle.unlabeled, cfg,
                         optimizer=opt, start_step=step)
    assert [r["total"] for r in log] == [r["total"] for r in full_log[3:]]
    for k in full.params:
        assert np.array_equal(full.params[k], resumed.params[k])


def test_non_finite_loss_names_step(small_bundle):
    bad = [generate_pair(SynthConfig(size=16), 0)]
    bad[0].image = np.full((16, 16), np.nan)
    with pytest.raises(TrainingError, match="step 0"):
        train(SegModel(), bad, (), TrainConfig(total_iters=1, batch_size=1))


def test_checkpoint_round_trip_and_errors(tmp_path):
    model = random_heads(SegModel(3, seed=8))
    save_checkpoint(model, tmp_path / "m.ckpt")
    back, opt, step = load_training_state(tmp_path / "m.ckpt")
    assert opt is None and step is None
    assert all(np.array_equal(model.params[k], back.params[k]) for k in model.params)
    data = (tmp_path / "m.ckpt").read_bytes()
    assert data.startswith(b"MSVAR1\n")
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE\n")
    with pytest.raises(ValueError):
        load_training_state(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(data[:-8])
    with pytest.raises(ValueError):
        load_training_state(tmp_path / "short.ckpt")


@given(st.integers(3, 12), st.integers(3, 12))
def test_output_shapes(h, w):
    psi, bias, _ = forward(SegModel(2, width=4), np.zeros((h, w)))
    assert psi.shape == (2, h, w) and bias.shape == (h, w)


def test_predict_is_composition(pairs):
    model = random_heads(SegModel(seed=2), seed=3)
    image = pairs[0].image
    phi, labels = predict(model, image)
    psi, _, _ = segmenter.forward(model, image)
    assert np.array_equal(labels, harden(apply_mapping(psi, CARDIAC)))
    assert np.array_equal(phi, apply_mapping(psi, CARDIAC))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
