import json
import warnings

import numpy as np
import pytest

from toc_align.channel import ChannelSpec
from toc_align.errors import ValidationError
from toc_align.estimators import AlignmentMap
from toc_align.evaluation import top1_accuracy
from toc_align.features import TaskSpec, generate_task, select_anchors
from toc_align.models import (DegenerateFeatureWarning, TocSystem, TrainConfig, build_system,
                              cross_model_infer, decode, encode, loss_and_grads, lower_bound_estimate,
                              server_alignment, train_baseline, train_on_device_aligned)
from toc_align.nn import MLP, Dense, cross_entropy, log_softmax

NOISELESS = ChannelSpec(sigma=0.0)


def test_decode_breaks_ties_to_lowest_index():
    sys = build_system("t", 2, 3, d=2)
    sys.decoder = MLP([Dense(np.zeros((3, 2)), np.array([1.0, 1.0, 0.0]))])
    preds, logp = decode(sys, np.ones((2, 4)))
    assert np.array_equal(preds, [0, 0, 0, 0])
    assert np.allclose(np.exp(logp).sum(axis=0), 1.0, atol=1e-12)


def test_log_softmax_is_stable_and_normalized(rng):
    logits = 1e3 * rng.standard_normal((10, 50))
    p = np.exp(log_softmax(logits))
    assert np.all(np.isfinite(p)) and np.allclose(p.sum(axis=0), 1.0, atol=1e-12)


def test_cross_entropy_at_uniform_logits():
    loss, _ = cross_entropy(np.zeros((10, 5)), np.arange(5))
    assert loss == pytest.approx(np.log(10))


def test_untrained_system_is_near_chance(task):
    sys = build_system("u", 16, 10, seed=0)
    test = task.subset("test")
    accs = [top1_accuracy(cross_model_infer(build_system("u", 16, 10, seed=s), build_system("u", 16, 10, seed=s),
                                            None, NOISELESS, test.features), test.labels) for s in range(5)]
    assert np.mean(accs) < 0.3
    assert sys.n_out == 16


def test_training_is_deterministic(task):
    cfg = TrainConfig(epochs=3, seed=4)
    a = train_baseline(build_system("d", 16, 10, seed=1), task, cfg)
    b = train_baseline(build_system("d", 16, 10, seed=1), task, cfg)
    assert a.encoder.get_flat().tobytes() == b.encoder.get_flat().tobytes()
    assert a.training_log == b.training_log


def test_zero_sigma_matches_no_channel(task):
    sys = build_system("z", 16, 10, seed=1)
    a = train_baseline(sys, task, TrainConfig(epochs=2, channel=NOISELESS))
    b = train_baseline(sys, task, TrainConfig(epochs=2, channel=None))
    assert np.array_equal(a.decoder.get_flat(), b.decoder.get_flat())


def test_trained_system_matched_accuracy_and_loss_decrease(plain_pair, task):
    a, _ = plain_pair
    test = task.subset("test")
    preds = cross_model_infer(a, a, None, ChannelSpec(snr_db=18.0, seed=2), test.features)
    assert top1_accuracy(preds, test.labels) >= 0.95
    log = np.convolve(a.training_log, np.ones(5) / 5, mode="valid")
    assert log[-1] < log[0]


def test_plain_swap_without_alignment_collapses(plain_pair, task):
    a, b = plain_pair
    test = task.subset("test")
    swapped = top1_accuracy(cross_model_infer(a, b, None, NOISELESS, test.features), test.labels)
    matched = top1_accuracy(cross_model_infer(b, b, None, NOISELESS, test.features), test.labels)
    assert matched - swapped > 0.5


def test_server_alignment_restores_swap(plain_pair, task):
    a, b = plain_pair
    test = task.subset("test")
    anchors = select_anchors(task, 100, pool="train", seed=2)
    ch = ChannelSpec(snr_db=18.0, seed=3)
    for est in ("ls", "mmse", "gd"):
        m = server_alignment(a, b, anchors.samples, ch, est)
        acc = top1_accuracy(cross_model_infer(a, b, m, ch, test.features), test.labels)
        assert acc >= 0.9, est


def test_identity_alignment_equals_matched_pipeline(plain_pair, task):
    a, _ = plain_pair
    x = task.subset("test").features
    ch = ChannelSpec(snr_db=6.0, seed=1)
    assert np.array_equal(cross_model_infer(a, a, AlignmentMap.identity(16), ch, x),
                          cross_model_infer(a, a, None, ch, x))


def test_relative_swap_keeps_accuracy(relative_pair, task):
    a, b, anchors = relative_pair
    test = task.subset("test")
    ch = ChannelSpec(snr_db=18.0, seed=7)
    matched = top1_accuracy(cross_model_infer(b, b, None, ch, test.features), test.labels)
    swapped = top1_accuracy(cross_model_infer(a, b, None, ch, test.features), test.labels)
    assert matched >= 0.9 and matched - swapped < 0.06


def test_relative_encoder_is_invariant_to_orthogonal_latent_maps(relative_pair):
    a, _, anchors = relative_pair
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((16, 16)))
    rotated = TocSystem("rot", MLP([*[Dense(l.weight.copy(), l.bias.copy()) for l in a.encoder.dense[:-1]],
                                    Dense(3.0 * q @ a.encoder.dense[-1].weight, 3.0 * q @ a.encoder.dense[-1].bias)]),
                        a.decoder, "relative", anchors.samples)
    x = np.random.default_rng(1).standard_normal((16, 20))
    assert np.max(np.abs(encode(a, x) - encode(rotated, x))) < 1e-9


def test_relative_rejects_mismatched_anchor_sets(relative_pair, task):
    a, _, _ = relative_pair
    other = select_anchors(task, 32, pool="train", seed=99)
    b = build_system("x", 16, 10, mode="relative", anchors=other)
    with pytest.raises(ValidationError, match="anchor"):
        cross_model_infer(a, b, None, NOISELESS, task.features[:, :3])
    with pytest.raises(ValidationError):
        train_on_device_aligned(a, task, other, TrainConfig(epochs=1))
    with pytest.raises(ValidationError):
        cross_model_infer(a, a, AlignmentMap.identity(32), NOISELESS, task.features[:, :3])


def test_cached_anchor_features_match_recomputed(relative_pair):
    a, _, _ = relative_pair
    x = np.random.default_rng(3).standard_normal((16, 10))
    fresh = encode(a, x)
    a.cache_anchor_features()
    try:
        assert np.array_equal(encode(a, x), fresh)
    finally:
        a.clear_anchor_cache()


@pytest.mark.parametrize("mode", ["plain", "relative"])
def test_backprop_matches_finite_differences(mode, task):
    anchors = select_anchors(task, 6, pool="train", seed=1)
    sys = build_system("g", 16, 10, d=4, mode=mode, anchors=anchors, encoder_hidden=5, decoder_hidden=5, seed=2)
    x, y = task.features[:, :7], task.labels[:7]
    noise = 0.1 * np.random.default_rng(0).standard_normal((2, sys.n_out, 7))
    loss_and_grads(sys, x, y, noise)
    analytic = np.concatenate([g.ravel() for g in sys.grads()])
    params = sys.params()
    fd = []
    h = 1e-6
    for p in params:
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss_and_grads(sys, x, y, noise)
            p[idx] = old - h
            down = loss_and_grads(sys, x, y, noise)
            p[idx] = old
            fd.append((up - down) / (2 * h))
    assert np.max(np.abs(np.array(fd) - analytic)) < 1e-6


def test_lower_bound_stderr_shrinks_with_more_draws(plain_pair, task):
    a, _ = plain_pair
    test = task.subset("test")
    ch = ChannelSpec(snr_db=0.0, seed=4)
    mean10, se10 = lower_bound_estimate(a, a, None, test, ch, 10)
    mean100, se100 = lower_bound_estimate(a, a, None, test, ch, 100)
    assert mean10 < 0 and mean100 < 0
    assert 1.5 < se10 / se100 < 6.5
    assert abs(mean10 - mean100) < 4 * se10


def test_lower_bound_is_zero_minus_at_high_snr(plain_pair, task):
    a, b = plain_pair
    test = task.subset("test")
    good, _ = lower_bound_estimate(a, a, None, test, ChannelSpec(snr_db=30.0), 3)
    bad, _ = lower_bound_estimate(a, b, None, test, ChannelSpec(snr_db=30.0), 3)
    assert bad < good <= 0


def test_zero_features_warn():
    sys = build_system("w", 3, 2, d=2)
    for layer in sys.encoder.dense:
        layer.weight[...] = 0
    with pytest.warns(DegenerateFeatureWarning):
        encode(sys, np.ones((3, 2)))


def test_checkpoint_round_trip(relative_pair, plain_pair):
    for sys in (plain_pair[0], relative_pair[0]):
        back = TocSystem.from_dict(json.loads(json.dumps(sys.to_dict())))
        x = np.random.default_rng(5).standard_normal((16, 4))
        assert np.array_equal(encode(back, x), encode(sys, x))
        assert back.anchor_fingerprint == sys.anchor_fingerprint


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(epochs=0)
    with pytest.raises(ValidationError):
        build_system("r", 4, 2, mode="relative")
    with pytest.raises(ValidationError):
        train_baseline(build_system("r", 16, 10, mode="relative",
                                    anchors=select_anchors(generate_task(TaskSpec(10, 16, 5, 2.0)), 4)),
                       generate_task(TaskSpec(10, 16, 5, 2.0)))
