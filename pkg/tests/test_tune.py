import csv
import math

import numpy as np
import pytest

from finecount.errors import CapabilityError, FrozenBackendError, TuningError
from finecount.rng import child_rng
from finecount.specializer import (
    AdamW,
    BilinearToySegmenter,
    ConceptEmbedding,
    InitStrategy,
    TuningConfig,
    load_concept,
    save_concept,
    sharpness,
    tune,
)
from finecount.specializer.sharpness import scaled_sigma
from finecount.specializer.tune import EpochRecord, select_checkpoint, write_history_csv
from finecount.synthesis import Polarity


# ---------------------------------------------------------------- AdamW


def adamw_oracle(z0, grads, lr, wd=0.01, b1=0.9, b2=0.999, eps=1e-8):
    """Step-by-step scalar reimplementation of decoupled-decay Adam."""
    z = np.array(z0, dtype=float)
    m = np.zeros_like(z)
    v = np.zeros_like(z)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        z = z - lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * z)
    return z


def test_adamw_matches_reference(rng):
    z = rng.normal(size=16)
    grads = [rng.normal(size=16) for _ in range(12)]
    opt = AdamW(weight_decay=0.01)
    got = z.copy()
    for g in grads:
        got = opt.step(got, g, 5e-3)
    assert np.allclose(got, adamw_oracle(z, grads, 5e-3), rtol=1e-12)


def test_adamw_decay_only_when_grad_zero(rng):
    z = rng.normal(size=8)
    opt = AdamW(weight_decay=0.1)
    stepped = opt.step(z.copy(), np.zeros(8), lr=0.01)
    assert np.allclose(stepped, z - 0.01 * 0.1 * z, rtol=1e-12)


# ---------------------------------------------------------------- sharpness


def test_sharpness_matches_loop_oracle(rng):
    z = rng.normal(size=32)

    def loss_fn(zz):
        return float(np.sum(zz ** 2))

    K, sigma = 8, 0.05
    got = sharpness(z, loss_fn, K, sigma, np.random.default_rng(99))
    base = loss_fn(z)
    oracle_rng = np.random.default_rng(99)
    total = 0.0
    for _ in range(K):
        delta = oracle_rng.normal(0.0, sigma, size=z.shape)
        total += max(0.0, loss_fn(z + delta) - base)
    assert got == pytest.approx(total / K, rel=1e-12)


def test_sharpness_nonnegative_and_zero_at_maximum(rng):
    # loss is constant: no perturbation can increase it
    got = sharpness(rng.normal(size=8), lambda z: 1.0, 16, 0.1,
                    np.random.default_rng(0))
    assert got == 0.0


def test_sharpness_validates_arguments(rng):
    with pytest.raises(ValueError):
        sharpness(np.zeros(4), lambda z: 0.0, 0, 0.1, rng)
    with pytest.raises(ValueError):
        sharpness(np.zeros(4), lambda z: 0.0, 4, 0.0, rng)


def test_scaled_sigma():
    z = np.ones(512)  # norm sqrt(512)
    assert scaled_sigma(z, 1e-2) == pytest.approx(1e-2, rel=1e-12)
    assert scaled_sigma(np.zeros(512), 1e-2) == pytest.approx(1e-2, rel=1e-12)
    assert scaled_sigma(2 * np.ones(512), 1e-2) == pytest.approx(2e-2, rel=1e-12)


# ---------------------------------------------------------------- selection


def rec(epoch, val, sharp):
    return EpochRecord(epoch=epoch, train_loss=0.0, val_loss=val,
                       sharpness=sharp, lr=1.0)


def test_select_checkpoint_prefers_flat_then_val():
    # 10 epochs -> quota 2 flattest: epochs 4 (sharp .1) and 7 (sharp .2)
    history = [rec(e, val, sharp) for e, (val, sharp) in enumerate([
        (0.30, 0.9), (0.28, 0.8), (0.26, 0.7), (0.24, 0.6), (0.40, 0.1),
        (0.20, 0.9), (0.18, 0.9), (0.35, 0.2), (0.16, 0.9), (0.15, 0.9),
    ])]
    # lowest val overall is epoch 9, but it is not among the flattest 20%
    assert select_checkpoint(history) == 7


def test_select_checkpoint_quota_rounds_up():
    history = [rec(e, 1.0 - 0.1 * e, 0.5) for e in range(6)]
    # ceil(0.2 * 6) = 2; all sharpness equal -> first two epochs; best val = epoch 1
    assert select_checkpoint(history) == 1


def test_select_checkpoint_ties_break_low_epoch():
    history = [rec(e, 0.5, 0.5) for e in range(5)]
    assert select_checkpoint(history) == 0


def test_select_checkpoint_order_independent():
    history = [rec(e, val, sharp) for e, (val, sharp) in enumerate([
        (0.5, 0.3), (0.4, 0.2), (0.3, 0.1), (0.2, 0.9), (0.1, 0.8),
    ])]
    expected = select_checkpoint(history)
    assert select_checkpoint(list(reversed(history))) == expected


def test_select_checkpoint_empty_history():
    with pytest.raises(TuningError):
        select_checkpoint([])


# ---------------------------------------------------------------- tune


def small_cfg(**kw):
    base = dict(epochs=6, seed=0, batch_size=None)
    base.update(kw)
    return TuningConfig(**base)


def test_tune_produces_history_and_valid_epoch(red_spec, red_pairs, segmenter):
    concept = tune(red_spec, red_pairs, segmenter, small_cfg())
    assert len(concept.history) == 6
    assert 0 <= concept.selected_epoch < 6
    assert concept.z.shape == (512,)
    assert concept.category == "red disk"
    assert concept.init is InitStrategy.TEXT_ENCODER


def test_tune_needs_positive_pairs(red_spec, red_pairs, segmenter):
    negs = [p for p in red_pairs if p.polarity is Polarity.NEGATIVE]
    with pytest.raises(TuningError):
        tune(red_spec, negs, segmenter, small_cfg())


def test_tune_needs_gradient_capability(red_spec, red_pairs, segmenter):
    class NoGrad:
        def encode_image(self, image):
            return segmenter.encode_image(image)

        def text_embed(self, name):
            return segmenter.text_embed(name)

        def decode(self, features, z):
            return segmenter.decode(features, z)

    with pytest.raises(CapabilityError):
        tune(red_spec, red_pairs, NoGrad(), small_cfg())


def test_tune_detects_thawed_backend(red_spec, red_pairs):
    class Thawing(BilinearToySegmenter):
        def decode_vjp(self, features, z, upstream):
            self._basis = self._basis * 1.000001  # silently drifts
            return super().decode_vjp(features, z, upstream)

    with pytest.raises(FrozenBackendError):
        tune(red_spec, red_pairs, Thawing(seed=0), small_cfg())


def test_tune_reduces_loss(red_spec, red_pairs, segmenter):
    concept = tune(red_spec, red_pairs, segmenter,
                   small_cfg(epochs=30, batch_size=8))
    assert concept.history[-1].train_loss < concept.history[0].train_loss


def test_tune_is_deterministic(red_spec, red_pairs, segmenter):
    a = tune(red_spec, red_pairs, segmenter, small_cfg())
    b = tune(red_spec, red_pairs, segmenter, small_cfg())
    assert np.array_equal(a.z, b.z)
    assert a.selected_epoch == b.selected_epoch
    assert a.history == b.history


def test_tune_seed_changes_results(red_spec, red_pairs, segmenter):
    a = tune(red_spec, red_pairs, segmenter, small_cfg(seed=0, init="random"))
    b = tune(red_spec, red_pairs, segmenter, small_cfg(seed=1, init="random"))
    assert not np.array_equal(a.z, b.z)


def test_tune_random_init(red_spec, red_pairs, segmenter):
    concept = tune(red_spec, red_pairs, segmenter, small_cfg(init="random"))
    assert concept.init is InitStrategy.RANDOM


def test_plateau_decays_lr(red_spec, red_pairs, segmenter):
    class Frozen:
        def step(self, z, grad, lr):
            return z  # validation loss can never improve

    cfg = small_cfg(epochs=12, plateau_patience=2, plateau_factor=0.9)
    concept = tune(red_spec, red_pairs, segmenter, cfg, stepper=Frozen())
    lrs = [r.lr for r in concept.history]
    # stalls accumulate from epoch 1, so decays land every `patience` epochs
    assert lrs[-1] == pytest.approx(cfg.lr * 0.9 ** 5, rel=1e-12)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_custom_stepper_is_used(red_spec, red_pairs, segmenter):
    calls = []

    class Recording:
        def step(self, z, grad, lr):
            calls.append(lr)
            return z - lr * grad

    tune(red_spec, red_pairs, segmenter, small_cfg(epochs=2), stepper=Recording())
    assert len(calls) == 2


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(TuningError):
        TuningConfig(epochs=0)
    with pytest.raises(TuningError):
        TuningConfig(val_fraction=1.0)
    with pytest.raises(TuningError):
        TuningConfig(lr=0.0)
    assert TuningConfig(init="random").init is InitStrategy.RANDOM


# ---------------------------------------------------------------- persistence


def test_concept_json_round_trip(red_spec, red_pairs, segmenter, tmp_path):
    concept = tune(red_spec, red_pairs, segmenter, small_cfg())
    path = tmp_path / "concept.json"
    save_concept(concept, str(path), extra={"config_hash": "abc"})
    back = load_concept(str(path))
    assert np.array_equal(back.z, concept.z)
    assert back.selected_epoch == concept.selected_epoch
    assert back.history == concept.history
    assert back.category == concept.category


def test_history_csv(red_spec, red_pairs, segmenter, tmp_path):
    concept = tune(red_spec, red_pairs, segmenter, small_cfg())
    path = tmp_path / "history.csv"
    write_history_csv(concept.history, str(path))
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "sharpness", "lr"]
    assert len(rows) == 1 + len(concept.history)
    assert float(rows[1][1]) == pytest.approx(concept.history[0].train_loss, rel=1e-9)


def test_embedding_dimension_enforced():
    with pytest.raises(TuningError):
        ConceptEmbedding(z=np.zeros(16), category="x", init=InitStrategy.RANDOM)
