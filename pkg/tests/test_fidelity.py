import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from anomaly_recon.errors import InvalidArgumentError
from anomaly_recon.fidelity import (
    SEG_CLASS_NAMES,
    SegModel,
    SoftmaxMap,
    dice_binary,
    entropy,
    labels_to_onehot,
    overlap_score,
    quality_score,
    train_segmentation_step,
)
from oracles import direct_dice, direct_entropy


def _random_simplex(shape, seed=0):
    rng = np.random.default_rng(seed)
    raw = rng.random((6,) + shape)
    return raw / raw.sum(axis=0, keepdims=True)


class TestEntropy:
    def test_one_hot_map_has_zero_entropy(self):
        probs = np.zeros((6, 8, 8))
        probs[2] = 1.0
        assert entropy(SoftmaxMap(probs=probs)) == 0.0

    def test_uniform_map_analytic_value(self):
        probs = np.full((6, 256, 256), 1.0 / 6.0)
        expected = 256 * 256 * math.log(6.0)
        assert entropy(SoftmaxMap(probs=probs)) == pytest.approx(expected, rel=1e-9)

    def test_matches_double_loop_oracle(self):
        probs = _random_simplex((12, 12), seed=3)
        assert entropy(SoftmaxMap(probs=probs)) == pytest.approx(direct_entropy(probs), abs=1e-8)

    @given(st.integers(0, 10_000))
    @settings(max_examples=15, deadline=None)
    def test_bounds(self, seed):
        probs = _random_simplex((6, 6), seed=seed)
        h = entropy(SoftmaxMap(probs=probs))
        assert 0.0 <= h <= 36 * math.log(6.0) + 1e-9

    def test_negative_probabilities_rejected(self):
        probs = np.full((6, 4, 4), 1.0 / 6.0)
        probs[0, 0, 0] = -0.1
        probs[1, 0, 0] += 0.1
        with pytest.raises(InvalidArgumentError):
            entropy(SoftmaxMap(probs=probs))

    def test_simplex_violation_rejected(self):
        probs = np.full((6, 4, 4), 0.5)
        with pytest.raises(InvalidArgumentError):
            SoftmaxMap(probs=probs).validate()


class _StubSeg:
    """Segmentation stand-in returning scripted probability maps."""

    def __init__(self, maps):
        self._maps = {id(k): None for k in ()}
        self.maps = maps  # list of (key_array, probs)

    def softmax_map(self, x):
        x = np.asarray(getattr(x, "data", x))
        for key, probs in self.maps:
            if key.shape == x.shape and np.allclose(key, x):
                return SoftmaxMap(probs=probs)
        raise AssertionError("no scripted map for input")


def _hard_map(index_map, n_classes=6):
    return np.eye(n_classes)[index_map].transpose(2, 0, 1).astype(np.float64)


class TestScores:
    def test_quality_score_zero_for_identical_inputs(self):
        torch.manual_seed(0)
        model = SegModel(n_classes=6, filters=(4, 8), init_seed=0)
        x = np.tanh(np.random.default_rng(0).normal(size=(32, 32))).astype(np.float32)
        assert quality_score(model, x, x) == 0.0

    def test_quality_score_negative_for_blurrier_reconstruction(self):
        # a stub with confident labels on x and diffuse ones on x_hat
        x = np.zeros((8, 8), dtype=np.float32)
        x_hat = np.ones((8, 8), dtype=np.float32)
        sharp = _hard_map(np.zeros((8, 8), dtype=int))
        blurry = np.full((6, 8, 8), 1.0 / 6.0)
        stub = _StubSeg([(x, sharp), (x_hat, blurry)])
        assert quality_score(stub, x, x_hat) < 0

    def test_overlap_identical_is_one(self):
        x = np.zeros((8, 8), dtype=np.float32)
        idx = np.zeros((8, 8), dtype=int)
        idx[2:5, 2:5] = 1
        idx[5:7, 5:7] = 2
        stub = _StubSeg([(x, _hard_map(idx))])
        assert overlap_score(stub, x, x) == 1.0

    def test_overlap_disjoint_is_zero(self):
        x = np.zeros((8, 8), dtype=np.float32)
        y = np.ones((8, 8), dtype=np.float32)
        a = np.zeros((8, 8), dtype=int)
        a[:4] = 1
        b = np.zeros((8, 8), dtype=int)
        b[4:] = 1
        stub = _StubSeg([(x, _hard_map(a)), (y, _hard_map(b))])
        assert overlap_score(stub, x, y) == 0.0

    def test_overlap_counts_only_classes_present_in_input(self):
        x = np.zeros((8, 8), dtype=np.float32)
        y = np.ones((8, 8), dtype=np.float32)
        a = np.zeros((8, 8), dtype=int)
        a[0:4] = 1  # classes present in x: {1}
        b = np.zeros((8, 8), dtype=int)
        b[0:2] = 1
        b[6:] = 2  # class 2 appears only in x_hat: ignored
        stub = _StubSeg([(x, _hard_map(a)), (y, _hard_map(b))])
        # dice for class 1: |A|=32, |B|=16, inter=16 -> 2*16/48
        assert overlap_score(stub, x, y) == pytest.approx(2 * 16 / 48)


class TestDice:
    def test_synthetic_overlap_arithmetic(self):
        a = np.zeros((20, 20), dtype=bool)
        b = np.zeros((20, 20), dtype=bool)
        a.ravel()[:100] = True
        b.ravel()[60:120] = True  # |A|=100, |B|=60, inter=40
        assert dice_binary(a, b) == pytest.approx(2 * 40 / 160)
        assert dice_binary(a, b) == pytest.approx(direct_dice(a, b))

    def test_self_dice_is_one(self):
        m = np.random.default_rng(0).random((10, 10)) > 0.5
        if not m.any():
            m[0, 0] = True
        assert dice_binary(m, m) == 1.0

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.random((6, 6)) > 0.4
        b = rng.random((6, 6)) > 0.6
        assert dice_binary(a, b) == dice_binary(b, a)


class TestTrainStep:
    def _data(self, n=4):
        rng = np.random.default_rng(0)
        x = np.tanh(rng.normal(size=(n, 16, 16))).astype(np.float32)
        idx = rng.integers(0, 6, size=(n, 16, 16))
        onehot = np.stack([labels_to_onehot(i, 6) for i in idx])
        return x, onehot

    def test_zero_learning_rate_keeps_parameters(self):
        model = SegModel(n_classes=6, filters=(4, 8), init_seed=1)
        optimizer = torch.optim.Adam(model.net.parameters(), lr=0.0)
        before = [p.detach().clone() for p in model.net.parameters()]
        train_segmentation_step(model, self._data(), optimizer)
        for b, p in zip(before, model.net.parameters()):
            assert torch.equal(b, p)

    def test_class_count_mismatch_rejected(self):
        model = SegModel(n_classes=6, filters=(4, 8), init_seed=1)
        optimizer = torch.optim.Adam(model.net.parameters(), lr=1e-3)
        x, onehot = self._data()
        with pytest.raises(InvalidArgumentError):
            train_segmentation_step(model, (x, onehot[:, :5]), optimizer)

    def test_loss_decreases_on_repeated_batch(self):
        model = SegModel(n_classes=6, filters=(4, 8), init_seed=2)
        optimizer = torch.optim.Adam(model.net.parameters(), lr=1e-3)
        batch = self._data(2)
        losses = [train_segmentation_step(model, batch, optimizer) for _ in range(30)]
        assert losses[-1] < losses[0]

    def test_seg_class_names_cover_anatomy(self):
        assert SEG_CLASS_NAMES[0] == "background"
        assert len(SEG_CLASS_NAMES) == 6
