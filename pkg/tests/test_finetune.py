"""Pooling identities and the supervised fine-tuning loop."""

import dataclasses
import math

import numpy as np
import pytest

from seralign import autodiff as ad
from seralign.autodiff import Tensor
from seralign.cluster import kmeans_fit
from seralign.corpus import EmotionLabel, GenerationSpec, generate_corpus, make_folds
from seralign.encoder import EncoderConfig, init_params
from seralign.errors import ConfigurationError, InputError, ProvenanceError
from seralign.finetune import (
    FinetuneConfig,
    REFERENCE_FINETUNE,
    attention_pool,
    average_pool,
    run_finetune,
    run_tapt,
)
from seralign.gradcheck import grad_check
from seralign.pretrain import PretrainConfig


class TestAttentionPool:
    def test_one_dimensional_worked_example(self):
        # Independent scalar evaluation: scores tanh(0) = 0 and tanh(10),
        # softmaxed, then the weighted sum of the frame values.
        x = np.array([[0.0], [10.0]])
        w = np.array([[1.0]])
        out = attention_pool(x, w)
        s0, s1 = math.tanh(0.0), math.tanh(10.0)
        z0, z1 = math.exp(s0), math.exp(s1)
        expected_weights = np.array([z0, z1]) / (z0 + z1)
        expected_pooled = expected_weights[0] * 0.0 + expected_weights[1] * 10.0
        np.testing.assert_allclose(out.weights.data, expected_weights, atol=1e-12)
        np.testing.assert_allclose(out.pooled.data, [expected_pooled], atol=1e-12)
        # the frozen reference values for this instance
        np.testing.assert_allclose(out.weights.data, [0.2689, 0.7311], atol=1e-3)
        np.testing.assert_allclose(out.pooled.data, [7.311], atol=1e-3)

    def test_zero_weight_equals_average_pooling(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(7, 5))
        validity = np.array([True, True, False, True, True, True, False])
        pooled = attention_pool(x, np.zeros((1, 5)), validity)
        averaged = average_pool(x, validity)
        np.testing.assert_allclose(pooled.pooled.data, averaged.data, atol=1e-6)
        valid_weights = pooled.weights.data[validity]
        np.testing.assert_allclose(valid_weights, 1.0 / validity.sum(), atol=1e-12)

    def test_single_frame_gets_unit_weight(self):
        x = np.array([[3.0, -1.0, 2.0]])
        out = attention_pool(x, np.array([[0.5, 0.5, 0.5]]))
        np.testing.assert_allclose(out.weights.data, [1.0])
        np.testing.assert_allclose(out.pooled.data, x[0])

    def test_weights_nonnegative_sum_to_one(self):
        rng = np.random.default_rng(1)
        for trial in range(10):
            n = int(rng.integers(2, 30))
            x = rng.normal(size=(n, 6))
            w = rng.normal(size=(1, 6))
            validity = rng.random(n) < 0.8
            if not validity.any():
                validity[0] = True
            out = attention_pool(x, w, validity)
            assert np.all(out.weights.data >= 0.0)
            assert abs(out.weights.data.sum() - 1.0) < 1e-6

    def test_pooled_vector_is_weighted_sum_of_frames(self):
        # convex-hull membership, verified through the weights themselves
        rng = np.random.default_rng(2)
        x = rng.normal(size=(9, 4))
        w = rng.normal(size=(1, 4))
        out = attention_pool(x, w)
        reconstruction = out.weights.data @ x
        np.testing.assert_allclose(out.pooled.data, reconstruction, atol=1e-6)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(8, 5))
        w = rng.normal(size=(1, 5))
        base = attention_pool(x, w)
        perm = rng.permutation(8)
        permuted = attention_pool(x[perm], w)
        np.testing.assert_allclose(permuted.weights.data, base.weights.data[perm], atol=1e-6)
        np.testing.assert_allclose(permuted.pooled.data, base.pooled.data, atol=1e-6)

    def test_padding_invariance(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(6, 3))
        w = rng.normal(size=(1, 3))
        base = attention_pool(x, w)
        padded = np.vstack([x, np.zeros((4, 3))])
        validity = np.array([True] * 6 + [False] * 4)
        out = attention_pool(padded, w, validity)
        np.testing.assert_allclose(out.weights.data[:6], base.weights.data, atol=1e-12)
        assert np.all(out.weights.data[6:] == 0.0)
        np.testing.assert_allclose(out.pooled.data, base.pooled.data, atol=1e-12)

    def test_all_invalid_frames_rejected(self):
        with pytest.raises(InputError):
            attention_pool(np.zeros((3, 2)), np.zeros((1, 2)), np.zeros(3, dtype=bool))

    def test_gradient_flows_to_both_weight_and_frames(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
        out = attention_pool(x, w)
        ad.reduce_sum(ad.mul(out.pooled, out.pooled)).backward()
        assert x.grad is not None and np.any(x.grad != 0.0)
        assert w.grad is not None and np.any(w.grad != 0.0)

    def test_attention_sharpness_is_bounded_by_tanh(self):
        # scores live in (-1, 1), so no frame can outweigh another by more
        # than a factor of e^2, no matter how extreme the inputs
        x = np.array([[1000.0], [-1000.0]])
        out = attention_pool(x, np.array([[5.0]]))
        ratio = out.weights.data.max() / out.weights.data.min()
        assert ratio <= math.exp(2.0) + 1e-9


class TestAveragePool:
    def test_identical_frames_return_that_frame(self):
        frame = np.array([1.5, -2.0, 0.25])
        x = np.tile(frame, (6, 1))
        np.testing.assert_allclose(average_pool(x).data, frame, atol=1e-12)

    def test_padding_invariance(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(5, 4))
        padded = np.vstack([x, np.full((3, 4), 99.0)])
        validity = np.array([True] * 5 + [False] * 3)
        np.testing.assert_allclose(average_pool(padded, validity).data, average_pool(x).data, atol=1e-12)

    def test_all_invalid_rejected(self):
        with pytest.raises(InputError):
            average_pool(np.zeros((2, 2)), np.zeros(2, dtype=bool))


class TestHeadGradient:
    def test_attention_pool_classifier_cross_entropy_composite(self):
        # attention pool -> linear classifier -> cross entropy, checked by
        # central differences over the pool weight, classifier, and frames
        rng = np.random.default_rng(7)
        frames = Tensor(rng.normal(size=(6, 4)))
        params = {
            "pool.attention.weight": Tensor(rng.normal(size=(1, 4))),
            "classifier.weight": Tensor(rng.normal(size=(4, 4))),
            "classifier.bias": Tensor(rng.normal(size=4)),
            "frames": frames,
        }
        label = np.array([2])

        def f(p):
            pooled = attention_pool(p["frames"], p["pool.attention.weight"])
            logits = ad.matmul(ad.reshape(pooled.pooled, (1, 4)), p["classifier.weight"]) + p["classifier.bias"]
            return ad.mean(ad.cross_entropy(logits, label))

        assert grad_check(f, params) < 1e-4


def _separable_corpus(seed=0):
    return generate_corpus(
        GenerationSpec(
            sessions=5,
            utterances_per_speaker=4,
            feature_dim=6,
            frames_min=8,
            frames_max=12,
            inconsistency_rate=0.0,
            seed=seed,
        )
    )


def _tiny_encoder():
    return EncoderConfig(
        embed_dim=8,
        num_transformer_layers=2,
        num_heads=2,
        ffn_dim=12,
        num_clusters=4,
        input_mode="frames",
        feature_dim=6,
    )


class TestRunFinetune:
    def test_deterministic_and_reports_test_metrics(self):
        corpus = _separable_corpus()
        fold = make_folds(corpus)[0]
        config = _tiny_encoder()
        params = init_params(config, seed=1)
        ft_cfg = FinetuneConfig(learning_rate=3e-3, batch_size=4, epochs=3, seed=5)
        one = run_finetune(params, corpus, fold, "attention", ft_cfg, config)
        two = run_finetune(params, corpus, fold, "attention", ft_cfg, config)
        assert one.metrics == two.metrics
        assert one.best_epoch == two.best_epoch
        assert one.metrics.confusion.sum() == 4  # one test speaker, 4 utterances
        assert 0.0 <= one.metrics.ua <= 1.0
        assert len(one.val_history) == 3

    def test_average_pooling_has_no_attention_weight(self):
        corpus = _separable_corpus()
        fold = make_folds(corpus)[1]
        config = _tiny_encoder()
        params = init_params(config, seed=2)
        result = run_finetune(params, corpus, fold, "average", FinetuneConfig(epochs=2, batch_size=4), config)
        assert "pool.attention.weight" not in result.heads
        assert "classifier.weight" in result.heads

    def test_unknown_pooling_rejected(self):
        corpus = _separable_corpus()
        fold = make_folds(corpus)[0]
        config = _tiny_encoder()
        params = init_params(config, seed=3)
        with pytest.raises(ConfigurationError):
            run_finetune(params, corpus, fold, "max", FinetuneConfig(), config)


class TestRunTapt:
    def test_produces_both_models_and_metrics(self):
        corpus = _separable_corpus(seed=9)
        fold = make_folds(corpus)[0]
        config = _tiny_encoder()
        params = init_params(config, seed=4)
        train_points = np.vstack([u.frames for u in corpus.utterances if u.session in fold.train_sessions])
        base = kmeans_fit(train_points, k=4, seed=0)
        result = run_tapt(
            params,
            corpus,
            fold,
            base,
            PretrainConfig(steps=12, warmup_steps=3, batch_size=4, mask_span=3, seed=1, freeze_frontend=False),
            FinetuneConfig(epochs=2, batch_size=4, seed=2),
            config,
        )
        assert set(result.pretrained_params) == set(params)
        assert len(result.trajectory) == 12
        assert 0.0 <= result.metrics.ua <= 1.0
        # the pretrained encoder differs from the fine-tuned one
        assert not np.array_equal(
            result.pretrained_params["projection.weight"].data,
            result.ser_params["projection.weight"].data,
        )

    def test_cluster_count_mismatch_rejected(self):
        corpus = _separable_corpus()
        fold = make_folds(corpus)[0]
        config = _tiny_encoder()  # projection width 4
        params = init_params(config, seed=5)
        base = kmeans_fit(np.vstack([u.frames for u in corpus.utterances]), k=3, seed=0)
        with pytest.raises(ProvenanceError):
            run_tapt(params, corpus, fold, base, PretrainConfig(steps=2), FinetuneConfig(epochs=1), config)


def test_label_permutation_control_reaches_chance_only():
    # control run: train/val labels permuted, test labels intact; the model
    # can learn nothing label-relevant, so test UA sits at chance (0.25)
    base = generate_corpus(
        GenerationSpec(
            sessions=5,
            utterances_per_speaker=20,
            feature_dim=6,
            frames_min=8,
            frames_max=12,
            inconsistency_rate=0.0,
            seed=31,
        )
    )
    config = _tiny_encoder()
    uas = []
    for seed in range(3):
        rng = np.random.default_rng(seed)
        fold = make_folds(base)[0]
        shuffled = dataclasses.replace(base)
        non_test = [u for u in base.utterances if u.speaker != fold.test_speaker]
        permuted = rng.permutation([int(u.label) for u in non_test])
        relabeled = {u.id: EmotionLabel(int(c)) for u, c in zip(non_test, permuted)}
        shuffled.utterances = [
            dataclasses.replace(u, label=relabeled.get(u.id, u.label)) for u in base.utterances
        ]
        params = init_params(config, seed=seed)
        result = run_finetune(
            params, shuffled, fold, "average", FinetuneConfig(epochs=4, batch_size=8, seed=seed), config
        )
        uas.append(result.metrics.ua)
    assert abs(float(np.median(uas)) - 0.25) <= 0.1


def test_reference_preset_records_published_settings():
    assert REFERENCE_FINETUNE.learning_rate == pytest.approx(1e-4)
    assert REFERENCE_FINETUNE.batch_size == 64
    assert REFERENCE_FINETUNE.epochs == 40
