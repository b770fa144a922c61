"""Utterance-level heads and supervised fine-tuning.

Soft attention pooling scores each frame with tanh(W . x_i), softmaxes
the scores across valid frames, and sums the weighted frames into one
utterance vector; average pooling is the masked arithmetic mean baseline.
`run_finetune` trains encoder + pooling + classifier end to end with
cross entropy, selecting the checkpoint by best validation UA, and
`run_tapt` is the phase-1 flow: continued masked pretraining on
base-feature pseudo-labels followed by an average-pooled supervised
fine-tune.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cluster import Codebook, kmeans_assign
from .corpus import Corpus, FoldPlan, Utterance, split_corpus
from .encoder import (
    NEG_FILL,
    EncoderConfig,
    ad_frozen,
    copy_params,
    encode,
    init_head_params,
)
from .errors import ConfigurationError, InputError, NumericError, ProvenanceError
from .evaluate import Metrics, compute_metrics
from .optim import create_optimizer, optimizer_step
from .pretrain import PretrainConfig, PretrainResult, pad_batch, run_pretrain

POOLINGS = ("attention", "average")


@dataclass(frozen=True)
class FinetuneConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 10
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")


# Settings used by the full-scale reference system, kept as a named preset.
REFERENCE_FINETUNE = FinetuneConfig(learning_rate=1e-4, batch_size=64, epochs=40)


# -- pooling -------------------------------------------------------------------


@dataclass
class PooledOutput:
    """Utterance vector plus the per-frame attention weights behind it."""

    pooled: Tensor  # (D,)
    weights: Tensor  # (N,), zero at invalid frames
    num_frames: int


def _as_matrix(x, name: str) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.data.ndim != 2:
        raise InputError(f"{name} expects an (N, D) matrix, got shape {t.shape}")
    if t.shape[0] < 1:
        raise InputError(f"{name} needs at least one frame")
    return t


def _validity_vector(validity_mask, num_frames: int) -> np.ndarray:
    if validity_mask is None:
        return np.ones(num_frames, dtype=bool)
    v = np.asarray(validity_mask, dtype=bool)
    if v.shape != (num_frames,):
        raise InputError(f"validity mask shape {v.shape} does not match {num_frames} frames")
    if not v.any():
        raise InputError("all frames are invalid; cannot pool an empty utterance")
    return v


def attention_pool(x, w, validity_mask=None) -> PooledOutput:
    """Soft attention over frames: weights = softmax(tanh(W . x_i)).

    Gradients flow to both the frame matrix and the 1 x D weight; padded
    frames get exactly zero weight.
    """
    frames = _as_matrix(x, "attention_pool")
    weight = w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=np.float64))
    if weight.data.ndim == 1:
        weight = ad.reshape(weight, (1, weight.shape[0]))
    if weight.data.ndim != 2 or weight.shape[0] != 1 or weight.shape[1] != frames.shape[1]:
        raise InputError(f"attention weight must be (1, {frames.shape[1]}), got {weight.shape}")
    validity = _validity_vector(validity_mask, frames.shape[0])

    scores = ad.reshape(ad.tanh(ad.matmul(frames, ad.transpose(weight))), (frames.shape[0],))
    if not validity.all():
        scores = ad.where(validity, scores, NEG_FILL)
    weights = ad.softmax(scores, axis=-1)
    pooled = ad.reshape(ad.matmul(ad.reshape(weights, (1, frames.shape[0])), frames), (frames.shape[1],))
    return PooledOutput(pooled=pooled, weights=weights, num_frames=frames.shape[0])


def average_pool(x, validity_mask=None) -> Tensor:
    """Arithmetic mean of the valid frames."""
    frames = _as_matrix(x, "average_pool")
    validity = _validity_vector(validity_mask, frames.shape[0])
    coeff = (validity / validity.sum()).astype(frames.dtype)
    return ad.reshape(ad.matmul(Tensor(coeff[None, :]), frames), (frames.shape[1],))


def _attention_pool_batch(h: Tensor, w: Tensor, validity: np.ndarray) -> Tensor:
    batch, frames, dim = h.shape
    scores = ad.reshape(ad.tanh(ad.matmul(h, ad.transpose(w))), (batch, frames))
    if not validity.all():
        scores = ad.where(validity, scores, NEG_FILL)
    weights = ad.softmax(scores, axis=-1)
    return ad.reshape(ad.matmul(ad.reshape(weights, (batch, 1, frames)), h), (batch, dim))


def _average_pool_batch(h: Tensor, validity: np.ndarray) -> Tensor:
    batch, frames, dim = h.shape
    coeff = validity.astype(h.dtype) / validity.sum(axis=1, keepdims=True).astype(h.dtype)
    return ad.reshape(ad.matmul(Tensor(coeff[:, None, :]), h), (batch, dim))


# -- supervised fine-tuning ------------------------------------------------------


@dataclass
class FinetuneResult:
    params: dict[str, Tensor]  # encoder weights at the selected checkpoint
    heads: dict[str, Tensor]  # pooling/classifier weights at the selected checkpoint
    metrics: Metrics  # test-split metrics
    best_epoch: int
    val_history: list[float] = field(default_factory=list)


def _encode_final_hidden(model, encoder_config, bucket, dropout_rng=None) -> Tensor:
    projected = ad.matmul(Tensor(bucket.features), model["frontend.proj.weight"]) + model["frontend.proj.bias"]
    result = encode(
        model, encoder_config, projected, validity=bucket.validity, collect_hidden=True, dropout_rng=dropout_rng
    )
    return result.hidden[-1]


def _classify_batch(model, encoder_config, bucket, pooling: str, dropout_rng=None) -> Tensor:
    hidden = _encode_final_hidden(model, encoder_config, bucket, dropout_rng)
    if pooling == "attention":
        pooled = _attention_pool_batch(hidden, model["pool.attention.weight"], bucket.validity)
    else:
        pooled = _average_pool_batch(hidden, bucket.validity)
    return ad.matmul(pooled, model["classifier.weight"]) + model["classifier.bias"]


def predict_labels(
    params: Mapping[str, Tensor],
    heads: Mapping[str, Tensor],
    encoder_config: EncoderConfig,
    utterances: Sequence[Utterance],
    pooling: str,
    batch_size: int = 16,
) -> np.ndarray:
    """Argmax class per utterance, in input order."""
    model = {**params, **heads}
    order = sorted(range(len(utterances)), key=lambda i: (utterances[i].num_frames, utterances[i].id))
    predictions = np.zeros(len(utterances), dtype=np.int64)
    with ad_frozen(model):
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            bucket = pad_batch([utterances[i] for i in idx], encoder_config.feature_dim, None)
            logits = _classify_batch(model, encoder_config, bucket, pooling)
            predictions[idx] = logits.data.argmax(axis=1)
    return predictions


def evaluate_split(
    params: Mapping[str, Tensor],
    heads: Mapping[str, Tensor],
    encoder_config: EncoderConfig,
    utterances: Sequence[Utterance],
    pooling: str,
    batch_size: int = 16,
) -> Metrics:
    predictions = predict_labels(params, heads, encoder_config, utterances, pooling, batch_size)
    truth = np.asarray([int(u.label) for u in utterances])
    return compute_metrics(truth, predictions)


def run_finetune(
    params: Mapping[str, Tensor],
    corpus: Corpus,
    fold: FoldPlan,
    pooling: str,
    config: FinetuneConfig,
    encoder_config: EncoderConfig,
) -> FinetuneResult:
    """End-to-end supervised training on one fold.

    The whole encoder plus the pooling and classifier heads are trained
    with cross entropy on the train split; the checkpoint with the best
    validation UA is kept and scored on the test split.
    """
    if pooling not in POOLINGS:
        raise ConfigurationError(f"pooling must be one of {POOLINGS}, got {pooling!r}")
    if encoder_config.input_mode != "frames":
        raise ConfigurationError("the trainer needs the precomputed-frames input mode")
    train, val, test = split_corpus(corpus, fold)

    model = copy_params(params)
    dtype = next(iter(model.values())).dtype
    heads = init_head_params(encoder_config, seed=config.seed + 7919, dtype=dtype)
    if pooling == "average":
        del heads["pool.attention.weight"]
    model.update(heads)
    for t in model.values():
        t.requires_grad = True

    state = create_optimizer(
        model,
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
        betas=(config.beta1, config.beta2),
    )
    rng = np.random.default_rng(config.seed)
    head_names = set(heads)

    best_ua = -1.0
    best_epoch = 0
    best_snapshot = {name: t.data.copy() for name, t in model.items()}
    val_history: list[float] = []

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train))
        for start in range(0, len(order), config.batch_size):
            chunk = [train[i] for i in order[start : start + config.batch_size]]
            bucket = pad_batch(chunk, encoder_config.feature_dim, None, dtype)
            labels = np.asarray([int(u.label) for u in chunk], dtype=np.int64)
            try:
                logits = _classify_batch(
                    model,
                    encoder_config,
                    bucket,
                    pooling,
                    dropout_rng=rng if encoder_config.dropout > 0 else None,
                )
                loss = ad.mean(ad.cross_entropy(logits, labels))
            except NumericError as exc:
                raise NumericError(f"fine-tune epoch {epoch}: {exc}") from None
            ad.zero_grads(model)
            loss.backward()
            optimizer_step(state, model)
        encoder_params = {n: t for n, t in model.items() if n not in head_names}
        head_params = {n: t for n, t in model.items() if n in head_names}
        val_metrics = evaluate_split(encoder_params, head_params, encoder_config, val, pooling)
        val_history.append(val_metrics.ua)
        # ties keep the later epoch: at equal validation UA the longer-trained
        # model is preferred (the tiny val split saturates early at desk scale)
        if val_metrics.ua >= best_ua:
            best_ua = val_metrics.ua
            best_epoch = epoch
            best_snapshot = {name: t.data.copy() for name, t in model.items()}

    best_model = {name: Tensor(arr, requires_grad=True) for name, arr in best_snapshot.items()}
    best_encoder = {n: t for n, t in best_model.items() if n not in head_names}
    best_heads = {n: t for n, t in best_model.items() if n in head_names}
    metrics = evaluate_split(best_encoder, best_heads, encoder_config, test, pooling)
    return FinetuneResult(
        params=best_encoder,
        heads=best_heads,
        metrics=metrics,
        best_epoch=best_epoch,
        val_history=val_history,
    )


# -- phase 1: task-adaptive pretraining then an average-pooled fine-tune ----------


@dataclass
class TaptResult:
    pretrained_params: dict[str, Tensor]  # encoder after masked pretraining (CPT starting point)
    ser_params: dict[str, Tensor]  # encoder after the supervised fine-tune
    ser_heads: dict[str, Tensor]
    metrics: Metrics
    trajectory: list[tuple[int, float]]
    best_epoch: int


def assign_base_labels(codebook: Codebook, utterances: Sequence[Utterance]) -> dict[str, tuple[int, ...]]:
    """Pseudo-labels over raw frame features (the stand-in clustering)."""
    return {u.id: kmeans_assign(codebook, u.frames, u.id).codes for u in utterances}


def run_tapt(
    params: Mapping[str, Tensor],
    corpus: Corpus,
    fold: FoldPlan,
    base_codebook: Codebook,
    pretrain_config: PretrainConfig,
    finetune_config: FinetuneConfig,
    encoder_config: EncoderConfig,
) -> TaptResult:
    """Masked pretraining on base-feature pseudo-labels, then a supervised
    average-pooled fine-tune; returns both models plus fold metrics."""
    if base_codebook.k != encoder_config.num_clusters:
        raise ProvenanceError(
            f"encoder projection width {encoder_config.num_clusters} does not match "
            f"base codebook with {base_codebook.k} clusters"
        )
    if base_codebook.centroids.shape[1] != corpus.feature_dim:
        raise ProvenanceError(
            f"base codebook dimension {base_codebook.centroids.shape[1]} does not match "
            f"corpus feature dim {corpus.feature_dim}"
        )
    train, _val, _test = split_corpus(corpus, fold)
    base_labels = assign_base_labels(base_codebook, train)
    mlm: PretrainResult = run_pretrain(params, train, base_labels, pretrain_config, encoder_config)
    ser = run_finetune(mlm.params, corpus, fold, "average", finetune_config, encoder_config)
    return TaptResult(
        pretrained_params=mlm.params,
        ser_params=ser.params,
        ser_heads=ser.heads,
        metrics=ser.metrics,
        trajectory=mlm.trajectory,
        best_epoch=ser.best_epoch,
    )
