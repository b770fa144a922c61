"""Masked-prediction pretraining against frame-level pseudo-labels.

The predictive loss is a convex combination of the mean cross entropy
over masked frames and the mean over unmasked frames, weighted by a
mixing coefficient alpha (alpha = 1 trains on masked regions only, the
default). Mini-batches come from a length-bucketed sampler with right
padding; padded frames are excluded from both loss terms and from
attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Corpus, Utterance
from .encoder import EncoderConfig, MaskSpec, copy_params, encode, sample_mask
from .errors import (
    ConfigurationError,
    CoverageError,
    DimensionError,
    NumericError,
    ParseError,
)
from .optim import create_optimizer, optimizer_step


@dataclass(frozen=True)
class PretrainConfig:
    alpha: float = 1.0
    steps: int = 2000
    warmup_steps: int = 200
    learning_rate: float = 1e-3
    batch_size: int = 8
    mask_prob: float = 0.08
    mask_span: int = 10
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    freeze_frontend: bool = True
    seed: int = 0
    checkpoint_every: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigurationError("steps and batch_size must be positive")
        if self.warmup_steps < 0:
            raise ConfigurationError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigurationError(f"mask_prob must lie in [0, 1], got {self.mask_prob}")
        if self.mask_span < 1:
            raise ConfigurationError(f"mask_span must be >= 1, got {self.mask_span}")


# Settings used by the full-scale reference system, kept as a named preset.
REFERENCE_PRETRAIN = PretrainConfig(
    alpha=1.0,
    steps=20_000,
    warmup_steps=4_000,
    learning_rate=5e-4,
    batch_size=64,
)


@dataclass
class MlmLoss:
    """Total predictive loss plus its masked/unmasked components."""

    total: Tensor
    masked: Tensor
    unmasked: Tensor
    num_masked: int
    num_unmasked: int


def _zero_like_scalar(reference: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=reference.dtype))


def _combine(masked: Tensor, unmasked: Tensor, alpha: float, num_masked: int, num_unmasked: int) -> Tensor:
    terms = []
    if num_masked > 0 and alpha != 0.0:
        terms.append(ad.mul(masked, alpha) if alpha != 1.0 else masked)
    if num_unmasked > 0 and alpha != 1.0:
        terms.append(ad.mul(unmasked, 1.0 - alpha) if alpha != 0.0 else unmasked)
    if not terms:
        return _zero_like_scalar(masked)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def mlm_loss(logits, pseudo_labels, mask: MaskSpec, alpha: float = 1.0) -> MlmLoss:
    """Predictive loss for one utterance.

    logits: (T, K) array or Tensor; pseudo_labels: T integer codes. The
    masked term is the mean cross entropy over masked frames, the
    unmasked term the mean over the rest; an empty side contributes zero.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    logits_t = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(pseudo_labels)
    if logits_t.data.ndim != 2:
        raise DimensionError(f"mlm_loss expects (T, K) logits, got {logits_t.shape}")
    frames = logits_t.shape[0]
    if labels.shape != (frames,):
        raise DimensionError(f"pseudo_labels shape {labels.shape} does not match {frames} frames")
    mask_bool = mask.to_bool(frames)
    ce = ad.cross_entropy(logits_t, labels.astype(np.int64))
    return _masked_unmasked_means(ce, mask_bool, np.ones(frames, dtype=bool), alpha)


def _masked_unmasked_means(ce: Tensor, mask_bool: np.ndarray, validity: np.ndarray, alpha: float) -> MlmLoss:
    masked_sel = mask_bool & validity
    unmasked_sel = ~mask_bool & validity
    num_masked = int(masked_sel.sum())
    num_unmasked = int(unmasked_sel.sum())
    dtype = ce.dtype
    if num_masked:
        masked = ad.reduce_sum(ad.mul(ce, masked_sel.astype(dtype))) / num_masked
    else:
        masked = _zero_like_scalar(ce)
    if num_unmasked:
        unmasked = ad.reduce_sum(ad.mul(ce, unmasked_sel.astype(dtype))) / num_unmasked
    else:
        unmasked = _zero_like_scalar(ce)
    total = _combine(masked, unmasked, alpha, num_masked, num_unmasked)
    return MlmLoss(
        total=total,
        masked=masked,
        unmasked=unmasked,
        num_masked=num_masked,
        num_unmasked=num_unmasked,
    )


def batch_mlm_loss(
    logits: Tensor,
    labels: np.ndarray,
    mask_bool: np.ndarray,
    validity: np.ndarray,
    alpha: float,
) -> MlmLoss:
    """Batched loss: means are taken over frames across the whole batch."""
    ce = ad.cross_entropy(logits, labels.astype(np.int64))
    return _masked_unmasked_means(ce, mask_bool, validity, alpha)


# -- batching -----------------------------------------------------------------


@dataclass
class Bucket:
    utterances: list[Utterance]
    features: np.ndarray  # (B, T_max, F)
    validity: np.ndarray  # (B, T_max) bool
    labels: np.ndarray  # (B, T_max) int64, zero at padding


def pad_batch(chunk: Sequence[Utterance], feature_dim: int, labels_by_id: Mapping[str, Sequence[int]] | None, dtype=np.float64) -> Bucket:
    t_max = max(u.num_frames for u in chunk)
    feats = np.zeros((len(chunk), t_max, feature_dim), dtype=dtype)
    validity = np.zeros((len(chunk), t_max), dtype=bool)
    labels = np.zeros((len(chunk), t_max), dtype=np.int64)
    for row, utt in enumerate(chunk):
        feats[row, : utt.num_frames] = utt.frames
        validity[row, : utt.num_frames] = True
        if labels_by_id is not None:
            labels[row, : utt.num_frames] = np.asarray(labels_by_id[utt.id])
    return Bucket(utterances=list(chunk), features=feats, validity=validity, labels=labels)


def make_buckets(
    utterances: Sequence[Utterance],
    batch_size: int,
    feature_dim: int,
    labels_by_id: Mapping[str, Sequence[int]] | None = None,
    dtype=np.float64,
) -> list[Bucket]:
    """Length-sorted buckets of at most `batch_size` utterances each."""
    order = sorted(utterances, key=lambda u: (u.num_frames, u.id))
    return [
        pad_batch(order[start : start + batch_size], feature_dim, labels_by_id, dtype)
        for start in range(0, len(order), batch_size)
    ]


# -- trainer --------------------------------------------------------------------


@dataclass
class PretrainResult:
    params: dict[str, Tensor]
    trajectory: list[tuple[int, float]] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.trajectory[-1][1] if self.trajectory else float("nan")


def _check_coverage(utterances: Sequence[Utterance], labels_by_id: Mapping[str, Sequence[int]], num_clusters: int) -> None:
    missing = [u.id for u in utterances if u.id not in labels_by_id]
    if missing:
        raise CoverageError(f"pseudo labels missing for utterances: {', '.join(sorted(missing))}")
    for u in utterances:
        codes = np.asarray(labels_by_id[u.id])
        if codes.shape != (u.num_frames,):
            raise DimensionError(
                f"utterance {u.id!r}: {codes.shape[0] if codes.ndim else '?'} pseudo labels for {u.num_frames} frames"
            )
        if codes.size and (codes.min() < 0 or codes.max() >= num_clusters):
            raise ConfigurationError(
                f"utterance {u.id!r}: pseudo label outside [0, {num_clusters})"
            )


def run_pretrain(
    params: Mapping[str, Tensor],
    corpus: "Corpus | Sequence[Utterance]",
    pseudo_labels: Mapping[str, Sequence[int]],
    config: PretrainConfig,
    encoder_config: EncoderConfig,
    on_checkpoint: Callable[[int, Mapping[str, Tensor]], None] | None = None,
) -> PretrainResult:
    """Train a copy of `params` for `config.steps` optimizer steps.

    Deterministic given the config seed; the loss of every step is
    recorded and a non-finite loss aborts with the step index.
    """
    utterances = list(corpus.utterances if isinstance(corpus, Corpus) else corpus)
    if not utterances:
        raise ConfigurationError("run_pretrain needs at least one utterance")
    if encoder_config.input_mode != "frames":
        raise ConfigurationError("the trainer needs the precomputed-frames input mode")
    _check_coverage(utterances, pseudo_labels, encoder_config.num_clusters)

    params = copy_params(params)
    trainable = {
        name: t
        for name, t in params.items()
        if not (config.freeze_frontend and name.startswith("frontend."))
    }
    for name, t in params.items():
        t.requires_grad = name in trainable
    state = create_optimizer(
        trainable,
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
        betas=(config.beta1, config.beta2),
        eps=1e-8,
        warmup_steps=config.warmup_steps,
        schedule="linear_warmup" if config.warmup_steps > 0 else "constant",
    )

    dtype = next(iter(params.values())).dtype
    rng = np.random.default_rng(config.seed)
    buckets = make_buckets(utterances, config.batch_size, encoder_config.feature_dim, pseudo_labels, dtype)
    trajectory: list[tuple[int, float]] = []

    for step in range(1, config.steps + 1):
        bucket = buckets[int(rng.integers(len(buckets)))]
        mask_bool = np.zeros_like(bucket.validity)
        for row, utt in enumerate(bucket.utterances):
            spec = sample_mask(utt.num_frames, config.mask_prob, config.mask_span, rng)
            mask_bool[row, : utt.num_frames] = spec.to_bool(utt.num_frames)

        try:
            projected = ad.matmul(Tensor(bucket.features), params["frontend.proj.weight"]) + params["frontend.proj.bias"]
            result = encode(
                params,
                encoder_config,
                projected,
                validity=bucket.validity,
                mask=mask_bool,
                dropout_rng=rng if encoder_config.dropout > 0 else None,
            )
            loss = batch_mlm_loss(result.logits, bucket.labels, mask_bool, bucket.validity, config.alpha)
        except NumericError as exc:
            raise NumericError(f"pretraining step {step}: {exc}") from None
        value = loss.total.item()
        if not np.isfinite(value):
            raise NumericError(f"pretraining step {step}: non-finite loss")
        ad.zero_grads(params)
        loss.total.backward()
        optimizer_step(state, trainable)
        trajectory.append((step, value))
        if on_checkpoint is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            on_checkpoint(step, params)

    ad.zero_grads(params)
    return PretrainResult(params=params, trajectory=trajectory)


def masked_prediction_accuracy(
    params: Mapping[str, Tensor],
    encoder_config: EncoderConfig,
    utterances: Sequence[Utterance],
    pseudo_labels: Mapping[str, Sequence[int]],
    mask_prob: float,
    mask_span: int,
    seed: int,
) -> float:
    """Fraction of masked frames whose argmax logit hits the pseudo label."""
    _check_coverage(utterances, pseudo_labels, encoder_config.num_clusters)
    rng = np.random.default_rng(seed)
    hits = 0
    total = 0
    from .encoder import ad_frozen  # local import to avoid a cycle at module load

    with ad_frozen(params):
        for utt in utterances:
            spec = sample_mask(utt.num_frames, mask_prob, mask_span, rng)
            if not spec.masked_indices:
                continue
            feats = np.asarray(utt.frames, dtype=np.float64)[None, :, :]
            projected = ad.matmul(Tensor(feats), params["frontend.proj.weight"]) + params["frontend.proj.bias"]
            mask_bool = spec.to_bool(utt.num_frames)[None, :]
            result = encode(params, encoder_config, projected, mask=mask_bool)
            predictions = result.logits.data[0].argmax(axis=1)
            codes = np.asarray(pseudo_labels[utt.id])
            idx = np.asarray(spec.masked_indices)
            hits += int((predictions[idx] == codes[idx]).sum())
            total += len(idx)
    return hits / total if total else 0.0


# -- trajectory persistence --------------------------------------------------


def smoothed_loss(trajectory: Sequence[tuple[int, float]], window: int = 50) -> list[float]:
    """Trailing-window mean of the recorded losses."""
    values = [loss for _step, loss in trajectory]
    out = []
    for i in range(len(values)):
        lo = max(0, i + 1 - window)
        out.append(float(np.mean(values[lo : i + 1])))
    return out


def save_trajectory(trajectory: Sequence[tuple[int, float]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step\tloss\n")
        for step, loss in trajectory:
            fh.write(f"{step}\t{loss!r}\n")


def load_trajectory(path: str | Path) -> list[tuple[int, float]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "step\tloss":
        raise ParseError(f"{path}: expected a 'step\\tloss' header")
    out = []
    for index, line in enumerate(lines[1:], start=1):
        parts = line.split("\t")
        try:
            out.append((int(parts[0]), float(parts[1])))
        except (IndexError, ValueError):
            raise ParseError(f"{path}: trajectory record {index} is malformed: {line!r}") from None
    return out
