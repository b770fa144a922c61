"""Miniature masked-prediction frame encoder.

A convolutional (or linear, for precomputed frame features) frontend, a
learned mask embedding substituted at masked frames before layer 1, fixed
sinusoidal positions, a stack of post-norm transformer layers with tanh
feed-forward blocks, and a projection head that emits cluster logits.
Hidden states of every layer are addressable so any layer can be tapped
for clustering.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Utterance
from .errors import ConfigurationError, DimensionError, InputError, NumericError

NEG_FILL = -1e30  # attention score for padded keys; exp() underflows to exactly 0


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 32
    num_transformer_layers: int = 3
    num_heads: int = 4
    ffn_dim: int = 64
    num_clusters: int = 4
    max_frames: int = 256
    input_mode: str = "frames"  # "frames" (T x F matrices) or "conv" (raw 1-D signal)
    feature_dim: int = 8
    conv_layers: tuple[tuple[int, int, int], ...] = ()  # (out_channels, kernel, stride)
    dropout: float = 0.0

    def __post_init__(self):
        if self.embed_dim < 1 or self.num_transformer_layers < 1 or self.ffn_dim < 1:
            raise ConfigurationError("embed_dim, num_transformer_layers and ffn_dim must be positive")
        if self.num_heads < 1 or self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} must be divisible by num_heads {self.num_heads}"
            )
        if self.num_clusters < 1:
            raise ConfigurationError(f"num_clusters must be >= 1, got {self.num_clusters}")
        if self.max_frames < 1:
            raise ConfigurationError(f"max_frames must be >= 1, got {self.max_frames}")
        if self.input_mode not in ("frames", "conv"):
            raise ConfigurationError(f"input_mode must be 'frames' or 'conv', got {self.input_mode!r}")
        if self.input_mode == "conv" and not self.conv_layers:
            raise ConfigurationError("conv input mode needs at least one conv layer")
        if self.input_mode == "frames" and self.feature_dim < 1:
            raise ConfigurationError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")


def desk_config(**overrides) -> EncoderConfig:
    """Desk-scale preset: 32-dim embeddings, 3 transformer layers."""
    base = dict(
        embed_dim=32,
        num_transformer_layers=3,
        num_heads=4,
        ffn_dim=64,
        num_clusters=4,
        max_frames=256,
        input_mode="frames",
        feature_dim=8,
    )
    base.update(overrides)
    return EncoderConfig(**base)


def reference_config(**overrides) -> EncoderConfig:
    """Full-scale reference preset: 6 conv layers, 12 transformer layers, 768 dims."""
    base = dict(
        embed_dim=768,
        num_transformer_layers=12,
        num_heads=12,
        ffn_dim=3072,
        num_clusters=50,
        max_frames=4096,
        input_mode="conv",
        feature_dim=512,
        conv_layers=((512, 10, 5), (512, 3, 2), (512, 3, 2), (512, 3, 2), (512, 2, 2), (512, 2, 2)),
    )
    base.update(overrides)
    return EncoderConfig(**base)


PRESETS = {"desk": desk_config, "paper_reference": reference_config}


def preset_config(name: str, **overrides) -> EncoderConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown encoder preset {name!r}; expected one of {sorted(PRESETS)}")
    return PRESETS[name](**overrides)


def config_to_dict(config: EncoderConfig) -> dict:
    d = asdict(config)
    d["conv_layers"] = [list(layer) for layer in config.conv_layers]
    return d


def config_from_dict(d: Mapping) -> EncoderConfig:
    d = dict(d)
    d["conv_layers"] = tuple(tuple(int(v) for v in layer) for layer in d.get("conv_layers", ()))
    return EncoderConfig(**d)


# -- masking ----------------------------------------------------------------


@dataclass(frozen=True)
class MaskSpec:
    """Sorted masked frame indices produced by the span-mask policy."""

    masked_indices: tuple[int, ...]
    span_length: int
    mask_prob: float

    def to_bool(self, num_frames: int) -> np.ndarray:
        out = np.zeros(num_frames, dtype=bool)
        if self.masked_indices:
            idx = np.asarray(self.masked_indices)
            if idx.min() < 0 or idx.max() >= num_frames:
                raise InputError(
                    f"mask indices span [{idx.min()}, {idx.max()}] but the sequence has {num_frames} frames"
                )
            out[idx] = True
        return out


@dataclass(frozen=True)
class TapSpec:
    """Which transformer layer's hidden states feed the clustering step."""

    layer_index: int

    def validate(self, config: EncoderConfig) -> None:
        if not 1 <= self.layer_index <= config.num_transformer_layers:
            raise ConfigurationError(
                f"tap layer {self.layer_index} outside [1, {config.num_transformer_layers}]"
            )


def sample_mask(num_frames: int, mask_prob: float, span_length: int, rng: np.random.Generator) -> MaskSpec:
    """Each frame starts a span with probability `mask_prob`; spans of
    `span_length` frames are unioned and truncated at the sequence end."""
    if num_frames < 1:
        raise InputError(f"num_frames must be >= 1, got {num_frames}")
    if not 0.0 <= mask_prob <= 1.0:
        raise ConfigurationError(f"mask_prob must lie in [0, 1], got {mask_prob}")
    if span_length < 1:
        raise ConfigurationError(f"span_length must be >= 1, got {span_length}")
    starts = np.flatnonzero(rng.random(num_frames) < mask_prob)
    masked = np.zeros(num_frames, dtype=bool)
    for s in starts:
        masked[s : s + span_length] = True
    return MaskSpec(
        masked_indices=tuple(int(i) for i in np.flatnonzero(masked)),
        span_length=span_length,
        mask_prob=mask_prob,
    )


# -- parameters --------------------------------------------------------------


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(config: EncoderConfig, seed: int, dtype=np.float64) -> dict[str, Tensor]:
    """Fresh encoder parameters keyed by hierarchical names."""
    rng = np.random.default_rng(seed)
    d = config.embed_dim
    params: dict[str, np.ndarray] = {}

    if config.input_mode == "conv":
        c_in = 1
        for i, (c_out, kernel, _stride) in enumerate(config.conv_layers):
            params[f"frontend.conv{i}.weight"] = _glorot(
                rng, c_in * kernel, c_out, (c_out, c_in, kernel), dtype
            )
            params[f"frontend.conv{i}.bias"] = np.zeros(c_out, dtype=dtype)
            c_in = c_out
        proj_in = c_in
    else:
        proj_in = config.feature_dim
    params["frontend.proj.weight"] = _glorot(rng, proj_in, d, (proj_in, d), dtype)
    params["frontend.proj.bias"] = np.zeros(d, dtype=dtype)
    params["mask_embedding"] = rng.normal(0.0, 0.1, size=d).astype(dtype)

    for i in range(config.num_transformer_layers):
        at = f"transformer.{i}.attention"
        for piece in ("query", "key", "value", "out"):
            params[f"{at}.{piece}.weight"] = _glorot(rng, d, d, (d, d), dtype)
            if piece != "key":
                # a shared key bias cancels inside the row softmax, so the
                # parameter would be pure dead weight with zero gradient
                params[f"{at}.{piece}.bias"] = np.zeros(d, dtype=dtype)
        params[f"transformer.{i}.attention_norm.gain"] = np.ones(d, dtype=dtype)
        params[f"transformer.{i}.attention_norm.bias"] = np.zeros(d, dtype=dtype)
        params[f"transformer.{i}.ffn.w1.weight"] = _glorot(rng, d, config.ffn_dim, (d, config.ffn_dim), dtype)
        params[f"transformer.{i}.ffn.w1.bias"] = np.zeros(config.ffn_dim, dtype=dtype)
        params[f"transformer.{i}.ffn.w2.weight"] = _glorot(rng, config.ffn_dim, d, (config.ffn_dim, d), dtype)
        params[f"transformer.{i}.ffn.w2.bias"] = np.zeros(d, dtype=dtype)
        params[f"transformer.{i}.ffn_norm.gain"] = np.ones(d, dtype=dtype)
        params[f"transformer.{i}.ffn_norm.bias"] = np.zeros(d, dtype=dtype)

    params["projection.weight"] = _glorot(rng, d, config.num_clusters, (d, config.num_clusters), dtype)
    params["projection.bias"] = np.zeros(config.num_clusters, dtype=dtype)
    return {name: Tensor(arr, requires_grad=True) for name, arr in params.items()}


def init_head_params(config: EncoderConfig, seed: int, dtype=np.float64, num_classes: int = 4) -> dict[str, Tensor]:
    """Attention-pool weight (zero, so pooling starts uniform) + classifier."""
    rng = np.random.default_rng(seed)
    d = config.embed_dim
    return {
        "pool.attention.weight": Tensor(np.zeros((1, d), dtype=dtype), requires_grad=True),
        "classifier.weight": Tensor(_glorot(rng, d, num_classes, (d, num_classes), dtype), requires_grad=True),
        "classifier.bias": Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True),
    }


def reinit_projection(params: dict[str, Tensor], config: EncoderConfig, seed: int) -> dict[str, Tensor]:
    """Replace the cluster-logit head, e.g. when the cluster count changes."""
    rng = np.random.default_rng(seed)
    d = config.embed_dim
    dtype = params["projection.weight"].dtype
    out = dict(params)
    out["projection.weight"] = Tensor(
        _glorot(rng, d, config.num_clusters, (d, config.num_clusters), dtype), requires_grad=True
    )
    out["projection.bias"] = Tensor(np.zeros(config.num_clusters, dtype=dtype), requires_grad=True)
    return out


def copy_params(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return {name: Tensor(t.data.copy(), requires_grad=t.requires_grad) for name, t in params.items()}


# -- positions ---------------------------------------------------------------

_POSITION_CACHE: dict[tuple[int, int], np.ndarray] = {}


def sinusoid_positions(num_frames: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table (num_frames, dim), float64."""
    key = (num_frames, dim)
    if key not in _POSITION_CACHE:
        pos = np.arange(num_frames)[:, None]
        half = (dim + 1) // 2
        freq = 1.0 / (10000.0 ** (2.0 * np.arange(half) / dim))
        angles = pos * freq[None, :]
        table = np.zeros((num_frames, dim))
        table[:, 0::2] = np.sin(angles)[:, : table[:, 0::2].shape[1]]
        table[:, 1::2] = np.cos(angles)[:, : table[:, 1::2].shape[1]]
        _POSITION_CACHE[key] = table
    return _POSITION_CACHE[key]


# -- forward passes ------------------------------------------------------------


def conv_output_frames(config: EncoderConfig, length: int) -> int:
    """Frame count after the conv stack; raises if the input is too short."""
    t = length
    for _c_out, kernel, stride in config.conv_layers:
        if t < kernel:
            raise DimensionError(
                f"input length {length} is shorter than the conv receptive field"
            )
        t = (t - kernel) // stride + 1
    return t


def extract_features(x, params: Mapping[str, Tensor], config: EncoderConfig) -> Tensor:
    """Frontend pass: raw signal through the conv stack, or precomputed
    frames through the linear projection. Returns (T, embed_dim)."""
    if config.input_mode == "conv":
        arr = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if arr.data.ndim != 1:
            raise DimensionError(f"conv input mode expects a 1-D signal, got shape {arr.shape}")
        conv_output_frames(config, arr.shape[0])
        h = ad.reshape(arr, (1, 1, arr.shape[0]))
        for i, (_c_out, _kernel, stride) in enumerate(config.conv_layers):
            h = ad.conv1d(h, params[f"frontend.conv{i}.weight"], params[f"frontend.conv{i}.bias"], stride)
            h = ad.tanh(h)
        h = ad.transpose(h, (0, 2, 1))  # (1, T, C)
        h = ad.matmul(h, params["frontend.proj.weight"]) + params["frontend.proj.bias"]
        return ad.reshape(h, (h.shape[1], h.shape[2]))
    arr = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if arr.data.ndim != 2 or arr.shape[1] != config.feature_dim:
        raise DimensionError(
            f"frames input mode expects (T, {config.feature_dim}) features, got shape {arr.shape}"
        )
    if arr.shape[0] < 1:
        raise DimensionError("frames input is empty")
    return ad.matmul(arr, params["frontend.proj.weight"]) + params["frontend.proj.bias"]


def _dropout(h: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0.0:
        return h
    keep = (rng.random(h.shape) >= rate).astype(h.data.dtype) / (1.0 - rate)
    return ad.mul(h, keep)


def _transformer_layer(
    params: Mapping[str, Tensor],
    config: EncoderConfig,
    h: Tensor,
    key_validity: np.ndarray | None,
    index: int,
    dropout_rng: np.random.Generator | None,
) -> Tensor:
    batch, frames, dim = h.shape
    heads = config.num_heads
    head_dim = dim // heads
    at = f"transformer.{index}.attention"

    def split_heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (batch, frames, heads, head_dim)), (0, 2, 1, 3))

    q = split_heads(ad.matmul(h, params[f"{at}.query.weight"]) + params[f"{at}.query.bias"])
    k = split_heads(ad.matmul(h, params[f"{at}.key.weight"]))
    v = split_heads(ad.matmul(h, params[f"{at}.value.weight"]) + params[f"{at}.value.bias"])

    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim))
    if key_validity is not None and not key_validity.all():
        scores = ad.where(key_validity[:, None, None, :], scores, NEG_FILL)
    weights = ad.softmax(scores, axis=-1)
    context = ad.matmul(weights, v)  # (B, H, T, head_dim)
    context = ad.reshape(ad.transpose(context, (0, 2, 1, 3)), (batch, frames, dim))
    attn_out = ad.matmul(context, params[f"{at}.out.weight"]) + params[f"{at}.out.bias"]
    attn_out = _dropout(attn_out, config.dropout, dropout_rng)
    h = ad.layer_norm(
        h + attn_out,
        params[f"transformer.{index}.attention_norm.gain"],
        params[f"transformer.{index}.attention_norm.bias"],
    )

    ff = f"transformer.{index}.ffn"
    inner = ad.tanh(ad.matmul(h, params[f"{ff}.w1.weight"]) + params[f"{ff}.w1.bias"])
    ffn_out = ad.matmul(inner, params[f"{ff}.w2.weight"]) + params[f"{ff}.w2.bias"]
    ffn_out = _dropout(ffn_out, config.dropout, dropout_rng)
    return ad.layer_norm(
        h + ffn_out,
        params[f"transformer.{index}.ffn_norm.gain"],
        params[f"transformer.{index}.ffn_norm.bias"],
    )


@dataclass
class EncodeResult:
    hidden: list[Tensor]  # per transformer layer, (B, T, D); empty unless collected
    logits: Tensor  # (B, T, num_clusters)


def encode(
    params: Mapping[str, Tensor],
    config: EncoderConfig,
    features: Tensor,
    validity: np.ndarray | None = None,
    mask: np.ndarray | None = None,
    collect_hidden: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> EncodeResult:
    """Batched transformer pass over extracted features (B, T, embed_dim).

    `mask` flags frames whose input vector is replaced by the learned mask
    embedding before layer 1; `validity` flags real (non-padding) frames,
    which alone serve as attention keys.
    """
    if features.data.ndim != 3 or features.shape[2] != config.embed_dim:
        raise DimensionError(f"encode expects (B, T, {config.embed_dim}) features, got {features.shape}")
    batch, frames, dim = features.shape
    if frames > config.max_frames:
        raise ConfigurationError(f"sequence of {frames} frames exceeds max_frames {config.max_frames}")
    h = features
    if mask is not None and mask.any():
        h = ad.where(mask[:, :, None], params["mask_embedding"], h)
    positions = sinusoid_positions(frames, dim).astype(h.data.dtype)
    h = h + positions[None, :, :]

    hidden: list[Tensor] = []
    for i in range(config.num_transformer_layers):
        try:
            h = _transformer_layer(params, config, h, validity, i, dropout_rng)
        except NumericError as exc:
            raise NumericError(f"transformer layer {i + 1}: {exc}") from None
        if collect_hidden:
            hidden.append(h)
    logits = ad.matmul(h, params["projection.weight"]) + params["projection.bias"]
    return EncodeResult(hidden=hidden, logits=logits)


@dataclass
class ForwardResult:
    hidden_states: list[np.ndarray]  # one (T, D) array per transformer layer
    logits: np.ndarray  # (T, num_clusters)


def forward(
    features,
    mask: MaskSpec | None,
    params: Mapping[str, Tensor],
    config: EncoderConfig,
) -> ForwardResult:
    """Single-utterance pass over extracted (T, embed_dim) features."""
    feats = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float64))
    if feats.data.ndim != 2 or feats.shape[1] != config.embed_dim:
        raise DimensionError(f"forward expects (T, {config.embed_dim}) features, got {feats.shape}")
    frames = feats.shape[0]
    mask_bool = None if mask is None else mask.to_bool(frames)[None, :]
    with ad_frozen(params):
        result = encode(
            params,
            config,
            ad.reshape(feats, (1, frames, config.embed_dim)),
            validity=None,
            mask=mask_bool,
            collect_hidden=True,
        )
    return ForwardResult(
        hidden_states=[layer.data[0] for layer in result.hidden],
        logits=result.logits.data[0],
    )


class ad_frozen:
    """Context manager: temporarily drop requires_grad so inference skips the tape."""

    def __init__(self, params: Mapping[str, Tensor]):
        self._params = list(params.values())
        self._saved: list[bool] = []

    def __enter__(self):
        self._saved = [t.requires_grad for t in self._params]
        for t in self._params:
            t.requires_grad = False
        return self

    def __exit__(self, *exc):
        for t, flag in zip(self._params, self._saved):
            t.requires_grad = flag
        return False


def layer_embeddings(
    utterances: Sequence[Utterance],
    params: Mapping[str, Tensor],
    config: EncoderConfig,
    tap: TapSpec,
    batch_size: int = 16,
) -> dict[str, np.ndarray]:
    """Hidden states of the tapped layer for every utterance, unmasked.

    Returns {utterance_id: (T, embed_dim)} preserving input order, so the
    rows can be concatenated for clustering and split back afterwards.
    """
    tap.validate(config)
    if config.input_mode != "frames":
        raise ConfigurationError("layer_embeddings needs the precomputed-frames input mode")
    order = sorted(range(len(utterances)), key=lambda i: (utterances[i].num_frames, utterances[i].id))
    out: dict[str, np.ndarray] = {}
    with ad_frozen(params):
        for start in range(0, len(order), batch_size):
            chunk = [utterances[i] for i in order[start : start + batch_size]]
            lengths = [u.num_frames for u in chunk]
            t_max = max(lengths)
            feats = np.zeros((len(chunk), t_max, config.feature_dim))
            validity = np.zeros((len(chunk), t_max), dtype=bool)
            for row, utt in enumerate(chunk):
                feats[row, : utt.num_frames] = utt.frames
                validity[row, : utt.num_frames] = True
            projected = ad.matmul(Tensor(feats), params["frontend.proj.weight"]) + params["frontend.proj.bias"]
            result = encode(params, config, projected, validity=validity, collect_hidden=True)
            tapped = result.hidden[tap.layer_index - 1].data
            for row, utt in enumerate(chunk):
                out[utt.id] = tapped[row, : utt.num_frames].copy()
    return {utt.id: out[utt.id] for utt in utterances}
