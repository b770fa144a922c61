"""End-to-end orchestration of the three-phase pipeline.

Phase 1 (tapt): masked pretraining on base-feature pseudo-labels, then a
supervised average-pooled fine-tune. Phase 2 (cluster + pretrain): tap a
transformer layer of the phase-1 model, fit k-means on the train-fold
embeddings, and continue masked pretraining against the resulting codes.
Phase 3 (finetune): train pooling + classifier on top of the continued
checkpoint and report test metrics selected by validation UA.

Every phase reads and writes only the documented file formats, stamps
provenance ids (checkpoint and codebook hashes) into its outputs, and is
independently re-runnable; re-running with identical inputs and seed
yields byte-identical files.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .cluster import (
    ClusterProvenance,
    Codebook,
    kmeans_assign,
    kmeans_fit,
    load_codebook,
    load_pseudo_labels,
    save_codebook,
    save_pseudo_labels,
)
from .corpus import (
    Corpus,
    FoldPlan,
    GenerationSpec,
    generate_corpus,
    load_corpus,
    make_folds,
    save_corpus,
    split_corpus,
)
from .encoder import (
    EncoderConfig,
    TapSpec,
    config_from_dict,
    config_to_dict,
    init_params,
    layer_embeddings,
    preset_config,
    reinit_projection,
)
from .errors import ConfigurationError, ProvenanceError, SeralignError
from .evaluate import Metrics, Report, aggregate_folds, render_report, save_fold_metrics
from .finetune import (
    FinetuneConfig,
    run_finetune,
    run_tapt,
)
from .pretrain import (
    PretrainConfig,
    masked_prediction_accuracy,
    run_pretrain,
    save_trajectory,
    smoothed_loss,
)

DESK_GRID = {"layers": (1, 2, 3), "clusters": (4, 8, 16)}
REFERENCE_GRID = {"layers": (6, 9, 11), "clusters": (50, 100, 150)}


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from the experiment seed plus context labels."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class AblationSpec:
    layers: tuple[int, ...] = DESK_GRID["layers"]
    clusters: tuple[int, ...] = DESK_GRID["clusters"]
    poolings: tuple[str, ...] = ("average", "attention")
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs, fully serialized for provenance."""

    out_dir: str = "runs/experiment"
    corpus_path: str | None = None
    generation: GenerationSpec | None = GenerationSpec()
    encoder_preset: str = "desk"
    encoder_overrides: tuple[tuple[str, object], ...] = ()
    tap_layer: int = 2
    num_clusters: int = 4
    pooling: str = "attention"
    base_clusters: int = 8
    seed: int = 0
    leaky_clustering: bool = False
    tapt_pretrain: PretrainConfig = PretrainConfig(freeze_frontend=False)
    cpt_pretrain: PretrainConfig = PretrainConfig()
    tapt_finetune: FinetuneConfig = FinetuneConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    ablation: AblationSpec = AblationSpec()

    def __post_init__(self):
        if self.pooling not in ("average", "attention"):
            raise ConfigurationError(f"pooling must be 'average' or 'attention', got {self.pooling!r}")
        if self.corpus_path is None and self.generation is None:
            raise ConfigurationError("either corpus_path or a generation spec is required")
        if self.tap_layer < 1 or self.num_clusters < 1 or self.base_clusters < 1:
            raise ConfigurationError("tap_layer, num_clusters and base_clusters must be positive")

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_overrides"] = {k: v for k, v in self.encoder_overrides}
        return d

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ExperimentConfig":
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown experiment config keys: {sorted(unknown)}")

        def build(klass, value, default):
            if value is None:
                return None
            if isinstance(value, klass):
                return value
            allowed = {f.name for f in dataclasses.fields(klass)}
            extra = set(value) - allowed
            if extra:
                raise ConfigurationError(f"unknown {klass.__name__} keys: {sorted(extra)}")
            base = dataclasses.asdict(default) if default is not None else {}
            base.update(value)
            for key in ("layers", "clusters", "poolings", "seeds"):
                if key in base and isinstance(base[key], list):
                    base[key] = tuple(base[key])
            return klass(**base)

        if "generation" in raw:
            raw["generation"] = build(GenerationSpec, raw["generation"], GenerationSpec())
        raw["tapt_pretrain"] = build(PretrainConfig, raw.get("tapt_pretrain", {}), PretrainConfig(freeze_frontend=False))
        raw["cpt_pretrain"] = build(PretrainConfig, raw.get("cpt_pretrain", {}), PretrainConfig())
        raw["tapt_finetune"] = build(FinetuneConfig, raw.get("tapt_finetune", {}), FinetuneConfig())
        raw["finetune"] = build(FinetuneConfig, raw.get("finetune", {}), FinetuneConfig())
        raw["ablation"] = build(AblationSpec, raw.get("ablation", {}), AblationSpec())
        overrides = raw.get("encoder_overrides", {})
        if isinstance(overrides, Mapping):
            raw["encoder_overrides"] = tuple(sorted(overrides.items()))
        return cls(**raw)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: config is not valid JSON ({exc})") from None
        cfg = cls.from_dict(raw)
        env_out = os.environ.get("SERALIGN_OUT_DIR")
        if env_out:
            cfg = dataclasses.replace(cfg, out_dir=env_out)
        return cfg


@dataclass
class Paths:
    """Canonical artifact locations under the experiment output directory."""

    root: Path

    @property
    def corpus(self) -> Path:
        return self.root / "corpus.jsonl"

    @property
    def experiment(self) -> Path:
        return self.root / "experiment.json"

    def fold(self, fold_index: int) -> Path:
        return self.root / f"fold{fold_index}"

    def base_codebook(self, fold_index: int) -> Path:
        return self.fold(fold_index) / "base_codebook.json"

    def tapt_mlm(self, fold_index: int) -> Path:
        return self.fold(fold_index) / "tapt_mlm.ckpt"

    def tapt_ser(self, fold_index: int) -> Path:
        return self.fold(fold_index) / "tapt_ser.ckpt"

    def tapt_loss(self, fold_index: int) -> Path:
        return self.fold(fold_index) / "tapt_mlm_loss.tsv"

    def tapt_metrics(self, fold_index: int) -> Path:
        return self.fold(fold_index) / "tapt_metrics.json"

    def codebook(self, fold_index: int, layer: int, k: int) -> Path:
        return self.fold(fold_index) / f"codebook_L{layer}_K{k}.json"

    def labels(self, fold_index: int, layer: int, k: int) -> Path:
        return self.fold(fold_index) / f"labels_L{layer}_K{k}.jsonl"

    def cpt(self, fold_index: int, layer: int, k: int) -> Path:
        return self.fold(fold_index) / f"cpt_L{layer}_K{k}.ckpt"

    def cpt_loss(self, fold_index: int, layer: int, k: int) -> Path:
        return self.fold(fold_index) / f"cpt_L{layer}_K{k}_loss.tsv"

    def cpt_report(self, fold_index: int, layer: int, k: int) -> Path:
        return self.fold(fold_index) / f"cpt_L{layer}_K{k}_report.json"

    def ser(self, fold_index: int, layer: int, k: int, pooling: str) -> Path:
        return self.fold(fold_index) / f"ser_L{layer}_K{k}_{pooling}.ckpt"

    def metrics(self, fold_index: int, layer: int, k: int, pooling: str) -> Path:
        return self.fold(fold_index) / f"metrics_L{layer}_K{k}_{pooling}.json"


def _paths(cfg: ExperimentConfig) -> Paths:
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    return Paths(root)


def _write_json(path: Path, payload: Mapping) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise ConfigurationError(f"missing input {path}; run the {producer} phase first")
    return path


def _echo_experiment(cfg: ExperimentConfig, paths: Paths) -> None:
    _write_json(paths.experiment, cfg.to_dict())


def _encoder_config(cfg: ExperimentConfig, corpus: Corpus, num_clusters: int) -> EncoderConfig:
    overrides = dict(cfg.encoder_overrides)
    overrides.setdefault("feature_dim", corpus.feature_dim)
    overrides["num_clusters"] = num_clusters
    return preset_config(cfg.encoder_preset, **overrides)


def _resolve_corpus(cfg: ExperimentConfig, paths: Paths) -> Corpus:
    if cfg.corpus_path is not None:
        if not Path(cfg.corpus_path).exists():
            raise ConfigurationError(f"corpus file {cfg.corpus_path} does not exist")
        return load_corpus(cfg.corpus_path)
    if not paths.corpus.exists():
        raise ConfigurationError(f"corpus file {paths.corpus} does not exist; run gen-corpus first")
    return load_corpus(paths.corpus)


def _fit_speakers(corpus: Corpus, fold: FoldPlan, leaky: bool) -> tuple[list, tuple[str, ...]]:
    """Utterances (and their speakers) used to fit clustering models."""
    if leaky:
        utts = list(corpus.utterances)
    else:
        utts = [u for u in corpus.utterances if u.session in fold.train_sessions]
    speakers = tuple(sorted({u.speaker for u in utts}))
    return utts, speakers


def assert_no_leakage(codebook: Codebook, fold: FoldPlan, corpus: Corpus) -> None:
    """Check the codebook was fit only on this fold's training speakers."""
    expected = tuple(sorted({u.speaker for u in corpus.utterances if u.session in fold.train_sessions}))
    if tuple(codebook.provenance.train_speakers) != expected:
        raise ProvenanceError(
            f"codebook fit on speakers {codebook.provenance.train_speakers}, "
            f"but fold {fold.fold_index} trains on {expected}"
        )


# -- phases ------------------------------------------------------------------


def phase_gen_corpus(cfg: ExperimentConfig) -> Path:
    paths = _paths(cfg)
    _echo_experiment(cfg, paths)
    if cfg.corpus_path is not None:
        corpus = load_corpus(cfg.corpus_path)
        save_corpus(corpus, paths.corpus)
        return paths.corpus
    if cfg.generation is None:
        raise ConfigurationError("no generation spec and no corpus_path; nothing to generate")
    corpus = generate_corpus(cfg.generation)
    save_corpus(corpus, paths.corpus)
    return paths.corpus


def _fold_plan(corpus: Corpus, fold_index: int) -> FoldPlan:
    folds = make_folds(corpus)
    if not 0 <= fold_index < len(folds):
        raise ConfigurationError(f"fold index {fold_index} outside [0, {len(folds)})")
    return folds[fold_index]


def phase_tapt(cfg: ExperimentConfig, fold_index: int) -> dict:
    """Phase 1: base-feature codebook, masked pretrain, supervised fine-tune."""
    paths = _paths(cfg)
    _echo_experiment(cfg, paths)
    corpus = _resolve_corpus(cfg, paths)
    fold = _fold_plan(corpus, fold_index)
    fit_utts, fit_speakers = _fit_speakers(corpus, fold, cfg.leaky_clustering)

    base_points = np.vstack([u.frames for u in fit_utts])
    base_codebook = kmeans_fit(
        base_points,
        k=cfg.base_clusters,
        seed=derive_seed(cfg.seed, "base-kmeans", fold_index),
        provenance=ClusterProvenance(
            feature_kind="base_features",
            seed=derive_seed(cfg.seed, "base-kmeans", fold_index),
            fold_index=fold_index,
            train_speakers=fit_speakers,
        ),
    )
    paths.fold(fold_index).mkdir(parents=True, exist_ok=True)
    save_codebook(base_codebook, paths.base_codebook(fold_index), experiment=cfg.to_dict())

    enc_cfg = _encoder_config(cfg, corpus, cfg.base_clusters)
    params = init_params(enc_cfg, seed=derive_seed(cfg.seed, "init", fold_index))
    tapt = run_tapt(
        params,
        corpus,
        fold,
        base_codebook,
        dataclasses.replace(
            cfg.tapt_pretrain, seed=derive_seed(cfg.seed, "tapt-pretrain", fold_index), freeze_frontend=False
        ),
        dataclasses.replace(cfg.tapt_finetune, seed=derive_seed(cfg.seed, "tapt-finetune", fold_index)),
        enc_cfg,
    )

    meta_common = {
        "experiment": cfg.to_dict(),
        "encoder_config": config_to_dict(enc_cfg),
        "fold": fold_index,
        "base_codebook_id": base_codebook.codebook_id,
    }
    mlm_id = save_checkpoint(paths.tapt_mlm(fold_index), tapt.pretrained_params, {**meta_common, "role": "tapt_mlm"})
    ser_id = save_checkpoint(
        paths.tapt_ser(fold_index),
        {**tapt.ser_params, **tapt.ser_heads},
        {**meta_common, "role": "tapt_ser", "pooling": "average"},
    )
    save_trajectory(tapt.trajectory, paths.tapt_loss(fold_index))
    record = {
        "fold": fold_index,
        "phase": "tapt",
        "ua": tapt.metrics.ua,
        "wa": tapt.metrics.wa,
        "confusion": tapt.metrics.confusion.tolist(),
        "best_epoch": tapt.best_epoch,
        "checkpoints": {"tapt_mlm": mlm_id, "tapt_ser": ser_id},
        "experiment": cfg.to_dict(),
    }
    _write_json(paths.tapt_metrics(fold_index), record)
    return record


def phase_cluster(cfg: ExperimentConfig, fold_index: int) -> dict:
    """Phase 2a: tap-layer embeddings of the phase-1 model, k-means codebook,
    pseudo-labels for the whole corpus (fitting uses train speakers only)."""
    paths = _paths(cfg)
    _echo_experiment(cfg, paths)
    corpus = _resolve_corpus(cfg, paths)
    fold = _fold_plan(corpus, fold_index)
    checkpoint = load_checkpoint(_require(paths.tapt_ser(fold_index), "tapt"))
    if checkpoint.meta.get("fold") != fold_index:
        raise ProvenanceError(
            f"checkpoint {paths.tapt_ser(fold_index)} belongs to fold {checkpoint.meta.get('fold')}, "
            f"not fold {fold_index}"
        )
    enc_cfg = config_from_dict(checkpoint.meta["encoder_config"])
    params = {name: Tensor(arr) for name, arr in checkpoint.tensors.items()}
    tap = TapSpec(cfg.tap_layer)
    tap.validate(enc_cfg)

    fit_utts, fit_speakers = _fit_speakers(corpus, fold, cfg.leaky_clustering)
    fit_embeddings = layer_embeddings(fit_utts, params, enc_cfg, tap)
    points = np.vstack([fit_embeddings[u.id] for u in fit_utts])
    codebook = kmeans_fit(
        points,
        k=cfg.num_clusters,
        seed=derive_seed(cfg.seed, "kmeans", fold_index, cfg.tap_layer, cfg.num_clusters),
        provenance=ClusterProvenance(
            feature_kind="transformer_layer",
            seed=derive_seed(cfg.seed, "kmeans", fold_index, cfg.tap_layer, cfg.num_clusters),
            tap_layer=cfg.tap_layer,
            source_checkpoint=checkpoint.content_id,
            fold_index=fold_index,
            train_speakers=fit_speakers,
        ),
    )
    save_codebook(codebook, paths.codebook(fold_index, cfg.tap_layer, cfg.num_clusters), experiment=cfg.to_dict())

    all_embeddings = layer_embeddings(corpus.utterances, params, enc_cfg, tap)
    labels = [kmeans_assign(codebook, all_embeddings[u.id], u.id) for u in corpus.utterances]
    save_pseudo_labels(labels, paths.labels(fold_index, cfg.tap_layer, cfg.num_clusters), experiment=cfg.to_dict())
    return {
        "fold": fold_index,
        "phase": "cluster",
        "codebook_id": codebook.codebook_id,
        "source_checkpoint": checkpoint.content_id,
        "tap_layer": cfg.tap_layer,
        "num_clusters": cfg.num_clusters,
        "inertia": codebook.inertia,
    }


def phase_pretrain(cfg: ExperimentConfig, fold_index: int) -> dict:
    """Phase 2b: continued masked pretraining against the fold codebook."""
    paths = _paths(cfg)
    _echo_experiment(cfg, paths)
    corpus = _resolve_corpus(cfg, paths)
    fold = _fold_plan(corpus, fold_index)
    layer, k = cfg.tap_layer, cfg.num_clusters

    codebook = load_codebook(_require(paths.codebook(fold_index, layer, k), "cluster"))
    label_seqs = load_pseudo_labels(_require(paths.labels(fold_index, layer, k), "cluster"))
    if any(seq.codebook_id != codebook.codebook_id for seq in label_seqs):
        raise ProvenanceError(
            f"pseudo labels reference codebook {label_seqs[0].codebook_id}, "
            f"but {paths.codebook(fold_index, layer, k)} has id {codebook.codebook_id}"
        )
    if codebook.provenance.tap_layer != layer:
        raise ProvenanceError(
            f"codebook was fit on tap layer {codebook.provenance.tap_layer}, experiment declares {layer}"
        )
    source = load_checkpoint(_require(paths.tapt_ser(fold_index), "tapt"))
    if codebook.provenance.source_checkpoint != source.content_id:
        raise ProvenanceError(
            f"codebook embeddings came from checkpoint {codebook.provenance.source_checkpoint}, "
            f"but {paths.tapt_ser(fold_index)} has id {source.content_id}"
        )
    if not cfg.leaky_clustering:
        assert_no_leakage(codebook, fold, corpus)

    start = load_checkpoint(_require(paths.tapt_mlm(fold_index), "tapt"))
    base_cfg = config_from_dict(start.meta["encoder_config"])
    params = {name: Tensor(arr, requires_grad=True) for name, arr in start.tensors.items()}
    enc_cfg = dataclasses.replace(base_cfg, num_clusters=k)
    if k != base_cfg.num_clusters:
        params = reinit_projection(params, enc_cfg, seed=derive_seed(cfg.seed, "proj", fold_index, layer, k))

    labels_by_id = {seq.utterance_id: seq.codes for seq in label_seqs}
    train, val, _test = split_corpus(corpus, fold)
    pre_cfg = dataclasses.replace(cfg.cpt_pretrain, seed=derive_seed(cfg.seed, "cpt", fold_index, layer, k))

    def write_interval_checkpoint(step: int, step_params) -> None:
        save_checkpoint(
            paths.fold(fold_index) / f"cpt_L{layer}_K{k}_step{step}.ckpt",
            step_params,
            {
                "experiment": cfg.to_dict(),
                "encoder_config": config_to_dict(enc_cfg),
                "fold": fold_index,
                "role": "cpt_interval",
                "step": step,
                "codebook_id": codebook.codebook_id,
            },
        )

    result = run_pretrain(
        params,
        train,
        labels_by_id,
        pre_cfg,
        enc_cfg,
        on_checkpoint=write_interval_checkpoint if pre_cfg.checkpoint_every else None,
    )

    accuracy = masked_prediction_accuracy(
        result.params,
        enc_cfg,
        val,
        labels_by_id,
        mask_prob=pre_cfg.mask_prob,
        mask_span=pre_cfg.mask_span,
        seed=derive_seed(cfg.seed, "cpt-eval", fold_index, layer, k),
    )
    smoothed = smoothed_loss(result.trajectory, window=50)
    cpt_id = save_checkpoint(
        paths.cpt(fold_index, layer, k),
        result.params,
        {
            "experiment": cfg.to_dict(),
            "encoder_config": config_to_dict(enc_cfg),
            "fold": fold_index,
            "role": "cpt",
            "codebook_id": codebook.codebook_id,
            "source_checkpoint": start.content_id,
        },
    )
    save_trajectory(result.trajectory, paths.cpt_loss(fold_index, layer, k))
    report = {
        "fold": fold_index,
        "phase": "pretrain",
        "checkpoint": cpt_id,
        "codebook_id": codebook.codebook_id,
        "steps": pre_cfg.steps,
        "masked_accuracy_heldout": accuracy,
        "chance_rate": 1.0 / k,
        "smoothed_loss_at_50": smoothed[min(49, len(smoothed) - 1)],
        "smoothed_loss_final": smoothed[-1],
        "experiment": cfg.to_dict(),
    }
    _write_json(paths.cpt_report(fold_index, layer, k), report)
    return report


def phase_finetune(cfg: ExperimentConfig, fold_index: int, pooling: str | None = None) -> dict:
    """Phase 3: pooled supervised fine-tune of the continued checkpoint."""
    paths = _paths(cfg)
    _echo_experiment(cfg, paths)
    corpus = _resolve_corpus(cfg, paths)
    fold = _fold_plan(corpus, fold_index)
    pooling = pooling or cfg.pooling
    layer, k = cfg.tap_layer, cfg.num_clusters

    checkpoint = load_checkpoint(_require(paths.cpt(fold_index, layer, k), "pretrain"))
    if checkpoint.meta.get("fold") != fold_index or checkpoint.meta.get("role") != "cpt":
        raise ProvenanceError(
            f"{paths.cpt(fold_index, layer, k)} is not a fold-{fold_index} continued-pretrain checkpoint"
        )
    codebook = load_codebook(_require(paths.codebook(fold_index, layer, k), "cluster"))
    if checkpoint.meta.get("codebook_id") != codebook.codebook_id:
        raise ProvenanceError(
            f"checkpoint was pretrained against codebook {checkpoint.meta.get('codebook_id')}, "
            f"but {paths.codebook(fold_index, layer, k)} has id {codebook.codebook_id}"
        )
    enc_cfg = config_from_dict(checkpoint.meta["encoder_config"])
    params = {name: Tensor(arr, requires_grad=True) for name, arr in checkpoint.tensors.items()}
    ft_cfg = dataclasses.replace(
        cfg.finetune, seed=derive_seed(cfg.seed, "finetune", fold_index, layer, k, pooling)
    )
    result = run_finetune(params, corpus, fold, pooling, ft_cfg, enc_cfg)
    ser_id = save_checkpoint(
        paths.ser(fold_index, layer, k, pooling),
        {**result.params, **result.heads},
        {
            "experiment": cfg.to_dict(),
            "encoder_config": config_to_dict(enc_cfg),
            "fold": fold_index,
            "role": f"ser_{pooling}",
            "codebook_id": codebook.codebook_id,
            "cpt_checkpoint": checkpoint.content_id,
        },
    )
    record = {
        "fold": fold_index,
        "phase": "finetune",
        "pooling": pooling,
        "tap_layer": layer,
        "num_clusters": k,
        "ua": result.metrics.ua,
        "wa": result.metrics.wa,
        "confusion": result.metrics.confusion.tolist(),
        "best_epoch": result.best_epoch,
        "val_history": result.val_history,
        "checkpoints": {"cpt": checkpoint.content_id, "ser": ser_id},
        "codebook_id": codebook.codebook_id,
        "experiment": cfg.to_dict(),
    }
    _write_json(paths.metrics(fold_index, layer, k, pooling), record)
    return record


def phase_eval(cfg: ExperimentConfig, pooling: str | None = None) -> dict:
    """Aggregate the five folds of the configured cell into a report."""
    paths = _paths(cfg)
    _echo_experiment(cfg, paths)
    pooling = pooling or cfg.pooling
    layer, k = cfg.tap_layer, cfg.num_clusters
    fold_metrics: list[Metrics] = []
    records = []
    for fold_index in range(5):
        path = paths.metrics(fold_index, layer, k, pooling)
        if not path.exists():
            raise ConfigurationError(f"missing fold metrics {path}; run finetune for fold {fold_index}")
        record = json.loads(path.read_text(encoding="utf-8"))
        fold_metrics.append(Metrics.from_record(record))
        records.append(
            {
                "fold": fold_index,
                "ua": record["ua"],
                "wa": record["wa"],
                "confusion": [int(v) for v in np.asarray(record["confusion"]).reshape(-1)],
            }
        )
    aggregate = aggregate_folds(fold_metrics)
    save_fold_metrics(records, paths.root / "metrics.jsonl")
    report = render_report({(layer, k, pooling): (aggregate.ua_mean, aggregate.wa_mean)})
    (paths.root / "report.tsv").write_text(report.table, encoding="utf-8")
    (paths.root / "report.txt").write_text(report.text, encoding="utf-8")
    summary = {
        "tap_layer": layer,
        "num_clusters": k,
        "pooling": pooling,
        "ua_mean": aggregate.ua_mean,
        "wa_mean": aggregate.wa_mean,
        "per_fold": [{"fold": r["fold"], "ua": r["ua"], "wa": r["wa"]} for r in records],
        "experiment": cfg.to_dict(),
    }
    _write_json(paths.root / "summary.json", summary)
    return summary


def run_fold(cfg: ExperimentConfig, fold_index: int, poolings: Sequence[str] | None = None) -> list[dict]:
    """All phases for one fold; returns the fine-tune metric records."""
    phase_tapt(cfg, fold_index)
    phase_cluster(cfg, fold_index)
    phase_pretrain(cfg, fold_index)
    return [phase_finetune(cfg, fold_index, pooling) for pooling in (poolings or [cfg.pooling])]


def run_all(cfg: ExperimentConfig) -> dict:
    """Corpus, every fold end to end, and the aggregate report."""
    paths = _paths(cfg)
    if cfg.corpus_path is None and not paths.corpus.exists():
        phase_gen_corpus(cfg)
    for fold_index in range(5):
        run_fold(cfg, fold_index)
    return phase_eval(cfg)


# -- ablation grid ------------------------------------------------------------


@dataclass
class AblationResult:
    cells: dict[tuple[int, int, str], tuple[float, float]]
    errors: dict[tuple[int, int, str], str] = field(default_factory=dict)
    provenance: dict[str, dict] = field(default_factory=dict)
    report: Report | None = None


def run_ablation(cfg: ExperimentConfig, spec: AblationSpec | None = None) -> AblationResult:
    """Run the (layer x clusters x pooling) grid per seed and fold.

    Phase 1 is layer/cluster independent, so it runs once per (seed,
    fold); each grid cell then reuses it for clustering, continued
    pretraining, and both fine-tunes. Cells record the median over seeds
    of the five-fold mean; a failed cell is recorded with its error and
    the rest of the grid proceeds.
    """
    spec = spec or cfg.ablation
    paths = _paths(cfg)
    _echo_experiment(cfg, paths)
    if cfg.corpus_path is None and not paths.corpus.exists():
        phase_gen_corpus(cfg)
    corpus_path = str(cfg.corpus_path or paths.corpus)

    per_seed: dict[tuple[int, int, str], list[tuple[float, float]]] = {}
    errors: dict[tuple[int, int, str], str] = {}
    provenance: dict[str, dict] = {}

    for seed in spec.seeds:
        seed_cfg = dataclasses.replace(
            cfg,
            seed=seed,
            out_dir=str(paths.root / "ablation" / f"seed{seed}"),
            corpus_path=corpus_path,
        )
        for fold_index in range(5):
            phase_tapt(seed_cfg, fold_index)
        for layer in spec.layers:
            for k in spec.clusters:
                cell_cfg = dataclasses.replace(seed_cfg, tap_layer=layer, num_clusters=k)
                try:
                    for fold_index in range(5):
                        phase_cluster(cell_cfg, fold_index)
                        phase_pretrain(cell_cfg, fold_index)
                except SeralignError as exc:
                    for pooling in spec.poolings:
                        errors[(layer, k, pooling)] = f"{type(exc).__name__}: {exc}"
                    continue
                for pooling in spec.poolings:
                    try:
                        fold_records = [
                            phase_finetune(cell_cfg, fold_index, pooling) for fold_index in range(5)
                        ]
                    except SeralignError as exc:
                        errors[(layer, k, pooling)] = f"{type(exc).__name__}: {exc}"
                        continue
                    aggregate = aggregate_folds([Metrics.from_record(r) for r in fold_records])
                    per_seed.setdefault((layer, k, pooling), []).append(
                        (aggregate.ua_mean, aggregate.wa_mean)
                    )
                    provenance[f"seed{seed}_L{layer}_K{k}_{pooling}"] = {
                        "seed": seed,
                        "codebook_ids": [r["codebook_id"] for r in fold_records],
                        "checkpoints": [r["checkpoints"] for r in fold_records],
                        "ua_mean": aggregate.ua_mean,
                        "wa_mean": aggregate.wa_mean,
                    }

    cells: dict[tuple[int, int, str], tuple[float, float]] = {}
    for key, values in per_seed.items():
        cells[key] = (
            float(np.median([v[0] for v in values])),
            float(np.median([v[1] for v in values])),
        )
    report = render_report(cells, layers=spec.layers, clusters=spec.clusters, errors=errors)
    (paths.root / "report.tsv").write_text(report.table, encoding="utf-8")
    (paths.root / "report.txt").write_text(report.text, encoding="utf-8")
    _write_json(
        paths.root / "ablation.json",
        {
            "cells": {f"L{l}_K{k}_{p}": list(v) for (l, k, p), v in sorted(cells.items())},
            "errors": {f"L{l}_K{k}_{p}": msg for (l, k, p), msg in sorted(errors.items())},
            "provenance": provenance,
            "experiment": cfg.to_dict(),
        },
    )
    return AblationResult(cells=cells, errors=errors, provenance=provenance, report=report)
