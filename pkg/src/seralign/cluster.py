"""k-means over frame embeddings: fitting, assignment, and diagnostics.

Lloyd iterations from seeded k-means++ starts. Assignment is a pure
function of (codebook, frames) with ties broken toward the lowest
centroid index; empty clusters are repaired deterministically by
re-seeding the centroid onto the point farthest from its current
centroid.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Corpus, NUM_CLASSES
from .errors import ConfigurationError, CoverageError, DimensionError, ParseError

FEATURE_KINDS = ("transformer_layer", "base_features")


@dataclass(frozen=True)
class ClusterProvenance:
    """Where a codebook came from: tap layer, source model, fit scope."""

    feature_kind: str
    seed: int
    tap_layer: int | None = None
    source_checkpoint: str | None = None
    fold_index: int | None = None
    train_speakers: tuple[str, ...] = ()

    def __post_init__(self):
        if self.feature_kind not in FEATURE_KINDS:
            raise ConfigurationError(
                f"feature_kind must be one of {FEATURE_KINDS}, got {self.feature_kind!r}"
            )


@dataclass(eq=False)
class Codebook:
    centroids: np.ndarray  # (K, D)
    k: int
    provenance: ClusterProvenance
    inertia: float
    codebook_id: str = ""
    fit_codes: np.ndarray | None = field(default=None, repr=False)  # diagnostics only, not persisted

    def __post_init__(self):
        if not self.codebook_id:
            self.codebook_id = _codebook_content_id(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Codebook):
            return NotImplemented
        return (
            self.k == other.k
            and self.provenance == other.provenance
            and np.array_equal(self.centroids, other.centroids)
            and self.inertia == other.inertia
        )


@dataclass(eq=True)
class PseudoLabelSeq:
    """Per-frame integer cluster codes for one utterance."""

    utterance_id: str
    codes: tuple[int, ...]
    codebook_id: str


def _codebook_body(codebook: "Codebook") -> dict:
    return {
        "format": "seralign.codebook",
        "version": 1,
        "k": codebook.k,
        "dim": int(codebook.centroids.shape[1]),
        "inertia": codebook.inertia,
        "centroids": codebook.centroids.reshape(-1).tolist(),
        "provenance": asdict(codebook.provenance),
    }


def _codebook_content_id(codebook: "Codebook") -> str:
    body = json.dumps(_codebook_body(codebook), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


def _distances_sq(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances (N, K), computed by direct differences
    so mirror-symmetric ties stay exact."""
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _nearest(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = _distances_sq(points, centroids)
    codes = np.argmin(d, axis=1)  # argmin takes the lowest index on ties
    return codes, d[np.arange(len(points)), codes]


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    closest = _distances_sq(points, points[chosen[-1]][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        chosen.append(idx)
        closest = np.minimum(closest, _distances_sq(points, points[idx][None, :])[:, 0])
    return points[chosen].copy()


def kmeans_fit(
    points: np.ndarray,
    k: int,
    seed: int,
    max_iters: int = 100,
    tol: float = 1e-7,
    provenance: ClusterProvenance | None = None,
) -> Codebook:
    """Seeded k-means++ plus Lloyd iterations until centroids move < tol.

    Inertia is non-increasing across iterations; an empty cluster is
    re-seeded onto the point farthest from its assigned centroid rather
    than dropped. Deterministic given (points, k, seed).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DimensionError(f"kmeans_fit expects (N, D) points, got shape {points.shape}")
    n = len(points)
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    if n < k:
        raise ConfigurationError(f"cannot fit {k} clusters to {n} points")
    if not np.all(np.isfinite(points)):
        raise ConfigurationError("kmeans_fit: points contain non-finite values")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, k, rng)
    previous_inertia = np.inf
    for _ in range(max_iters):
        codes, dist = _nearest(points, centroids)
        counts = np.bincount(codes, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            farthest = int(np.argmax(dist))
            centroids[empty] = points[farthest]
            codes[farthest] = empty
            dist[farthest] = 0.0
            counts = np.bincount(codes, minlength=k)
        new_centroids = np.empty_like(centroids)
        for j in range(k):
            new_centroids[j] = points[codes == j].mean(axis=0)
        _, new_dist = _nearest(points, new_centroids)
        inertia = float(new_dist.sum())
        if inertia > previous_inertia + 1e-9 * max(1.0, previous_inertia):
            raise AssertionError("k-means inertia increased; Lloyd update is broken")
        movement = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        previous_inertia = inertia
        if movement < tol:
            break

    final_codes, final_dist = _nearest(points, centroids)
    prov = provenance or ClusterProvenance(feature_kind="base_features", seed=seed)
    return Codebook(
        centroids=centroids,
        k=k,
        provenance=prov,
        inertia=float(final_dist.sum()),
        fit_codes=final_codes,
    )


def kmeans_assign(codebook: Codebook, frames: np.ndarray, utterance_id: str = "") -> PseudoLabelSeq:
    """Map each frame to its nearest centroid (lowest index on ties)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != codebook.centroids.shape[1]:
        raise ConfigurationError(
            f"frames of width {frames.shape[-1] if frames.ndim else '?'} do not match "
            f"codebook dimension {codebook.centroids.shape[1]}"
        )
    codes, _ = _nearest(frames, codebook.centroids)
    return PseudoLabelSeq(
        utterance_id=utterance_id,
        codes=tuple(int(c) for c in codes),
        codebook_id=codebook.codebook_id,
    )


# -- diagnostics ---------------------------------------------------------------


@dataclass
class ClusterDiagnostics:
    purity: float
    per_cluster_label_histogram: np.ndarray  # (K, num emotion classes)
    code_transition_rate: float


def cluster_diagnostics(
    pseudo_labels: Iterable[PseudoLabelSeq] | Mapping[str, PseudoLabelSeq],
    corpus: Corpus,
    k: int | None = None,
) -> ClusterDiagnostics:
    """Purity and per-cluster emotion histograms against frame truth.

    Frame-level truth is used when its length matches the code sequence;
    otherwise every frame inherits the utterance label.
    """
    if isinstance(pseudo_labels, Mapping):
        by_id = dict(pseudo_labels)
    else:
        by_id = {seq.utterance_id: seq for seq in pseudo_labels}
    missing = [u.id for u in corpus.utterances if u.id not in by_id]
    if missing:
        raise CoverageError(f"pseudo labels missing for utterances: {', '.join(sorted(missing))}")

    max_code = max((max(seq.codes) for seq in by_id.values() if seq.codes), default=0)
    n_clusters = k if k is not None else max_code + 1
    histogram = np.zeros((n_clusters, NUM_CLASSES), dtype=np.int64)
    transitions = 0
    pairs = 0
    for utt in corpus.utterances:
        seq = by_id[utt.id]
        codes = np.asarray(seq.codes)
        if utt.frame_truth is not None and len(utt.frame_truth) == len(codes):
            truth = np.asarray([int(t) for t in utt.frame_truth])
        else:
            truth = np.full(len(codes), int(utt.label))
        np.add.at(histogram, (codes, truth), 1)
        if len(codes) > 1:
            transitions += int(np.count_nonzero(codes[1:] != codes[:-1]))
            pairs += len(codes) - 1

    total = int(histogram.sum())
    purity = float(histogram.max(axis=1).sum() / total) if total else 0.0
    rate = transitions / pairs if pairs else 0.0
    return ClusterDiagnostics(
        purity=purity,
        per_cluster_label_histogram=histogram,
        code_transition_rate=rate,
    )


# -- persistence ----------------------------------------------------------------


def save_codebook(codebook: Codebook, path: str | Path, experiment: Mapping | None = None) -> None:
    body = _codebook_body(codebook)
    body["id"] = codebook.codebook_id
    if experiment is not None:
        # config echo for provenance; not part of the content id
        body["experiment"] = dict(experiment)
    Path(path).write_text(json.dumps(body, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_codebook(path: str | Path) -> Codebook:
    try:
        body = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: codebook record is not valid JSON ({exc})") from None
    if not isinstance(body, dict) or body.get("format") != "seralign.codebook":
        raise ParseError(f"{path}: not a codebook file")
    try:
        prov_rec = dict(body["provenance"])
        prov_rec["train_speakers"] = tuple(prov_rec.get("train_speakers", ()))
        provenance = ClusterProvenance(**prov_rec)
        centroids = np.asarray(body["centroids"], dtype=np.float64).reshape(body["k"], body["dim"])
        codebook = Codebook(
            centroids=centroids,
            k=int(body["k"]),
            provenance=provenance,
            inertia=float(body["inertia"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed codebook record ({exc})") from None
    if body.get("id") and body["id"] != codebook.codebook_id:
        raise ParseError(f"{path}: codebook content does not match its id {body['id']}")
    return codebook


def save_pseudo_labels(
    labels: Sequence[PseudoLabelSeq], path: str | Path, experiment: Mapping | None = None
) -> None:
    if labels:
        codebook_ids = {seq.codebook_id for seq in labels}
        if len(codebook_ids) != 1:
            raise ConfigurationError(f"pseudo-label set references multiple codebooks: {sorted(codebook_ids)}")
        codebook_id = labels[0].codebook_id
    else:
        codebook_id = ""
    header = {
        "format": "seralign.pseudo_labels",
        "version": 1,
        "codebook_id": codebook_id,
        "num_utterances": len(labels),
    }
    if experiment is not None:
        header["experiment"] = dict(experiment)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for seq in labels:
            fh.write(
                json.dumps({"utterance_id": seq.utterance_id, "codes": list(seq.codes)}, separators=(",", ":"))
                + "\n"
            )


def load_pseudo_labels(path: str | Path) -> list[PseudoLabelSeq]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file, expected a pseudo-label header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: header record is not valid JSON ({exc})") from None
    if not isinstance(header, dict) or header.get("format") != "seralign.pseudo_labels":
        raise ParseError(f"{path}: not a pseudo-label file")
    codebook_id = header.get("codebook_id", "")
    out: list[PseudoLabelSeq] = []
    for index, line in enumerate(lines[1:], start=1):
        try:
            rec = json.loads(line)
            out.append(
                PseudoLabelSeq(
                    utterance_id=str(rec["utterance_id"]),
                    codes=tuple(int(c) for c in rec["codes"]),
                    codebook_id=codebook_id,
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: pseudo-label record {index} is malformed ({exc})") from None
    if len(out) != int(header.get("num_utterances", len(out))):
        raise ParseError(f"{path}: header declares {header.get('num_utterances')} records, file holds {len(out)}")
    return out
