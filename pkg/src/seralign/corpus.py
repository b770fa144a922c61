"""Synthetic emotion corpus: generation, persistence, and session folds.

The corpus mimics a five-session, two-speakers-per-session recording
setup with four emotion classes. Frame features are Gaussian mixtures
with class-dependent means (separated by at least two standard
deviations) plus a per-speaker offset, and a configurable fraction of
frames per utterance is drawn from the neutral-class distribution
regardless of the utterance label, so that frame-level and
utterance-level affect deliberately disagree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FoldError, ParseError

CORPUS_FORMAT = "seralign.corpus"
CORPUS_VERSION = 1


class EmotionLabel(IntEnum):
    """The four emotion classes with their stable integer encoding."""

    happy = 0
    sad = 1
    neutral = 2
    angry = 3


EMOTION_NAMES = tuple(label.name for label in EmotionLabel)
NUM_CLASSES = len(EmotionLabel)


@dataclass(frozen=True)
class GenerationSpec:
    """All seeds and mixture parameters behind one synthetic corpus."""

    sessions: int = 5
    utterances_per_speaker: int = 20
    feature_dim: int = 8
    frames_min: int = 20
    frames_max: int = 40
    inconsistency_rate: float = 0.0
    seed: int = 0
    class_separation: float = 2.5
    speaker_spread: float = 0.5

    def validate(self) -> None:
        if self.sessions < 1:
            raise ConfigurationError(f"sessions must be >= 1, got {self.sessions}")
        if self.utterances_per_speaker < 1:
            raise ConfigurationError(f"utterances_per_speaker must be >= 1, got {self.utterances_per_speaker}")
        if self.feature_dim < 1:
            raise ConfigurationError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.frames_min < 4:
            raise ConfigurationError(f"frames_min must be >= 4, got {self.frames_min}")
        if self.frames_max < self.frames_min:
            raise ConfigurationError(f"frames_max {self.frames_max} is below frames_min {self.frames_min}")
        if not 0.0 <= self.inconsistency_rate < 1.0:
            raise ConfigurationError(f"inconsistency_rate must lie in [0, 1), got {self.inconsistency_rate}")
        if self.class_separation < 2.0:
            raise ConfigurationError(f"class_separation must be >= 2 (unit noise), got {self.class_separation}")


@dataclass(eq=False)
class Utterance:
    """One sample: frame features plus session/speaker/emotion metadata."""

    id: str
    session: int
    speaker: str
    label: EmotionLabel
    frames: np.ndarray
    frame_truth: tuple[EmotionLabel, ...] | None = None

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.id == other.id
            and self.session == other.session
            and self.speaker == other.speaker
            and self.label == other.label
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
            and self.frame_truth == other.frame_truth
        )


@dataclass(eq=False)
class Corpus:
    utterances: list[Utterance]
    sessions: int
    feature_dim: int
    speakers_per_session: int = 2
    generation_spec: GenerationSpec | None = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            self.sessions == other.sessions
            and self.feature_dim == other.feature_dim
            and self.speakers_per_session == other.speakers_per_session
            and self.generation_spec == other.generation_spec
            and self.utterances == other.utterances
        )

    def speakers_by_session(self) -> dict[int, list[str]]:
        out: dict[int, set[str]] = {}
        for utt in self.utterances:
            out.setdefault(utt.session, set()).add(utt.speaker)
        return {session: sorted(speakers) for session, speakers in sorted(out.items())}

    def validate(self) -> None:
        """Check internal consistency (speaker/session binding, finite frames)."""
        speaker_home: dict[str, int] = {}
        seen_ids: set[str] = set()
        for utt in self.utterances:
            if utt.id in seen_ids:
                raise ConfigurationError(f"duplicate utterance id {utt.id!r}")
            seen_ids.add(utt.id)
            if not 1 <= utt.session <= self.sessions:
                raise ConfigurationError(f"utterance {utt.id!r} references unknown session {utt.session}")
            home = speaker_home.setdefault(utt.speaker, utt.session)
            if home != utt.session:
                raise ConfigurationError(
                    f"speaker {utt.speaker!r} appears in sessions {home} and {utt.session}"
                )
            if utt.num_frames < 1:
                raise ConfigurationError(f"utterance {utt.id!r} has no frames")
            if utt.frames.shape[1] != self.feature_dim:
                raise ConfigurationError(
                    f"utterance {utt.id!r} has feature width {utt.frames.shape[1]}, corpus says {self.feature_dim}"
                )
            if not np.all(np.isfinite(utt.frames)):
                raise ConfigurationError(f"utterance {utt.id!r} contains non-finite frames")
            if utt.frame_truth is not None and len(utt.frame_truth) != utt.num_frames:
                raise ConfigurationError(f"utterance {utt.id!r} frame_truth length mismatch")


@dataclass(frozen=True)
class FoldPlan:
    """Train/validation/test speaker assignment for one held-out session."""

    fold_index: int
    train_sessions: tuple[int, ...]
    val_speaker: str
    test_speaker: str


def _class_means(feature_dim: int, separation: float) -> np.ndarray:
    means = np.zeros((NUM_CLASSES, feature_dim))
    if feature_dim >= NUM_CLASSES:
        for c in range(NUM_CLASSES):
            means[c, c] = separation
    else:
        for c in range(NUM_CLASSES):
            means[c, 0] = separation * c
    return means


def generate_corpus(spec: GenerationSpec) -> Corpus:
    """Deterministically generate a synthetic corpus from `spec`.

    Each frame is drawn from the unit-variance Gaussian of its source
    class; with probability `inconsistency_rate` the source class is
    forced to neutral regardless of the utterance label, and the true
    source is recorded in `frame_truth`.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    means = _class_means(spec.feature_dim, spec.class_separation)
    neutral = int(EmotionLabel.neutral)

    utterances: list[Utterance] = []
    for session in range(1, spec.sessions + 1):
        for slot in ("F", "M"):
            speaker = f"ses{session:02d}_{slot}"
            offset = rng.normal(0.0, spec.speaker_spread, size=spec.feature_dim)
            for j in range(spec.utterances_per_speaker):
                label = EmotionLabel(j % NUM_CLASSES)
                n_frames = int(rng.integers(spec.frames_min, spec.frames_max + 1))
                inconsistent = rng.random(n_frames) < spec.inconsistency_rate
                sources = np.full(n_frames, int(label))
                sources[inconsistent] = neutral
                noise = rng.normal(0.0, 1.0, size=(n_frames, spec.feature_dim))
                frames = means[sources] + offset[None, :] + noise
                utterances.append(
                    Utterance(
                        id=f"{speaker}_u{j:03d}",
                        session=session,
                        speaker=speaker,
                        label=label,
                        frames=frames,
                        frame_truth=tuple(EmotionLabel(int(s)) for s in sources),
                    )
                )
    corpus = Corpus(
        utterances=utterances,
        sessions=spec.sessions,
        feature_dim=spec.feature_dim,
        generation_spec=spec,
    )
    corpus.validate()
    return corpus


def make_folds(corpus: Corpus) -> list[FoldPlan]:
    """Leave-one-session-out folds: fold k holds out session k+1.

    Within the held-out session the lexicographically smaller speaker id
    becomes the validation speaker and the other one the test speaker.
    """
    by_session = corpus.speakers_by_session()
    if corpus.sessions != 5 or sorted(by_session) != [1, 2, 3, 4, 5]:
        raise FoldError(f"fold plans need exactly 5 populated sessions, got {sorted(by_session)}")
    for session, speakers in by_session.items():
        if len(speakers) != 2:
            raise FoldError(f"session {session} has speakers {speakers}; exactly 2 required")
    folds = []
    for fold_index in range(5):
        held_out = fold_index + 1
        val_speaker, test_speaker = by_session[held_out]
        folds.append(
            FoldPlan(
                fold_index=fold_index,
                train_sessions=tuple(s for s in range(1, 6) if s != held_out),
                val_speaker=val_speaker,
                test_speaker=test_speaker,
            )
        )
    return folds


def split_corpus(corpus: Corpus, fold: FoldPlan) -> tuple[list[Utterance], list[Utterance], list[Utterance]]:
    """Partition utterances into (train, validation, test) for one fold."""
    train = [u for u in corpus.utterances if u.session in fold.train_sessions]
    val = [u for u in corpus.utterances if u.speaker == fold.val_speaker]
    test = [u for u in corpus.utterances if u.speaker == fold.test_speaker]
    if not train or not val or not test:
        raise FoldError(
            f"fold {fold.fold_index} produced an empty partition "
            f"(train={len(train)}, val={len(val)}, test={len(test)})"
        )
    return train, val, test


# -- persistence ----------------------------------------------------------


def _utterance_record(utt: Utterance) -> dict:
    record = {
        "id": utt.id,
        "session": utt.session,
        "speaker": utt.speaker,
        "label": utt.label.name,
        "num_frames": utt.num_frames,
        "frames": utt.frames.reshape(-1).tolist(),
        "frame_truth": None if utt.frame_truth is None else [t.name for t in utt.frame_truth],
    }
    return record


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write one header line plus one JSON record per utterance."""
    header = {
        "format": CORPUS_FORMAT,
        "version": CORPUS_VERSION,
        "sessions": corpus.sessions,
        "speakers_per_session": corpus.speakers_per_session,
        "feature_dim": corpus.feature_dim,
        "num_utterances": len(corpus.utterances),
        "generation_spec": None if corpus.generation_spec is None else asdict(corpus.generation_spec),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for utt in corpus.utterances:
            fh.write(json.dumps(_utterance_record(utt), separators=(",", ":")) + "\n")


def _parse_label(name, record_name: str) -> EmotionLabel:
    try:
        return EmotionLabel[name]
    except KeyError:
        raise ParseError(f"{record_name}: unknown emotion label {name!r}") from None


def load_corpus(path: str | Path) -> Corpus:
    """Parse a corpus file; any malformed record aborts the whole load."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file, expected a corpus header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: header record is not valid JSON ({exc})") from None
    if not isinstance(header, dict) or header.get("format") != CORPUS_FORMAT:
        raise ParseError(f"{path}: header record does not declare format {CORPUS_FORMAT!r}")
    if header.get("version") != CORPUS_VERSION:
        raise ParseError(f"{path}: unsupported corpus version {header.get('version')!r}")

    feature_dim = int(header["feature_dim"])
    expected = int(header.get("num_utterances", len(lines) - 1))
    spec = None
    if header.get("generation_spec") is not None:
        try:
            spec = GenerationSpec(**header["generation_spec"])
        except TypeError as exc:
            raise ParseError(f"{path}: header generation_spec is malformed ({exc})") from None

    utterances: list[Utterance] = []
    for index, line in enumerate(lines[1:], start=1):
        record_name = f"{path}: utterance record {index}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{record_name} is not valid JSON ({exc})") from None
        try:
            n_frames = int(rec["num_frames"])
            flat = np.asarray(rec["frames"], dtype=np.float64)
            if flat.size != n_frames * feature_dim:
                raise ParseError(
                    f"{record_name} ({rec.get('id')!r}): {flat.size} frame values, "
                    f"expected {n_frames}x{feature_dim}"
                )
            truth = rec.get("frame_truth")
            utterances.append(
                Utterance(
                    id=str(rec["id"]),
                    session=int(rec["session"]),
                    speaker=str(rec["speaker"]),
                    label=_parse_label(rec["label"], record_name),
                    frames=flat.reshape(n_frames, feature_dim),
                    frame_truth=None if truth is None else tuple(_parse_label(t, record_name) for t in truth),
                )
            )
        except KeyError as exc:
            raise ParseError(f"{record_name} is missing field {exc}") from None
    if len(utterances) != expected:
        raise ParseError(f"{path}: header declares {expected} utterances, file holds {len(utterances)}")

    corpus = Corpus(
        utterances=utterances,
        sessions=int(header["sessions"]),
        feature_dim=feature_dim,
        speakers_per_session=int(header.get("speakers_per_session", 2)),
        generation_spec=spec,
    )
    corpus.validate()
    return corpus
