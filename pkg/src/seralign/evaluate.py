"""Metrics (UA/WA), cross-validation aggregation, and report rendering.

UA is the mean of per-class recalls over the classes that actually occur
in the reference labels; WA is plain sample accuracy. Reports mirror the
layer x cluster-count x pooling ablation grid, with cells formatted as
"UA/WA" percentages, and can carry the published full-scale reference
numbers as context rows (those require the real corpus and a large
pretrained backbone, so they are never reproduced here).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .corpus import NUM_CLASSES
from .errors import InputError, ParseError


@dataclass(eq=False)
class Metrics:
    confusion: np.ndarray  # (4, 4) counts, rows = true class, cols = predicted
    ua: float
    wa: float

    def __eq__(self, other) -> bool:
        if not isinstance(other, Metrics):
            return NotImplemented
        return np.array_equal(self.confusion, other.confusion) and self.ua == other.ua and self.wa == other.wa

    def to_record(self) -> dict:
        return {"ua": self.ua, "wa": self.wa, "confusion": self.confusion.tolist()}

    @classmethod
    def from_record(cls, record: Mapping) -> "Metrics":
        try:
            return cls(
                confusion=np.asarray(record["confusion"], dtype=np.int64),
                ua=float(record["ua"]),
                wa=float(record["wa"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed metrics record ({exc})") from None


def compute_metrics(true_labels, predicted_labels) -> Metrics:
    """Confusion matrix, UA and WA over the 4-class alphabet.

    Classes absent from `true_labels` are excluded from the UA mean.
    """
    truth = np.asarray([int(v) for v in true_labels], dtype=np.int64)
    pred = np.asarray([int(v) for v in predicted_labels], dtype=np.int64)
    if truth.shape != pred.shape:
        raise InputError(f"label sequences differ in length: {truth.shape[0]} vs {pred.shape[0]}")
    if truth.size == 0:
        raise InputError("cannot compute metrics over zero samples")
    if truth.min() < 0 or truth.max() >= NUM_CLASSES or pred.min() < 0 or pred.max() >= NUM_CLASSES:
        raise InputError(f"labels must lie in [0, {NUM_CLASSES})")

    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    support = confusion.sum(axis=1)
    present = np.flatnonzero(support > 0)
    # exact rational arithmetic, rounded once: counts are small integers and
    # the hand-countable examples must come out exactly
    recalls = [Fraction(int(confusion[i, i]), int(support[i])) for i in present]
    ua = float(sum(recalls) / len(recalls))
    wa = float(Fraction(int(confusion.trace()), int(confusion.sum())))
    return Metrics(confusion=confusion, ua=ua, wa=wa)


@dataclass
class FoldAggregate:
    ua_mean: float
    wa_mean: float
    per_fold: list[Metrics]


def aggregate_folds(fold_metrics: Sequence[Metrics]) -> FoldAggregate:
    """Unweighted mean of UA and WA over exactly five folds."""
    if len(fold_metrics) != 5:
        raise InputError(f"expected metrics for exactly 5 folds, got {len(fold_metrics)}")
    return FoldAggregate(
        ua_mean=float(np.mean([m.ua for m in fold_metrics])),
        wa_mean=float(np.mean([m.wa for m in fold_metrics])),
        per_fold=list(fold_metrics),
    )


# -- reporting -------------------------------------------------------------------

# Published full-scale results (real corpus + large pretrained backbone),
# shown in reports for context only; not reproducible at desk scale.
REFERENCE_FULL_SCALE: tuple[tuple[str, float, float | None], ...] = (
    ("baseline (frame-aligned fine-tune, average pooling)", 74.3, None),
    ("task-adaptive pretrain + average pooling", 74.1, 72.8),
    ("best average pooling (layer 9, 50 clusters)", 75.1, 73.5),
    ("best attention pooling (layer 9, 50 clusters)", 75.7, 74.7),
)


@dataclass
class Report:
    table: str  # tab-separated machine-readable grid
    text: str  # aligned human-readable rendering


def _format_cell(value: tuple[float, float] | None) -> str:
    if value is None:
        return ""
    ua, wa = value
    return f"{100 * ua:.1f}/{100 * wa:.1f}"


def render_report(
    cells: Mapping[tuple[int, int, str], tuple[float, float]],
    layers: Sequence[int] | None = None,
    clusters: Sequence[int] | None = None,
    include_reference: bool = True,
    errors: Mapping[tuple[int, int, str], str] | None = None,
) -> Report:
    """Render the (tap layer x cluster count x pooling) grid.

    `cells` maps (layer, num_clusters, pooling) to fractional (UA, WA);
    missing cells render as blanks. The tab-separated form carries one
    row per (layer, clusters) with average/attention columns.
    """
    if layers is None:
        layers = sorted({key[0] for key in cells})
    if clusters is None:
        clusters = sorted({key[1] for key in cells})
    errors = dict(errors or {})

    header = ["layer", "clusters", "average_pooling", "attention_pooling"]
    rows: list[list[str]] = []
    for layer in layers:
        for k in clusters:
            avg = cells.get((layer, k, "average"))
            att = cells.get((layer, k, "attention"))
            rows.append([str(layer), str(k), _format_cell(avg), _format_cell(att)])
    table_lines = ["\t".join(header)] + ["\t".join(r) for r in rows]

    text_lines = ["UA/WA (%) by tap layer, cluster count, and pooling", ""]
    widths = [8, 10, 18, 18]
    def _fmt_row(values: Sequence[str]) -> str:
        return "  ".join(v.ljust(w) for v, w in zip(values, widths)).rstrip()

    text_lines.append(_fmt_row(["layer", "clusters", "average pooling", "attention pooling"]))
    text_lines.append(_fmt_row(["-" * w for w in widths]))
    for r in rows:
        text_lines.append(_fmt_row(r))
    failed = {key: msg for key, msg in errors.items()}
    if failed:
        text_lines.append("")
        text_lines.append("failed cells:")
        for key in sorted(failed):
            layer, k, pooling = key
            text_lines.append(f"  layer {layer}, {k} clusters, {pooling}: {failed[key]}")
    if include_reference:
        text_lines.append("")
        text_lines.append("reference results, full scale (not reproducible on the synthetic corpus):")
        for name, ua, wa in REFERENCE_FULL_SCALE:
            wa_txt = f"{wa:.1f}" if wa is not None else "-"
            text_lines.append(f"  {name}: {ua:.1f}/{wa_txt}")
    return Report(table="\n".join(table_lines) + "\n", text="\n".join(text_lines) + "\n")


def save_fold_metrics(records: Sequence[Mapping], path) -> None:
    """One JSON record per line: fold index, UA, WA, flattened confusion."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")


def load_fold_metrics(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for index, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: metrics record {index} is not valid JSON ({exc})") from None
    return out
