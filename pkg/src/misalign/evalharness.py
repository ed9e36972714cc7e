"""Scoring of prediction files against gold manifests.

Four tasks share one report: per-role semantic classification (F1@0.5 and
accuracy), temporal localization (mean absolute error in frames and
seconds), spatial localization (mIoU plus center-distance and box-size
error, both normalized to the frame and raw), and mistake detection (a
clip is flagged when any role is). Sanity baselines exercise the whole
pipeline without any learned model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import BBox
from .errors import (
    EmptyInput,
    MalformedPrediction,
    MissingPrediction,
    UnknownSampleId,
)
from .generator import MistakeDataset, MistakeSample, load_manifest
from .io import align_table, dumps, make_header, write_headered_lines

PREDICTIONS_FORMAT = "misalign/predictions"
PREDICTIONS_VERSION = 1

REPORT_FORMAT = "misalign/eval-report"
REPORT_VERSION = 1

_MASK64 = (1 << 64) - 1
_BASELINE_STREAM_TAG = 0x42415345

BASELINE_KINDS = ("random", "prior", "center_pnr", "full_frame_box")


@dataclass(slots=True)
class PredictionRecord:
    sample_id: str
    role_scores: dict[str, float] = field(default_factory=dict)
    pnr_frame: int | None = None
    box: BBox | None = None

    def to_json_dict(self) -> dict:
        out: dict = {"sample_id": self.sample_id}
        if self.role_scores:
            out["role_scores"] = self.role_scores
        if self.pnr_frame is not None:
            out["pnr_frame"] = self.pnr_frame
        if self.box is not None:
            out["box"] = self.box.as_list()
        return out


def save_predictions(predictions: Iterable[PredictionRecord], path: str | Path,
                     meta: dict | None = None) -> None:
    header = make_header(PREDICTIONS_FORMAT, PREDICTIONS_VERSION, **(meta or {}))
    write_headered_lines(path, header,
                         (dumps(p.to_json_dict()) for p in predictions))


def load_predictions(path: str | Path) -> dict[str, PredictionRecord]:
    """Parse a prediction file into a map keyed by sample id.

    The header line is optional. Unknown fields are ignored; malformed
    lines, out-of-range scores, and duplicate sample ids are errors, which
    keeps scoring insensitive to line order.
    """
    out: dict[str, PredictionRecord] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedPrediction(line_number, f"not valid JSON ({exc})")
            if not isinstance(data, dict):
                raise MalformedPrediction(line_number, "line is not a JSON object")
            if line_number == 1 and data.get("format") == PREDICTIONS_FORMAT:
                continue
            record = _prediction_from_dict(data, line_number)
            if record.sample_id in out:
                raise MalformedPrediction(line_number,
                                          f"duplicate sample_id {record.sample_id!r}")
            out[record.sample_id] = record
    return out


def _prediction_from_dict(data: dict, line_number: int) -> PredictionRecord:
    if "sample_id" not in data:
        raise MalformedPrediction(line_number, "missing sample_id")
    scores: dict[str, float] = {}
    for role, value in (data.get("role_scores") or {}).items():
        try:
            score = float(value)
        except (TypeError, ValueError):
            raise MalformedPrediction(line_number, f"score for {role!r} is not a number")
        if not 0.0 <= score <= 1.0:
            raise MalformedPrediction(line_number, f"score for {role!r} outside [0, 1]: {score}")
        scores[role] = score
    pnr = data.get("pnr_frame")
    if pnr is not None and not isinstance(pnr, int):
        raise MalformedPrediction(line_number, f"pnr_frame must be an integer, got {pnr!r}")
    box = None
    if data.get("box") is not None:
        try:
            box = BBox.from_sequence(data["box"])
        except (TypeError, ValueError) as exc:
            raise MalformedPrediction(line_number, f"bad box: {exc}")
    return PredictionRecord(sample_id=str(data["sample_id"]), role_scores=scores,
                            pnr_frame=pnr, box=box)


# --- metric primitives ---

@dataclass(frozen=True, slots=True)
class BinaryMetrics:
    f1: float
    accuracy: float
    tp: int
    fp: int
    fn: int
    tn: int

    def to_json_dict(self) -> dict:
        return {"f1": self.f1, "accuracy": self.accuracy,
                "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def binary_metrics(pairs: Sequence[tuple[float, int]], threshold: float = 0.5) -> BinaryMetrics:
    """F1 and accuracy of thresholded scores against binary gold labels.

    A score equal to the threshold counts as a positive prediction. With no
    true positives, F1 is 1 when the confusion matrix is all-negative
    (TP=FP=FN=0) and 0 otherwise.
    """
    if not pairs:
        raise EmptyInput("score/label pairs")
    tp = fp = fn = tn = 0
    for score, gold in pairs:
        predicted = score >= threshold
        if predicted and gold:
            tp += 1
        elif predicted:
            fp += 1
        elif gold:
            fn += 1
        else:
            tn += 1
    if tp + fp + fn == 0:
        f1 = 1.0
    elif tp == 0:
        f1 = 0.0
    else:
        f1 = 2.0 * tp / (2.0 * tp + fp + fn)
    return BinaryMetrics(f1=f1, accuracy=(tp + tn) / len(pairs), tp=tp, fp=fp, fn=fn, tn=tn)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    inter_w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    inter_h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    inter = inter_w * inter_h
    return inter / (a.area + b.area - inter)


def detection_from_semantic(role_scores: Mapping[str, float], threshold: float = 0.5) -> int:
    """A clip is flagged as a mistake iff any semantic role is."""
    return 1 if any(score >= threshold for score in role_scores.values()) else 0


# --- per-task reports ---

def semantic_report(predictions: Mapping[str, PredictionRecord],
                    gold: Sequence[MistakeSample], threshold: float = 0.5) -> dict:
    """Per-role metrics plus their unweighted average."""
    roles = list(gold[0].labels) if gold else []
    per_role = {}
    for role in roles:
        pairs = []
        for sample in gold:
            prediction = predictions.get(sample.sample_id)
            if prediction is None or role not in prediction.role_scores:
                raise MissingPrediction(sample.sample_id, task="semantic")
            pairs.append((prediction.role_scores[role], sample.labels[role]))
        per_role[role] = binary_metrics(pairs, threshold)
    average = {
        "f1": sum(m.f1 for m in per_role.values()) / len(per_role),
        "accuracy": sum(m.accuracy for m in per_role.values()) / len(per_role),
    }
    return {"per_role": per_role, "average": average}


def temporal_report(predictions: Mapping[str, PredictionRecord],
                    gold: Sequence[MistakeSample]) -> dict:
    """Mean absolute PNR error over the given in-scope gold samples."""
    if not gold:
        raise EmptyInput("in-scope gold samples")
    frame_errors = []
    second_errors = []
    for sample in gold:
        prediction = predictions.get(sample.sample_id)
        if prediction is None or prediction.pnr_frame is None:
            raise MissingPrediction(sample.sample_id, task="temporal")
        error = abs(prediction.pnr_frame - sample.pnr_frame)
        frame_errors.append(error)
        second_errors.append(error / sample.fps)
    return {
        "mae_frames": sum(frame_errors) / len(frame_errors),
        "mae_seconds": sum(second_errors) / len(second_errors),
        "count": len(frame_errors),
    }


def spatial_report(predictions: Mapping[str, PredictionRecord],
                   gold: Sequence[MistakeSample],
                   frame_dims: Mapping[str, tuple[int, int]] | None = None) -> dict:
    """mIoU (percent), center distance, and box-size error over the given
    in-scope gold samples.

    Center distance is the Euclidean distance between box centers divided
    by the frame diagonal, in percent; box-size error is the absolute area
    difference over the frame area, in percent. Raw-pixel variants are
    reported alongside. ``frame_dims`` overrides the per-sample frame
    dimensions embedded in the manifest.
    """
    if not gold:
        raise EmptyInput("in-scope gold samples")
    ious = []
    cd_pct = []
    bse_pct = []
    cd_px = []
    bse_px2 = []
    for sample in gold:
        prediction = predictions.get(sample.sample_id)
        if prediction is None or prediction.box is None:
            raise MissingPrediction(sample.sample_id, task="spatial")
        if frame_dims is not None and sample.sample_id in frame_dims:
            width, height = frame_dims[sample.sample_id]
        else:
            width, height = sample.frame_width, sample.frame_height
        predicted, truth = prediction.box, sample.mistake_box
        ious.append(iou(predicted, truth))
        (px, py), (gx, gy) = predicted.center, truth.center
        distance = math.hypot(px - gx, py - gy)
        area_error = abs(predicted.area - truth.area)
        cd_px.append(distance)
        bse_px2.append(area_error)
        cd_pct.append(100.0 * distance / math.hypot(width, height))
        bse_pct.append(100.0 * area_error / (width * height))
    count = len(ious)
    return {
        "miou_pct": 100.0 * sum(ious) / count,
        "cd_pct": sum(cd_pct) / count,
        "bse_pct": sum(bse_pct) / count,
        "cd_px": sum(cd_px) / count,
        "bse_px2": sum(bse_px2) / count,
        "count": count,
    }


def detection_report(predictions: Mapping[str, PredictionRecord],
                     gold: Sequence[MistakeSample], threshold: float = 0.5) -> BinaryMetrics:
    """Mistake detection derived from semantic scores: flagged iff any role
    is; gold label is the OR of the gold role labels."""
    pairs = []
    for sample in gold:
        prediction = predictions.get(sample.sample_id)
        if prediction is None or not prediction.role_scores:
            raise MissingPrediction(sample.sample_id, task="detection")
        decision = detection_from_semantic(prediction.role_scores, threshold)
        gold_label = 1 if any(sample.labels.values()) else 0
        pairs.append((float(decision), gold_label))
    return binary_metrics(pairs, threshold=0.5)


# --- full evaluation ---

@dataclass(frozen=True, slots=True)
class EvalOptions:
    threshold: float = 0.5
    allow_partial: bool = False
    # "gold": temporal/spatial scope is gold-mistake samples carrying the
    # annotation; "predicted": additionally requires the prediction itself
    # to flag at least one role.
    scope: str = "gold"

    def describe(self) -> dict:
        return {"threshold": self.threshold, "allow_partial": self.allow_partial,
                "scope": self.scope}


@dataclass(slots=True)
class EvalReport:
    semantic: dict | None
    temporal: dict | None
    spatial: dict | None
    detection: BinaryMetrics | None
    coverage: dict
    options: dict

    def to_json_dict(self) -> dict:
        semantic = None
        if self.semantic is not None:
            semantic = {
                "per_role": {r: m.to_json_dict() for r, m in self.semantic["per_role"].items()},
                "average": self.semantic["average"],
            }
        return {
            "semantic": semantic,
            "temporal": self.temporal,
            "spatial": self.spatial,
            "detection": self.detection.to_json_dict() if self.detection else None,
            "coverage": self.coverage,
            "options": self.options,
        }

    def as_text(self) -> str:
        rows = [["task", "metric", "value"]]
        if self.semantic:
            average = self.semantic["average"]
            rows.append(["semantic", "average F1@t", f"{average['f1']:.4f}"])
            rows.append(["semantic", "average accuracy", f"{average['accuracy']:.4f}"])
            for role, metrics in self.semantic["per_role"].items():
                rows.append(["semantic", f"{role} F1@t", f"{metrics.f1:.4f}"])
                rows.append(["semantic", f"{role} accuracy", f"{metrics.accuracy:.4f}"])
        if self.temporal:
            rows.append(["temporal", "MAE (frames)", f"{self.temporal['mae_frames']:.2f}"])
            rows.append(["temporal", "MAE (seconds)", f"{self.temporal['mae_seconds']:.4f}"])
        if self.spatial:
            rows.append(["spatial", "mIoU (%)", f"{self.spatial['miou_pct']:.2f}"])
            rows.append(["spatial", "CD (%)", f"{self.spatial['cd_pct']:.2f}"])
            rows.append(["spatial", "BSE (%)", f"{self.spatial['bse_pct']:.2f}"])
        if self.detection:
            rows.append(["detection", "F1@t", f"{self.detection.f1:.4f}"])
            rows.append(["detection", "accuracy", f"{self.detection.accuracy:.4f}"])
        for key, value in sorted(self.coverage.items()):
            rows.append(["coverage", key, str(value)])
        return align_table(rows)

    def save(self, path: str | Path) -> None:
        header = make_header(REPORT_FORMAT, REPORT_VERSION)
        body = dumps(self.to_json_dict())
        write_headered_lines(path, header, [body])


def _temporal_scope(sample: MistakeSample) -> bool:
    return sample.pnr_frame is not None and any(sample.labels.values())


def _predicted_positive(prediction: PredictionRecord | None, threshold: float) -> bool:
    return prediction is not None and detection_from_semantic(
        prediction.role_scores, threshold) == 1


def evaluate(manifest: MistakeDataset | str | Path,
             predictions: Mapping[str, PredictionRecord] | str | Path,
             options: EvalOptions = EvalOptions()) -> EvalReport:
    """Score a prediction set against a gold manifest.

    Raises UnknownSampleId for predictions outside the manifest and
    MissingPrediction for any in-scope sample without the needed output,
    unless ``options.allow_partial`` downgrades the latter to a skip
    counter.
    """
    dataset = load_manifest(manifest) if isinstance(manifest, (str, Path)) else manifest
    if isinstance(predictions, (str, Path)):
        predictions = load_predictions(predictions)
    gold = dataset.samples
    if not gold:
        raise EmptyInput("gold manifest")

    gold_ids = {s.sample_id for s in gold}
    for sample_id in sorted(predictions):
        if sample_id not in gold_ids:
            raise UnknownSampleId(sample_id)

    threshold = options.threshold
    coverage: dict[str, int] = {"gold_samples": len(gold), "predictions": len(predictions)}

    def in_scope(kind: str, sample: MistakeSample) -> bool:
        if kind == "temporal":
            ok = _temporal_scope(sample)
        else:
            ok = sample.mistake_box is not None
        if ok and options.scope == "predicted":
            ok = _predicted_positive(predictions.get(sample.sample_id), threshold)
        return ok

    def covered(kind: str, sample: MistakeSample) -> bool:
        prediction = predictions.get(sample.sample_id)
        if prediction is None:
            return False
        if kind == "semantic":
            return all(role in prediction.role_scores for role in sample.labels)
        if kind == "temporal":
            return prediction.pnr_frame is not None
        return prediction.box is not None

    def select(kind: str, pool: Sequence[MistakeSample]) -> list[MistakeSample]:
        scored, missing = [], []
        for sample in pool:
            if covered(kind, sample):
                scored.append(sample)
            else:
                missing.append(sample.sample_id)
        coverage[f"{kind}_in_scope"] = len(pool)
        coverage[f"{kind}_scored"] = len(scored)
        coverage[f"{kind}_skipped"] = len(missing)
        if missing and not options.allow_partial:
            raise MissingPrediction(sorted(missing)[0], task=kind)
        return scored

    semantic_pool = select("semantic", gold)
    temporal_pool = select("temporal", [s for s in gold if in_scope("temporal", s)])
    spatial_pool = select("spatial", [s for s in gold if in_scope("spatial", s)])

    semantic = semantic_report(predictions, semantic_pool, threshold) if semantic_pool else None
    temporal = temporal_report(predictions, temporal_pool) if temporal_pool else None
    spatial = spatial_report(predictions, spatial_pool) if spatial_pool else None
    detection = detection_report(predictions, semantic_pool, threshold) if semantic_pool else None

    return EvalReport(semantic=semantic, temporal=temporal, spatial=spatial,
                      detection=detection, coverage=coverage, options=options.describe())


# --- sanity baselines ---

def baseline(kind: str, manifest: MistakeDataset | str | Path, seed: int = 0,
             train: MistakeDataset | Sequence[MistakeSample] | None = None,
             ) -> list[PredictionRecord]:
    """Model-free prediction files that exercise the whole harness.

    random: i.i.d. uniform role scores, a uniform frame in the clip, and a
    random valid box. prior: constant per-role positive rates estimated
    from ``train``. center_pnr: the clip midpoint. full_frame_box: the
    whole frame.
    """
    dataset = load_manifest(manifest) if isinstance(manifest, (str, Path)) else manifest
    samples = sorted(dataset.samples, key=lambda s: s.sample_id)
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline {kind!r}; available: {BASELINE_KINDS}")

    if kind == "random":
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([int(seed) & _MASK64, _BASELINE_STREAM_TAG])))
        out = []
        for sample in samples:
            scores = {role: float(rng.uniform()) for role in sample.labels}
            pnr = int(rng.integers(sample.clip_start_frame, sample.clip_end_frame + 1))
            width, height = sample.frame_width, sample.frame_height
            x_min = float(rng.uniform(0, width / 2))
            y_min = float(rng.uniform(0, height / 2))
            box = BBox(x_min, y_min,
                       float(rng.uniform(1, width - x_min)),
                       float(rng.uniform(1, height - y_min)))
            out.append(PredictionRecord(sample.sample_id, scores, pnr, box))
        return out

    if kind == "prior":
        if train is None:
            raise EmptyInput("train manifest (required for the prior baseline)")
        train_samples = train.samples if isinstance(train, MistakeDataset) else list(train)
        if not train_samples:
            raise EmptyInput("train manifest")
        roles = list(train_samples[0].labels)
        rates = {
            role: sum(s.labels[role] for s in train_samples) / len(train_samples)
            for role in roles
        }
        return [PredictionRecord(s.sample_id, dict(rates)) for s in samples]

    if kind == "center_pnr":
        return [
            PredictionRecord(s.sample_id,
                             pnr_frame=(s.clip_start_frame + s.clip_end_frame) // 2)
            for s in samples
        ]

    # full_frame_box
    return [
        PredictionRecord(s.sample_id,
                         box=BBox(0.0, 0.0, float(s.frame_width), float(s.frame_height)))
        for s in samples
    ]
