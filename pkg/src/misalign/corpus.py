"""Normalized annotation records: ingestion from source files and a
versioned line-delimited store.

Two source layouts are supported: delimiter-separated tables with a caller
supplied column mapping, and structured JSON exports of per-clip objects
(the layout that carries PNR frames and hand/object boxes). Both normalize
into :class:`ActionRecord`. Frame indices are absolute within the clip's own
timeline, starting at 0; fps and frame dimensions fall back to documented
defaults when a source omits them, and every applied default is counted in
the ingestion report.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .errors import (
    BoxOutOfBounds,
    DuplicateRecordId,
    MalformedRow,
    MissingColumn,
    SchemaMismatch,
    VersionMismatch,
)
from .io import make_header, read_headered_lines, write_headered_lines, dumps

STORE_FORMAT = "misalign/records"
STORE_VERSION = 1

DEFAULT_FPS = 30.0
DEFAULT_FRAME_WIDTH = 1920
DEFAULT_FRAME_HEIGHT = 1080

# Table ingestion: record field -> whether the column must be mapped.
REQUIRED_COLUMNS = ("record_id", "video_id", "clip_start_frame", "clip_end_frame", "description")
OPTIONAL_COLUMNS = (
    "fps",
    "taxonomy_verb",
    "taxonomy_noun",
    "pnr_frame",
    "participant_id",
    "environment_id",
    "frame_width",
    "frame_height",
)


@dataclass(frozen=True, slots=True)
class BBox:
    """Axis-aligned box in pixels: top-left corner plus extents."""

    x_min: float
    y_min: float
    dx: float
    dy: float

    def __post_init__(self):
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"box corner must be >= 0, got ({self.x_min}, {self.y_min})")
        if self.dx <= 0 or self.dy <= 0:
            raise ValueError(f"box extents must be > 0, got ({self.dx}, {self.dy})")

    @property
    def x_max(self) -> float:
        return self.x_min + self.dx

    @property
    def y_max(self) -> float:
        return self.y_min + self.dy

    @property
    def area(self) -> float:
        return self.dx * self.dy

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.dx / 2.0, self.y_min + self.dy / 2.0)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.dx, self.dy]

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "BBox":
        if len(values) != 4:
            raise ValueError(f"box needs 4 values (x_min, y_min, dx, dy), got {len(values)}")
        return cls(float(values[0]), float(values[1]), float(values[2]), float(values[3]))


@dataclass(slots=True)
class ActionRecord:
    """One normalized source annotation: a described clip plus optional
    PNR/box/taxonomy metadata."""

    record_id: str
    video_id: str
    clip_start_frame: int
    clip_end_frame: int
    description: str
    fps: float = DEFAULT_FPS
    frame_width: int = DEFAULT_FRAME_WIDTH
    frame_height: int = DEFAULT_FRAME_HEIGHT
    taxonomy_verb: int | str | None = None
    taxonomy_noun: int | str | None = None
    pnr_frame: int | None = None
    hand_boxes: list[BBox] | None = None
    object_boxes: list[BBox] | None = None
    participant_id: str | None = None
    environment_id: str | None = None

    def validate(self) -> None:
        """Check the record invariants; raises ValueError or BoxOutOfBounds."""
        if not self.record_id:
            raise ValueError("record_id must be non-empty")
        if self.clip_start_frame < 0:
            raise ValueError(f"clip_start_frame must be >= 0, got {self.clip_start_frame}")
        if self.clip_end_frame <= self.clip_start_frame:
            raise ValueError(
                f"clip_end_frame ({self.clip_end_frame}) must exceed "
                f"clip_start_frame ({self.clip_start_frame})"
            )
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        if self.frame_width <= 0 or self.frame_height <= 0:
            raise ValueError(
                f"frame dimensions must be positive, got {self.frame_width}x{self.frame_height}"
            )
        if self.pnr_frame is not None and not (
            self.clip_start_frame <= self.pnr_frame <= self.clip_end_frame
        ):
            raise ValueError(
                f"pnr_frame {self.pnr_frame} outside clip "
                f"[{self.clip_start_frame}, {self.clip_end_frame}]"
            )
        if (self.hand_boxes or self.object_boxes) and self.pnr_frame is None:
            raise ValueError("boxes are annotated at the PNR frame; pnr_frame is required")
        for box in (self.hand_boxes or []) + (self.object_boxes or []):
            if box.x_max > self.frame_width or box.y_max > self.frame_height:
                raise BoxOutOfBounds(self.record_id, box.as_list(),
                                     self.frame_width, self.frame_height)

    def to_json_dict(self) -> dict:
        out: dict[str, Any] = {
            "record_id": self.record_id,
            "video_id": self.video_id,
            "clip_start_frame": self.clip_start_frame,
            "clip_end_frame": self.clip_end_frame,
            "description": self.description,
            "fps": self.fps,
            "frame_width": self.frame_width,
            "frame_height": self.frame_height,
        }
        # Optional fields are omitted when absent, never written as null.
        if self.taxonomy_verb is not None:
            out["taxonomy_verb"] = self.taxonomy_verb
        if self.taxonomy_noun is not None:
            out["taxonomy_noun"] = self.taxonomy_noun
        if self.pnr_frame is not None:
            out["pnr_frame"] = self.pnr_frame
        if self.hand_boxes is not None:
            out["hand_boxes"] = [b.as_list() for b in self.hand_boxes]
        if self.object_boxes is not None:
            out["object_boxes"] = [b.as_list() for b in self.object_boxes]
        if self.participant_id is not None:
            out["participant_id"] = self.participant_id
        if self.environment_id is not None:
            out["environment_id"] = self.environment_id
        return out

    @classmethod
    def from_json_dict(cls, data: dict) -> "ActionRecord":
        return cls(
            record_id=data["record_id"],
            video_id=data["video_id"],
            clip_start_frame=int(data["clip_start_frame"]),
            clip_end_frame=int(data["clip_end_frame"]),
            description=data["description"],
            fps=float(data["fps"]),
            frame_width=int(data["frame_width"]),
            frame_height=int(data["frame_height"]),
            taxonomy_verb=data.get("taxonomy_verb"),
            taxonomy_noun=data.get("taxonomy_noun"),
            pnr_frame=data.get("pnr_frame"),
            hand_boxes=[BBox.from_sequence(b) for b in data["hand_boxes"]]
            if "hand_boxes" in data else None,
            object_boxes=[BBox.from_sequence(b) for b in data["object_boxes"]]
            if "object_boxes" in data else None,
            participant_id=data.get("participant_id"),
            environment_id=data.get("environment_id"),
        )


@dataclass(slots=True)
class IngestResult:
    """Records plus the counters mandated for ingestion provenance."""

    records: list[ActionRecord]
    rows_in: int = 0
    dropped_no_description: int = 0
    fps_defaulted: int = 0
    dims_defaulted: int = 0

    def counters(self) -> dict:
        return {
            "rows_in": self.rows_in,
            "records_out": len(self.records),
            "dropped_no_description": self.dropped_no_description,
            "fps_defaulted": self.fps_defaulted,
            "dims_defaulted": self.dims_defaulted,
        }


def _parse_int(raw: str, what: str) -> int:
    try:
        return int(raw)
    except (TypeError, ValueError):
        raise ValueError(f"{what} must be an integer, got {raw!r}")


def _parse_float(raw: str, what: str) -> float:
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise ValueError(f"{what} must be a number, got {raw!r}")


def ingest_table(path: str | Path, schema: dict[str, str],
                 delimiter: str = ",") -> IngestResult:
    """Ingest a delimiter-separated table under a caller-supplied column map.

    ``schema`` maps record field names (see REQUIRED_COLUMNS and
    OPTIONAL_COLUMNS) to column names in the file's header row. Unmapped
    optional fields stay absent. Tables never carry boxes; use
    :func:`ingest_structured` for box-bearing sources.
    """
    for required in REQUIRED_COLUMNS:
        if required not in schema:
            raise MissingColumn(required, str(path))
    unknown = set(schema) - set(REQUIRED_COLUMNS) - set(OPTIONAL_COLUMNS)
    if unknown:
        raise MissingColumn(f"unknown schema keys {sorted(unknown)}", str(path))

    result = IngestResult(records=[])
    seen_ids: set[str] = set()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRow(1, "file has no header row")
        positions: dict[str, int] = {}
        for fieldname, column in schema.items():
            if column not in header:
                raise MissingColumn(column, str(path))
            positions[fieldname] = header.index(column)

        for line_number, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            result.rows_in += 1
            try:
                record = _record_from_row(row, positions, result)
            except ValueError as exc:
                raise MalformedRow(line_number, str(exc))
            if record.record_id in seen_ids:
                raise DuplicateRecordId(record.record_id)
            seen_ids.add(record.record_id)
            result.records.append(record)
    return result


def _record_from_row(row: list[str], positions: dict[str, int],
                     result: IngestResult) -> ActionRecord:
    def cell(fieldname: str) -> str | None:
        pos = positions.get(fieldname)
        if pos is None or pos >= len(row):
            return None
        value = row[pos].strip()
        return value if value else None

    fps_raw = cell("fps")
    width_raw, height_raw = cell("frame_width"), cell("frame_height")
    if fps_raw is None:
        result.fps_defaulted += 1
    if width_raw is None or height_raw is None:
        result.dims_defaulted += 1

    record = ActionRecord(
        record_id=cell("record_id") or "",
        video_id=cell("video_id") or "",
        clip_start_frame=_parse_int(cell("clip_start_frame"), "clip_start_frame"),
        clip_end_frame=_parse_int(cell("clip_end_frame"), "clip_end_frame"),
        description=cell("description") or "",
        fps=_parse_float(fps_raw, "fps") if fps_raw is not None else DEFAULT_FPS,
        frame_width=_parse_int(width_raw, "frame_width")
        if width_raw is not None else DEFAULT_FRAME_WIDTH,
        frame_height=_parse_int(height_raw, "frame_height")
        if height_raw is not None else DEFAULT_FRAME_HEIGHT,
        taxonomy_verb=_parse_int(cell("taxonomy_verb"), "taxonomy_verb")
        if cell("taxonomy_verb") is not None else None,
        taxonomy_noun=_parse_int(cell("taxonomy_noun"), "taxonomy_noun")
        if cell("taxonomy_noun") is not None else None,
        pnr_frame=_parse_int(cell("pnr_frame"), "pnr_frame")
        if cell("pnr_frame") is not None else None,
        participant_id=cell("participant_id"),
        environment_id=cell("environment_id"),
    )
    if not record.description:
        raise ValueError("description must be non-empty")
    record.validate()
    return record


def ingest_structured(path: str | Path) -> IngestResult:
    """Ingest a structured JSON annotation export.

    Expected layout::

        {"clips": [
            {"id": "...", "video": "...", "span": [start, end],
             "description": "...",            # clips without it are dropped
             "fps": 30, "width": 1920, "height": 1080,
             "pnr": 17,
             "hands":   [[x_min, y_min, dx, dy], ...],
             "objects": [[x_min, y_min, dx, dy], ...],
             "verb_class": 3, "noun_class": 17,
             "participant": "p01", "environment": "kitchen_2"},
            ...]}

    All keys other than ``id``, ``video``, ``span`` are optional. Clips with
    no description are dropped and counted; boxes outside the frame raise
    BoxOutOfBounds.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            tree = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"not valid JSON: {exc}")
    if not isinstance(tree, dict) or not isinstance(tree.get("clips"), list):
        raise SchemaMismatch("top level must be an object with a 'clips' list")

    result = IngestResult(records=[])
    seen_ids: set[str] = set()
    for position, clip in enumerate(tree["clips"]):
        result.rows_in += 1
        if not isinstance(clip, dict):
            raise SchemaMismatch(f"clips[{position}] is not an object")
        for key in ("id", "video", "span"):
            if key not in clip:
                raise SchemaMismatch(f"clips[{position}] missing required key {key!r}")
        span = clip["span"]
        if not (isinstance(span, list) and len(span) == 2):
            raise SchemaMismatch(f"clips[{position}].span must be [start, end]")

        description = clip.get("description")
        if not description or not str(description).strip():
            result.dropped_no_description += 1
            continue

        if "fps" not in clip:
            result.fps_defaulted += 1
        if "width" not in clip or "height" not in clip:
            result.dims_defaulted += 1

        try:
            record = ActionRecord(
                record_id=str(clip["id"]),
                video_id=str(clip["video"]),
                clip_start_frame=int(span[0]),
                clip_end_frame=int(span[1]),
                description=str(description),
                fps=float(clip.get("fps", DEFAULT_FPS)),
                frame_width=int(clip.get("width", DEFAULT_FRAME_WIDTH)),
                frame_height=int(clip.get("height", DEFAULT_FRAME_HEIGHT)),
                taxonomy_verb=clip.get("verb_class"),
                taxonomy_noun=clip.get("noun_class"),
                pnr_frame=clip.get("pnr"),
                hand_boxes=[BBox.from_sequence(b) for b in clip["hands"]]
                if clip.get("hands") is not None else None,
                object_boxes=[BBox.from_sequence(b) for b in clip["objects"]]
                if clip.get("objects") is not None else None,
                participant_id=clip.get("participant"),
                environment_id=clip.get("environment"),
            )
            record.validate()
        except BoxOutOfBounds:
            raise
        except (TypeError, ValueError) as exc:
            raise SchemaMismatch(f"clips[{position}]: {exc}")

        if record.record_id in seen_ids:
            raise DuplicateRecordId(record.record_id)
        seen_ids.add(record.record_id)
        result.records.append(record)
    return result


def save_store(records: Iterable[ActionRecord], path: str | Path,
               meta: dict | None = None) -> None:
    """Persist records as a versioned line-delimited store."""
    records = list(records)
    header = make_header(STORE_FORMAT, STORE_VERSION, count=len(records), **(meta or {}))
    write_headered_lines(path, header, (dumps(r.to_json_dict()) for r in records))


def load_store(path: str | Path) -> list[ActionRecord]:
    """Load a store written by :func:`save_store`; raises VersionMismatch on
    an incompatible header."""
    _, lines = read_headered_lines(path, STORE_FORMAT, STORE_VERSION)
    records = []
    seen: set[str] = set()
    for line_number, line in lines:
        try:
            record = ActionRecord.from_json_dict(json.loads(line))
            record.validate()
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise MalformedRow(line_number, str(exc))
        if record.record_id in seen:
            raise DuplicateRecordId(record.record_id)
        seen.add(record.record_id)
        records.append(record)
    return records
