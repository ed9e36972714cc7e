"""Train/val/test splitting and dataset statistics.

The default split unit is the instruction: all of an instruction's samples
land in one split, so no instruction text leaks across splits, and because
every retained instruction contributes the same number of samples the
sample-level proportions match the instruction-level ones.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import ActionRecord
from .errors import EmptyInput, InternalError, RatioInfeasible, VersionMismatch
from .generator import MistakeDataset, MistakeSample
from .io import align_table, dumps, make_header, read_headered_lines, write_headered_lines

SPLIT_FORMAT = "misalign/split"
SPLIT_VERSION = 1

SPLIT_NAMES = ("train", "val", "test")

_MASK64 = (1 << 64) - 1
_SPLIT_STREAM_TAG = 0x53504C49  # decouples split draws from sampler streams


@dataclass(frozen=True, slots=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (8.0, 1.0, 1.0)
    unit: str = "instruction"  # "instruction" | "sample"
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != len(SPLIT_NAMES):
            raise ValueError(f"expected {len(SPLIT_NAMES)} ratio parts, got {len(self.ratios)}")
        if any(r < 0 for r in self.ratios) or sum(self.ratios) <= 0:
            raise ValueError(f"ratios must be non-negative with a positive sum: {self.ratios}")
        if self.unit not in ("instruction", "sample"):
            raise ValueError(f"unit must be 'instruction' or 'sample', got {self.unit!r}")

    def describe(self) -> dict:
        return {"ratios": list(self.ratios), "unit": self.unit, "seed": int(self.seed)}


@dataclass(slots=True)
class SplitResult:
    train: list[str]
    val: list[str]
    test: list[str]
    spec: SplitSpec

    def parts(self) -> dict[str, list[str]]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def sizes(self) -> dict[str, int]:
        return {name: len(ids) for name, ids in self.parts().items()}


def _apportion(total: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``total`` units over ``ratios``."""
    weight = sum(ratios)
    quotas = [total * r / weight for r in ratios]
    base = [int(q) for q in quotas]
    leftovers = total - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:leftovers]:
        base[i] += 1
    return base


def split(dataset: MistakeDataset | Sequence[MistakeSample], spec: SplitSpec) -> SplitResult:
    """Partition sample ids into three disjoint, covering splits."""
    samples = dataset.samples if isinstance(dataset, MistakeDataset) else list(dataset)
    if not samples:
        raise EmptyInput("dataset")

    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([int(spec.seed) & _MASK64, _SPLIT_STREAM_TAG])))
    nonzero_parts = sum(1 for r in spec.ratios if r > 0)

    if spec.unit == "instruction":
        by_instruction: dict[str, list[str]] = {}
        for sample in samples:
            by_instruction.setdefault(sample.instruction_group_id, []).append(sample.sample_id)
        instruction_ids = sorted(by_instruction)
        if len(instruction_ids) < nonzero_parts:
            raise RatioInfeasible(len(instruction_ids), nonzero_parts)
        order = rng.permutation(len(instruction_ids))
        shuffled = [instruction_ids[int(i)] for i in order]
        counts = _apportion(len(shuffled), spec.ratios)
        parts: list[list[str]] = []
        cursor = 0
        for count in counts:
            block = shuffled[cursor:cursor + count]
            cursor += count
            parts.append([sid for instruction in block for sid in by_instruction[instruction]])
    else:
        sample_ids = [s.sample_id for s in samples]
        if len(sample_ids) < nonzero_parts:
            raise RatioInfeasible(len(sample_ids), nonzero_parts)
        order = rng.permutation(len(sample_ids))
        shuffled = [sample_ids[int(i)] for i in order]
        counts = _apportion(len(shuffled), spec.ratios)
        parts = []
        cursor = 0
        for count in counts:
            parts.append(shuffled[cursor:cursor + count])
            cursor += count

    result = SplitResult(train=parts[0], val=parts[1], test=parts[2], spec=spec)
    covered = sum(len(p) for p in parts)
    if covered != len(samples):
        raise InternalError(f"split covers {covered} of {len(samples)} samples")
    return result


def save_splits(result: SplitResult, directory: str | Path,
                stem: str = "split") -> dict[str, Path]:
    """Write one id-per-line file per split; returns the written paths."""
    directory = Path(directory)
    paths = {}
    for name, ids in result.parts().items():
        header = make_header(SPLIT_FORMAT, SPLIT_VERSION, split=name,
                             spec=result.spec.describe(), count=len(ids))
        path = directory / f"{stem}.{name}.txt"
        write_headered_lines(path, header, ids)
        paths[name] = path
    return paths


def load_split(path: str | Path) -> tuple[str, list[str]]:
    """Read one split file back as (split name, sample ids)."""
    header, lines = read_headered_lines(path, SPLIT_FORMAT, SPLIT_VERSION)
    name = header.get("split")
    if name not in SPLIT_NAMES:
        raise VersionMismatch(found=name, expected=f"split in {SPLIT_NAMES}")
    return name, [line for _, line in lines]


@dataclass(slots=True)
class StatsReport:
    total_samples: int
    num_activities: int
    samples_per_activity: float
    per_category: dict[str, int]
    pct_with_pnr: float
    pct_with_box: float
    num_participants: int | None = None
    num_environments: int | None = None

    def to_json_dict(self) -> dict:
        return {
            "total_samples": self.total_samples,
            "num_activities": self.num_activities,
            "samples_per_activity": self.samples_per_activity,
            "per_category": dict(sorted(self.per_category.items())),
            "pct_with_pnr": self.pct_with_pnr,
            "pct_with_box": self.pct_with_box,
            "num_participants": self.num_participants,
            "num_environments": self.num_environments,
        }

    def as_text(self) -> str:
        rows = [["metric", "value"]]
        rows.append(["total samples", f"{self.total_samples}"])
        rows.append(["activities (unique instructions)", f"{self.num_activities}"])
        rows.append(["samples per activity", f"{self.samples_per_activity:.1f}"])
        rows.append(["participants", "absent" if self.num_participants is None
                     else f"{self.num_participants}"])
        rows.append(["environments", "absent" if self.num_environments is None
                     else f"{self.num_environments}"])
        rows.append(["% samples with PNR", f"{self.pct_with_pnr:.1f}"])
        rows.append(["% samples with box", f"{self.pct_with_box:.1f}"])
        for name, count in sorted(self.per_category.items()):
            rows.append([f"category {name}", f"{count}"])
        return align_table(rows)


def _category_name(category: tuple[str, ...]) -> str:
    if not category:
        return "no_mistake"
    return "_".join(role.lower() for role in category) + "_mistake"


def stats(dataset: MistakeDataset | Sequence[MistakeSample],
          records: Sequence[ActionRecord] | None = None) -> StatsReport:
    """Aggregate dataset statistics; participant/environment counts need the
    record store and are reported absent without it."""
    samples = dataset.samples if isinstance(dataset, MistakeDataset) else list(dataset)
    if not samples:
        raise EmptyInput("dataset")

    activities = {s.instruction_group_id for s in samples}
    categories = Counter(_category_name(s.category) for s in samples)
    with_pnr = sum(1 for s in samples if s.pnr_frame is not None)
    with_box = sum(1 for s in samples if s.mistake_box is not None)

    participants: int | None = None
    environments: int | None = None
    if records is not None:
        by_id = {r.record_id: r for r in records}
        used = [by_id[s.attempt_record_id] for s in samples if s.attempt_record_id in by_id]
        participant_ids = {r.participant_id for r in used if r.participant_id is not None}
        environment_ids = {r.environment_id for r in used if r.environment_id is not None}
        participants = len(participant_ids) if participant_ids else None
        environments = len(environment_ids) if environment_ids else None

    return StatsReport(
        total_samples=len(samples),
        num_activities=len(activities),
        samples_per_activity=len(samples) / len(activities),
        per_category=dict(categories),
        pct_with_pnr=100.0 * with_pnr / len(samples),
        pct_with_box=100.0 * with_box / len(samples),
        num_participants=participants,
        num_environments=environments,
    )
