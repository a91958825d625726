"""Subject-grouped, grade-stratified K-fold assignment."""

from __future__ import annotations

import csv
import random
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

from .volio import SampleRecord


class InsufficientSubjectsError(ValueError):
    pass


def subject_grades(records: Sequence[SampleRecord]) -> dict[str, int]:
    """Majority grade per subject; ties go to the higher grade."""
    per_subject: dict[str, Counter] = defaultdict(Counter)
    for r in records:
        per_subject[r.subject_id][r.grade] += 1
    return {s: max(c.items(), key=lambda kv: (kv[1], kv[0]))[0] for s, c in per_subject.items()}


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    seed: int
    subject_fold: dict[str, int]
    records: tuple[SampleRecord, ...]

    def fold_of(self, record: SampleRecord) -> int:
        return self.subject_fold[record.subject_id]

    def subjects_in(self, fold: int) -> set[str]:
        return {s for s, f in self.subject_fold.items() if f == fold}

    def sample_folds(self) -> dict[str, int]:
        return {r.sample_id: self.subject_fold[r.subject_id] for r in self.records}


def group_stratified_kfold(records: Sequence[SampleRecord], k: int = 5, seed: int = 0) -> FoldAssignment:
    """Deal subjects to folds round-robin within each grade stratum.

    Subjects of a stratum are shuffled with ``seed`` and dealt one per fold;
    the dealing position carries over between strata so total fold sizes
    also stay within one subject of each other.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    grades = subject_grades(records)
    if len(grades) < k:
        raise InsufficientSubjectsError(f"{len(grades)} subjects cannot fill {k} folds")
    rng = random.Random(seed)
    strata: dict[int, list[str]] = defaultdict(list)
    for subject, grade in grades.items():
        strata[grade].append(subject)
    assignment: dict[str, int] = {}
    cursor = 0
    for grade in sorted(strata):
        subjects = sorted(strata[grade])
        rng.shuffle(subjects)
        for subject in subjects:
            assignment[subject] = cursor % k
            cursor += 1
    return FoldAssignment(k=k, seed=seed, subject_fold=assignment, records=tuple(records))


def fold_views(assignment: FoldAssignment, fold_index: int) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """(train, val) records for one fold; val holds the fold's subjects."""
    if not 0 <= fold_index < assignment.k:
        raise IndexError(f"fold {fold_index} out of range for k={assignment.k}")
    train, val = [], []
    for r in assignment.records:
        (val if assignment.fold_of(r) == fold_index else train).append(r)
    return train, val


def save_assignment(assignment: FoldAssignment, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "fold"])
        for subject in sorted(assignment.subject_fold):
            writer.writerow([subject, assignment.subject_fold[subject]])


def load_assignment(path: Union[str, Path], records: Sequence[SampleRecord], k: int | None = None) -> FoldAssignment:
    with open(path, newline="", encoding="utf-8") as fh:
        mapping = {row["subject_id"]: int(row["fold"]) for row in csv.DictReader(fh)}
    missing = sorted({r.subject_id for r in records} - mapping.keys())
    if missing:
        raise ValueError(f"fold file {path} has no entry for subject(s): {', '.join(missing)}")
    k = k if k is not None else max(mapping.values()) + 1
    return FoldAssignment(k=k, seed=-1, subject_fold=mapping, records=tuple(records))
