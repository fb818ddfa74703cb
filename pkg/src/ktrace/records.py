"""Shared prediction-record schema and dump/trajectory file formats.

PredictionRecord is the common currency of all evaluation: every predictor
(the recurrent tracer, the LLM probe, synthetic oracles) emits the same
six-column delimited rows so the evaluation battery never has to know which
model produced them. The step index ``t`` is the 0-based position of the
predicted interaction inside the student's sequence.

Two dump kinds share the schema:

* next-step predictions: one row per target position (t = 1..T-1); p is the
  probability of answering step t correctly given steps before t.
* mastery paths: one row per attempt (t = 0..T-1); p is the post-observation
  mastery of the practiced skill, i.e. row t of the mastery trajectory at the
  practiced skill's column. Temporal-coherence metrics consume these.

Unresolved probe steps carry ``NA`` in the probability column and are never
imputed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

PRED_COLUMNS = ("user_id", "t", "skill_idx", "y_true", "p_pred", "model_tag")
NA = "NA"


@dataclass(frozen=True)
class PredictionRecord:
    user_id: str
    step: int
    skill: int
    y_true: int
    p: Optional[float]  # None when the probe could not resolve the step
    model_tag: str

    @property
    def resolved(self) -> bool:
        return self.p is not None


@dataclass
class MasteryTrajectory:
    """Per-step probability matrix over all skills for one student.

    Row t holds the predicted correctness probability for every skill after
    observing steps 0..t. ``steps`` carries the aligned (skill, quiz, y)
    metadata. Cells a probe could not resolve are NaN and listed in
    ``unresolved``.
    """

    user_id: str
    p: np.ndarray  # (T, K)
    steps: List[Tuple[int, int, int]]
    unresolved: Tuple[Tuple[int, int], ...] = ()

    @property
    def n_steps(self) -> int:
        return self.p.shape[0]

    @property
    def n_skills(self) -> int:
        return self.p.shape[1]

    def practiced_path(self) -> List[PredictionRecord]:
        """Post-observation mastery of the practiced skill at every attempt,
        in the shared record schema (model_tag left empty)."""
        out = []
        for t, (skill, _, y) in enumerate(self.steps):
            value = self.p[t, skill]
            out.append(
                PredictionRecord(
                    user_id=self.user_id,
                    step=t,
                    skill=skill,
                    y_true=y,
                    p=None if np.isnan(value) else float(value),
                    model_tag="",
                )
            )
        return out


def _format_prob(p: Optional[float]) -> str:
    return NA if p is None else repr(float(p))


def write_prediction_dump(path: str | Path, records: Sequence[PredictionRecord]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PRED_COLUMNS)
        for rec in records:
            writer.writerow(
                [rec.user_id, rec.step, rec.skill, rec.y_true, _format_prob(rec.p), rec.model_tag]
            )


def read_prediction_dump(path: str | Path) -> List[PredictionRecord]:
    """Load a dump, validating the header, probability range, and the
    (user_id, t, model_tag) uniqueness invariant."""
    out: List[PredictionRecord] = []
    seen = set()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != PRED_COLUMNS:
            raise ValueError(f"{path}: unexpected dump header {header}")
        for row in reader:
            user_id, t, skill, y, p_text, tag = row
            p = None if p_text == NA else float(p_text)
            if p is not None and not (0.0 < p < 1.0):
                raise ValueError(f"{path}: probability out of (0,1): {p_text}")
            key = (user_id, int(t), tag)
            if key in seen:
                raise ValueError(f"{path}: duplicate record for {key}")
            seen.add(key)
            out.append(
                PredictionRecord(
                    user_id=user_id,
                    step=int(t),
                    skill=int(skill),
                    y_true=int(y),
                    p=p,
                    model_tag=tag,
                )
            )
    return out


def write_trajectory(path: str | Path, traj: MasteryTrajectory) -> None:
    """Trajectory matrix as delimited text: one row per step with aligned
    metadata, then one probability column per skill."""
    t_len, k = traj.p.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["user_id", "t", "skill_idx", "quiz_idx", "y"] + [f"p_{i}" for i in range(k)]
        )
        for t in range(t_len):
            skill, quiz, y = traj.steps[t]
            probs = [
                NA if np.isnan(traj.p[t, i]) else repr(float(traj.p[t, i])) for i in range(k)
            ]
            writer.writerow([traj.user_id, t, skill, quiz, y] + probs)


def read_trajectory(path: str | Path) -> MasteryTrajectory:
    rows: List[List[str]] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        k = len(header) - 5
        for row in reader:
            rows.append(row)
    if not rows:
        raise ValueError(f"{path}: empty trajectory file")
    t_len = len(rows)
    p = np.empty((t_len, k))
    steps: List[Tuple[int, int, int]] = []
    unresolved: List[Tuple[int, int]] = []
    user_id = rows[0][0]
    for t, row in enumerate(rows):
        steps.append((int(row[2]), int(row[3]), int(row[4])))
        for i in range(k):
            cell = row[5 + i]
            if cell == NA:
                p[t, i] = np.nan
                unresolved.append((t, i))
            else:
                p[t, i] = float(cell)
    return MasteryTrajectory(
        user_id=user_id, p=p, steps=steps, unresolved=tuple(unresolved)
    )


def group_by_student(records: Sequence[PredictionRecord]) -> Dict[str, List[PredictionRecord]]:
    """Records per student, ordered by step; student keys sorted."""
    grouped: Dict[str, List[PredictionRecord]] = {}
    for rec in records:
        grouped.setdefault(rec.user_id, []).append(rec)
    return {
        user: sorted(rows, key=lambda r: r.step) for user, rows in sorted(grouped.items())
    }
