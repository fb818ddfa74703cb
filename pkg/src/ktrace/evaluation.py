"""Evaluation battery over prediction dumps.

Covers discrimination (rank-statistic AUC with midrank tie handling, full ROC
curve), thresholded confusion metrics, the Youden-J optimal threshold,
early/middle/late stage errors split by stable/switching learner profiles,
temporal-coherence metrics (volatility and directional inconsistency over
same-skill mastery paths), and multi-skill mastery heatmap export as SVG.

All operations are pure over immutable record lists; unresolved probe records
are excluded from every metric and surfaced through the coverage report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .records import MasteryTrajectory, PredictionRecord, group_by_student

STABLE = "stable"
SWITCHING = "switching"
STAGES = ("early", "middle", "late")


def resolved(records: Sequence[PredictionRecord]) -> List[PredictionRecord]:
    return [r for r in records if r.resolved]


@dataclass
class CoverageReport:
    total: int
    resolved: int

    @property
    def unresolved(self) -> int:
        return self.total - self.resolved

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "resolved": self.resolved,
            "unresolved": self.unresolved,
            "coverage": self.resolved / self.total if self.total else 0.0,
        }


def coverage(records: Sequence[PredictionRecord]) -> CoverageReport:
    return CoverageReport(total=len(records), resolved=len(resolved(records)))


# ---------------------------------------------------------------------------
# ROC / AUC


@dataclass
class ThresholdAnalysis:
    auc: float
    roc: List[Tuple[float, float, float]]  # (fpr, tpr, threshold)
    youden_threshold: float
    j_stat: float


def _midranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing the mean of their span."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(records: Sequence[PredictionRecord]) -> ThresholdAnalysis:
    """AUC via the Mann-Whitney rank statistic plus the full ROC curve.

    Thresholds are all distinct scores with +/-inf sentinels; a record is
    classified positive when p >= threshold. Requires both classes among the
    resolved records.
    """
    recs = resolved(records)
    if not recs:
        raise ValueError("AUC undefined: no resolved records")
    scores = np.array([r.p for r in recs], dtype=np.float64)
    labels = np.array([r.y_true for r in recs], dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: only one class present")

    ranks = _midranks(scores)
    auc = (ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    # ROC sweep over descending distinct thresholds
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(1 - sorted_labels)
    distinct = np.nonzero(np.diff(sorted_scores))[0]
    idx = np.concatenate([distinct, [len(sorted_scores) - 1]])

    roc: List[Tuple[float, float, float]] = [(0.0, 0.0, math.inf)]
    for i in idx:
        roc.append((fp[i] / n_neg, tp[i] / n_pos, float(sorted_scores[i])))
    roc.append((1.0, 1.0, -math.inf))

    t_star, j_stat = _youden_from_roc(roc)
    return ThresholdAnalysis(auc=float(auc), roc=roc, youden_threshold=t_star, j_stat=j_stat)


def _youden_from_roc(roc: Sequence[Tuple[float, float, float]]) -> Tuple[float, float]:
    best_j = -math.inf
    best_t = math.inf
    # roc is ordered by descending threshold; strict improvement keeps the
    # largest threshold among ties
    for fpr, tpr, threshold in roc:
        j = tpr - fpr
        if j > best_j:
            best_j = j
            best_t = threshold
    return best_t, best_j


def youden_threshold(analysis: ThresholdAnalysis) -> float:
    """argmax over ROC thresholds of TPR - FPR; ties go to the larger
    threshold."""
    return _youden_from_roc(analysis.roc)[0]


# ---------------------------------------------------------------------------
# confusion metrics


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class ConfusionMetrics:
    accuracy: float
    per_class: Dict[int, ClassMetrics]
    threshold: float
    counts: Dict[str, int]
    zero_division_flags: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "threshold": self.threshold,
            "per_class": {str(c): m.to_dict() for c, m in self.per_class.items()},
            "counts": self.counts,
            "zero_division_flags": self.zero_division_flags,
        }


def confusion_metrics(
    records: Sequence[PredictionRecord], threshold: float = 0.5
) -> ConfusionMetrics:
    """Per-class precision/recall/F1 plus accuracy at a fixed threshold.

    Class 0 is the low-performer (incorrect) row, class 1 the high-performer
    row. Zero-division cells yield 0 and are flagged.
    """
    recs = resolved(records)
    if not recs:
        raise ValueError("no resolved records")
    y = np.array([r.y_true for r in recs])
    pred = np.array([1 if r.p >= threshold else 0 for r in recs])
    tp = int(((pred == 1) & (y == 1)).sum())
    tn = int(((pred == 0) & (y == 0)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())

    flags: List[str] = []

    def safe_div(num: int, den: int, label: str) -> float:
        if den == 0:
            flags.append(label)
            return 0.0
        return num / den

    per_class: Dict[int, ClassMetrics] = {}
    for cls, (tp_c, fp_c, fn_c) in {1: (tp, fp, fn), 0: (tn, fn, fp)}.items():
        precision = safe_div(tp_c, tp_c + fp_c, f"precision_class{cls}")
        recall = safe_div(tp_c, tp_c + fn_c, f"recall_class{cls}")
        f1 = (
            2 * precision * recall / (precision + recall)
            if (precision + recall) > 0
            else 0.0
        )
        per_class[cls] = ClassMetrics(
            precision=precision, recall=recall, f1=f1, support=tp_c + fn_c
        )
    return ConfusionMetrics(
        accuracy=(tp + tn) / len(recs),
        per_class=per_class,
        threshold=threshold,
        counts={"tp": tp, "tn": tn, "fp": fp, "fn": fn},
        zero_division_flags=flags,
    )


# ---------------------------------------------------------------------------
# learner profiles and stage errors


def classify_profile(y_sequence: Sequence[int]) -> str:
    """Fewer than two correctness switches -> stable, otherwise switching."""
    if len(y_sequence) == 0:
        raise ValueError("empty label sequence")
    switches = sum(1 for a, b in zip(y_sequence, y_sequence[1:]) if a != b)
    return STABLE if switches < 2 else SWITCHING


def stage_sizes(n: int) -> Tuple[int, int, int]:
    """Positional thirds with remainders pushed to later stages; fewer than
    three positions all land in the early stage."""
    if n < 3:
        return (n, 0, 0)
    early = n // 3
    middle = (n + 1) // 3
    return (early, middle, n - early - middle)


@dataclass(frozen=True)
class ProfileStageErrors:
    group: str
    stage: str
    error: float
    n: int

    def to_dict(self) -> dict:
        return dict(vars(self))


def stage_errors(
    records: Sequence[PredictionRecord], threshold: float, macro: bool = False
) -> List[ProfileStageErrors]:
    """Error rate per (profile, stage) cell at the given threshold.

    Positions are each student's resolved predictions in step order, split
    into early/middle/late thirds. Micro-averaging pools mismatches over
    positions; the macro flag averages per-student rates instead. Cells with
    no data are omitted.
    """
    mism: Dict[Tuple[str, str], List[float]] = {}
    counts: Dict[Tuple[str, str], int] = {}
    per_student_rates: Dict[Tuple[str, str], List[float]] = {}

    for user, rows in group_by_student(records).items():
        rows = [r for r in rows if r.resolved]
        if not rows:
            continue
        labels = [r.y_true for r in rows]
        group = classify_profile(labels)
        sizes = stage_sizes(len(rows))
        start = 0
        for stage, size in zip(STAGES, sizes):
            if size == 0:
                continue
            chunk = rows[start : start + size]
            start += size
            wrong = sum(
                1 for r in chunk if (1 if r.p >= threshold else 0) != r.y_true
            )
            key = (group, stage)
            mism.setdefault(key, []).append(wrong)
            counts[key] = counts.get(key, 0) + size
            per_student_rates.setdefault(key, []).append(wrong / size)

    out: List[ProfileStageErrors] = []
    for group in (SWITCHING, STABLE):
        for stage in STAGES:
            key = (group, stage)
            if key not in counts:
                continue
            if macro:
                error = sum(per_student_rates[key]) / len(per_student_rates[key])
            else:
                error = sum(mism[key]) / counts[key]
            out.append(
                ProfileStageErrors(group=group, stage=stage, error=error, n=counts[key])
            )
    return out


# ---------------------------------------------------------------------------
# temporal coherence


def volatility(p_sequence: Sequence[float]) -> float:
    """Mean absolute change between consecutive values of a same-skill
    mastery path."""
    if len(p_sequence) < 2:
        raise ValueError("volatility needs at least 2 attempts")
    diffs = [abs(b - a) for a, b in zip(p_sequence, p_sequence[1:])]
    return sum(diffs) / len(diffs)


def inconsistency(p_sequence: Sequence[float], y_sequence: Sequence[int]) -> float:
    """Fraction of updates whose direction contradicts the response observed
    at the update step; zero change contradicts nothing."""
    if len(p_sequence) != len(y_sequence):
        raise ValueError("p and y must align")
    if len(p_sequence) < 2:
        raise ValueError("inconsistency needs at least 2 attempts")
    mismatches = 0
    for t in range(1, len(p_sequence)):
        delta = p_sequence[t] - p_sequence[t - 1]
        expected = 1.0 if y_sequence[t] == 1 else -1.0
        if delta * expected < 0:
            mismatches += 1
    return mismatches / (len(p_sequence) - 1)


def _same_skill_paths(
    records: Sequence[PredictionRecord],
) -> Dict[Tuple[str, int], Tuple[List[float], List[int]]]:
    """Resolved mastery values grouped by (student, skill) in step order."""
    paths: Dict[Tuple[str, int], Tuple[List[float], List[int]]] = {}
    for user, rows in group_by_student(records).items():
        for rec in rows:
            if not rec.resolved:
                continue
            ps, ys = paths.setdefault((user, rec.skill), ([], []))
            ps.append(rec.p)
            ys.append(rec.y_true)
    return paths


@dataclass
class CoherenceReport:
    volatility: float
    inconsistency: float
    n_update_pairs: int
    per_student: Dict[str, Dict[str, float]]

    def to_dict(self) -> dict:
        return {
            "volatility": self.volatility,
            "inconsistency": self.inconsistency,
            "n_update_pairs": self.n_update_pairs,
            "per_student": self.per_student,
        }


def coherence_report(mastery_records: Sequence[PredictionRecord]) -> CoherenceReport:
    """Pooled volatility and inconsistency over all same-skill update pairs
    (micro-average), plus per-student values over each student's own pairs.
    Skills with fewer than two attempts are skipped."""
    paths = _same_skill_paths(mastery_records)
    abs_terms: List[float] = []
    mismatches: List[int] = []
    per_student_terms: Dict[str, Tuple[List[float], List[int]]] = {}
    for (user, _), (ps, ys) in paths.items():
        if len(ps) < 2:
            continue
        terms, flags = per_student_terms.setdefault(user, ([], []))
        for t in range(1, len(ps)):
            delta = ps[t] - ps[t - 1]
            expected = 1.0 if ys[t] == 1 else -1.0
            abs_terms.append(abs(delta))
            mismatch = 1 if delta * expected < 0 else 0
            mismatches.append(mismatch)
            terms.append(abs(delta))
            flags.append(mismatch)
    if not abs_terms:
        raise ValueError("no same-skill update pairs available")
    per_student = {
        user: {
            "volatility": sum(terms) / len(terms),
            "inconsistency": sum(flags) / len(flags),
            "n_update_pairs": len(terms),
        }
        for user, (terms, flags) in sorted(per_student_terms.items())
        if terms
    }
    return CoherenceReport(
        volatility=sum(abs_terms) / len(abs_terms),
        inconsistency=sum(mismatches) / len(mismatches),
        n_update_pairs=len(abs_terms),
        per_student=per_student,
    )


def volatility_all_skills(traj: MasteryTrajectory) -> float:
    """Alternative pooling: mean absolute change across consecutive time
    steps for every skill column of a full trajectory matrix."""
    if traj.n_steps < 2:
        raise ValueError("trajectory needs at least 2 steps")
    diffs = np.abs(np.diff(traj.p, axis=0))
    return float(np.nanmean(diffs))


# ---------------------------------------------------------------------------
# heatmap export


def _inconsistent_cells(traj: MasteryTrajectory) -> List[Tuple[int, int]]:
    """Cells (t, skill) where the practiced skill's update direction
    contradicts the response at t; same rule as `inconsistency`."""
    last_seen: Dict[int, int] = {}
    cells: List[Tuple[int, int]] = []
    for t, (skill, _, y) in enumerate(traj.steps):
        if skill in last_seen:
            prev_t = last_seen[skill]
            prev, cur = traj.p[prev_t, skill], traj.p[t, skill]
            if not (np.isnan(prev) or np.isnan(cur)):
                delta = cur - prev
                expected = 1.0 if y == 1 else -1.0
                if delta * expected < 0:
                    cells.append((t, skill))
        last_seen[skill] = t
    return cells


def _cell_color(p: float) -> str:
    """Low mastery -> warm, high mastery -> cool; NaN -> grey."""
    if math.isnan(p):
        return "#cccccc"
    p = min(max(p, 0.0), 1.0)
    r = int(round(214 + (49 - 214) * p))
    g = int(round(96 + (110 - 96) * p))
    b = int(round(77 + (160 - 77) * p))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_export(
    traj: MasteryTrajectory,
    skill_names: Sequence[str],
    svg_path: str | Path,
    matrix_path: str | Path | None = None,
) -> int:
    """Render the time-by-skill probability grid as SVG and return the number
    of annotated (direction-inconsistent) cells.

    Annotated cells show their probability and get a highlighted border; a
    white polyline per skill traces the practiced-attempt trajectory. The raw
    matrix goes to ``matrix_path`` as delimited text when given.
    """
    from .records import write_trajectory

    t_len, k = traj.p.shape
    bad_cells = _inconsistent_cells(traj)
    bad_set = set(bad_cells)

    cell = 22
    left = 180
    top = 46
    width = left + t_len * cell + 20
    height = top + k * cell + 40

    parts: List[str] = []
    parts.append(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="Helvetica, Arial, sans-serif">'
    )
    parts.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    parts.append(
        f'<text x="{left}" y="20" font-size="13">student {traj.user_id}: '
        f"mastery over time ({len(bad_cells)} inconsistent updates)</text>"
    )

    for s in range(k):
        y0 = top + s * cell
        label = skill_names[s] if s < len(skill_names) else str(s)
        if len(label) > 26:
            label = label[:25] + "…"
        parts.append(
            f'<text x="{left - 6}" y="{y0 + cell - 7}" font-size="10" '
            f'text-anchor="end">{_xml_escape(label)}</text>'
        )
        for t in range(t_len):
            x0 = left + t * cell
            color = _cell_color(float(traj.p[t, s]))
            parts.append(
                f'<rect x="{x0}" y="{y0}" width="{cell}" height="{cell}" '
                f'fill="{color}" stroke="#ffffff" stroke-width="0.5"/>'
            )

    # white reference path through each skill's practiced cells
    by_skill: Dict[int, List[int]] = {}
    for t, (skill, _, _) in enumerate(traj.steps):
        by_skill.setdefault(skill, []).append(t)
    for s, times in sorted(by_skill.items()):
        pts = " ".join(
            f"{left + t * cell + cell / 2},{top + s * cell + cell / 2}" for t in times
        )
        if len(times) > 1:
            parts.append(
                f'<polyline points="{pts}" fill="none" stroke="white" stroke-width="2"/>'
            )
        for t in times:
            parts.append(
                f'<circle cx="{left + t * cell + cell / 2}" cy="{top + s * cell + cell / 2}" '
                f'r="2.5" fill="white"/>'
            )

    # annotate inconsistent cells
    for t, s in bad_cells:
        x0, y0 = left + t * cell, top + s * cell
        parts.append(
            f'<rect x="{x0 + 1}" y="{y0 + 1}" width="{cell - 2}" height="{cell - 2}" '
            f'fill="none" stroke="#111111" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{x0 + cell / 2}" y="{y0 + cell - 8}" font-size="7" '
            f'text-anchor="middle" fill="#111111">{traj.p[t, s]:.2f}</text>'
        )

    for t in range(0, t_len, 5):
        parts.append(
            f'<text x="{left + t * cell + cell / 2}" y="{top + k * cell + 14}" '
            f'font-size="9" text-anchor="middle">{t + 1}</text>'
        )
    parts.append("</svg>")

    Path(svg_path).write_text("\n".join(parts) + "\n", encoding="utf-8")
    if matrix_path is not None:
        write_trajectory(matrix_path, traj)
    return len(bad_cells)


def _xml_escape(text: str) -> str:
    return (
        text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")
    )
