"""Synthetic learner corpora from a known two-state generative process.

Each skill is a hidden learned/unlearned state with learn, guess, and slip
parameters and no forgetting. Alongside the observations we emit the exact
conditional probability P(correct | history) from forward filtering: the
Bayes oracle, which upper-bounds the AUC any trained predictor can approach
in expectation. Used as the ground-truth harness for acceptance testing of
both the trainer and the evaluation battery.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .ingest import StudentSequence
from .records import PredictionRecord

Params = Union[float, Sequence[float]]


def _broadcast(value: Params, k: int, name: str) -> Tuple[float, ...]:
    if isinstance(value, (int, float)):
        values = (float(value),) * k
    else:
        values = tuple(float(v) for v in value)
        if len(values) != k:
            raise ValueError(f"{name}: expected {k} values, got {len(values)}")
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name}: probability {v} outside [0, 1]")
    return values


@dataclass(frozen=True)
class GenerativeSpec:
    """Per-skill learn/guess/slip process over K skills.

    Guess and slip must stay below 0.5 so the mastered and unmastered
    response distributions remain separable.
    """

    k: int
    p_init: Params
    p_learn: Params
    p_guess: Params
    p_slip: Params
    n_students: int
    mean_length: float
    min_length: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.n_students < 1:
            raise ValueError("n_students must be >= 1")
        if self.mean_length < self.min_length:
            raise ValueError("mean_length must be >= min_length")
        for name in ("p_init", "p_learn", "p_guess", "p_slip"):
            object.__setattr__(self, name, _broadcast(getattr(self, name), self.k, name))
        for g, s in zip(self.p_guess, self.p_slip):
            if g >= 0.5 or s >= 0.5:
                raise ValueError("p_guess and p_slip must be < 0.5")

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "p_init": list(self.p_init),
            "p_learn": list(self.p_learn),
            "p_guess": list(self.p_guess),
            "p_slip": list(self.p_slip),
            "n_students": self.n_students,
            "mean_length": self.mean_length,
            "min_length": self.min_length,
            "seed": self.seed,
        }


@dataclass
class SynthCorpus:
    spec: GenerativeSpec
    sequences: List[StudentSequence]           # quiz index equals skill index
    oracle: Dict[str, List[float]]             # P(correct | history) per step
    mastery: Dict[str, List[int]]              # latent state at response time

    def skill_names(self) -> List[str]:
        return [f"Skill {i}" for i in range(self.spec.k)]


def _filter_step(
    belief: float, y: int, p_learn: float, p_guess: float, p_slip: float
) -> float:
    """Posterior over the learned state after observing y, then the learning
    transition. ``belief`` is P(learned) before the attempt."""
    if y == 1:
        num = belief * (1.0 - p_slip)
        den = num + (1.0 - belief) * p_guess
    else:
        num = belief * p_slip
        den = num + (1.0 - belief) * (1.0 - p_guess)
    post = num / den if den > 0 else belief
    return post + (1.0 - post) * p_learn


def predictive_prob(belief: float, p_guess: float, p_slip: float) -> float:
    return belief * (1.0 - p_slip) + (1.0 - belief) * p_guess


def oracle_probabilities(
    spec: GenerativeSpec, skills: Sequence[int], labels: Sequence[int]
) -> List[float]:
    """Exact forward-filtered P(correct | history) before each attempt."""
    belief = list(spec.p_init)
    probs: List[float] = []
    for s, y in zip(skills, labels):
        probs.append(predictive_prob(belief[s], spec.p_guess[s], spec.p_slip[s]))
        belief[s] = _filter_step(
            belief[s], y, spec.p_learn[s], spec.p_guess[s], spec.p_slip[s]
        )
    return probs


def generate(spec: GenerativeSpec) -> SynthCorpus:
    """Simulate hidden mastery per student and emit observations plus the
    Bayes-oracle probabilities. Per-student derived seeds keep generation
    embarrassingly parallel in principle and deterministic in any order."""
    sequences: List[StudentSequence] = []
    oracle: Dict[str, List[float]] = {}
    mastery: Dict[str, List[int]] = {}
    width = len(str(spec.n_students - 1))
    for i in range(spec.n_students):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(spec.seed, i)))
        length = max(spec.min_length, int(rng.poisson(spec.mean_length)))
        state = rng.random(spec.k) < np.array(spec.p_init)
        skills: List[int] = []
        labels: List[int] = []
        states: List[int] = []
        for _ in range(length):
            s = int(rng.integers(0, spec.k))
            learned = bool(state[s])
            p_correct = (1.0 - spec.p_slip[s]) if learned else spec.p_guess[s]
            y = int(rng.random() < p_correct)
            skills.append(s)
            labels.append(y)
            states.append(int(learned))
            if not learned and rng.random() < spec.p_learn[s]:
                state[s] = True
        user_id = f"synth{i:0{width}d}"
        sequences.append(
            StudentSequence(user_id=user_id, steps=[(s, s, y) for s, y in zip(skills, labels)])
        )
        oracle[user_id] = oracle_probabilities(spec, skills, labels)
        mastery[user_id] = states
    return SynthCorpus(spec=spec, sequences=sequences, oracle=oracle, mastery=mastery)


def oracle_records(
    corpus: SynthCorpus, sequences: Sequence[StudentSequence] | None = None, skip_first: bool = True
) -> List[PredictionRecord]:
    """Oracle probabilities in the shared dump schema.

    ``skip_first`` drops each student's t=0 position so the rows line up with
    next-step prediction dumps (which have no cold-start target). Noise-free
    specs can produce exact 0/1 probabilities; those are nudged inside the
    open interval the schema requires.
    """
    out: List[PredictionRecord] = []
    for seq in sequences if sequences is not None else corpus.sequences:
        probs = corpus.oracle[seq.user_id]
        for t, (skill, _, y) in enumerate(seq.steps):
            if skip_first and t == 0:
                continue
            out.append(
                PredictionRecord(
                    user_id=seq.user_id,
                    step=t,
                    skill=skill,
                    y_true=y,
                    p=min(max(float(probs[t]), 1e-12), 1.0 - 1e-12),
                    model_tag="oracle",
                )
            )
    return out


def oracle_auc(
    corpus: SynthCorpus, sequences: Sequence[StudentSequence] | None = None, skip_first: bool = True
) -> float:
    """AUC the Bayes oracle achieves on its own observations: the ceiling any
    predictor can approach in expectation."""
    from .evaluation import roc_auc

    return roc_auc(oracle_records(corpus, sequences, skip_first=skip_first)).auc


def write_oracle_sidecar(path: str | Path, corpus: SynthCorpus) -> None:
    """One student per line: user_id then the per-step oracle probabilities."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for seq in corpus.sequences:
            probs = corpus.oracle[seq.user_id]
            fh.write("\t".join([seq.user_id] + [repr(p) for p in probs]) + "\n")


def read_oracle_sidecar(path: str | Path) -> Dict[str, List[float]]:
    out: Dict[str, List[float]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            cells = line.rstrip("\n").split("\t")
            if cells and cells[0]:
                out[cells[0]] = [float(c) for c in cells[1:]]
    return out
