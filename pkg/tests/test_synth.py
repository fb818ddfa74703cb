from __future__ import annotations

import itertools

import numpy as np
import pytest

from ktrace.synth import (
    GenerativeSpec,
    generate,
    oracle_auc,
    oracle_probabilities,
    oracle_records,
    read_oracle_sidecar,
    write_oracle_sidecar,
)

REFERENCE_SPEC = GenerativeSpec(
    k=5,
    p_init=0.3,
    p_learn=0.15,
    p_guess=0.2,
    p_slip=0.1,
    n_students=2000,
    mean_length=40.0,
    seed=7,
)

# AUC of the forward-filter oracle on the reference corpus, computed once
# from this exact spec and frozen (see test_reference_spec_oracle_auc_pinned).
REFERENCE_ORACLE_AUC = 0.7835994626626869


def enumerate_paths_prob(
    p_init: float, p_learn: float, p_guess: float, p_slip: float, labels
) -> list:
    """Independent oracle: exhaustive enumeration over all 2^n hidden-state
    paths of one skill. Returns P(correct at t | labels before t)."""
    n = len(labels)
    probs = []
    for t in range(n):
        num = 0.0
        den = 0.0
        for path in itertools.product((0, 1), repeat=t + 1):
            prior = p_init if path[0] else 1.0 - p_init
            for a, b in zip(path, path[1:]):
                if a == 1:
                    prior *= 1.0 if b == 1 else 0.0
                else:
                    prior *= p_learn if b == 1 else 1.0 - p_learn
            if prior == 0.0:
                continue
            like = 1.0
            for i in range(t):
                p_correct = (1.0 - p_slip) if path[i] else p_guess
                like *= p_correct if labels[i] == 1 else 1.0 - p_correct
            emit = (1.0 - p_slip) if path[t] else p_guess
            num += prior * like * emit
            den += prior * like
        probs.append(num / den)
    return probs


# ---------------------------------------------------------------------------
# spec validation


def test_spec_rejects_bad_probabilities():
    with pytest.raises(ValueError):
        GenerativeSpec(k=2, p_init=1.2, p_learn=0.1, p_guess=0.1, p_slip=0.1,
                       n_students=5, mean_length=10)
    with pytest.raises(ValueError, match="< 0.5"):
        GenerativeSpec(k=2, p_init=0.5, p_learn=0.1, p_guess=0.6, p_slip=0.1,
                       n_students=5, mean_length=10)
    with pytest.raises(ValueError, match="< 0.5"):
        GenerativeSpec(k=2, p_init=0.5, p_learn=0.1, p_guess=0.1, p_slip=0.5,
                       n_students=5, mean_length=10)


def test_spec_broadcasts_scalars_per_skill():
    spec = GenerativeSpec(k=3, p_init=0.3, p_learn=0.1, p_guess=0.2, p_slip=0.05,
                          n_students=2, mean_length=6)
    assert spec.p_init == (0.3, 0.3, 0.3)
    assert len(spec.p_guess) == 3


# ---------------------------------------------------------------------------
# degenerate analytic cases


def test_always_mastered_noise_free_is_all_correct():
    spec = GenerativeSpec(k=2, p_init=1.0, p_learn=0.0, p_guess=0.0, p_slip=0.0,
                          n_students=10, mean_length=8, seed=1)
    corpus = generate(spec)
    for seq in corpus.sequences:
        assert all(y == 1 for _, _, y in seq.steps)
        assert all(p == 1.0 for p in corpus.oracle[seq.user_id])


def test_never_learning_guesser_has_flat_oracle():
    spec = GenerativeSpec(k=2, p_init=0.0, p_learn=0.0, p_guess=0.2, p_slip=0.0,
                          n_students=10, mean_length=8, seed=2)
    corpus = generate(spec)
    for seq in corpus.sequences:
        assert all(p == pytest.approx(0.2, abs=1e-15) for p in corpus.oracle[seq.user_id])


# ---------------------------------------------------------------------------
# forward filter vs path enumeration


def test_forward_filter_matches_path_enumeration_single_skill():
    rng = np.random.default_rng(3)
    for _ in range(15):
        p_init, p_learn = rng.uniform(0.05, 0.9), rng.uniform(0.05, 0.9)
        p_guess, p_slip = rng.uniform(0.01, 0.45), rng.uniform(0.01, 0.45)
        n = int(rng.integers(1, 11))
        labels = rng.integers(0, 2, size=n).tolist()
        spec = GenerativeSpec(k=1, p_init=p_init, p_learn=p_learn, p_guess=p_guess,
                              p_slip=p_slip, n_students=1, mean_length=4, min_length=1)
        got = oracle_probabilities(spec, [0] * n, labels)
        expected = enumerate_paths_prob(p_init, p_learn, p_guess, p_slip, labels)
        assert got == pytest.approx(expected, abs=1e-12)


def test_forward_filter_matches_enumeration_per_skill_multi():
    rng = np.random.default_rng(4)
    spec = GenerativeSpec(k=3, p_init=(0.2, 0.5, 0.8), p_learn=(0.3, 0.1, 0.2),
                          p_guess=(0.1, 0.2, 0.3), p_slip=(0.05, 0.1, 0.2),
                          n_students=1, mean_length=4, min_length=1)
    skills = rng.integers(0, 3, size=10).tolist()
    labels = rng.integers(0, 2, size=10).tolist()
    got = oracle_probabilities(spec, skills, labels)
    # skills are independent in the generator: enumerate each skill's
    # subsequence separately and interleave
    for skill in range(3):
        idx = [t for t, s in enumerate(skills) if s == skill]
        sub_labels = [labels[t] for t in idx]
        expected = enumerate_paths_prob(
            spec.p_init[skill], spec.p_learn[skill],
            spec.p_guess[skill], spec.p_slip[skill], sub_labels,
        )
        for pos, t in enumerate(idx):
            assert got[t] == pytest.approx(expected[pos], abs=1e-12)


# ---------------------------------------------------------------------------
# generation properties


def test_generation_is_seed_deterministic():
    spec = GenerativeSpec(k=3, p_init=0.3, p_learn=0.2, p_guess=0.2, p_slip=0.1,
                          n_students=20, mean_length=12, seed=9)
    a, b = generate(spec), generate(spec)
    assert [(s.user_id, s.steps) for s in a.sequences] == [
        (s.user_id, s.steps) for s in b.sequences
    ]
    assert a.oracle == b.oracle


def test_lengths_respect_minimum():
    spec = GenerativeSpec(k=2, p_init=0.3, p_learn=0.2, p_guess=0.2, p_slip=0.1,
                          n_students=50, mean_length=5, min_length=4, seed=10)
    corpus = generate(spec)
    assert all(len(s) >= 4 for s in corpus.sequences)


def test_empirical_rate_matches_oracle_mean_within_3_sigma():
    spec = GenerativeSpec(k=4, p_init=0.4, p_learn=0.15, p_guess=0.25, p_slip=0.1,
                          n_students=400, mean_length=30, seed=11)
    corpus = generate(spec)
    probs = np.concatenate([np.array(corpus.oracle[s.user_id]) for s in corpus.sequences])
    labels = np.concatenate([np.array(s.labels) for s in corpus.sequences])
    sigma = float(np.sqrt((probs * (1 - probs)).sum())) / len(probs)
    assert abs(labels.mean() - probs.mean()) <= 3 * sigma


def test_mastery_trace_is_monotone_per_skill():
    spec = GenerativeSpec(k=2, p_init=0.2, p_learn=0.4, p_guess=0.1, p_slip=0.1,
                          n_students=30, mean_length=15, seed=12)
    corpus = generate(spec)
    for seq in corpus.sequences:
        last = {}
        for (skill, _, _), state in zip(seq.steps, corpus.mastery[seq.user_id]):
            if skill in last:
                assert state >= last[skill]  # no forgetting
            last[skill] = state


# ---------------------------------------------------------------------------
# oracle AUC


def test_fully_deterministic_process_has_auc_one():
    spec = GenerativeSpec(k=2, p_init=0.0, p_learn=1.0, p_guess=0.0, p_slip=0.0,
                          n_students=30, mean_length=8, seed=13)
    corpus = generate(spec)
    assert oracle_auc(corpus, skip_first=False) == pytest.approx(1.0)


def test_symmetric_noise_auc_strictly_between_half_and_one():
    spec = GenerativeSpec(k=2, p_init=0.5, p_learn=0.2, p_guess=0.2, p_slip=0.2,
                          n_students=200, mean_length=20, seed=14)
    corpus = generate(spec)
    auc = oracle_auc(corpus)
    assert 0.5 < auc < 1.0


def test_reference_spec_oracle_auc_pinned():
    corpus = generate(REFERENCE_SPEC)
    assert oracle_auc(corpus) == pytest.approx(REFERENCE_ORACLE_AUC, abs=1e-9)


# ---------------------------------------------------------------------------
# interchange formats


def test_oracle_records_skip_first_counts():
    spec = GenerativeSpec(k=2, p_init=0.3, p_learn=0.2, p_guess=0.2, p_slip=0.1,
                          n_students=5, mean_length=6, seed=15)
    corpus = generate(spec)
    records = oracle_records(corpus)
    assert len(records) == sum(len(s) - 1 for s in corpus.sequences)
    assert all(r.step >= 1 for r in records)


def test_oracle_records_from_noise_free_spec_survive_dump_round_trip(tmp_path):
    from ktrace.records import read_prediction_dump, write_prediction_dump

    spec = GenerativeSpec(k=2, p_init=1.0, p_learn=0.0, p_guess=0.0, p_slip=0.0,
                          n_students=4, mean_length=6, seed=20)
    corpus = generate(spec)
    records = oracle_records(corpus)
    assert all(0.0 < r.p < 1.0 for r in records)
    path = tmp_path / "oracle.csv"
    write_prediction_dump(path, records)
    assert read_prediction_dump(path) == records


def test_oracle_sidecar_round_trip(tmp_path):
    spec = GenerativeSpec(k=2, p_init=0.3, p_learn=0.2, p_guess=0.2, p_slip=0.1,
                          n_students=5, mean_length=6, seed=16)
    corpus = generate(spec)
    path = tmp_path / "oracle.tsv"
    write_oracle_sidecar(path, corpus)
    loaded = read_oracle_sidecar(path)
    assert loaded == corpus.oracle
