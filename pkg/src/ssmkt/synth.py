"""Synthetic learners with a known response model.

Each student holds a mastery level per concept, starting at 0.  Question q
has difficulty delta_q ~ N(0, difficulty_std^2) and belongs to one concept.
A response is correct with probability sigmoid(slope * (m - delta_q)); after
the attempt mastery grows by ``gain_correct`` or ``gain_incorrect``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import InteractionSequence
from .metrics import auc
from .nn import split_rng


@dataclass
class SynthDataset:
    sequences: list
    probabilities: list  # Bayes-optimal P(correct) per step, aligned with sequences
    difficulty: np.ndarray
    question_concept: np.ndarray
    oracle_auc: float | None

    @property
    def n_questions(self) -> int:
        return len(self.difficulty)

    @property
    def n_concepts(self) -> int:
        return int(self.question_concept.max()) + 1


def synth_mastery(n_students: int = 500, n_concepts: int = 10, n_questions: int = 100, T: int = 100,
                  seed: int = 0, slope: float = 1.5, gain_correct: float = 0.3,
                  gain_incorrect: float = 0.1, difficulty_std: float = 1.0) -> SynthDataset:
    item_rng, learner_rng = split_rng(seed, 2)
    difficulty = item_rng.normal(0.0, 1.0, n_questions) * difficulty_std
    question_concept = item_rng.permutation(np.arange(n_questions) % n_concepts)

    sequences, probabilities = [], []
    for s in range(n_students):
        mastery = np.zeros(n_concepts)
        qs = learner_rng.integers(0, n_questions, T)
        u = learner_rng.random(T)
        cs = question_concept[qs]
        probs = np.empty(T)
        rs = np.empty(T, dtype=np.int64)
        for t in range(T):
            c = cs[t]
            probs[t] = expit(slope * (mastery[c] - difficulty[qs[t]]))
            rs[t] = int(u[t] < probs[t])
            mastery[c] += gain_correct if rs[t] else gain_incorrect
        sequences.append(InteractionSequence(str(s), qs, cs, rs))
        probabilities.append(probs)

    oracle = auc(np.concatenate(probabilities), np.concatenate([s.responses for s in sequences]))
    return SynthDataset(sequences, probabilities, difficulty, question_concept, oracle)


def permute_labels(sequences, seed: int) -> list[InteractionSequence]:
    """Null control: shuffle every response across the whole dataset."""
    rng = split_rng(seed, 1)[0]
    flat = rng.permutation(np.concatenate([s.responses for s in sequences]))
    out, pos = [], 0
    for s in sequences:
        n = len(s)
        out.append(InteractionSequence(s.student_id, s.questions, s.concepts, flat[pos:pos + n], s.window))
        pos += n
    return out
