"""Value error recovery: n-gram cosine matching against candidate sets.

A predicted value is scored against every candidate of its act-slot pair
by blending two cosine similarities, one over character n-grams and one
over pronunciation n-grams.  Scoring one value against all M candidates
is a single matrix-vector product, which is what makes this fast enough
to run inside the training loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Hashable, Sequence

import numpy as np

from .corpus import SemanticTriplet, TripletSet
from .ontology import Ontology, PronunciationDictionary, to_pronunciation


class AbsentCandidateSet(Exception):
    """No candidate set is known for the requested act-slot pair."""


class RecoveryMode(str, Enum):
    NONE = "none"
    DELETE = "delete"
    VER = "ver"


@dataclass
class VerConfig:
    """N-gram order, channel blend weight, and rejection threshold."""

    n: int = 2
    blend: float = 0.5  # weight of the word channel; 1 - blend goes to pronunciation
    threshold: float = 0.5
    mode: RecoveryMode = RecoveryMode.VER

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"n-gram order must be >= 1, got {self.n}")
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError(f"blend must be in [0, 1], got {self.blend}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {self.threshold}")
        if not isinstance(self.mode, RecoveryMode):
            self.mode = RecoveryMode(self.mode)


def ngram_set(symbols: Sequence[Hashable], n: int) -> set[tuple]:
    """All length-n windows of the sequence, as a set.

    Empty when the sequence is shorter than n.
    """
    return {tuple(symbols[i : i + n]) for i in range(len(symbols) - n + 1)}


def feature_vector(symbols: Sequence[Hashable], vocabulary: dict[tuple, int], n: int) -> np.ndarray:
    """Indicator vector of the sequence's n-grams over the vocabulary.

    Scaled by the square root of the sequence's total n-gram count, so a
    dot product with a candidate column is exactly the cosine of the two
    n-gram sets: out-of-vocabulary n-grams count as mismatches instead of
    being silently dropped from the norm.  All-zero stays all-zero.
    """
    vec = np.zeros(len(vocabulary))
    grams = ngram_set(symbols, n)
    if not grams:
        return vec
    for gram in grams:
        j = vocabulary.get(gram)
        if j is not None:
            vec[j] = 1.0
    return vec / np.sqrt(len(grams))


def _build_vocabulary(gram_sets: list[set[tuple]]) -> dict[tuple, int]:
    vocab: dict[tuple, int] = {}
    for grams in gram_sets:
        for gram in sorted(grams):
            vocab.setdefault(gram, len(vocab))
    return vocab


def _build_matrix(gram_sets: list[set[tuple]], vocabulary: dict[tuple, int]) -> np.ndarray:
    # unit columns (zero for candidates with no n-grams)
    matrix = np.zeros((len(vocabulary), len(gram_sets)))
    for k, grams in enumerate(gram_sets):
        for gram in grams:
            matrix[vocabulary[gram], k] = 1.0
        norm = np.sqrt(len(grams))
        if norm > 0:
            matrix[:, k] /= norm
    return matrix


@dataclass
class PairIndex:
    """Prebuilt word and pronunciation feature matrices for one candidate set."""

    candidates: list[str]
    word_vocab: dict[tuple, int]
    word_matrix: np.ndarray
    pron_vocab: dict[tuple, int]
    pron_matrix: np.ndarray
    members: frozenset[str] = field(init=False)

    def __post_init__(self) -> None:
        self.members = frozenset(self.candidates)


@dataclass
class NgramIndex:
    """All pair indices, resolved the same way as Ontology.candidate_set."""

    by_pair: dict[tuple[str, str], PairIndex]
    by_slot: dict[str, PairIndex]
    dictionary: PronunciationDictionary
    n: int

    def lookup(self, act: str, slot: str) -> PairIndex | None:
        exact = self.by_pair.get((act, slot))
        if exact is not None:
            return exact
        return self.by_slot.get(slot)


def _index_candidates(
    candidates: list[str], dictionary: PronunciationDictionary, n: int
) -> PairIndex:
    word_sets = [ngram_set(v, n) for v in candidates]
    pron_sets = [ngram_set(to_pronunciation(dictionary, v), n) for v in candidates]
    word_vocab = _build_vocabulary(word_sets)
    pron_vocab = _build_vocabulary(pron_sets)
    return PairIndex(
        candidates=list(candidates),
        word_vocab=word_vocab,
        word_matrix=_build_matrix(word_sets, word_vocab),
        pron_vocab=pron_vocab,
        pron_matrix=_build_matrix(pron_sets, pron_vocab),
    )


def build_index(
    ontology: Ontology, dictionary: PronunciationDictionary, config: VerConfig
) -> NgramIndex:
    """Precompute feature matrices for every non-empty candidate set."""
    by_pair = {
        key: _index_candidates(values, dictionary, config.n)
        for key, values in ontology.candidate_map.items()
        if values
    }
    by_slot = {
        slot: _index_candidates(values, dictionary, config.n)
        for slot, values in ontology.slot_fallbacks.items()
        if values
    }
    return NgramIndex(by_pair=by_pair, by_slot=by_slot, dictionary=dictionary, n=config.n)


def similarity(
    value: str, act: str, slot: str, index: NgramIndex, config: VerConfig
) -> np.ndarray:
    """Blended word/pronunciation cosine of the value against all candidates.

    Returns an M-vector of scores in [0, 1], ordered like the candidate
    list.  Raises :class:`AbsentCandidateSet` for unknown act-slot pairs.
    """
    pair = index.lookup(act, slot)
    if pair is None:
        raise AbsentCandidateSet(f"no candidates for ({act!r}, {slot!r})")
    d_word = feature_vector(value, pair.word_vocab, config.n)
    d_pron = feature_vector(to_pronunciation(index.dictionary, value), pair.pron_vocab, config.n)
    return config.blend * (pair.word_matrix.T @ d_word) + (1.0 - config.blend) * (
        pair.pron_matrix.T @ d_pron
    )


def recover(triplets: TripletSet, index: NgramIndex, config: VerConfig) -> TripletSet:
    """Correct or drop triplets whose value is not a legal candidate.

    none:   pass through unchanged.
    delete: drop triplets whose value is not an exact candidate.
    ver:    exact candidates are kept; otherwise the best-scoring
            candidate replaces the value when the score clears the
            threshold, and the triplet is dropped when it does not (or
            when no candidate set exists).
    """
    if config.mode is RecoveryMode.NONE:
        return frozenset(triplets)

    survivors: set[SemanticTriplet] = set()
    for triplet in triplets:
        pair = index.lookup(triplet.act, triplet.slot)
        if pair is None:
            continue
        if triplet.value in pair.members:
            survivors.add(triplet)
            continue
        if config.mode is RecoveryMode.DELETE:
            continue
        scores = similarity(triplet.value, triplet.act, triplet.slot, index, config)
        best = int(np.argmax(scores))  # ties resolve to the first candidate in load order
        if scores[best] >= config.threshold:
            survivors.add(SemanticTriplet(triplet.act, triplet.slot, pair.candidates[best]))
    return frozenset(survivors)
