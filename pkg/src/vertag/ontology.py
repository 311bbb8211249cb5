"""Domain ontology and pronunciation dictionary.

The ontology enumerates the legal candidate values per act-slot pair,
with per-slot fallback lists for pairs it does not know.  The
pronunciation dictionary maps single characters to phoneme sequences and
feeds the pronunciation channel of value error recovery.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)


class OntologyError(Exception):
    """Raised for malformed or empty ontology documents."""


@dataclass
class PronunciationDictionary:
    """Maps a character (or token) to its phoneme sequence."""

    entries: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def phonemes(self, token: str) -> tuple[str, ...]:
        """Out-of-dictionary tokens fall back to a single identity symbol."""
        return self.entries.get(token, (token,))

    def __contains__(self, token: str) -> bool:
        return token in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def load_pronunciations(stream: Iterable[str]) -> PronunciationDictionary:
    """Read a TSV of ``token<TAB>phoneme phoneme ...`` lines.

    Later duplicate tokens override earlier ones.
    """
    entries: dict[str, tuple[str, ...]] = {}
    for line_no, line in enumerate(stream, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        token, sep, rest = line.partition("\t")
        if not sep or not token:
            raise OntologyError(f"pronunciations line {line_no}: expected 'token<TAB>phonemes'")
        phonemes = tuple(rest.split())
        if not phonemes:
            raise OntologyError(f"pronunciations line {line_no}: no phonemes for {token!r}")
        entries[token] = phonemes
    return PronunciationDictionary(entries)


def write_pronunciations(dictionary: PronunciationDictionary, stream) -> None:
    for token in sorted(dictionary.entries):
        stream.write(f"{token}\t{' '.join(dictionary.entries[token])}\n")


@dataclass
class Ontology:
    """Candidate values per (act, slot), with per-slot fallbacks."""

    candidate_map: dict[tuple[str, str], list[str]] = field(default_factory=dict)
    slot_fallbacks: dict[str, list[str]] = field(default_factory=dict)

    def candidate_set(self, act: str, slot: str) -> list[str]:
        """Exact (act, slot) entry, else the slot fallback, else empty.

        The returned order is the load order; downstream argmax ties
        resolve by it.
        """
        exact = self.candidate_map.get((act, slot))
        if exact is not None:
            return exact
        return self.slot_fallbacks.get(slot, [])

    def pairs(self) -> list[tuple[str, str]]:
        return list(self.candidate_map)

    def all_values(self) -> list[str]:
        """Every distinct value, in load order across pairs then fallbacks."""
        seen: dict[str, None] = {}
        for values in self.candidate_map.values():
            for v in values:
                seen.setdefault(v)
        for values in self.slot_fallbacks.values():
            for v in values:
                seen.setdefault(v)
        return list(seen)


def _clean_values(values, where: str) -> list[str]:
    if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
        raise OntologyError(f"{where}: candidate list must be an array of strings")
    unique: list[str] = []
    seen: set[str] = set()
    for v in values:
        if v in seen:
            log.warning("%s: duplicate candidate %r collapsed", where, v)
            continue
        seen.add(v)
        unique.append(v)
    return unique


def load_ontology(stream) -> Ontology:
    """Parse the ontology JSON document.

    Schema: ``{"pairs": {"act#slot": [values]}, "slots": {"slot": [values]}}``.
    A document with no usable entries is an error.
    """
    try:
        doc = json.load(stream)
    except json.JSONDecodeError as exc:
        raise OntologyError(f"invalid ontology JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise OntologyError("ontology document must be a JSON object")

    candidate_map: dict[tuple[str, str], list[str]] = {}
    pairs = doc.get("pairs", {})
    if not isinstance(pairs, dict):
        raise OntologyError("'pairs' must be an object")
    for key, values in pairs.items():
        act, sep, slot = key.partition("#")
        if not sep or not act or not slot:
            raise OntologyError(f"pair key {key!r} is not of the form 'act#slot'")
        cleaned = _clean_values(values, f"pairs[{key}]")
        if cleaned:
            candidate_map[(act, slot)] = cleaned

    slot_fallbacks: dict[str, list[str]] = {}
    slots = doc.get("slots", {})
    if not isinstance(slots, dict):
        raise OntologyError("'slots' must be an object")
    for slot, values in slots.items():
        if not slot:
            raise OntologyError("empty slot name in 'slots'")
        cleaned = _clean_values(values, f"slots[{slot}]")
        if cleaned:
            slot_fallbacks[slot] = cleaned

    if not candidate_map and not slot_fallbacks:
        raise OntologyError("ontology has no candidate values")
    return Ontology(candidate_map, slot_fallbacks)


def write_ontology(ontology: Ontology, stream) -> None:
    doc = {
        "pairs": {f"{a}#{s}": v for (a, s), v in ontology.candidate_map.items()},
        "slots": dict(ontology.slot_fallbacks),
    }
    json.dump(doc, stream, ensure_ascii=False, indent=2)
    stream.write("\n")


def to_pronunciation(dictionary: PronunciationDictionary, value: str) -> list[str]:
    """Concatenate per-character phoneme sequences."""
    phonemes: list[str] = []
    for char in value:
        phonemes.extend(dictionary.phonemes(char))
    return phonemes


def lexicon_features(ontology: Ontology, characters: str) -> np.ndarray:
    """Per-character [inside-a-value-match, match-start] indicator pairs.

    Maximal matches of ontology values of length >= 2 are claimed
    greedily longest-first (ties leftmost); overlapping shorter matches
    lose.  Returns a (len(characters), 2) float array of 0/1.
    """
    features = np.zeros((len(characters), 2))
    matches: list[tuple[int, int, str]] = []  # (-len, start, value)
    for value in ontology.all_values():
        if len(value) < 2:
            continue
        start = characters.find(value)
        while start >= 0:
            matches.append((-len(value), start, value))
            start = characters.find(value, start + 1)
    claimed = [False] * len(characters)
    for neg_len, start, value in sorted(matches):
        end = start - neg_len
        if any(claimed[start:end]):
            continue
        for i in range(start, end):
            claimed[i] = True
            features[i, 0] = 1.0
        features[start, 1] = 1.0
    return features
