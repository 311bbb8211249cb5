"""Corpus data model and character-level alignment utilities.

An utterance couples a manual transcription with an ASR hypothesis and a
set of act(slot=value) triplets.  Transcriptions can carry aligned BIO
tags; hypotheses never do, which is the whole point of the toolkit.

Corpus files are UTF-8 JSON lines with fields ``id``, ``transcription``,
``hypothesis`` (optional, defaults to the transcription), ``semantics``
and ``tags`` (optional).  A leading line whose object contains ``_meta``
is treated as file metadata and skipped by the reader.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence, TextIO

import numpy as np

if TYPE_CHECKING:
    from .ontology import PronunciationDictionary

log = logging.getLogger(__name__)

OUTSIDE = "O"


class CorpusError(Exception):
    """Raised for malformed corpus files (bad JSON, bad record, duplicate id)."""


class UnalignableValue(Exception):
    """A gold value does not occur in the transcription."""

    def __init__(self, triplet: SemanticTriplet, transcription: str):
        self.triplet = triplet
        super().__init__(
            f"value {triplet.value!r} of {triplet.act}({triplet.slot}=...) "
            f"not found in transcription {transcription!r}"
        )


class OverlapError(Exception):
    """A gold value can only be placed on top of an already tagged span."""

    def __init__(self, triplet: SemanticTriplet, transcription: str):
        self.triplet = triplet
        super().__init__(
            f"all occurrences of {triplet.value!r} in {transcription!r} "
            f"overlap previously assigned spans"
        )


@dataclass(frozen=True, order=True)
class SemanticTriplet:
    """One act(slot=value) unit of meaning."""

    act: str
    slot: str
    value: str

    def __post_init__(self) -> None:
        if not self.act or not self.slot:
            raise ValueError(f"act and slot must be non-empty, got {self!r}")

    @property
    def is_valid(self) -> bool:
        """Triplets with an empty value can be read from files but are flagged."""
        return bool(self.value)

    def to_dict(self) -> dict[str, str]:
        return {"act": self.act, "slot": self.slot, "value": self.value}


TripletSet = frozenset[SemanticTriplet]


def triplets_from_dicts(items: Iterable[Mapping[str, str]]) -> TripletSet:
    return frozenset(
        SemanticTriplet(d["act"], d["slot"], d["value"]) for d in items
    )


def triplets_to_dicts(triplets: TripletSet) -> list[dict[str, str]]:
    """Sorted by (act, slot, value) so serialized output is deterministic."""
    return [t.to_dict() for t in sorted(triplets)]


@dataclass
class Utterance:
    """One dialogue turn: transcription, hypothesis and unaligned semantics."""

    id: str
    transcription: str
    hypothesis: str
    gold: TripletSet = field(default_factory=frozenset)
    transcription_tags: list[str] | None = None

    def __post_init__(self) -> None:
        if self.transcription_tags is not None and len(self.transcription_tags) != len(
            self.transcription
        ):
            raise CorpusError(
                f"utterance {self.id!r}: {len(self.transcription_tags)} tags for "
                f"{len(self.transcription)} transcription characters"
            )


@dataclass
class NoiseConfig:
    """Knobs for the synthetic ASR-error generator.

    ``phonetic_bias`` is the probability that a substitution picks the
    pronunciation-nearest character instead of a uniformly random one.
    """

    substitution_rate: float = 0.0
    deletion_rate: float = 0.0
    insertion_rate: float = 0.0
    phonetic_bias: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("substitution_rate", "deletion_rate", "insertion_rate", "phonetic_bias"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {rate}")
        if self.substitution_rate + self.deletion_rate > 1.0:
            raise ValueError("substitution_rate + deletion_rate must be <= 1")


# --------------------------------------------------------------------------
# BIO tag handling


def split_tag(tag: str) -> tuple[str, str, str]:
    """Split ``B-act-slot`` into (prefix, act, slot).  ``O`` -> ("O", "", "").

    The act may not contain ``-``; the slot may.
    """
    if tag == OUTSIDE:
        return OUTSIDE, "", ""
    parts = tag.split("-", 2)
    if len(parts) != 3 or parts[0] not in ("B", "I") or not parts[1] or not parts[2]:
        raise ValueError(f"malformed BIO tag {tag!r}")
    return parts[0], parts[1], parts[2]


def bio_violations(tags: Sequence[str]) -> list[int]:
    """Positions whose I-tag does not continue a same-label run."""
    bad = []
    prev_label = None
    for i, tag in enumerate(tags):
        prefix, act, slot = split_tag(tag)
        if prefix == "I" and prev_label != (act, slot):
            bad.append(i)
        prev_label = (act, slot) if prefix != OUTSIDE else None
    return bad


def is_well_formed_bio(tags: Sequence[str]) -> bool:
    return not bio_violations(tags)


def repair_bio(tags: Sequence[str]) -> list[str]:
    """Promote orphan I-tags to B-tags, left to right."""
    repaired: list[str] = []
    prev_label = None
    for tag in tags:
        prefix, act, slot = split_tag(tag)
        if prefix == "I" and prev_label != (act, slot):
            tag = f"B-{act}-{slot}"
        repaired.append(tag)
        prev_label = (act, slot) if prefix != OUTSIDE else None
    return repaired


# --------------------------------------------------------------------------
# Corpus I/O


def _parse_record(obj: Mapping, line_no: int, seen_ids: set[str]) -> Utterance:
    try:
        uid = obj["id"]
        transcription = obj["transcription"]
        semantics = obj.get("semantics", [])
    except (KeyError, TypeError) as exc:
        raise CorpusError(f"line {line_no}: missing field {exc}") from exc
    if not isinstance(uid, str) or not isinstance(transcription, str):
        raise CorpusError(f"line {line_no}: id and transcription must be strings")
    if uid in seen_ids:
        raise CorpusError(f"line {line_no}: duplicate utterance id {uid!r}")
    seen_ids.add(uid)

    hypothesis = obj.get("hypothesis", transcription)
    try:
        gold = triplets_from_dicts(semantics)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusError(f"line {line_no}: bad semantics: {exc}") from exc
    for triplet in gold:
        if not triplet.is_valid:
            log.warning("line %d: triplet with empty value flagged invalid: %s", line_no, triplet)

    tags = obj.get("tags")
    if tags is not None:
        if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
            raise CorpusError(f"line {line_no}: tags must be a list of strings")
        try:
            violations = bio_violations(tags)
        except ValueError as exc:
            raise CorpusError(f"line {line_no}: {exc}") from exc
        if violations:
            log.warning("line %d: ill-formed BIO at positions %s, repairing", line_no, violations)
            tags = repair_bio(tags)

    try:
        return Utterance(uid, transcription, hypothesis, gold, tags)
    except CorpusError as exc:
        raise CorpusError(f"line {line_no}: {exc}") from exc


def parse_corpus(stream: Iterable[str]) -> list[Utterance]:
    """Read a JSON-lines corpus.

    Blank lines and ``_meta`` header records are skipped.  Raises
    :class:`CorpusError` naming the offending line on malformed input.
    """
    utterances: list[Utterance] = []
    seen_ids: set[str] = set()
    for line_no, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"line {line_no}: invalid JSON: {exc}") from exc
        if isinstance(obj, dict) and "_meta" in obj:
            continue
        if not isinstance(obj, dict):
            raise CorpusError(f"line {line_no}: expected a JSON object")
        utterances.append(_parse_record(obj, line_no, seen_ids))
    return utterances


def write_corpus(
    utterances: Iterable[Utterance], stream: TextIO, meta: Mapping | None = None
) -> None:
    """Write JSON lines with fields in the documented order."""
    if meta is not None:
        stream.write(json.dumps({"_meta": dict(meta)}, ensure_ascii=False) + "\n")
    for utt in utterances:
        record: dict = {
            "id": utt.id,
            "transcription": utt.transcription,
            "hypothesis": utt.hypothesis,
            "semantics": triplets_to_dicts(utt.gold),
        }
        if utt.transcription_tags is not None:
            record["tags"] = utt.transcription_tags
        stream.write(json.dumps(record, ensure_ascii=False) + "\n")


# --------------------------------------------------------------------------
# Tag derivation and alignment


def derive_bio_tags(transcription: str, gold: TripletSet) -> list[str]:
    """Tag each gold value's span in the transcription with B/I labels.

    Triplets are placed in sorted (act, slot, value) order; each value
    claims its leftmost occurrence that does not overlap an earlier span.
    """
    tags = [OUTSIDE] * len(transcription)
    claimed = [False] * len(transcription)
    for triplet in sorted(gold):
        value = triplet.value
        if not value:
            raise UnalignableValue(triplet, transcription)
        start = transcription.find(value)
        if start < 0:
            raise UnalignableValue(triplet, transcription)
        while start >= 0 and any(claimed[start : start + len(value)]):
            start = transcription.find(value, start + 1)
        if start < 0:
            raise OverlapError(triplet, transcription)
        label = f"{triplet.act}-{triplet.slot}"
        tags[start] = f"B-{label}"
        for i in range(start + 1, start + len(value)):
            tags[i] = f"I-{label}"
        for i in range(start, start + len(value)):
            claimed[i] = True
    return tags


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[len(b)]


def _suffix_distances(transcription: str, hypothesis: str) -> list[list[int]]:
    # d[i][j] = edit distance between transcription[i:] and hypothesis[j:]
    m, n = len(transcription), len(hypothesis)
    d = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(m + 1):
        d[i][n] = m - i
    for j in range(n + 1):
        d[m][j] = n - j
    for i in range(m - 1, -1, -1):
        for j in range(n - 1, -1, -1):
            sub = d[i + 1][j + 1] + (transcription[i] != hypothesis[j])
            d[i][j] = min(sub, d[i + 1][j] + 1, d[i][j + 1] + 1)
    return d


def align_hypothesis(
    transcription: str, hypothesis: str, transcription_tags: Sequence[str]
) -> list[str]:
    """Transfer tags to the hypothesis along a minimum edit-distance alignment.

    Matched or substituted hypothesis characters inherit the transcription
    tag, inserted ones get O, and the result is repaired to well-formed
    BIO.  Ties are resolved left to right preferring match, then
    substitute, delete, insert, so the transfer is reproducible.
    """
    if len(transcription_tags) != len(transcription):
        raise ValueError("transcription_tags must align with transcription")
    if not hypothesis:
        return []
    d = _suffix_distances(transcription, hypothesis)
    m, n = len(transcription), len(hypothesis)
    out: list[str] = []
    i = j = 0
    while i < m or j < n:
        here = d[i][j]
        if i < m and j < n and transcription[i] == hypothesis[j] and d[i + 1][j + 1] == here:
            out.append(transcription_tags[i])
            i += 1
            j += 1
        elif i < m and j < n and d[i + 1][j + 1] + 1 == here:
            out.append(transcription_tags[i])
            i += 1
            j += 1
        elif i < m and d[i + 1][j] + 1 == here:
            i += 1
        else:
            out.append(OUTSIDE)
            j += 1
    return repair_bio(out)


def character_error_rate(hypothesis: str, transcription: str) -> float:
    """edit_distance / transcription length.

    By convention an empty transcription against a non-empty hypothesis
    scores len(hypothesis); two empty strings score 0.
    """
    if not transcription:
        return float(len(hypothesis))
    return edit_distance(hypothesis, transcription) / len(transcription)


# --------------------------------------------------------------------------
# ASR noise simulation


def _phoneme_cosine(a: Sequence[str], b: Sequence[str]) -> float:
    sa, sb = set(a), set(b)
    if not sa or not sb:
        return 0.0
    return len(sa & sb) / (len(sa) ** 0.5 * len(sb) ** 0.5)


def _phonetic_neighbor(
    char: str,
    pool: Sequence[str],
    pronunciations: "PronunciationDictionary",
    rng: np.random.Generator,
) -> str | None:
    others = [p for p in pool if p != char]
    if not others:
        return None
    own = pronunciations.phonemes(char)
    scores = [_phoneme_cosine(own, pronunciations.phonemes(p)) for p in others]
    best = max(scores)
    ties = [p for p, s in zip(others, scores) if s == best]
    return ties[int(rng.integers(len(ties)))]


def simulate_asr_noise(
    transcription: str,
    pronunciations: "PronunciationDictionary",
    config: NoiseConfig,
) -> str:
    """Corrupt a transcription with substitution/deletion/insertion noise.

    Substitutions pick the pronunciation-nearest character with
    probability ``phonetic_bias`` (phoneme-set cosine, ties broken by the
    seeded generator), otherwise a uniformly random one.  Deterministic
    for a fixed config.
    """
    rng = np.random.default_rng(config.seed)
    pool = sorted(pronunciations.entries) or sorted(set(transcription))
    out: list[str] = []

    def maybe_insert() -> None:
        if config.insertion_rate > 0 and rng.random() < config.insertion_rate and pool:
            out.append(pool[int(rng.integers(len(pool)))])

    for char in transcription:
        maybe_insert()
        u = rng.random()
        if u < config.substitution_rate:
            if rng.random() < config.phonetic_bias:
                neighbor = _phonetic_neighbor(char, pool, pronunciations, rng)
            else:
                others = [p for p in pool if p != char]
                neighbor = others[int(rng.integers(len(others)))] if others else None
            out.append(neighbor if neighbor is not None else char)
        elif u < config.substitution_rate + config.deletion_rate:
            continue
        else:
            out.append(char)
    maybe_insert()
    return "".join(out)
