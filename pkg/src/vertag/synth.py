"""Synthetic corpus generation.

Utterance templates are strings with ``{act#slot}`` placeholders; each
instantiation samples candidate values from the ontology, derives gold
tags, and corrupts the transcription with pronunciation-biased noise to
produce the hypothesis.  Every emitted utterance is checked to survive
the tag derivation round trip, so generated corpora are clean by
construction.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import (
    NoiseConfig,
    OverlapError,
    UnalignableValue,
    Utterance,
    derive_bio_tags,
    simulate_asr_noise,
    triplets_from_dicts,
)
from .ontology import Ontology, PronunciationDictionary
from .tagger import tags_to_triplets

_PLACEHOLDER = re.compile(r"\{([^{}#]+)#([^{}]+)\}")


@dataclass
class Template:
    """Alternating literal and slot segments parsed from a pattern string."""

    pattern: str
    segments: list[tuple[str, str, str]] = field(init=False)  # (kind, a, b)

    def __post_init__(self) -> None:
        self.segments = []
        pos = 0
        for match in _PLACEHOLDER.finditer(self.pattern):
            if match.start() > pos:
                self.segments.append(("lit", self.pattern[pos : match.start()], ""))
            self.segments.append(("slot", match.group(1), match.group(2)))
            pos = match.end()
        if pos < len(self.pattern):
            self.segments.append(("lit", self.pattern[pos:], ""))

    def slots(self) -> list[tuple[str, str]]:
        return [(a, b) for kind, a, b in self.segments if kind == "slot"]


@dataclass
class SynthConfig:
    """Corpus size, split fractions, and per-utterance noise jitter."""

    size: int = 2500
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)
    jitter: tuple[float, float] = (0.4, 1.6)
    max_attempts: int = 50

    def __post_init__(self) -> None:
        if self.size < 1:
            raise ValueError("size must be positive")
        if abs(sum(self.splits) - 1.0) > 1e-9 or any(s < 0 for s in self.splits):
            raise ValueError(f"splits must be non-negative and sum to 1, got {self.splits}")


def validate_templates(templates: Sequence[Template], ontology: Ontology) -> None:
    for template in templates:
        for act, slot in template.slots():
            if not ontology.candidate_set(act, slot):
                raise ValueError(
                    f"template {template.pattern!r} references ({act}, {slot}) "
                    f"which has no candidate values"
                )


def _scaled_noise(base: NoiseConfig, scale: float, seed: int) -> NoiseConfig:
    sub = min(base.substitution_rate * scale, 0.9)
    dele = min(base.deletion_rate * scale, max(0.0, 0.95 - sub))
    ins = min(base.insertion_rate * scale, 0.9)
    return NoiseConfig(
        substitution_rate=sub,
        deletion_rate=dele,
        insertion_rate=ins,
        phonetic_bias=base.phonetic_bias,
        seed=seed,
    )


def _instantiate(
    template: Template, ontology: Ontology, rng: np.random.Generator
) -> tuple[str, list[dict]] | None:
    parts: list[str] = []
    semantics: list[dict] = []
    used: set[str] = set()
    for kind, a, b in template.segments:
        if kind == "lit":
            parts.append(a)
            continue
        candidates = ontology.candidate_set(a, b)
        value = None
        for _ in range(10):
            pick = candidates[int(rng.integers(len(candidates)))]
            if pick not in used:
                value = pick
                break
        if value is None:
            return None
        used.add(value)
        parts.append(value)
        semantics.append({"act": a, "slot": b, "value": value})
    return "".join(parts), semantics


def generate_corpus(
    ontology: Ontology,
    dictionary: PronunciationDictionary,
    templates: Sequence[Template],
    synth_config: SynthConfig,
    noise_config: NoiseConfig,
    seed: int,
) -> tuple[list[Utterance], list[Utterance], list[Utterance]]:
    """Generate (train, valid, test) splits, deterministically from the seed."""
    validate_templates(templates, ontology)
    rng = np.random.default_rng([3, seed])
    utterances: list[Utterance] = []
    for i in range(synth_config.size):
        built = None
        for _ in range(synth_config.max_attempts):
            template = templates[int(rng.integers(len(templates)))]
            instance = _instantiate(template, ontology, rng)
            if instance is None:
                continue
            transcription, semantics = instance
            gold = triplets_from_dicts(semantics)
            try:
                tags = derive_bio_tags(transcription, gold)
            except (UnalignableValue, OverlapError):
                continue
            if tags_to_triplets(transcription, tags) == gold:
                built = (transcription, gold, tags)
                break
        if built is None:
            raise RuntimeError(
                f"could not instantiate a round-trippable utterance after "
                f"{synth_config.max_attempts} attempts (templates too ambiguous?)"
            )
        transcription, gold, tags = built
        scale = float(rng.uniform(*synth_config.jitter))
        noise = _scaled_noise(noise_config, scale, seed=int(rng.integers(2**31)))
        hypothesis = simulate_asr_noise(transcription, dictionary, noise)
        utterances.append(
            Utterance(
                id=f"utt-{i:05d}",
                transcription=transcription,
                hypothesis=hypothesis,
                gold=gold,
                transcription_tags=tags,
            )
        )

    n_train = int(round(synth_config.size * synth_config.splits[0]))
    n_valid = int(round(synth_config.size * synth_config.splits[1]))
    train = utterances[:n_train]
    valid = utterances[n_train : n_train + n_valid]
    test = utterances[n_train + n_valid :]
    return train, valid, test


# --------------------------------------------------------------------------
# Bundled toy domain

_INITIALS = ["b", "ch", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p",
             "q", "r", "s", "sh", "t", "w", "x", "y", "z", "zh"]
_FINALS = ["a", "ai", "an", "ang", "ao", "e", "ei", "en", "eng", "i", "ia",
           "ian", "in", "ing", "o", "ong", "ou", "u", "ua", "ui", "un"]


@dataclass
class ToyDomain:
    ontology: Ontology
    dictionary: PronunciationDictionary
    templates: list[str]  # pattern strings, storable in a run config


def make_toy_domain(
    seed: int = 7,
    n_chars: int = 90,
    homophone_group: int = 2,
) -> ToyDomain:
    """A small navigation/media domain with deliberate homophone pairs.

    Characters come in groups sharing the same pronunciation so that
    phonetic substitution noise produces exactly the confusions value
    error recovery is designed to undo.
    """
    rng = np.random.default_rng([4, seed])
    chars = [chr(0x4E00 + i) for i in range(n_chars)]

    syllables = [(i, f) for i in _INITIALS for f in _FINALS]
    order = rng.permutation(len(syllables))
    entries: dict[str, tuple[str, ...]] = {}
    for g in range(0, n_chars, homophone_group):
        initial, final = syllables[order[g // homophone_group]]
        for char in chars[g : g + homophone_group]:
            entries[char] = (initial, final)
    dictionary = PronunciationDictionary(entries)

    filler_chars = chars[:26]
    value_chars = chars[18:]  # overlaps fillers a little, like real corpora

    def make_values(count: int, rng: np.random.Generator) -> list[str]:
        values: list[str] = []
        seen: set[str] = set()
        while len(values) < count:
            length = int(rng.integers(2, 5))
            value = "".join(
                value_chars[int(rng.integers(len(value_chars)))] for _ in range(length)
            )
            if value not in seen:
                seen.add(value)
                values.append(value)
        return values

    dest = make_values(12, rng)
    food = make_values(10, rng)
    music = make_values(10, rng)
    when = make_values(8, rng)
    weather = make_values(8, rng)

    ontology = Ontology(
        candidate_map={
            ("inform", "dest"): dest,
            ("deny", "dest"): list(dest),
            ("inform", "food"): food,
            ("inform", "music"): music,
            ("inform", "time"): when,
            ("inform", "weather"): weather,
        },
        slot_fallbacks={"dest": list(dest), "food": list(food)},
    )

    def filler(length: int) -> str:
        return "".join(
            filler_chars[int(rng.integers(len(filler_chars)))] for _ in range(length)
        )

    f = {k: filler(n) for k, n in [
        ("go", 2), ("to", 1), ("not", 2), ("want", 2), ("eat", 2), ("play", 2),
        ("ask", 3), ("at", 1), ("ok", 2), ("hello", 4), ("thanks", 3), ("how", 2),
    ]}
    templates = [
        f"{f['go']}{{inform#dest}}",
        f"{f['want']}{f['go']}{{inform#dest}}{f['ok']}",
        f"{f['go']}{{inform#dest}}{f['not']}{{deny#dest}}",
        f"{f['want']}{{inform#dest}}{f['not']}{f['to']}{{deny#dest}}{f['ok']}",
        f"{f['eat']}{{inform#food}}",
        f"{f['want']}{f['eat']}{{inform#food}}{f['thanks']}",
        f"{f['play']}{{inform#music}}",
        f"{f['ask']}{{inform#music}}{f['ok']}",
        f"{{inform#time}}{f['go']}{{inform#dest}}",
        f"{f['how']}{{inform#weather}}{f['at']}{{inform#time}}",
        f"{f['ask']}{{confirm#dest}}{f['ok']}",  # resolves through the slot fallback
        f"{f['hello']}{f['thanks']}",  # no slots: empty gold
        f"{f['ok']}{f['how']}",
    ]
    return ToyDomain(ontology=ontology, dictionary=dictionary, templates=templates)
