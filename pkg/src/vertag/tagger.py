"""Character-level slot tagger.

A bidirectional LSTM encodes the characters; an LSTM decoder consumes the
previous tag's embedding together with the encoder state of the current
position (hard positional alignment) and a softmax layer emits one BIO
tag per character.  Beam search and teacher-forced sequence
log-probabilities share the same arithmetic, so their scores agree
bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from . import nncore
from .corpus import OUTSIDE, SemanticTriplet, TripletSet, split_tag
from .nncore import LstmCellState, ParameterStore, Var

UNK_INDEX = 0


@dataclass
class TaggerConfig:
    """Model dimensions and input options."""

    embedding_dim: int = 200
    hidden_units: int = 256  # per direction
    dropout: float = 0.5
    use_lexicon_features: bool = True
    tagset: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.embedding_dim <= 0 or self.hidden_units <= 0:
            raise ValueError("embedding_dim and hidden_units must be positive")
        if self.tagset:
            if OUTSIDE not in self.tagset:
                raise ValueError("tagset must contain O")
            if len(set(self.tagset)) != len(self.tagset):
                raise ValueError("tagset contains duplicates")


@dataclass
class EncodedUtterance:
    """Per-position encoder states [forward; backward] plus the decoder init."""

    states: list[Var]  # each of length 2H
    s0: Var  # backward hidden at the first position


@dataclass
class BeamEntry:
    tag_ids: tuple[int, ...]
    log_prob: float
    state: LstmCellState


LEXICON_DIM = 2


class Tagger:
    """Holds the parameter store, the character vocabulary and the tagset."""

    def __init__(
        self,
        config: TaggerConfig,
        vocab: dict[str, int],
        rng: np.random.Generator | None = None,
        params: ParameterStore | None = None,
        pretrained_embeddings: dict[str, np.ndarray] | None = None,
    ):
        if not config.tagset:
            raise ValueError("config.tagset must be set before building a model")
        self.config = config
        self.vocab = dict(vocab)
        self.tag_index = {tag: i for i, tag in enumerate(config.tagset)}
        self.bos_index = len(config.tagset)

        e = config.embedding_dim
        h = config.hidden_units
        enc_in = e + (LEXICON_DIM if config.use_lexicon_features else 0)
        n_tags = len(config.tagset)
        if params is not None:
            self.params = params
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            init = nncore.uniform_init
            self.params = ParameterStore()
            self.params.add("emb_char", init(rng, (len(vocab) + 1, e)))
            self.params.add("lstm_f.w", init(rng, (4 * h, enc_in + h)))
            self.params.add("lstm_f.b", init(rng, (4 * h,)))
            self.params.add("lstm_b.w", init(rng, (4 * h, enc_in + h)))
            self.params.add("lstm_b.b", init(rng, (4 * h,)))
            self.params.add("emb_label", init(rng, (n_tags + 1, e)))
            self.params.add("dec.w", init(rng, (4 * h, e + 2 * h + h)))
            self.params.add("dec.b", init(rng, (4 * h,)))
            self.params.add("out.w", init(rng, (n_tags, h)))
            self.params.add("out.b", init(rng, (n_tags,)))
            if pretrained_embeddings:
                self._load_embeddings(pretrained_embeddings)

    def _load_embeddings(self, table: dict[str, np.ndarray]) -> None:
        emb = self.params["emb_char"].value
        for char, row in table.items():
            idx = self.vocab.get(char)
            if idx is not None and row.shape == (self.config.embedding_dim,):
                emb[idx] = row

    # -- encoding ----------------------------------------------------------

    def char_indices(self, characters: str) -> list[int]:
        return [self.vocab.get(c, UNK_INDEX) for c in characters]

    def encode(
        self,
        characters: str,
        lexicon: np.ndarray | None = None,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> EncodedUtterance:
        """Run both LSTM directions and concatenate per-position states."""
        if not characters:
            raise ValueError("cannot encode an empty character sequence")
        if self.config.use_lexicon_features:
            if lexicon is None or len(lexicon) != len(characters):
                raise ValueError("lexicon features must align with the input characters")
        p = self.params
        h = self.config.hidden_units
        inputs: list[Var] = []
        for t, idx in enumerate(self.char_indices(characters)):
            emb = nncore.embedding(p["emb_char"], idx)
            emb = self._dropout(emb, train, rng)
            if self.config.use_lexicon_features:
                emb = nncore.concat([emb, nncore.const(lexicon[t])])
            inputs.append(emb)

        fwd: list[Var] = []
        state = LstmCellState.zeros(h)
        for x in inputs:
            state = nncore.lstm_step(p["lstm_f.w"], p["lstm_f.b"], x, state)
            fwd.append(state.hidden)
        bwd: list[Var] = [None] * len(inputs)  # type: ignore[list-item]
        state = LstmCellState.zeros(h)
        for t in range(len(inputs) - 1, -1, -1):
            state = nncore.lstm_step(p["lstm_b.w"], p["lstm_b.b"], inputs[t], state)
            bwd[t] = state.hidden
        states = [nncore.concat([f, b]) for f, b in zip(fwd, bwd)]
        return EncodedUtterance(states=states, s0=bwd[0])

    def _dropout(self, var: Var, train: bool, rng: np.random.Generator | None) -> Var:
        if not train or self.config.dropout == 0.0:
            return var
        if rng is None:
            raise ValueError("training-mode dropout needs a random generator")
        mask = nncore.dropout_mask(var.value.shape[0], self.config.dropout, rng, train=True)
        return nncore.apply_mask(var, mask)

    # -- decoding ----------------------------------------------------------

    def decode_start(self, encoded: EncodedUtterance) -> LstmCellState:
        """s0 is the backward hidden at position one; the cell starts at zero."""
        return LstmCellState(
            hidden=encoded.s0, cell=Var(np.zeros(self.config.hidden_units))
        )

    def decode_step(
        self,
        prev_tag: int,
        h_t: Var,
        state: LstmCellState,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[Var, LstmCellState]:
        """One decoder update; returns the tag logits and the new state.

        ``prev_tag`` is a tagset index, or ``bos_index`` at the first step.
        Softmax of the logits is the tag distribution.
        """
        p = self.params
        label = nncore.embedding(p["emb_label"], prev_tag)
        label = self._dropout(label, train, rng)
        new_state = nncore.lstm_step(p["dec.w"], p["dec.b"], nncore.concat([label, h_t]), state)
        pre = self._dropout(new_state.hidden, train, rng)
        logits = nncore.affine(p["out.w"], pre, p["out.b"])
        return logits, new_state

    def sequence_log_prob(
        self,
        characters: str,
        tags: Sequence[str],
        lexicon: np.ndarray | None = None,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Var:
        """Teacher-forced log P(tags | characters), differentiable."""
        encoded = self.encode(characters, lexicon, train, rng)
        return self.log_prob_encoded(encoded, tags, train, rng)

    def log_prob_encoded(
        self,
        encoded: EncodedUtterance,
        tags: Sequence[str],
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Var:
        """As sequence_log_prob but reusing an already-encoded input."""
        if len(tags) != len(encoded.states):
            raise ValueError(f"{len(tags)} tags for {len(encoded.states)} characters")
        state = self.decode_start(encoded)
        prev = self.bos_index
        losses: list[Var] = []
        for t, tag in enumerate(tags):
            target = self.tag_index[tag]
            logits, state = self.decode_step(prev, encoded.states[t], state, train, rng)
            losses.append(nncore.softmax_cross_entropy(logits, target))
            prev = target
        return nncore.scale(nncore.vsum(losses), -1.0)

    def beam_search(
        self,
        characters: str,
        beam_width: int,
        k_return: int,
        lexicon: np.ndarray | None = None,
    ) -> list[tuple[list[str], float]]:
        """Top sequences by exact accumulated log-probability.

        Length always equals the input length; ties break by tag order,
        so the ranking is deterministic.  Returns at most ``k_return``
        sequences (fewer when the search space is smaller).
        """
        if beam_width < 1:
            raise ValueError("beam_width must be positive")
        if k_return > beam_width:
            raise ValueError("k_return must not exceed beam_width")
        tagset = self.config.tagset
        with nncore.no_grad():
            encoded = self.encode(characters, lexicon)
            beam = [BeamEntry((), 0.0, self.decode_start(encoded))]
            for t in range(len(encoded.states)):
                candidates: list[tuple[float, tuple[int, ...], LstmCellState]] = []
                for entry in beam:
                    prev = entry.tag_ids[-1] if entry.tag_ids else self.bos_index
                    logits, new_state = self.decode_step(prev, encoded.states[t], entry.state)
                    log_probs = nncore.log_softmax(logits.value)
                    for v in range(len(tagset)):
                        candidates.append(
                            (entry.log_prob + log_probs[v], entry.tag_ids + (v,), new_state)
                        )
                candidates.sort(key=lambda c: (-c[0], c[1]))
                beam = [
                    BeamEntry(ids, lp, state) for lp, ids, state in candidates[:beam_width]
                ]
        return [
            ([tagset[v] for v in entry.tag_ids], entry.log_prob) for entry in beam[:k_return]
        ]

    def greedy_decode(
        self, characters: str, lexicon: np.ndarray | None = None
    ) -> list[str]:
        """Argmax tag at every position (ties to the lowest tag index)."""
        with nncore.no_grad():
            encoded = self.encode(characters, lexicon)
            state = self.decode_start(encoded)
            prev = self.bos_index
            tags: list[str] = []
            for t in range(len(encoded.states)):
                logits, state = self.decode_step(prev, encoded.states[t], state)
                prev = int(np.argmax(logits.value))
                tags.append(self.config.tagset[prev])
        return tags

    def sample_sequences(
        self,
        characters: str,
        count: int,
        rng: np.random.Generator,
        lexicon: np.ndarray | None = None,
    ) -> list[tuple[list[str], float]]:
        """Ancestral sampling alternative to beam rollouts (off by default)."""
        tagset = self.config.tagset
        results: list[tuple[list[str], float]] = []
        with nncore.no_grad():
            encoded = self.encode(characters, lexicon)
            for _ in range(count):
                state = self.decode_start(encoded)
                prev = self.bos_index
                ids: list[int] = []
                total = 0.0
                for t in range(len(encoded.states)):
                    logits, state = self.decode_step(prev, encoded.states[t], state)
                    log_probs = nncore.log_softmax(logits.value)
                    prev = int(rng.choice(len(tagset), p=np.exp(log_probs)))
                    total += log_probs[prev]
                    ids.append(prev)
                results.append(([tagset[v] for v in ids], total))
        return results

    # -- persistence -------------------------------------------------------

    def save(self, stream: BinaryIO, extra_metadata: dict | None = None) -> None:
        metadata = {
            "kind": "tagger",
            "config": {
                "embedding_dim": self.config.embedding_dim,
                "hidden_units": self.config.hidden_units,
                "dropout": self.config.dropout,
                "use_lexicon_features": self.config.use_lexicon_features,
                "tagset": list(self.config.tagset),
            },
            "vocab": self.vocab,
        }
        if extra_metadata:
            metadata.update(extra_metadata)
        nncore.save_checkpoint(stream, self.params, metadata)

    @classmethod
    def load(cls, stream: BinaryIO) -> tuple["Tagger", dict]:
        params, metadata = nncore.load_checkpoint(stream)
        cfg = metadata["config"]
        config = TaggerConfig(
            embedding_dim=cfg["embedding_dim"],
            hidden_units=cfg["hidden_units"],
            dropout=cfg["dropout"],
            use_lexicon_features=cfg["use_lexicon_features"],
            tagset=list(cfg["tagset"]),
        )
        return cls(config, metadata["vocab"], params=params), metadata


def build_vocab(texts: Sequence[str]) -> dict[str, int]:
    """Character vocabulary; index 0 stays reserved for unknown characters."""
    chars = sorted({c for text in texts for c in text})
    return {c: i + 1 for i, c in enumerate(chars)}


def build_tagset(tag_sequences: Sequence[Sequence[str]]) -> list[str]:
    """O first, then the labels seen in the data, sorted."""
    labels = sorted({t for tags in tag_sequences for t in tags} - {OUTSIDE})
    return [OUTSIDE] + labels


def tags_to_triplets(characters: str, tags: Sequence[str]) -> TripletSet:
    """Rebuild act(slot=value) triplets from an aligned tag sequence.

    Each maximal B-act-slot (I-act-slot)* run contributes one triplet;
    an I-tag that does not continue a run is treated as a B-tag.
    """
    if len(characters) != len(tags):
        raise ValueError(f"{len(tags)} tags for {len(characters)} characters")
    triplets: set[SemanticTriplet] = set()
    run_label: tuple[str, str] | None = None
    run_start = 0

    def close(end: int) -> None:
        if run_label is not None:
            triplets.add(
                SemanticTriplet(run_label[0], run_label[1], characters[run_start:end])
            )

    for i, tag in enumerate(tags):
        prefix, act, slot = split_tag(tag)
        if prefix == OUTSIDE:
            close(i)
            run_label = None
        elif prefix == "B" or (act, slot) != run_label:
            close(i)
            run_label = (act, slot)
            run_start = i
    close(len(tags))
    return frozenset(triplets)


def load_embedding_file(stream) -> dict[str, np.ndarray]:
    """Optional pre-trained embeddings: ``char v1 v2 ...`` per line."""
    table: dict[str, np.ndarray] = {}
    for line in stream:
        parts = line.rstrip("\n").split(" ")
        if len(parts) < 2:
            continue
        table[parts[0]] = np.array([float(v) for v in parts[1:]], dtype=np.float64)
    return table
