import numpy as np
import pytest

from vertag.ontology import Ontology, PronunciationDictionary
from vertag.tagger import Tagger, TaggerConfig


@pytest.fixture
def city_ontology() -> Ontology:
    return Ontology(
        candidate_map={
            ("inform", "dest"): ["苏州", "上海", "杭州"],
            ("deny", "dest"): ["苏州", "上海", "杭州"],
            ("inform", "food"): ["面条", "包子"],
        },
        slot_fallbacks={"dest": ["苏州", "上海", "杭州"]},
    )


@pytest.fixture
def pinyin_dictionary() -> PronunciationDictionary:
    return PronunciationDictionary(
        {
            "上": ("sh", "ang"),
            "海": ("h", "ai"),
            "苏": ("s", "u"),
            "州": ("zh", "ou"),
            "杭": ("h", "ang"),
            "粥": ("zh", "ou"),  # homophone of 州
            "面": ("m", "ian"),
            "条": ("t", "iao"),
            "包": ("b", "ao"),
            "子": ("z", "i"),
            "我": ("w", "o"),
            "想": ("x", "iang"),
            "去": ("q", "u"),
            "不": ("b", "u"),
            "是": ("sh", "i"),
        }
    )


def identity_pronunciations(alphabet: str) -> PronunciationDictionary:
    """Each letter is its own phoneme, so both channels see the same n-grams."""
    return PronunciationDictionary({c: (c,) for c in alphabet})


def tiny_tagger(
    tagset: list[str],
    alphabet: str = "abcd",
    embedding_dim: int = 4,
    hidden_units: int = 5,
    seed: int = 0,
    use_lexicon_features: bool = False,
    dropout: float = 0.0,
) -> Tagger:
    config = TaggerConfig(
        embedding_dim=embedding_dim,
        hidden_units=hidden_units,
        dropout=dropout,
        use_lexicon_features=use_lexicon_features,
        tagset=tagset,
    )
    vocab = {c: i + 1 for i, c in enumerate(alphabet)}
    return Tagger(config, vocab, rng=np.random.default_rng(seed))
