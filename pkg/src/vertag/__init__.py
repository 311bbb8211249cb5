"""Robust spoken language understanding toolkit.

Trains a character-level BIO slot tagger on clean transcriptions, adapts
it to noisy ASR hypotheses with policy-gradient training whose reward is
computed after rule-based value error recovery, and evaluates triplet F1
and utterance accuracy under configurable post-processing.
"""

from .corpus import (
    NoiseConfig,
    SemanticTriplet,
    TripletSet,
    Utterance,
    align_hypothesis,
    character_error_rate,
    derive_bio_tags,
    parse_corpus,
    simulate_asr_noise,
    write_corpus,
)
from .evaluation import EvalReport, cer_bucket_report, evaluate
from .ontology import (
    Ontology,
    PronunciationDictionary,
    lexicon_features,
    load_ontology,
    load_pronunciations,
    to_pronunciation,
)
from .tagger import Tagger, TaggerConfig, build_tagset, build_vocab, tags_to_triplets
from .training import (
    RewardRecord,
    TrainConfig,
    compute_reward,
    da_generate_pseudo,
    policy_gradient_step,
    supervised_step,
    train,
)
from .ver import (
    NgramIndex,
    RecoveryMode,
    VerConfig,
    build_index,
    feature_vector,
    ngram_set,
    recover,
    similarity,
)

__version__ = "0.1.0"

__all__ = [
    "EvalReport",
    "NgramIndex",
    "NoiseConfig",
    "Ontology",
    "PronunciationDictionary",
    "RecoveryMode",
    "RewardRecord",
    "SemanticTriplet",
    "Tagger",
    "TaggerConfig",
    "TrainConfig",
    "TripletSet",
    "Utterance",
    "VerConfig",
    "align_hypothesis",
    "build_index",
    "build_tagset",
    "build_vocab",
    "cer_bucket_report",
    "character_error_rate",
    "compute_reward",
    "da_generate_pseudo",
    "derive_bio_tags",
    "evaluate",
    "feature_vector",
    "lexicon_features",
    "load_ontology",
    "load_pronunciations",
    "ngram_set",
    "parse_corpus",
    "policy_gradient_step",
    "recover",
    "similarity",
    "simulate_asr_noise",
    "supervised_step",
    "tags_to_triplets",
    "to_pronunciation",
    "train",
    "write_corpus",
]
