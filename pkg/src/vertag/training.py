"""Two-stage training: supervised pretraining, then RL adaptation.

Stage one minimizes negative log-likelihood on tagged transcriptions.
Stage two rolls out tag sequences on ASR hypotheses with beam search,
scores each rollout's triplets after value error recovery, and follows
the policy gradient with the in-beam mean reward as baseline, taking one
supervised batch after every hypothesis batch to keep training stable.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import nncore
from .corpus import TripletSet, Utterance, derive_bio_tags, repair_bio
from .ontology import Ontology, PronunciationDictionary, lexicon_features
from .tagger import Tagger, TaggerConfig, build_tagset, build_vocab, tags_to_triplets
from .ver import NgramIndex, RecoveryMode, VerConfig, build_index, recover

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Learning rates, beam sizes and loop control."""

    eta1: float = 1e-3  # supervised learning rate
    eta2: float = 5e-4  # RL learning rate
    rollout_beam: int = 10  # K rollouts per utterance in the RL stage
    eval_beam: int = 5
    clip_norm: float = 5.0
    batch_size: int = 32
    max_epochs: int = 50  # per stage
    patience: int = 5
    seed: int = 0
    pretrain: bool = True
    rl: bool = True
    interleave_supervised: bool = True
    sample_rollouts: bool = False  # stochastic rollouts instead of top-K beams
    allow_degenerate: bool = False  # permit RL with no tagged-transcription signal

    def __post_init__(self) -> None:
        if self.rollout_beam < 2:
            raise ValueError("rollout_beam must be >= 2 (the baseline needs variance)")
        if self.eval_beam < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("eval_beam, batch_size and patience must be positive")


@dataclass
class RewardRecord:
    """Reward decomposition for one rollout, plus the in-beam baseline."""

    reward: float
    fp: int
    fn: int
    r_triplet: float
    r_utt: int
    baseline: float = 0.0


def compute_reward(gold: TripletSet, predicted: TripletSet) -> RewardRecord:
    """Triplet-level penalty term plus the exact-match bonus.

    r_triplet = 1 - (FP + FN) / max(|gold|, 1) and r_utt is 1 only when
    the two sets are equal; the reward is their sum.
    """
    fp = len(predicted - gold)
    fn = len(gold - predicted)
    r_triplet = 1.0 - (fp + fn) / max(len(gold), 1)
    r_utt = 1 if predicted == gold else 0
    return RewardRecord(reward=r_triplet + r_utt, fp=fp, fn=fn, r_triplet=r_triplet, r_utt=r_utt)


LexiconFn = Callable[[str], "np.ndarray | None"]


def _no_lexicon(_: str) -> None:
    return None


def supervised_step(
    model: Tagger,
    batch: Sequence[tuple[str, Sequence[str]]],
    config: TrainConfig,
    rng: np.random.Generator,
    lexicon_fn: LexiconFn = _no_lexicon,
) -> float:
    """One NLL minimization step over a batch of (text, tags) pairs.

    Validates alignment of the whole batch before touching any state.
    """
    if not batch:
        raise ValueError("empty batch")
    for text, tags in batch:
        if len(text) != len(tags) or not text:
            raise ValueError(f"unaligned pair: {len(text)} characters vs {len(tags)} tags")
    model.params.zero_grads()
    losses = [
        nncore.scale(
            model.sequence_log_prob(text, tags, lexicon_fn(text), train=True, rng=rng), -1.0
        )
        for text, tags in batch
    ]
    loss = nncore.scale(nncore.vsum(losses), 1.0 / len(losses))
    nncore.backward(loss)
    nncore.clip_gradients(model.params, config.clip_norm)
    nncore.adam_step(model.params, config.eta1)
    return float(loss.value)


def _rollouts(
    model: Tagger,
    text: str,
    lexicon,
    config: TrainConfig,
    rng: np.random.Generator,
) -> list[tuple[list[str], float]]:
    if config.sample_rollouts:
        return model.sample_sequences(text, config.rollout_beam, rng, lexicon)
    return model.beam_search(text, config.rollout_beam, config.rollout_beam, lexicon)


def rollout_rewards(
    model: Tagger,
    utterance: Utterance,
    index: NgramIndex,
    train_config: TrainConfig,
    ver_config: VerConfig,
    rng: np.random.Generator,
    lexicon_fn: LexiconFn = _no_lexicon,
) -> tuple[list[list[str]], list[RewardRecord]]:
    """Roll out K tag sequences on the hypothesis and score each one.

    Recovery always runs in full VER mode here, whatever the evaluation
    post-processing is set to.
    """
    text = utterance.hypothesis
    lexicon = lexicon_fn(text)
    sequences = _rollouts(model, text, lexicon, train_config, rng)
    rl_ver = replace(ver_config, mode=RecoveryMode.VER)
    records = []
    for tags, _ in sequences:
        recovered = recover(tags_to_triplets(text, tags), index, rl_ver)
        records.append(compute_reward(utterance.gold, recovered))
    baseline = sum(r.reward for r in records) / len(records)
    for record in records:
        record.baseline = baseline
    return [tags for tags, _ in sequences], records


def policy_gradient_step(
    model: Tagger,
    utterance: Utterance,
    index: NgramIndex,
    train_config: TrainConfig,
    ver_config: VerConfig,
    rng: np.random.Generator,
    lexicon_fn: LexiconFn = _no_lexicon,
) -> list[RewardRecord]:
    """One REINFORCE ascent step on a single hypothesis.

    The K in-beam advantages are mean-centered; when they all vanish the
    parameters are left untouched.  Returns the per-rollout rewards.
    """
    if not utterance.hypothesis:
        return []
    tag_sequences, records = rollout_rewards(
        model, utterance, index, train_config, ver_config, rng, lexicon_fn
    )
    k = len(records)
    advantages = [r.reward - r.baseline for r in records]
    if all(a == 0.0 for a in advantages):
        return records

    text = utterance.hypothesis
    lexicon = lexicon_fn(text)
    model.params.zero_grads()
    encoded = model.encode(text, lexicon)
    log_probs = [model.log_prob_encoded(encoded, tags) for tags in tag_sequences]
    # minimizing -(1/K) sum_k advantage_k * log P_k ascends the expected reward
    loss = nncore.weighted_sum(log_probs, [-a / k for a in advantages])
    nncore.backward(loss)
    nncore.clip_gradients(model.params, train_config.clip_norm)
    nncore.adam_step(model.params, train_config.eta2)
    return records


@dataclass
class TrainResult:
    model: Tagger  # holds the best-validation parameters
    log: list[dict]
    best_values: dict[str, np.ndarray]
    final_values: dict[str, np.ndarray]
    pretrain_values: dict[str, np.ndarray] | None
    best_epoch: tuple[str, int] | None


def _ensure_tags(utterances: Sequence[Utterance]) -> list[tuple[str, list[str]]]:
    pairs = []
    for utt in utterances:
        tags = utt.transcription_tags
        if tags is None:
            tags = derive_bio_tags(utt.transcription, utt.gold)
        pairs.append((utt.transcription, tags))
    return pairs


def _batches(items: list, size: int) -> list[list]:
    return [items[i : i + size] for i in range(0, len(items), size)]


class _CyclingBatches:
    """Endless shuffled batches over a fixed dataset."""

    def __init__(self, items: list, size: int, rng: np.random.Generator):
        self.items = list(items)
        self.size = size
        self.rng = rng
        self.queue: list[list] = []

    def next(self) -> list:
        if not self.queue:
            order = self.rng.permutation(len(self.items))
            self.queue = _batches([self.items[i] for i in order], self.size)
        return self.queue.pop(0)


def train(
    d_tscp: Sequence[Utterance],
    d_hyp: Sequence[Utterance],
    d_valid: Sequence[Utterance],
    ontology: Ontology,
    dictionary: PronunciationDictionary,
    tagger_config: TaggerConfig,
    train_config: TrainConfig,
    ver_config: VerConfig,
    pretrained_embeddings: dict[str, np.ndarray] | None = None,
    epoch_callback: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run the full two-stage procedure and return the best model.

    The best checkpoint is the one with the highest validation joint
    accuracy seen at any epoch of either stage.  An RL run that never
    touches tagged transcriptions (no pretraining, no interleaved
    supervised batches) is refused unless ``allow_degenerate`` is set.
    """
    from .evaluation import evaluate  # runtime import keeps module import cheap

    uses_tscp = bool(d_tscp) and (train_config.pretrain or train_config.interleave_supervised)
    if train_config.rl and d_hyp and not uses_tscp and not train_config.allow_degenerate:
        raise ValueError(
            "refusing to run RL training without any tagged-transcription signal; "
            "set allow_degenerate to override"
        )

    rng_init = np.random.default_rng([0, train_config.seed])
    rng_dropout = np.random.default_rng([1, train_config.seed])
    rng_shuffle = np.random.default_rng([2, train_config.seed])

    tagged = _ensure_tags(d_tscp)
    texts = [u.transcription for u in list(d_tscp) + list(d_hyp)] + [
        u.hypothesis for u in list(d_tscp) + list(d_hyp)
    ]
    vocab = build_vocab(texts)
    tagset = build_tagset([tags for _, tags in tagged])
    config = replace(tagger_config, tagset=tagset)
    model = Tagger(config, vocab, rng=rng_init, pretrained_embeddings=pretrained_embeddings)

    index = build_index(ontology, dictionary, ver_config)
    lexicon_cache: dict[str, np.ndarray] = {}

    def lexicon_fn(text: str):
        if not config.use_lexicon_features:
            return None
        if text not in lexicon_cache:
            lexicon_cache[text] = lexicon_features(ontology, text)
        return lexicon_cache[text]

    def validate() -> tuple[float, float]:
        report, _ = evaluate(
            model,
            d_valid,
            index,
            ver_config.mode,
            ver_config,
            beam=train_config.eval_beam,
            ontology=ontology,
        )
        return report.f1, report.joint_accuracy

    history: list[dict] = []
    best_values = model.params.copy_values()
    best_joint = -1.0
    best_epoch: tuple[str, int] | None = None
    pretrain_values: dict[str, np.ndarray] | None = None

    def log_epoch(entry: dict) -> None:
        history.append(entry)
        if epoch_callback is not None:
            epoch_callback(entry)
        log.info(
            "%s epoch %d: loss=%.4f reward=%s f1=%.4f joint=%.4f",
            entry["stage"],
            entry["epoch"],
            entry["train_loss"],
            f"{entry['mean_reward']:.3f}" if entry["mean_reward"] is not None else "-",
            entry["val_f1"],
            entry["val_joint"],
        )

    # -- stage 1: supervised pretraining ------------------------------------
    if train_config.pretrain and tagged:
        since_best = 0
        for epoch in range(1, train_config.max_epochs + 1):
            start = time.perf_counter()
            order = rng_shuffle.permutation(len(tagged))
            losses = []
            for batch in _batches([tagged[i] for i in order], train_config.batch_size):
                losses.append(
                    supervised_step(model, batch, train_config, rng_dropout, lexicon_fn)
                )
            val_f1, val_joint = validate()
            log_epoch(
                {
                    "epoch": epoch,
                    "stage": "pretrain",
                    "train_loss": float(np.mean(losses)),
                    "mean_reward": None,
                    "val_f1": val_f1,
                    "val_joint": val_joint,
                    "wall_time": time.perf_counter() - start,
                }
            )
            if val_joint > best_joint:
                best_joint = val_joint
                best_values = model.params.copy_values()
                best_epoch = ("pretrain", epoch)
                since_best = 0
            else:
                since_best += 1
                if since_best >= train_config.patience:
                    break
        # the converged pretraining model bootstraps the RL stage
        model.params.load_values(best_values)
        pretrain_values = model.params.copy_values()

    # -- stage 2: RL adaptation interleaved with supervised batches ---------
    if train_config.rl and d_hyp:
        hyp_list = [u for u in d_hyp if u.hypothesis]
        tscp_batches = (
            _CyclingBatches(tagged, train_config.batch_size, rng_shuffle)
            if train_config.interleave_supervised and tagged
            else None
        )
        since_best = 0
        for epoch in range(1, train_config.max_epochs + 1):
            start = time.perf_counter()
            order = rng_shuffle.permutation(len(hyp_list))
            rewards: list[float] = []
            losses = []
            for batch in _batches([hyp_list[i] for i in order], train_config.batch_size):
                for utt in batch:
                    for record in policy_gradient_step(
                        model, utt, index, train_config, ver_config, rng_dropout, lexicon_fn
                    ):
                        rewards.append(record.reward)
                if tscp_batches is not None:
                    losses.append(
                        supervised_step(
                            model, tscp_batches.next(), train_config, rng_dropout, lexicon_fn
                        )
                    )
            val_f1, val_joint = validate()
            log_epoch(
                {
                    "epoch": epoch,
                    "stage": "rl",
                    "train_loss": float(np.mean(losses)) if losses else 0.0,
                    "mean_reward": float(np.mean(rewards)) if rewards else 0.0,
                    "val_f1": val_f1,
                    "val_joint": val_joint,
                    "wall_time": time.perf_counter() - start,
                }
            )
            if val_joint > best_joint:
                best_joint = val_joint
                best_values = model.params.copy_values()
                best_epoch = ("rl", epoch)
                since_best = 0
            else:
                since_best += 1
                if since_best >= train_config.patience:
                    break

    final_values = model.params.copy_values()
    model.params.load_values(best_values)
    return TrainResult(
        model=model,
        log=history,
        best_values=best_values,
        final_values=final_values,
        pretrain_values=pretrain_values,
        best_epoch=best_epoch,
    )


def da_generate_pseudo(
    model: Tagger,
    utterances: Sequence[Utterance],
    ontology: Ontology | None = None,
) -> list[Utterance]:
    """Greedy-decode hypotheses into a pseudo-tagged corpus.

    The hypothesis text becomes the transcription of the new record, so
    the output can feed supervised training directly.
    """
    pseudo = []
    for utt in utterances:
        if not utt.hypothesis:
            continue
        lexicon = None
        if model.config.use_lexicon_features:
            if ontology is None:
                raise ValueError("model uses lexicon features; an ontology is required")
            lexicon = lexicon_features(ontology, utt.hypothesis)
        # decoding is unmasked, so repair orphan I-tags before emitting
        tags = repair_bio(model.greedy_decode(utt.hypothesis, lexicon))
        pseudo.append(
            Utterance(
                id=f"{utt.id}-gen",
                transcription=utt.hypothesis,
                hypothesis=utt.hypothesis,
                gold=tags_to_triplets(utt.hypothesis, tags),
                transcription_tags=tags,
            )
        )
    return pseudo
