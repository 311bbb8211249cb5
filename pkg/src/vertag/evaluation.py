"""Triplet-level F1 and utterance-level accuracy under post-processing.

Counts are micro-averaged over the whole corpus.  Every evaluation also
produces per-utterance prediction records so any reported number can be
recomputed offline, and a CER-bucketed F1 breakdown for robustness
analysis.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from .corpus import TripletSet, Utterance, character_error_rate, triplets_to_dicts
from .ontology import Ontology, lexicon_features
from .tagger import Tagger, tags_to_triplets
from .ver import NgramIndex, RecoveryMode, VerConfig, recover

DEFAULT_BUCKET_EDGES = [round(0.1 * i, 1) for i in range(10)] + [math.inf]


@dataclass
class EvalReport:
    """Micro precision/recall/F1 plus exact-set-match accuracy."""

    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    joint_accuracy: float
    utterances: int
    buckets: list[tuple[float, float, int, float]] = field(default_factory=list)


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    # 0/0 is defined as 0 so degenerate all-O models score cleanly
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def score_sets(gold: TripletSet, predicted: TripletSet) -> tuple[int, int, int]:
    tp = len(gold & predicted)
    return tp, len(predicted - gold), len(gold - predicted)


def evaluate(
    model: Tagger,
    utterances: Sequence[Utterance],
    index: NgramIndex,
    mode: RecoveryMode | str,
    ver_config: VerConfig,
    beam: int = 5,
    ontology: Ontology | None = None,
    threads: int = 1,
) -> tuple[EvalReport, list[dict]]:
    """Decode every hypothesis, post-process, and accumulate micro counts.

    Returns the report and the per-utterance prediction records that back
    it.  ``mode`` overrides the config's post-processing mode.
    """
    mode = RecoveryMode(mode)
    config = VerConfig(n=ver_config.n, blend=ver_config.blend, threshold=ver_config.threshold, mode=mode)
    if model.config.use_lexicon_features and ontology is None:
        raise ValueError("model uses lexicon features; an ontology is required")

    def predict(utt: Utterance) -> tuple[list[str], TripletSet]:
        if not utt.hypothesis:
            return [], frozenset()
        lexicon = (
            lexicon_features(ontology, utt.hypothesis)
            if model.config.use_lexicon_features
            else None
        )
        tags = model.beam_search(utt.hypothesis, beam, 1, lexicon)[0][0]
        return tags, tags_to_triplets(utt.hypothesis, tags)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            predictions = list(pool.map(predict, utterances))
    else:
        predictions = [predict(utt) for utt in utterances]

    records: list[dict] = []
    tp = fp = fn = exact = 0
    for utt, (tags, raw) in zip(utterances, predictions):
        recovered = recover(raw, index, config)
        utt_tp, utt_fp, utt_fn = score_sets(utt.gold, recovered)
        utt_exact = recovered == utt.gold
        tp += utt_tp
        fp += utt_fp
        fn += utt_fn
        exact += utt_exact
        records.append(
            {
                "id": utt.id,
                "cer": character_error_rate(utt.hypothesis, utt.transcription),
                "tags": tags,
                "predicted_raw": triplets_to_dicts(raw),
                "predicted": triplets_to_dicts(recovered),
                "gold": triplets_to_dicts(utt.gold),
                "tp": utt_tp,
                "fp": utt_fp,
                "fn": utt_fn,
                "exact": utt_exact,
            }
        )

    precision, recall, f1 = _prf(tp, fp, fn)
    report = EvalReport(
        tp=tp,
        fp=fp,
        fn=fn,
        precision=precision,
        recall=recall,
        f1=f1,
        joint_accuracy=exact / len(utterances) if utterances else 0.0,
        utterances=len(utterances),
        buckets=cer_bucket_report(records),
    )
    return report, records


def cer_bucket_report(
    records: Sequence[dict], edges: Sequence[float] | None = None
) -> list[tuple[float, float, int, float]]:
    """Micro F1 per CER bucket [edge_i, edge_{i+1}).

    Edges must be strictly increasing; an infinite upper edge is appended
    when missing so every utterance lands in a bucket.
    """
    edges = list(DEFAULT_BUCKET_EDGES if edges is None else edges)
    if edges and edges[-1] != math.inf:
        edges.append(math.inf)
    if len(edges) < 2 or any(a >= b for a, b in zip(edges, edges[1:])):
        raise ValueError(f"bucket edges must be strictly increasing, got {edges}")

    rows = []
    for lo, hi in zip(edges, edges[1:]):
        bucket = [r for r in records if lo <= r["cer"] < hi]
        _, _, f1 = _prf(
            sum(r["tp"] for r in bucket),
            sum(r["fp"] for r in bucket),
            sum(r["fn"] for r in bucket),
        )
        rows.append((lo, hi, len(bucket), f1))
    return rows
