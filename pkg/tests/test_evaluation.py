import math

import pytest

from tests.conftest import identity_pronunciations
from vertag.corpus import SemanticTriplet, Utterance, derive_bio_tags
from vertag.evaluation import cer_bucket_report, evaluate, score_sets
from vertag.ontology import Ontology
from vertag.tagger import TaggerConfig
from vertag.ver import RecoveryMode, VerConfig, build_index


class CannedModel:
    """Stands in for a Tagger: fixed tags per hypothesis text."""

    def __init__(self, answers: dict[str, list[str]]):
        self.answers = answers
        self.config = TaggerConfig(tagset=["O", "B-a-s"], use_lexicon_features=False)

    def beam_search(self, text, beam_width, k_return, lexicon=None):
        tags = self.answers.get(text, ["O"] * len(text))
        return [(tags, 0.0)]


def make_index(candidates=("ab", "cd")):
    ontology = Ontology(candidate_map={("a", "s"): list(candidates)})
    dictionary = identity_pronunciations("abcdxyz")
    return build_index(ontology, dictionary, VerConfig())


def utterance(uid, text, values, hyp=None):
    gold = frozenset(SemanticTriplet("a", "s", v) for v in values)
    tags = derive_bio_tags(text, gold)
    return Utterance(uid, text, hyp if hyp is not None else text, gold, tags)


class TestEvaluate:
    def test_perfect_predictions(self):
        corpus = [utterance("u1", "xaby", ["ab"]), utterance("u2", "cdz", ["cd"])]
        model = CannedModel({u.hypothesis: u.transcription_tags for u in corpus})
        report, records = evaluate(model, corpus, make_index(), RecoveryMode.NONE, VerConfig())
        assert report.f1 == 1.0
        assert report.joint_accuracy == 1.0
        assert len(records) == 2

    def test_hand_micro_average(self):
        # two utterances with two gold triplets each; the second prediction
        # finds one of them plus one spurious triplet
        corpus = [
            utterance("u1", "abxcd", ["ab", "cd"]),
            utterance("u2", "abycd", ["ab", "cd"]),
        ]
        model = CannedModel(
            {
                "abxcd": derive_bio_tags(
                    "abxcd", frozenset({SemanticTriplet("a", "s", "ab"), SemanticTriplet("a", "s", "cd")})
                ),
                "abycd": ["B-a-s", "I-a-s", "B-a-s", "O", "O"],  # gets "ab" and a wrong "y"-span
            }
        )
        report, _ = evaluate(model, corpus, make_index(), RecoveryMode.NONE, VerConfig())
        assert (report.tp, report.fp, report.fn) == (3, 1, 1)
        assert report.precision == pytest.approx(0.75)
        assert report.recall == pytest.approx(0.75)
        assert report.f1 == pytest.approx(0.75)
        assert report.joint_accuracy == pytest.approx(0.5)

    def test_all_outside_model(self):
        corpus = [utterance("u1", "xaby", ["ab"]), Utterance("u2", "zz", "zz", frozenset())]
        model = CannedModel({})
        report, _ = evaluate(model, corpus, make_index(), RecoveryMode.NONE, VerConfig())
        assert report.f1 == 0.0
        assert report.precision == 0.0
        assert report.joint_accuracy == pytest.approx(0.5)  # the empty-gold utterance

    def test_empty_hypothesis_predicts_nothing(self):
        corpus = [Utterance("u1", "ab", "", frozenset({SemanticTriplet("a", "s", "ab")}))]
        model = CannedModel({})
        report, records = evaluate(model, corpus, make_index(), RecoveryMode.NONE, VerConfig())
        assert (report.tp, report.fp, report.fn) == (0, 0, 1)
        assert records[0]["cer"] == 1.0

    def test_mode_count_ordering(self):
        # "xy" is not a candidate: None keeps it (FP), Delete removes it,
        # VER may replace it; invalid values never survive VER or Delete
        corpus = [utterance("u1", "abxy", ["ab"])]
        model = CannedModel({"abxy": ["B-a-s", "I-a-s", "B-a-s", "I-a-s"]})
        index = make_index()
        counts = {}
        for mode in RecoveryMode:
            report, _ = evaluate(model, corpus, index, mode, VerConfig())
            counts[mode] = report.fp
        assert counts[RecoveryMode.DELETE] <= counts[RecoveryMode.NONE]
        assert counts[RecoveryMode.DELETE] == 0

    def test_ver_output_always_in_ontology(self):
        corpus = [utterance("u1", "abxy", ["ab"])]
        model = CannedModel({"abxy": ["B-a-s", "I-a-s", "B-a-s", "I-a-s"]})
        index = make_index()
        _, records = evaluate(model, corpus, index, RecoveryMode.VER, VerConfig())
        members = {"ab", "cd"}
        for record in records:
            assert all(d["value"] in members for d in record["predicted"])

    def test_threads_do_not_change_results(self):
        corpus = [utterance(f"u{i}", "xaby", ["ab"]) for i in range(8)]
        model = CannedModel({"xaby": ["O", "B-a-s", "I-a-s", "O"]})
        index = make_index()
        seq, seq_records = evaluate(model, corpus, index, RecoveryMode.VER, VerConfig(), threads=1)
        par, par_records = evaluate(model, corpus, index, RecoveryMode.VER, VerConfig(), threads=4)
        assert seq == par
        assert seq_records == par_records

    def test_report_matches_record_recount(self):
        corpus = [
            utterance("u1", "abxcd", ["ab", "cd"]),
            utterance("u2", "abycd", ["ab"]),
            Utterance("u3", "zz", "zz", frozenset()),
        ]
        model = CannedModel({"abycd": ["B-a-s", "I-a-s", "O", "B-a-s", "I-a-s"]})
        report, records = evaluate(model, corpus, make_index(), RecoveryMode.NONE, VerConfig())
        tp = sum(r["tp"] for r in records)
        fp = sum(r["fp"] for r in records)
        fn = sum(r["fn"] for r in records)
        assert (tp, fp, fn) == (report.tp, report.fp, report.fn)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        assert report.f1 == pytest.approx(f1)
        assert report.joint_accuracy == pytest.approx(
            sum(r["exact"] for r in records) / len(records)
        )


class TestScoreSets:
    def test_counts(self):
        gold = frozenset({SemanticTriplet("a", "s", "1"), SemanticTriplet("a", "s", "2")})
        pred = frozenset({SemanticTriplet("a", "s", "2"), SemanticTriplet("a", "s", "3")})
        assert score_sets(gold, pred) == (1, 1, 1)


def fake_record(cer, tp, fp, fn):
    return {"cer": cer, "tp": tp, "fp": fp, "fn": fn, "exact": fp == 0 and fn == 0}


class TestCerBuckets:
    def test_all_clean_in_first_bucket(self):
        records = [fake_record(0.0, 2, 0, 0) for _ in range(5)]
        rows = cer_bucket_report(records)
        assert rows[0][2] == 5
        assert sum(count for _, _, count, _ in rows) == 5

    def test_partition_counts(self):
        records = [fake_record(c, 1, 0, 0) for c in (0.0, 0.05, 0.1, 0.35, 0.9, 2.5)]
        rows = cer_bucket_report(records)
        assert sum(count for _, _, count, _ in rows) == len(records)
        assert rows[-1][1] == math.inf
        assert rows[-1][2] == 2  # 0.9 and 2.5 both land in [0.9, inf)

    def test_merged_buckets_reproduce_global_f1(self):
        records = [
            fake_record(0.0, 3, 1, 0),
            fake_record(0.15, 1, 0, 2),
            fake_record(0.4, 0, 2, 1),
            fake_record(1.2, 2, 0, 0),
        ]
        rows = cer_bucket_report(records, edges=[0.0])  # one bucket spanning [0, inf)
        tp = sum(r["tp"] for r in records)
        fp = sum(r["fp"] for r in records)
        fn = sum(r["fn"] for r in records)
        precision, recall = tp / (tp + fp), tp / (tp + fn)
        assert rows[0][3] == pytest.approx(2 * precision * recall / (precision + recall))
        assert rows[0][2] == len(records)

    def test_bad_edges_rejected(self):
        with pytest.raises(ValueError):
            cer_bucket_report([], edges=[0.0, 0.5, 0.5])
        with pytest.raises(ValueError):
            cer_bucket_report([], edges=[0.5, 0.1])
