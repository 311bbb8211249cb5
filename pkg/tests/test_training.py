import numpy as np
import pytest

from tests.conftest import identity_pronunciations, tiny_tagger
from vertag import nncore, training
from vertag.corpus import SemanticTriplet, Utterance, derive_bio_tags, triplets_from_dicts
from vertag.ontology import Ontology
from vertag.tagger import TaggerConfig, tags_to_triplets
from vertag.training import (
    TrainConfig,
    compute_reward,
    da_generate_pseudo,
    policy_gradient_step,
    rollout_rewards,
    supervised_step,
    train,
)
from vertag.ver import VerConfig, build_index

GOLD = triplets_from_dicts(
    [
        {"act": "inform", "slot": "dest", "value": "苏州"},
        {"act": "deny", "slot": "dest", "value": "上海"},
    ]
)


def one_pair_setup(candidates=("a",)):
    ontology = Ontology(candidate_map={("inform", "x"): list(candidates)})
    dictionary = identity_pronunciations("ab")
    config = VerConfig()
    return ontology, dictionary, build_index(ontology, dictionary, config), config


class TestComputeReward:
    def test_exact_match_scores_two(self):
        record = compute_reward(GOLD, GOLD)
        assert (record.fp, record.fn, record.reward) == (0, 0, 2.0)

    def test_missing_triplet(self):
        predicted = frozenset([SemanticTriplet("inform", "dest", "苏州")])
        record = compute_reward(GOLD, predicted)
        assert (record.fp, record.fn) == (0, 1)
        assert record.r_triplet == pytest.approx(0.5)
        assert record.r_utt == 0
        assert record.reward == pytest.approx(0.5)

    def test_spurious_triplet(self):
        predicted = GOLD | {SemanticTriplet("inform", "dest", "杭州")}
        record = compute_reward(GOLD, predicted)
        assert (record.fp, record.fn) == (1, 0)
        assert record.reward == pytest.approx(0.5)

    def test_empty_gold_guard(self):
        record = compute_reward(frozenset(), frozenset([SemanticTriplet("a", "s", "v")]))
        assert record.r_triplet == pytest.approx(0.0)  # 1 - 1/max(0,1)
        assert record.r_utt == 0

    def test_brute_force_over_random_pairs(self):
        rng = np.random.default_rng(0)
        pool = [SemanticTriplet(f"a{i}", "s", f"v{j}") for i in range(3) for j in range(3)]
        for _ in range(2000):
            gold = frozenset(t for t in pool if rng.random() < 0.3)
            pred = frozenset(t for t in pool if rng.random() < 0.3)
            record = compute_reward(gold, pred)
            fp = sum(1 for t in pred if t not in gold)
            fn = sum(1 for t in gold if t not in pred)
            assert (record.fp, record.fn) == (fp, fn)
            expected = 1 - (fp + fn) / max(len(gold), 1) + (1 if gold == pred else 0)
            assert record.reward == pytest.approx(expected)
            assert (record.reward == 2.0) == (gold == pred)


class TestSupervisedStep:
    def test_uniform_model_loss(self):
        model = tiny_tagger(["O", "B-a-s", "I-a-s"])
        for var in model.params.params.values():
            var.value[...] = 0.0
        config = TrainConfig(eta1=0.0)  # measure only, do not move
        rng = np.random.default_rng(0)
        loss = supervised_step(model, [("abcd", ["O"] * 4)], config, rng)
        assert loss == pytest.approx(4 * np.log(3))

    def test_loss_decreases_on_fixed_batch(self):
        for seed in range(5):
            model = tiny_tagger(["O", "B-a-s"], seed=seed, dropout=0.0)
            batch = [("ab", ["O", "B-a-s"]), ("ba", ["B-a-s", "O"])]
            config = TrainConfig(eta1=1e-2)
            rng = np.random.default_rng(seed)
            before = float(
                nncore.vsum(
                    [nncore.scale(model.sequence_log_prob(t, g), -1.0) for t, g in batch]
                ).value
            )
            for _ in range(3):
                supervised_step(model, batch, config, rng)
            after = float(
                nncore.vsum(
                    [nncore.scale(model.sequence_log_prob(t, g), -1.0) for t, g in batch]
                ).value
            )
            assert after < before

    def test_unaligned_pair_rejected_before_update(self):
        model = tiny_tagger(["O", "B-a-s"])
        snapshot = model.params.copy_values()
        with pytest.raises(ValueError):
            supervised_step(
                model,
                [("ab", ["O", "O"]), ("abc", ["O"])],
                TrainConfig(),
                np.random.default_rng(0),
            )
        for name, value in snapshot.items():
            assert (model.params[name].value == value).all()


class TestPolicyGradient:
    def make_model(self, seed=0):
        # tagset of 2 over a single character: the rollout space is {O, B}^T
        return tiny_tagger(["O", "B-inform-x"], alphabet="ab", seed=seed, dropout=0.0)

    def test_rewards_and_baseline(self):
        model = self.make_model()
        _, _, index, ver_config = one_pair_setup(candidates=["a"])
        utterance = Utterance("u", "a", "a", frozenset([SemanticTriplet("inform", "x", "a")]))
        config = TrainConfig(rollout_beam=2)
        _, records = rollout_rewards(
            model, utterance, index, config, ver_config, np.random.default_rng(0)
        )
        rewards = sorted(r.reward for r in records)
        assert rewards == [0.0, 2.0]
        assert all(r.baseline == pytest.approx(1.0) for r in records)
        advantages = [r.reward - r.baseline for r in records]
        assert sum(advantages) == pytest.approx(0.0, abs=1e-12)

    def test_update_moves_log_probs_in_reward_direction(self):
        for seed in range(5):
            model = self.make_model(seed)
            _, _, index, ver_config = one_pair_setup(candidates=["a"])
            utterance = Utterance(
                "u", "a", "a", frozenset([SemanticTriplet("inform", "x", "a")])
            )
            config = TrainConfig(rollout_beam=2, eta2=1e-4)
            with nncore.no_grad():
                before_win = float(model.sequence_log_prob("a", ["B-inform-x"]).value)
                before_lose = float(model.sequence_log_prob("a", ["O"]).value)
            records = policy_gradient_step(
                model, utterance, index, config, ver_config, np.random.default_rng(0)
            )
            assert len(records) == 2
            with nncore.no_grad():
                after_win = float(model.sequence_log_prob("a", ["B-inform-x"]).value)
                after_lose = float(model.sequence_log_prob("a", ["O"]).value)
            assert after_win > before_win
            assert after_lose < before_lose

    def test_equal_rewards_leave_parameters_untouched(self):
        model = self.make_model()
        # no candidates match anything the model can produce: every rollout
        # recovers to the empty set against a non-empty gold -> equal rewards
        _, _, index, ver_config = one_pair_setup(candidates=["bbb"])
        utterance = Utterance("u", "aa", "aa", frozenset([SemanticTriplet("q", "z", "qq")]))
        # give the optimizer momentum so a zero-gradient Adam step would move
        config = TrainConfig(rollout_beam=4, eta2=1e-3)
        model.params["out.b"].grad = np.ones_like(model.params["out.b"].value)
        nncore.adam_step(model.params, 1e-3)
        snapshot = model.params.copy_values()
        records = policy_gradient_step(
            model, utterance, index, config, ver_config, np.random.default_rng(0)
        )
        assert all(r.reward == records[0].reward for r in records)
        for name, value in snapshot.items():
            assert (model.params[name].value == value).all()

    def test_baseline_invariance_at_gradient_level(self):
        model = self.make_model(3)
        text = "ab"
        sequences = [["O", "O"], ["B-inform-x", "O"], ["O", "B-inform-x"]]
        rewards = [0.3, 1.7, 0.5]
        shift = 10.0

        def gradients(reward_values):
            baseline = sum(reward_values) / len(reward_values)
            advantages = [r - baseline for r in reward_values]
            model.params.zero_grads()
            encoded = model.encode(text)
            log_probs = [model.log_prob_encoded(encoded, tags) for tags in sequences]
            loss = nncore.weighted_sum(log_probs, [-a / len(advantages) for a in advantages])
            nncore.backward(loss)
            return {
                name: (var.grad.copy() if var.grad is not None else 0.0)
                for name, var in model.params.items()
            }

        base = gradients(rewards)
        shifted = gradients([r + shift for r in rewards])
        for name in base:
            assert np.allclose(base[name], shifted[name], atol=1e-12)

    def test_empty_hypothesis_skipped(self):
        model = self.make_model()
        _, _, index, ver_config = one_pair_setup()
        utterance = Utterance("u", "a", "", frozenset())
        assert (
            policy_gradient_step(
                model, utterance, index, TrainConfig(), ver_config, np.random.default_rng(0)
            )
            == []
        )


def toy_training_data(n=24, seed=0):
    """Tiny two-slot domain over a handful of characters."""
    rng = np.random.default_rng(seed)
    dest = ["ab", "cd"]
    ontology = Ontology(candidate_map={("inform", "dest"): dest})
    dictionary = identity_pronunciations("abcdxyz")
    utterances = []
    for i in range(n):
        value = dest[int(rng.integers(2))]
        text = "x" + value + "y"
        gold = frozenset([SemanticTriplet("inform", "dest", value)])
        hyp = text if rng.random() < 0.5 else text.replace("b", "z").replace("d", "z")
        utterances.append(
            Utterance(f"u{i}", text, hyp, gold, derive_bio_tags(text, gold))
        )
    return ontology, dictionary, utterances


class TestTrainLoop:
    def small_configs(self, **overrides):
        tagger_config = TaggerConfig(
            embedding_dim=6, hidden_units=6, dropout=0.2, use_lexicon_features=False
        )
        defaults = dict(
            eta1=5e-3, eta2=1e-3, rollout_beam=3, eval_beam=2,
            batch_size=8, max_epochs=3, patience=2, seed=1,
        )
        defaults.update(overrides)
        return tagger_config, TrainConfig(**defaults), VerConfig()

    def test_smoke_and_determinism(self):
        ontology, dictionary, data = toy_training_data()
        tagger_config, train_config, ver_config = self.small_configs()

        def run():
            return train(
                data[:16], data[:16], data[16:], ontology, dictionary,
                tagger_config, train_config, ver_config,
            )

        first = run()
        second = run()
        assert [e["stage"] for e in first.log] == [e["stage"] for e in second.log]
        for name in first.best_values:
            assert (first.best_values[name] == second.best_values[name]).all()
        stages = {entry["stage"] for entry in first.log}
        assert stages == {"pretrain", "rl"}
        for entry in first.log:
            assert {"epoch", "stage", "train_loss", "mean_reward", "val_f1",
                    "val_joint", "wall_time"} <= set(entry)

    def test_empty_hyp_corpus_is_pure_pretraining(self):
        ontology, dictionary, data = toy_training_data()
        tagger_config, train_config, ver_config = self.small_configs()
        result = train(
            data[:16], [], data[16:], ontology, dictionary,
            tagger_config, train_config, ver_config,
        )
        assert {entry["stage"] for entry in result.log} == {"pretrain"}
        assert result.pretrain_values is not None

    def test_degenerate_rl_refused_and_override(self):
        ontology, dictionary, data = toy_training_data()
        tagger_config, train_config, ver_config = self.small_configs(
            pretrain=False, interleave_supervised=False, max_epochs=1
        )
        with pytest.raises(ValueError, match="allow_degenerate"):
            train(
                data[:8], data[:8], data[16:], ontology, dictionary,
                tagger_config, train_config, ver_config,
            )
        tagger_config, train_config, ver_config = self.small_configs(
            pretrain=False, interleave_supervised=False, max_epochs=1, allow_degenerate=True
        )
        result = train(
            data[:8], data[:8], data[16:], ontology, dictionary,
            tagger_config, train_config, ver_config,
        )
        assert {entry["stage"] for entry in result.log} == {"rl"}

    def test_interleaving_counts_balance(self, monkeypatch):
        ontology, dictionary, data = toy_training_data()
        tagger_config, train_config, ver_config = self.small_configs(max_epochs=1, patience=1)
        counts = {"rl_batches": 0, "supervised": 0}
        original_pg = training.policy_gradient_step
        original_sup = training.supervised_step
        seen_groups = []

        def counting_pg(*args, **kwargs):
            seen_groups.append("pg")
            return original_pg(*args, **kwargs)

        def counting_sup(*args, **kwargs):
            counts["supervised"] += 1
            return original_sup(*args, **kwargs)

        monkeypatch.setattr(training, "policy_gradient_step", counting_pg)
        monkeypatch.setattr(training, "supervised_step", counting_sup)
        train(
            data[:16], data[:16], data[16:], ontology, dictionary,
            tagger_config, train_config, ver_config,
        )
        # one supervised batch follows each of the ceil(16/8) = 2 RL batches,
        # both in pretraining and in the RL stage epochs
        rl_epochs = 1
        pretrain_epochs = counts["supervised"] - 2 * rl_epochs * 1
        assert counts["supervised"] >= 2
        assert len(seen_groups) == 16 * rl_epochs

    def test_rng_streams_are_per_purpose(self):
        ontology, dictionary, data = toy_training_data()
        tagger_config, train_config, ver_config = self.small_configs(max_epochs=1)
        result_a = train(data[:8], [], data[16:], ontology, dictionary,
                         tagger_config, train_config, ver_config)
        tagger_config, train_config, ver_config = self.small_configs(max_epochs=1, seed=99)
        result_b = train(data[:8], [], data[16:], ontology, dictionary,
                         tagger_config, train_config, ver_config)
        diff = any(
            not (result_a.best_values[n] == result_b.best_values[n]).all()
            for n in result_a.best_values
        )
        assert diff


class TestDaGeneratePseudo:
    def memorizing_model(self, data):
        model = tiny_tagger(
            ["O", "B-inform-dest", "I-inform-dest"],
            alphabet="abcdxyz",
            embedding_dim=8,
            hidden_units=8,
            seed=3,
        )
        pairs = [(u.transcription, u.transcription_tags) for u in data]
        config = TrainConfig(eta1=2e-2)
        rng = np.random.default_rng(0)
        for _ in range(200):
            if supervised_step(model, pairs, config, rng) < 2e-3:
                break
        return model

    def test_pseudo_labels(self):
        import io

        from vertag.corpus import parse_corpus, write_corpus

        _, _, data = toy_training_data()
        model = self.memorizing_model(data)

        pseudo = da_generate_pseudo(model, data[16:20])
        assert all(u.transcription == u.hypothesis for u in pseudo)
        assert all(u.id.endswith("-gen") for u in pseudo)

        buf = io.StringIO()
        write_corpus(pseudo, buf)
        parsed = parse_corpus(io.StringIO(buf.getvalue()))
        assert len(parsed) == len(pseudo)
        for a, b in zip(parsed, pseudo):
            assert a.transcription_tags == b.transcription_tags
            assert a.gold == b.gold

        # a converged model reproduces the derived tags on clean text
        clean = data[0]
        pseudo_clean = da_generate_pseudo(
            model, [Utterance("c", clean.transcription, clean.transcription, clean.gold)]
        )
        assert pseudo_clean[0].transcription_tags == clean.transcription_tags

        # pseudo corpus feeds supervised training without errors
        batch = [(u.transcription, u.transcription_tags) for u in pseudo]
        supervised_step(model, batch, TrainConfig(eta1=1e-3), np.random.default_rng(0))
