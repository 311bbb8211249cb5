"""Command-line entry point: synth, train, eval, correct.

Every command takes a JSON config file plus ``--set key=value``
overrides, and is deterministic given config and seed.  Output files
embed the config hash and seed so results can always be traced back.

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import evaluation, synth, training
from .corpus import CorpusError, NoiseConfig, parse_corpus, write_corpus
from .ontology import OntologyError, lexicon_features, load_ontology, load_pronunciations
from .tagger import Tagger, TaggerConfig, load_embedding_file, tags_to_triplets
from .ver import RecoveryMode, VerConfig, build_index, recover

log = logging.getLogger(__name__)


class ConfigError(Exception):
    """Bad configuration: missing paths, unknown keys, invalid values."""


DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 17,
    "threads": 1,
    "paths": {
        "train_tscp": None,
        "train_hyp": None,
        "valid": None,
        "test": None,
        "ontology": None,
        "pronunciations": None,
        "embeddings": None,  # optional pre-trained char embedding text file
        "checkpoint": None,  # defaults to <output_dir>/best.ckpt for eval/correct
        "output_dir": "out",
    },
    "tagger": {
        "embedding_dim": 200,
        "hidden_units": 256,
        "dropout": 0.5,
        "use_lexicon_features": True,
    },
    "train": {
        "eta1": 1e-3,
        "eta2": 5e-4,
        "rollout_beam": 10,
        "eval_beam": 5,
        "clip_norm": 5.0,
        "batch_size": 32,
        "max_epochs": 50,
        "patience": 5,
        "pretrain": True,
        "rl": True,
        "interleave_supervised": True,
        "sample_rollouts": False,
        "allow_degenerate": False,
    },
    "ver": {
        "n": 2,
        "lambda": 0.5,
        "threshold": 0.5,
        "mode": "ver",
    },
    "noise": {
        "substitution_rate": 0.18,
        "deletion_rate": 0.04,
        "insertion_rate": 0.04,
        "phonetic_bias": 0.8,
    },
    "synth": {
        "size": 2500,
        "splits": [0.8, 0.1, 0.1],
        "jitter": [0.4, 1.6],
        "templates": [],
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    merged = dict(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            merged[key] = _merge(base[key], value, here)
        else:
            merged[key] = value
    return merged


def _apply_override(config: dict, assignment: str) -> None:
    key, sep, raw = assignment.partition("=")
    if not sep:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = key.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config section {part!r} in {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def load_config(
    config_path: str | None,
    overrides: Sequence[str] = (),
    seed: int | None = None,
    threads: int | None = None,
) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if config_path is not None:
        try:
            with open(config_path, encoding="utf-8") as fh:
                config = _merge(config, json.load(fh))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    for assignment in overrides:
        _apply_override(config, assignment)
    if seed is not None:
        config["seed"] = seed
    if threads is not None:
        config["threads"] = threads
    return config


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def _meta(config: dict, **extra) -> dict:
    return {"config_hash": config_hash(config), "seed": config["seed"], **extra}


def _require_path(config: dict, key: str) -> Path:
    value = config["paths"].get(key)
    if not value:
        raise ConfigError(f"paths.{key} is required for this command")
    path = Path(value)
    if not path.exists():
        raise ConfigError(f"paths.{key} does not exist: {path}")
    return path


def _output_dir(config: dict) -> Path:
    out = Path(config["paths"]["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _tagger_config(config: dict) -> TaggerConfig:
    t = config["tagger"]
    return TaggerConfig(
        embedding_dim=t["embedding_dim"],
        hidden_units=t["hidden_units"],
        dropout=t["dropout"],
        use_lexicon_features=t["use_lexicon_features"],
    )


def _train_config(config: dict) -> training.TrainConfig:
    t = config["train"]
    return training.TrainConfig(
        eta1=t["eta1"],
        eta2=t["eta2"],
        rollout_beam=t["rollout_beam"],
        eval_beam=t["eval_beam"],
        clip_norm=t["clip_norm"],
        batch_size=t["batch_size"],
        max_epochs=t["max_epochs"],
        patience=t["patience"],
        seed=config["seed"],
        pretrain=t["pretrain"],
        rl=t["rl"],
        interleave_supervised=t["interleave_supervised"],
        sample_rollouts=t["sample_rollouts"],
        allow_degenerate=t["allow_degenerate"],
    )


def _ver_config(config: dict) -> VerConfig:
    v = config["ver"]
    return VerConfig(n=v["n"], blend=v["lambda"], threshold=v["threshold"], mode=v["mode"])


def _noise_config(config: dict, seed: int) -> NoiseConfig:
    n = config["noise"]
    return NoiseConfig(
        substitution_rate=n["substitution_rate"],
        deletion_rate=n["deletion_rate"],
        insertion_rate=n["insertion_rate"],
        phonetic_bias=n["phonetic_bias"],
        seed=seed,
    )


def _load_domain(config: dict):
    with _require_path(config, "ontology").open(encoding="utf-8") as fh:
        ontology = load_ontology(fh)
    with _require_path(config, "pronunciations").open(encoding="utf-8") as fh:
        dictionary = load_pronunciations(fh)
    return ontology, dictionary


def _load_corpus(config: dict, key: str):
    with _require_path(config, key).open(encoding="utf-8") as fh:
        return parse_corpus(fh)


# --------------------------------------------------------------------------
# Commands


def cmd_synth(config: dict) -> int:
    ontology, dictionary = _load_domain(config)
    patterns = config["synth"]["templates"]
    if not patterns:
        raise ConfigError("synth.templates must list at least one pattern")
    templates = [synth.Template(p) for p in patterns]
    try:
        synth.validate_templates(templates, ontology)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    synth_config = synth.SynthConfig(
        size=config["synth"]["size"],
        splits=tuple(config["synth"]["splits"]),
        jitter=tuple(config["synth"]["jitter"]),
    )
    noise = _noise_config(config, seed=config["seed"])
    train, valid, test = synth.generate_corpus(
        ontology, dictionary, templates, synth_config, noise, config["seed"]
    )
    out = _output_dir(config)
    for name, split in [("train", train), ("valid", valid), ("test", test)]:
        with (out / f"{name}.jsonl").open("w", encoding="utf-8") as fh:
            write_corpus(split, fh, meta=_meta(config, split=name, count=len(split)))
    log.info("wrote %d/%d/%d utterances to %s", len(train), len(valid), len(test), out)
    return 0


def cmd_train(config: dict) -> int:
    ontology, dictionary = _load_domain(config)
    d_tscp = _load_corpus(config, "train_tscp")
    train_config = _train_config(config)
    d_hyp = _load_corpus(config, "train_hyp") if train_config.rl else []
    d_valid = _load_corpus(config, "valid")
    embeddings = None
    if config["paths"]["embeddings"]:
        with _require_path(config, "embeddings").open(encoding="utf-8") as fh:
            embeddings = load_embedding_file(fh)

    out = _output_dir(config)
    log_path = out / "train_log.jsonl"
    with log_path.open("w", encoding="utf-8") as log_fh:
        log_fh.write(json.dumps({"_meta": _meta(config)}, ensure_ascii=False) + "\n")

        def on_epoch(entry: dict) -> None:
            log_fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
            log_fh.flush()

        result = training.train(
            d_tscp,
            d_hyp,
            d_valid,
            ontology,
            dictionary,
            _tagger_config(config),
            train_config,
            _ver_config(config),
            pretrained_embeddings=embeddings,
            epoch_callback=on_epoch,
        )

    meta = _meta(config, best_epoch=list(result.best_epoch) if result.best_epoch else None)
    with (out / "best.ckpt").open("wb") as fh:
        result.model.save(fh, meta)
    snapshot = result.model.params.copy_values()
    result.model.params.load_values(result.final_values)
    with (out / "last.ckpt").open("wb") as fh:
        result.model.save(fh, _meta(config, stage="final"))
    result.model.params.load_values(snapshot)
    if result.pretrain_values is not None:
        snapshot = result.model.params.copy_values()
        result.model.params.load_values(result.pretrain_values)
        with (out / "pretrain.ckpt").open("wb") as fh:
            result.model.save(fh, _meta(config, stage="pretrain"))
        result.model.params.load_values(snapshot)
    log.info("training done; best epoch %s", result.best_epoch)
    return 0


def _checkpoint_path(config: dict) -> Path:
    configured = config["paths"].get("checkpoint")
    path = Path(configured) if configured else Path(config["paths"]["output_dir"]) / "best.ckpt"
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return path


def cmd_eval(config: dict, postproc: str) -> int:
    ontology, dictionary = _load_domain(config)
    corpus = _load_corpus(config, "test")
    with _checkpoint_path(config).open("rb") as fh:
        model, _ = Tagger.load(fh)
    ver_config = _ver_config(config)
    index = build_index(ontology, dictionary, ver_config)
    modes = (
        [RecoveryMode.NONE, RecoveryMode.DELETE, RecoveryMode.VER]
        if postproc == "all"
        else [RecoveryMode(postproc)]
    )
    out = _output_dir(config)
    for mode in modes:
        report, records = evaluation.evaluate(
            model,
            corpus,
            index,
            mode,
            ver_config,
            beam=config["train"]["eval_beam"],
            ontology=ontology if model.config.use_lexicon_features else None,
            threads=config["threads"],
        )
        payload = {
            "meta": _meta(config, postproc=mode.value),
            "tp": report.tp,
            "fp": report.fp,
            "fn": report.fn,
            "precision": report.precision,
            "recall": report.recall,
            "f1": report.f1,
            "joint_accuracy": report.joint_accuracy,
            "utterances": report.utterances,
            "buckets": [list(row) for row in report.buckets],
        }
        with (out / f"report_{mode.value}.json").open("w", encoding="utf-8") as fh:
            json.dump(payload, fh, ensure_ascii=False, indent=2)
            fh.write("\n")
        with (out / f"predictions_{mode.value}.jsonl").open("w", encoding="utf-8") as fh:
            fh.write(json.dumps({"_meta": _meta(config, postproc=mode.value)}) + "\n")
            for record in records:
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")
        with (out / f"cer_buckets_{mode.value}.tsv").open("w", encoding="utf-8") as fh:
            fh.write(f"# config={config_hash(config)} seed={config['seed']} mode={mode.value}\n")
            fh.write("cer_low\tcer_high\tcount\tf1\n")
            for lo, hi, count, f1 in report.buckets:
                fh.write(f"{lo}\t{hi}\t{count}\t{f1:.6f}\n")
        log.info("mode %s: F1=%.4f joint=%.4f", mode.value, report.f1, report.joint_accuracy)
    return 0


def cmd_correct(config: dict, input_path: str, output_path: str, tag: bool) -> int:
    ontology, dictionary = _load_domain(config)
    ver_config = _ver_config(config)
    # this command always applies full recovery, whatever the eval mode is
    ver_config = VerConfig(
        n=ver_config.n, blend=ver_config.blend, threshold=ver_config.threshold,
        mode=RecoveryMode.VER,
    )
    index = build_index(ontology, dictionary, ver_config)
    model = None
    if tag:
        with _checkpoint_path(config).open("rb") as fh:
            model, _ = Tagger.load(fh)
    with open(input_path, encoding="utf-8") as fh:
        utterances = parse_corpus(fh)
    for utt in utterances:
        triplets = utt.gold
        if model is not None and utt.hypothesis:
            lexicon = (
                lexicon_features(ontology, utt.hypothesis)
                if model.config.use_lexicon_features
                else None
            )
            tags = model.beam_search(utt.hypothesis, config["train"]["eval_beam"], 1, lexicon)[0][0]
            triplets = tags_to_triplets(utt.hypothesis, tags)
            utt.transcription_tags = None  # the old alignment no longer matches
        utt.gold = recover(triplets, index, ver_config)
    with open(output_path, "w", encoding="utf-8") as fh:
        write_corpus(utterances, fh, meta=_meta(config, command="correct"))
    return 0


# --------------------------------------------------------------------------
# Argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vertag",
        description="Slot tagging robust to ASR errors, with value error recovery.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, help="worker cap for parallel sections")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key, e.g. --set ver.threshold=0.4",
        )

    common(sub.add_parser("synth", help="generate a synthetic corpus"))

    train_p = sub.add_parser("train", help="run the two-stage training")
    common(train_p)
    train_p.add_argument(
        "--stage",
        choices=["full", "pretrain-only"],
        default="full",
        help="pretrain-only skips the RL stage",
    )

    eval_p = sub.add_parser("eval", help="evaluate a checkpoint on the test corpus")
    common(eval_p)
    eval_p.add_argument(
        "--postproc",
        choices=["none", "delete", "ver", "all"],
        default="ver",
        help="post-processing mode(s) to report",
    )

    correct_p = sub.add_parser("correct", help="recover values in a corpus file")
    common(correct_p)
    correct_p.add_argument("--input", required=True, help="input corpus (JSON lines)")
    correct_p.add_argument("--output", required=True, help="output corpus path")
    correct_p.add_argument(
        "--tag",
        action="store_true",
        help="decode each hypothesis with the checkpoint before recovery",
    )

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.overrides, args.seed, args.threads)
        if args.command == "synth":
            return cmd_synth(config)
        if args.command == "train":
            if args.stage == "pretrain-only":
                config["train"]["rl"] = False
            return cmd_train(config)
        if args.command == "eval":
            return cmd_eval(config, args.postproc)
        if args.command == "correct":
            return cmd_correct(config, args.input, args.output, args.tag)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CorpusError, OntologyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
