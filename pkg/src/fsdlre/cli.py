"""Command-line entry point.

Subcommands: build-episodes, train, eval, analyze, dump-embeddings.
Exit codes: 0 success, 2 config/input error, 3 sampling exhaustion,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from .config import RunConfig, load_run_config
from .corpus import Corpus, RelationSplit, load_corpus, load_relation_catalog, load_relation_split
from .encoders import make_provider
from .episodes import (
    SOURCE_SPLITS,
    EpisodeConfig,
    episode_stats,
    read_episode_file,
    sample_episodes,
    write_episode_file,
)
from .errors import ConfigError, FsdlreError, NumericError, SamplingExhaustedError
from .evaluation import analyze, dump_support_embeddings, evaluate_episodes
from .model import EpisodeModel, ModelConfig
from .training import load_checkpoint, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SAMPLING = 3
EXIT_NUMERIC = 4


def _add_shared_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--encoder", help="encoder spec: 'toy' or 'pretrained:<model>'")
    p.add_argument("--task-family", choices=("in_domain", "cross_domain"),
                   help="hyperparameter default family")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsdlre",
        description="Few-shot document-level relation extraction",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-episodes", help="sample episodes into a JSON-lines file")
    _add_shared_flags(p)
    p.add_argument("--corpus", help="DocRED-style document JSON")
    p.add_argument("--catalog", help="relation id -> name/description JSON")
    p.add_argument("--split-file", help="relation split JSON")
    p.add_argument("--count", type=int, help="number of episodes")
    p.add_argument("--n-docs", type=int, help="support documents per episode")
    p.add_argument("--split", choices=SOURCE_SPLITS, help="source split to sample")
    p.add_argument("--max-target-relations", type=int)

    p = sub.add_parser("train", help="meta-train on sampled episodes")
    _add_shared_flags(p)
    p.add_argument("--corpus", help="DocRED-style document JSON")
    p.add_argument("--catalog", help="relation catalog JSON")
    p.add_argument("--split-file", help="relation split JSON")
    p.add_argument("--total-episodes", type=int)
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--no-rcl", action="store_true",
                   help="drop the contrastive term (weight forced to 0)")
    p.add_argument("--scl", action="store_true",
                   help="replace the relation-weighted loss with the plain variant")
    p.add_argument("--no-ibpc", action="store_true",
                   help="build support instances from the pair path only")
    p.add_argument("--no-tnpg", action="store_true",
                   help="use the base NOTA bank directly as task prototypes")

    for name, help_text in (
        ("eval", "score a checkpoint on an episode file"),
        ("analyze", "per-bin macro F1 slices"),
        ("dump-embeddings", "write support instance/prototype vectors as TSV"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_shared_flags(p)
        p.add_argument("--corpus", help="DocRED-style document JSON")
        p.add_argument("--catalog", help="relation catalog JSON")
        p.add_argument("--ckpt", help="checkpoint directory (ckpt/step-<n>)")
        p.add_argument("--episodes", help="episode JSON-lines file")
        if name == "eval":
            p.add_argument("--f1-aggregation", choices=("pooled", "per-episode-mean"))
    return parser


def _overrides_from_args(args: argparse.Namespace) -> dict[str, Any]:
    mapping = {
        "seed": "seed",
        "out": "out",
        "encoder": "encoder",
        "task_family": "task_family",
        "corpus": "corpus.documents",
        "catalog": "corpus.catalog",
        "split_file": "corpus.split",
        "count": "episodes.count",
        "n_docs": "episodes.n_docs",
        "split": "episodes.source_split",
        "max_target_relations": "episodes.max_target_relations",
        "total_episodes": "trainer.total_episodes",
        "f1_aggregation": "eval.f1_aggregation",
        "ckpt": "eval.checkpoint",
        "episodes": "episodes.file",
    }
    overrides: dict[str, Any] = {}
    for attr, path in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[path] = value
    if getattr(args, "no_rcl", False):
        overrides["loss.lambda"] = 0.0
        overrides["loss.contrastive_variant"] = "off"
    if getattr(args, "scl", False):
        overrides["loss.contrastive_variant"] = "scl"
    if getattr(args, "no_ibpc", False):
        overrides["ablation.disable_ibpc"] = True
    if getattr(args, "no_tnpg", False):
        overrides["ablation.disable_tnpg"] = True
    return overrides


def _load_corpus(run: RunConfig) -> Corpus:
    if not run.corpus_documents:
        raise ConfigError("no corpus given (corpus.documents / --corpus)")
    catalog = None
    if run.corpus_catalog:
        catalog = load_relation_catalog(run.corpus_catalog)
    return load_corpus(run.corpus_documents, catalog=catalog)


def _load_split(run: RunConfig) -> RelationSplit:
    if not run.corpus_split:
        raise ConfigError("no relation split given (corpus.split / --split-file)")
    return load_relation_split(run.corpus_split)


def _make_provider(run: RunConfig):
    return make_provider(
        run.encoder,
        seed=run.seed,
        freeze_relation_encoder=run.freeze_relation_encoder,
        **run.encoder_options,
    )


def _out_dir(run: RunConfig) -> Path:
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _restore_model(run: RunConfig, corpus: Corpus) -> EpisodeModel:
    if not run.eval_checkpoint:
        raise ConfigError("no checkpoint given (eval.checkpoint / --ckpt)")
    ckpt_dir = Path(run.eval_checkpoint)
    meta_path = ckpt_dir / "meta.json"
    if not meta_path.exists():
        raise ConfigError(f"missing checkpoint: {ckpt_dir}")
    meta = json.loads(meta_path.read_text())
    model_cfg = run.model_config()
    stored = meta.get("config", {}).get("model")
    if stored:
        model_cfg = ModelConfig(**stored)
    provider = _make_provider(run)
    model = EpisodeModel(provider, corpus.relation_catalog, model_cfg, seed=run.seed)
    load_checkpoint(ckpt_dir, model)
    model.eval()
    return model


def cmd_build_episodes(run: RunConfig) -> int:
    if run.episodes_count <= 0:
        raise ConfigError(f"episode count must be positive, got {run.episodes_count}")
    corpus = _load_corpus(run)
    splits = _load_split(run)
    cfg = EpisodeConfig(
        n_docs=run.episodes_n_docs,
        seed=run.seed,
        max_target_relations=run.episodes_max_target_relations,
        source_split=run.episodes_source_split,
    )
    episodes = sample_episodes(corpus, splits, cfg, run.episodes_count)
    out = _out_dir(run) / f"episodes_{run.episodes_source_split}.jsonl"
    write_episode_file(episodes, out, split_name=run.episodes_source_split)
    avg_targets, avg_support = episode_stats(episodes)
    print(f"wrote {len(episodes)} episodes to {out}")
    print(f"avg target relations {avg_targets:.2f}, "
          f"avg support instances per relation {avg_support:.2f}")
    return EXIT_OK


def cmd_train(run: RunConfig, resume: Optional[str]) -> int:
    corpus = _load_corpus(run)
    splits = _load_split(run)
    provider = _make_provider(run)
    out = _out_dir(run)
    result = train(
        corpus, splits, run.train_config(), provider,
        out_dir=out, resume_from=resume,
    )
    best = result.checkpoint
    summary = {
        "final_step": result.final_step,
        "stopped_early": result.stopped_early,
        "best_step": best.step if best else None,
        "best_dev_macro_f1": best.dev_macro_f1 if best else None,
        "dev_history": result.dev_history,
        "loss_trace_tail": result.loss_trace[-20:],
    }
    (out / "train_report.json").write_text(json.dumps(summary, indent=2))
    print(f"trained {result.final_step} steps; "
          f"best dev macro F1 {summary['best_dev_macro_f1']}")
    if best:
        print(f"best checkpoint: {best.path}")
    return EXIT_OK


def _load_episode_inputs(run: RunConfig):
    corpus = _load_corpus(run)
    if not run.episodes_file:
        raise ConfigError("no episode file given (episodes.file / --episodes)")
    episodes = read_episode_file(run.episodes_file, corpus)
    model = _restore_model(run, corpus)
    return model, episodes


def cmd_eval(run: RunConfig) -> int:
    model, episodes = _load_episode_inputs(run)
    report = evaluate_episodes(model, episodes, aggregation=run.f1_aggregation)
    out = _out_dir(run) / "report.json"
    out.write_text(json.dumps(report.to_json_dict(), indent=2))
    print(f"macro F1 ({report.aggregation}, {report.episode_count} episodes): "
          f"{report.macro_f1:.4f}")
    print(f"report: {out}")
    return EXIT_OK


def cmd_analyze(run: RunConfig) -> int:
    model, episodes = _load_episode_inputs(run)
    bins = analyze(model, episodes, aggregation=run.f1_aggregation)
    out = _out_dir(run) / "bins.json"
    out.write_text(json.dumps(bins, indent=2))
    for label, info in bins["nota_rate"].items():
        shown = "n/a" if info["macro_f1"] is None else f"{info['macro_f1']:.4f}"
        print(f"NOTA rate {label}: {info['episodes']} episodes, macro F1 {shown}")
    print(f"bins: {out}")
    return EXIT_OK


def cmd_dump_embeddings(run: RunConfig) -> int:
    model, episodes = _load_episode_inputs(run)
    out = dump_support_embeddings(model, episodes, _out_dir(run) / "support_embeddings.tsv")
    print(f"embeddings: {out}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run = load_run_config(getattr(args, "config", None), _overrides_from_args(args))
        if args.command == "build-episodes":
            return cmd_build_episodes(run)
        if args.command == "train":
            return cmd_train(run, getattr(args, "resume", None))
        if args.command == "eval":
            return cmd_eval(run)
        if args.command == "analyze":
            return cmd_analyze(run)
        if args.command == "dump-embeddings":
            return cmd_dump_embeddings(run)
        raise ConfigError(f"unknown command {args.command!r}")
    except SamplingExhaustedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SAMPLING
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FsdlreError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
