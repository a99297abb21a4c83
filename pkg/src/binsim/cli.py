"""Command-line entry point: ``binsim <subcommand> ...``.

Exit codes: 0 success, 1 internal error, 2 user or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import __version__
from .graph import AlignFormula, EdgeType, GraphConfig, GraphFormatError, build_graph, graph_to_json
from .harness import (
    DatasetError, PairExample, TrainConfig, TrainingError, baseline_edit_distance, eval_auc, eval_search_model,
    load_pairs, load_queries, train,
)
from .model import (
    Activation, Aggregation, CheckpointError, EdgeWeighting, ModelConfig, PairScorer, load_checkpoint,
    save_checkpoint,
)
from .synthetic import SyntheticCorpusSpec, gen_synthetic_corpus, spec_to_json
from .tokenizer import CorpusFormatError, MalformedInstructionError, Vocab, build_vocab, load_snippets

logger = logging.getLogger("binsim")

SEED_ENV = "BINSIM_SEED"
PATH_KEYS = ("corpus", "vocab", "train_pairs", "dev_pairs", "pairs", "queries", "checkpoint", "out")


class UsageError(Exception):
    """Bad input from the user; reported with exit code 2."""


USER_ERRORS = (UsageError, CorpusFormatError, MalformedInstructionError, DatasetError, CheckpointError,
               GraphFormatError, FileNotFoundError, IsADirectoryError, NotADirectoryError, json.JSONDecodeError)


# ---------------------------------------------------------------------------
# Run configuration file
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    graph: GraphConfig = field(default_factory=GraphConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int | None = None
    paths: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"graph": self.graph.to_json(), "model": self.model.to_json(), "train": self.train.to_json(),
               "paths": dict(self.paths)}
        if self.seed is not None:
            out["seed"] = self.seed
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ValueError("run config must be a JSON object")
        unknown = set(obj) - {"graph", "model", "train", "seed", "paths"}
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        paths = dict(obj.get("paths", {}))
        bad = set(paths) - set(PATH_KEYS)
        if bad:
            raise ValueError(f"unknown path keys: {sorted(bad)}")
        seed = obj.get("seed")
        return cls(GraphConfig.from_json(obj.get("graph", {})), ModelConfig.from_json(obj.get("model", {})),
                   TrainConfig.from_json(obj.get("train", {})), None if seed is None else int(seed),
                   {k: str(v) for k, v in paths.items()})

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
        except (ValueError, TypeError) as exc:
            raise UsageError(f"config {path}: {exc}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")


def _run_config(args) -> RunConfig:
    return RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()


def _path(args, rc: RunConfig, key: str, required: bool = True) -> str | None:
    value = getattr(args, key, None) or rc.paths.get(key)
    if value is None and required:
        raise UsageError(f"--{key.replace('_', '-')} is required (flag or config paths.{key})")
    return value


def _seed(args, rc: RunConfig) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if rc.seed is not None:
        return rc.seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return rc.train.seed


def _parse_edge_tags(text: str) -> set[EdgeType]:
    try:
        return {EdgeType.from_tag(t.strip()) for t in text.split(",") if t.strip()}
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _graph_config(args, rc: RunConfig) -> GraphConfig:
    cfg = rc.graph
    try:
        if getattr(args, "n", None) is not None:
            cfg = replace(cfg, prefix_len=args.n)
        if getattr(args, "iota", None) is not None:
            cfg = replace(cfg, align_threshold=args.iota)
        if getattr(args, "align_formula", None):
            cfg = replace(cfg, align_formula=AlignFormula(args.align_formula))
        if getattr(args, "disable_edges", None):
            cfg = cfg.without(_parse_edge_tags(args.disable_edges))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


MODEL_FLAGS = {
    "token_emb_dim": "token_emb_dim", "char_emb_dim": "char_emb_dim", "char_filters": "char_filter_count",
    "hidden_dim": "hidden_dim", "rgcn_layers": "rgcn_layers", "dropout": "dropout",
    "aggregation": "rgcn_aggregation", "edge_weighting": "edge_weighting", "activation": "activation",
}


def _model_config(args, rc: RunConfig) -> ModelConfig:
    updates = {dst: getattr(args, src) for src, dst in MODEL_FLAGS.items() if getattr(args, src, None) is not None}
    try:
        return replace(rc.model, **updates)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _train_config(args, rc: RunConfig, seed: int) -> TrainConfig:
    updates = {k: getattr(args, k) for k in ("epochs", "batch_size", "lr", "patience", "workers")
               if getattr(args, k, None) is not None}
    return replace(rc.train, seed=seed, **updates)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _load_store(path: str) -> dict:
    store = load_snippets(path)
    if not store:
        raise UsageError(f"corpus {path} contains no snippets")
    return store


def _split_pair(text: str) -> tuple[str, str]:
    parts = text.split(",")
    if len(parts) != 2 or not all(parts):
        raise UsageError(f"expected ID_A,ID_B, got {text!r}")
    return parts[0], parts[1]


def _lookup(store: dict, sid: str):
    if sid not in store:
        raise UsageError(f"unknown snippet id {sid!r}")
    return store[sid]


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _load_model(args, rc: RunConfig):
    ckpt = _path(args, rc, "checkpoint")
    vocab = Vocab.load(args.vocab) if getattr(args, "vocab", None) else None
    model, vocab, graph_cfg, meta = load_checkpoint(ckpt, vocab)
    return model, vocab, graph_cfg, meta


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_build_vocab(args) -> int:
    rc = _run_config(args)
    store = _load_store(_path(args, rc, "corpus"))
    pairs_path = _path(args, rc, "pairs", required=False)
    if pairs_path:
        used = {sid for p in load_pairs(pairs_path, store) for sid in (p.id_a, p.id_b)}
        seqs = [seq for sid, seq in store.items() if sid in used]
    else:
        seqs = list(store.values())
    vocab = build_vocab(seqs)
    out = _path(args, rc, "out")
    vocab.save(out)
    logger.info("vocab: %d tokens, %d chars -> %s", vocab.num_tokens, vocab.num_chars, out)
    return 0


def cmd_build_graph(args) -> int:
    rc = _run_config(args)
    store = _load_store(_path(args, rc, "corpus"))
    id_a, id_b = _split_pair(args.pair)
    g = build_graph(_lookup(store, id_a), _lookup(store, id_b), _graph_config(args, rc))
    _emit(graph_to_json(g), _path(args, rc, "out", required=False))
    return 0


def cmd_train(args) -> int:
    rc = _run_config(args)
    seed = _seed(args, rc)
    store = _load_store(_path(args, rc, "corpus"))
    train_pairs = load_pairs(_path(args, rc, "train_pairs"), store)
    dev_path = _path(args, rc, "dev_pairs", required=False)
    dev_pairs = load_pairs(dev_path, store) if dev_path else None
    vocab_path = _path(args, rc, "vocab", required=False)
    if vocab_path:
        vocab = Vocab.load(vocab_path)
    else:
        vocab = build_vocab(store[s] for p in train_pairs for s in (p.id_a, p.id_b))
    graph_cfg, model_cfg = _graph_config(args, rc), _model_config(args, rc)
    train_cfg = _train_config(args, rc, seed)
    result = train(train_pairs, store, vocab, model_cfg, graph_cfg, train_cfg, dev_pairs)
    log = {"seed": seed, "train_config": train_cfg.to_json(), "best_epoch": result.best_epoch,
           "best_dev_auc": result.best_dev_auc, "seconds_per_epoch": result.seconds_per_epoch,
           "history": result.history}
    ckpt = Path(_path(args, rc, "checkpoint"))
    save_checkpoint(ckpt, result.model, vocab, graph_cfg, {"train": log})
    (ckpt / "train_log.json").write_text(json.dumps(log, indent=1) + "\n", encoding="utf-8")
    logger.info("saved checkpoint to %s (best epoch %d)", ckpt, result.best_epoch)
    return 0


def _train_seconds(meta: dict) -> float | None:
    return meta.get("train", {}).get("seconds_per_epoch") or None


def cmd_eval_auc(args) -> int:
    rc = _run_config(args)
    model, vocab, graph_cfg, meta = _load_model(args, rc)
    store = _load_store(_path(args, rc, "corpus"))
    pairs = load_pairs(_path(args, rc, "pairs"), store)
    labels = {p.label for p in pairs}
    if labels != {0, 1}:
        raise UsageError("AUC needs both positive and negative pairs")
    report = eval_auc(pairs, PairScorer(model, vocab, graph_cfg), store, _train_seconds(meta))
    _emit(report.to_json(include_timing=not args.no_timing), _path(args, rc, "out", required=False))
    return 0


def cmd_eval_search(args) -> int:
    rc = _run_config(args)
    model, vocab, graph_cfg, meta = _load_model(args, rc)
    store = _load_store(_path(args, rc, "corpus"))
    queries = load_queries(_path(args, rc, "queries"), store)
    report = eval_search_model(queries, PairScorer(model, vocab, graph_cfg), store, _train_seconds(meta))
    _emit(report.to_json(include_timing=not args.no_timing), _path(args, rc, "out", required=False))
    return 0


def cmd_compare(args) -> int:
    rc = _run_config(args)
    model, vocab, graph_cfg, _ = _load_model(args, rc)
    store = _load_store(_path(args, rc, "corpus"))
    ids = [_split_pair(p) for p in args.pair]
    seqs = [(_lookup(store, a), _lookup(store, b)) for a, b in ids]
    scores = PairScorer(model, vocab, graph_cfg).score(seqs)
    rows = [{"a": a, "b": b, "probability": s.probability, "logits": list(s.logits)}
            for (a, b), s in zip(ids, scores)]
    _emit(rows[0] if len(rows) == 1 else rows, _path(args, rc, "out", required=False))
    return 0


def cmd_gen_synthetic(args) -> int:
    rc = _run_config(args)
    try:
        spec = SyntheticCorpusSpec(num_functions=args.num_functions, min_instructions=args.min_instructions,
                                   max_instructions=args.max_instructions, seed=_seed(args, rc), n_neg=args.n_neg,
                                   mutation_rate=args.mutation_rate,
                                   permute_registers=not args.no_register_permutation)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(_path(args, rc, "out"))
    written = gen_synthetic_corpus(spec).write(out)
    (out / "spec.json").write_text(json.dumps(spec_to_json(spec), indent=1) + "\n", encoding="utf-8")
    logger.info("wrote %d files to %s", len(written) + 1, out)
    return 0


def cmd_baseline_edit(args) -> int:
    rc = _run_config(args)
    store = _load_store(_path(args, rc, "corpus"))
    pairs: list[PairExample] = load_pairs(_path(args, rc, "pairs"), store)
    if {p.label for p in pairs} != {0, 1}:
        raise UsageError("AUC needs both positive and negative pairs")
    auc, _ = baseline_edit_distance(pairs, store)
    _emit({"auc": auc, "n_pairs": len(pairs), "method": "edit_distance"}, _path(args, rc, "out", required=False))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_graph_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("graph")
    g.add_argument("--n", type=int, help="opcode prefix length for e2 edges (default 3)")
    g.add_argument("--iota", type=float, help="position alignment threshold for e5 edges (default 2)")
    g.add_argument("--align-formula", choices=[f.value for f in AlignFormula])
    g.add_argument("--disable-edges", metavar="TAGS", help="comma-separated edge tags to drop, e.g. e2,e3")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--token-emb-dim", type=int)
    g.add_argument("--char-emb-dim", type=int)
    g.add_argument("--char-filters", type=int)
    g.add_argument("--hidden-dim", type=int)
    g.add_argument("--rgcn-layers", type=int)
    g.add_argument("--dropout", type=float)
    g.add_argument("--aggregation", choices=[a.value for a in Aggregation])
    g.add_argument("--edge-weighting", choices=[w.value for w in EdgeWeighting])
    g.add_argument("--activation", choices=[a.value for a in Activation])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="binsim", description="Cross-architecture binary snippet similarity.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="run config JSON; flags override its values")
        p.set_defaults(func=func)
        return p

    p = command("build-vocab", cmd_build_vocab, "build the token and char vocabulary from a snippet corpus")
    p.add_argument("--corpus", help="snippet JSONL")
    p.add_argument("--pairs", help="only use snippets referenced by this pair file")
    p.add_argument("--out", help="vocab JSON to write")

    p = command("build-graph", cmd_build_graph, "dump the association graph of one snippet pair as JSON")
    p.add_argument("--corpus")
    p.add_argument("--pair", required=True, metavar="ID_A,ID_B")
    p.add_argument("--out", help="output file (default stdout)")
    _add_graph_flags(p)

    p = command("train", cmd_train, "train a model and write a checkpoint directory")
    p.add_argument("--corpus")
    p.add_argument("--train-pairs")
    p.add_argument("--dev-pairs", help="development pairs for best-checkpoint selection")
    p.add_argument("--vocab", help="prebuilt vocab (default: built from training snippets)")
    p.add_argument("--checkpoint", help="output checkpoint directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int, help="stop after this many epochs without dev improvement")
    p.add_argument("--workers", type=int, help="processes for graph building")
    p.add_argument("--seed", type=int, help=f"random seed (fallback: ${SEED_ENV})")
    _add_graph_flags(p)
    _add_model_flags(p)

    for name, func, help_text, data_flag in (
        ("eval-auc", cmd_eval_auc, "pairwise AUC of a checkpoint on a labelled pair file", "--pairs"),
        ("eval-search", cmd_eval_search, "precision@1 and MRR on a function-search query file", "--queries"),
    ):
        p = command(name, func, help_text)
        p.add_argument("--checkpoint")
        p.add_argument("--vocab", help="vocab to verify against the checkpoint")
        p.add_argument("--corpus")
        p.add_argument(data_flag)
        p.add_argument("--out", help="report file (default stdout)")
        p.add_argument("--no-timing", action="store_true", help="omit wall-clock fields from the report")

    p = command("compare", cmd_compare, "score snippet pairs with a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--vocab")
    p.add_argument("--corpus")
    p.add_argument("--pair", required=True, action="append", metavar="ID_A,ID_B", help="repeatable")
    p.add_argument("--out")

    p = command("gen-synthetic", cmd_gen_synthetic, "write a synthetic two-dialect corpus")
    p.add_argument("--out", help="output directory")
    p.add_argument("--num-functions", type=int, default=500)
    p.add_argument("--min-instructions", type=int, default=4)
    p.add_argument("--max-instructions", type=int, default=16)
    p.add_argument("--n-neg", type=int, default=20)
    p.add_argument("--mutation-rate", type=float, default=0.15)
    p.add_argument("--no-register-permutation", action="store_true")
    p.add_argument("--seed", type=int, help=f"random seed (fallback: ${SEED_ENV})")

    p = command("baseline-edit", cmd_baseline_edit, "AUC of the token edit-distance baseline")
    p.add_argument("--corpus")
    p.add_argument("--pairs")
    p.add_argument("--out")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"binsim: error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"binsim: training failed: {exc}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001
        logger.exception("internal error")
        return 1


if __name__ == "__main__":
    sys.exit(main())
