"""Datasets, training loop and evaluation protocols.

* pairwise AUC over labelled snippet pairs
* function search: rank one positive among ``N_neg`` negatives, report
  precision@1 and MRR
* normalized edit-distance baseline
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .graph import AssocGraph, GraphConfig, build_graph
from .model import BinSimModel, ModelConfig, PairScorer, collate, loss
from .tokenizer import TokenSequence, Vocab

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PairExample:
    id_a: str
    id_b: str
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DatasetError(f"label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class SearchQuery:
    query_id: str
    positive_id: str
    negative_ids: tuple[str, ...]

    def __post_init__(self):
        if self.positive_id in self.negative_ids:
            raise DatasetError(f"positive {self.positive_id!r} also listed as a negative")
        if self.query_id == self.positive_id or self.query_id in self.negative_ids:
            raise DatasetError(f"query {self.query_id!r} appears among its own candidates")

    @property
    def candidates(self) -> tuple[str, ...]:
        return (self.positive_id, *self.negative_ids)


def _read_jsonl(path: str | Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    yield lineno, json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def load_pairs(path: str | Path, store: Mapping[str, TokenSequence] | None = None) -> list[PairExample]:
    pairs = []
    for lineno, rec in _read_jsonl(path):
        try:
            pair = PairExample(str(rec["a"]), str(rec["b"]), int(rec["label"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: bad pair record ({exc})") from None
        if store is not None:
            for sid in (pair.id_a, pair.id_b):
                if sid not in store:
                    raise DatasetError(f"{path}:{lineno}: unknown snippet id {sid!r}")
        pairs.append(pair)
    if not pairs:
        raise DatasetError(f"{path}: no pairs")
    return pairs


def load_queries(path: str | Path, store: Mapping[str, TokenSequence] | None = None) -> list[SearchQuery]:
    queries = []
    for lineno, rec in _read_jsonl(path):
        try:
            q = SearchQuery(str(rec["query"]), str(rec["positive"]), tuple(str(x) for x in rec["negatives"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: bad search record ({exc})") from None
        if store is not None:
            for sid in (q.query_id, *q.candidates):
                if sid not in store:
                    raise DatasetError(f"{path}:{lineno}: unknown snippet id {sid!r}")
        queries.append(q)
    if not queries:
        raise DatasetError(f"{path}: no queries")
    return queries


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def auc_score(scores: Sequence[float], labels: Sequence[int]) -> float:
    """ROC AUC as the Mann-Whitney rank statistic; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative pairs")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def accuracy(probabilities: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> float:
    p = np.asarray(probabilities)
    return float(((p > threshold).astype(int) == np.asarray(labels)).mean())


def positive_rank(positive_id: str, scored: Sequence[tuple[str, float]]) -> int:
    """1-based rank of ``positive_id``: higher score first, ties by candidate id."""
    ordered = sorted(scored, key=lambda item: (-item[1], item[0]))
    return 1 + [cid for cid, _ in ordered].index(positive_id)


def search_metrics(ranks: Sequence[int]) -> tuple[float, float]:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("no queries")
    return float((ranks == 1).mean()), float((1.0 / ranks).mean())


@dataclass
class SearchResult:
    precision_at_1: float
    mrr: float
    ranks: list[int]


ScoreFn = Callable[[str, Sequence[str]], Sequence[float]]


def eval_search(queries: Sequence[SearchQuery], score_fn: ScoreFn) -> SearchResult:
    """Rank each query's candidates with ``score_fn(query_id, candidate_ids)``."""
    ranks = []
    for q in queries:
        cands = q.candidates
        scores = score_fn(q.query_id, cands)
        ranks.append(positive_rank(q.positive_id, list(zip(cands, map(float, scores)))))
    p1, mrr = search_metrics(ranks)
    return SearchResult(p1, mrr, ranks)


def levenshtein(a: str, b: str) -> int:
    """Edit distance with unit costs, one numpy row per character of ``a``."""
    if len(a) < len(b):
        a, b = b, a
    m = len(b)
    if m == 0:
        return len(a)
    codes = np.fromiter(map(ord, b), dtype=np.int64, count=m)
    idx = np.arange(m + 1)
    prev = idx.copy()
    cur = np.empty_like(prev)
    for ch in a:
        cur[0] = prev[0] + 1
        np.minimum(prev[1:] + 1, prev[:-1] + (codes != ord(ch)), out=cur[1:])
        # insertions: cur[j] = min_k (cur[k] + j - k)
        prev = np.minimum.accumulate(cur - idx) + idx
    return int(prev[m])


def edit_similarity(a: str, b: str) -> float:
    longest = max(len(a), len(b))
    return 1.0 if longest == 0 else 1.0 - levenshtein(a, b) / longest


def baseline_edit_distance(pairs: Sequence[PairExample], store: Mapping[str, TokenSequence]) -> tuple[float, list[float]]:
    """AUC of ``1 - lev(join(a), join(b)) / max(len)`` over token-joined snippets."""
    joined = {}

    def text(sid):
        if sid not in joined:
            joined[sid] = " ".join(store[sid].texts)
        return joined[sid]

    scores = [edit_similarity(text(p.id_a), text(p.id_b)) for p in pairs]
    return auc_score(scores, [p.label for p in pairs]), scores


# ---------------------------------------------------------------------------
# Graph construction for datasets
# ---------------------------------------------------------------------------


def _build_one(args) -> AssocGraph:
    return build_graph(*args)


def build_graphs(pairs: Sequence[tuple[TokenSequence, TokenSequence]], cfg: GraphConfig,
                 workers: int = 1) -> list[AssocGraph]:
    jobs = [(a, b, cfg) for a, b in pairs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_build_one, jobs, chunksize=32))
    return [build_graph(*job) for job in jobs]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    patience: int | None = None  # epochs without dev-AUC improvement before stopping
    workers: int = 1
    stop_at_train_accuracy: float | None = None  # also records per-epoch training accuracy

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown trainer keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class TrainResult:
    model: BinSimModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_dev_auc: float | None = None

    @property
    def seconds_per_epoch(self) -> float:
        if not self.history:
            return 0.0
        return float(np.mean([h["seconds"] for h in self.history]))


def _check_finite(model: BinSimModel, step: int) -> None:
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise TrainingError(f"parameter {name} became non-finite at step {step}")


def train(train_pairs: Sequence[PairExample], store: Mapping[str, TokenSequence], vocab: Vocab,
          model_cfg: ModelConfig | None = None, graph_cfg: GraphConfig | None = None,
          train_cfg: TrainConfig | None = None, dev_pairs: Sequence[PairExample] | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam on mean cross-entropy; keeps the parameters with the best dev AUC."""
    model_cfg = model_cfg or ModelConfig()
    graph_cfg = graph_cfg or GraphConfig()
    tc = train_cfg or TrainConfig()
    if not train_pairs:
        raise DatasetError("training set is empty")

    torch.manual_seed(tc.seed)
    model = BinSimModel.for_vocab(model_cfg, vocab)
    result = TrainResult(model)
    if tc.epochs <= 0:
        return result

    seqs = [(store[p.id_a], store[p.id_b]) for p in train_pairs]
    labels = torch.tensor([p.label for p in train_pairs], dtype=torch.long)
    graphs = build_graphs(seqs, graph_cfg, tc.workers)
    dev_seqs = [(store[p.id_a], store[p.id_b]) for p in dev_pairs] if dev_pairs else []
    dev_graphs = build_graphs(dev_seqs, graph_cfg, tc.workers) if dev_seqs else []
    dev_labels = [p.label for p in dev_pairs] if dev_pairs else []
    scorer = PairScorer(model, vocab, graph_cfg, batch_size=max(64, tc.batch_size))

    opt = torch.optim.Adam(model.parameters(), lr=tc.lr)
    gen = torch.Generator().manual_seed(tc.seed)
    best_state, best_auc, stale, step = None, -math.inf, 0, 0
    for epoch in range(1, tc.epochs + 1):
        model.train()
        start = time.perf_counter()
        order = torch.randperm(len(seqs), generator=gen).tolist()
        total = 0.0
        for i in range(0, len(order), tc.batch_size):
            idx = order[i:i + tc.batch_size]
            batch = collate([seqs[j] for j in idx], [graphs[j] for j in idx], vocab, model_cfg)
            batch_loss = loss(model(batch), labels[idx])
            if not torch.isfinite(batch_loss):
                raise TrainingError(f"non-finite loss {batch_loss.item()} at epoch {epoch}, step {step}")
            opt.zero_grad()
            batch_loss.backward()
            opt.step()
            step += 1
            _check_finite(model, step)
            total += batch_loss.item() * len(idx)
        record = {"epoch": epoch, "loss": total / len(seqs), "seconds": time.perf_counter() - start}
        fitted = False
        if tc.stop_at_train_accuracy is not None:
            probs = [s.probability for s in scorer.score(seqs, graphs)]
            record["train_accuracy"] = accuracy(probs, labels.tolist())
            fitted = record["train_accuracy"] >= tc.stop_at_train_accuracy
        if dev_seqs:
            probs = [s.probability for s in scorer.score(dev_seqs, dev_graphs)]
            record["dev_auc"] = auc_score(probs, dev_labels)
            if record["dev_auc"] > best_auc:
                best_auc, stale = record["dev_auc"], 0
                best_state = copy.deepcopy(model.state_dict())
                result.best_epoch = epoch
            else:
                stale += 1
        result.history.append(record)
        logger.info("epoch %d: %s", epoch, record)
        if on_epoch:
            on_epoch(record)
        if fitted or (tc.patience is not None and dev_seqs and stale >= tc.patience):
            break
    if best_state is not None:
        model.load_state_dict(best_state)
        result.best_dev_auc = best_auc
    else:
        result.best_epoch = len(result.history)
    model.eval()
    return result


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    auc: float | None = None
    precision_at_1: float | None = None
    mrr: float | None = None
    n_pairs: int = 0
    n_queries: int = 0
    ranks: list[int] = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    def to_json(self, include_timing: bool = True) -> dict:
        out = {"auc": self.auc, "p_at_1": self.precision_at_1, "mrr": self.mrr,
               "n_pairs": self.n_pairs, "n_queries": self.n_queries, "ranks": self.ranks}
        if include_timing:
            out["timing"] = self.timing
        return out


def eval_auc(pairs: Sequence[PairExample], scorer: PairScorer, store: Mapping[str, TokenSequence],
             train_seconds_per_epoch: float | None = None) -> EvalReport:
    seqs = [(store[p.id_a], store[p.id_b]) for p in pairs]
    start = time.perf_counter()
    probs = [s.probability for s in scorer.score(seqs)]
    elapsed = time.perf_counter() - start
    report = EvalReport(auc=auc_score(probs, [p.label for p in pairs]), n_pairs=len(pairs))
    report.timing = _timing(elapsed, len(pairs), train_seconds_per_epoch)
    return report


def model_score_fn(scorer: PairScorer, store: Mapping[str, TokenSequence]) -> ScoreFn:
    def score(query_id: str, candidate_ids: Sequence[str]) -> list[float]:
        q = store[query_id]
        return [s.probability for s in scorer.score([(q, store[c]) for c in candidate_ids])]
    return score


def eval_search_model(queries: Sequence[SearchQuery], scorer: PairScorer, store: Mapping[str, TokenSequence],
                      train_seconds_per_epoch: float | None = None) -> EvalReport:
    start = time.perf_counter()
    result = eval_search(queries, model_score_fn(scorer, store))
    elapsed = time.perf_counter() - start
    n_pairs = sum(len(q.candidates) for q in queries)
    return EvalReport(precision_at_1=result.precision_at_1, mrr=result.mrr, n_pairs=n_pairs,
                      n_queries=len(queries), ranks=result.ranks,
                      timing=_timing(elapsed, n_pairs, train_seconds_per_epoch))


def _timing(elapsed: float, n_pairs: int, train_seconds_per_epoch: float | None) -> dict:
    timing = {"predict_ms_per_pair": 1000.0 * elapsed / max(n_pairs, 1), "predict_seconds": elapsed}
    if train_seconds_per_epoch:
        timing["train_seconds_per_epoch"] = train_seconds_per_epoch
    return timing
