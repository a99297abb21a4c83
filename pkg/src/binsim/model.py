"""Neural pair scorer.

Pipeline for a snippet pair ``(a, b)``:

1. token embedding concatenated with a max-pooled char CNN feature per token
2. Bi-LSTM over each snippet, keeping every position's hidden state
3. R-GCN layers over the pair's association graph (both snippets at once)
4. second Bi-LSTM per snippet, max-pooled over positions
5. ``[Fa; Fb; Fa - Fb; Fa * Fb]`` -> linear layer -> 2-way softmax

Pairs are batched: token sequences are padded and packed for the LSTMs,
graphs are merged into one block-diagonal edge list for message passing.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .graph import AssocGraph, EdgeType, GraphConfig, build_graph
from .tokenizer import PAD_ID, TokenSequence, Vocab

CHECKPOINT_VERSION = 1
NUM_EDGE_TYPES = len(EdgeType)


class Aggregation(str, enum.Enum):
    TYPE_SPECIFIC = "type_specific"
    SHARED = "shared"


class EdgeWeighting(str, enum.Enum):
    UNWEIGHTED_EQ7 = "unweighted"
    FREQUENCY_WEIGHTED = "frequency"


class Activation(str, enum.Enum):
    RELU = "relu"
    TANH = "tanh"


@dataclass(frozen=True)
class ModelConfig:
    token_emb_dim: int = 128
    char_emb_dim: int = 32
    char_filter_width: int = 2
    char_filter_count: int = 64
    bilstm_layers: int = 1
    rgcn_layers: int = 2
    hidden_dim: int = 256
    num_edge_types: int = NUM_EDGE_TYPES
    dropout: float = 0.0
    rgcn_aggregation: Aggregation = Aggregation.TYPE_SPECIFIC
    edge_weighting: EdgeWeighting = EdgeWeighting.UNWEIGHTED_EQ7
    activation: Activation = Activation.RELU

    def __post_init__(self):
        for name in ("token_emb_dim", "char_emb_dim", "char_filter_width", "char_filter_count",
                     "bilstm_layers", "hidden_dim", "num_edge_types"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.rgcn_layers < 0:
            raise ValueError("rgcn_layers must be >= 0")
        if self.hidden_dim % 2:
            raise ValueError("hidden_dim must be even (two LSTM directions)")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        object.__setattr__(self, "rgcn_aggregation", Aggregation(self.rgcn_aggregation))
        object.__setattr__(self, "edge_weighting", EdgeWeighting(self.edge_weighting))
        object.__setattr__(self, "activation", Activation(self.activation))

    def to_json(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, enum.Enum):
                d[k] = v.value
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True)
class SimilarityScore:
    probability: float
    logits: tuple[float, float]


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def expand_edges(graph: AssocGraph) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Directed message list ``(src, dst, rel, weight)``; undirected edges go both ways."""
    if not graph.edges:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty, np.zeros(0)
    arr = np.array([(e.src, e.dst, e.etype, e.weight) for e in graph.edges], dtype=np.int64)
    back = arr[arr[:, 2] != int(EdgeType.E0_OPCODE_OPERAND)]
    src = np.concatenate([arr[:, 0], back[:, 1]])
    dst = np.concatenate([arr[:, 1], back[:, 0]])
    rel = np.concatenate([arr[:, 2], back[:, 2]])
    w = np.concatenate([arr[:, 3], back[:, 3]]).astype(np.float64)
    return src, dst, rel, w


def message_coefficients(dst: np.ndarray, rel: np.ndarray, weight: np.ndarray, num_nodes: int,
                         num_relations: int, weighting: EdgeWeighting) -> np.ndarray:
    """Per-message normalizer: ``1/|N_v^r|`` or ``w_uv / sum_u' w_u'v`` within relation ``r``."""
    if dst.size == 0:
        return np.zeros(0)
    key = rel * num_nodes + dst
    vals = weight if weighting is EdgeWeighting.FREQUENCY_WEIGHTED else np.ones_like(weight)
    totals = np.bincount(key, weights=vals, minlength=num_relations * num_nodes)
    return vals / totals[key]


@dataclass
class PairBatch:
    token_ids: torch.Tensor  # (2B, L): rows a0, b0, a1, b1, ...
    lengths: torch.Tensor  # (2B,)
    char_ids: torch.Tensor  # (U, M) for the U distinct token texts in the batch
    char_lengths: torch.Tensor  # (U,)
    text_index: torch.Tensor  # (2B, L) -> row of char_ids
    node_index: torch.Tensor  # (N,) flat position in the (2B * L) padded grid
    edge_src: torch.Tensor
    edge_dst: torch.Tensor
    edge_rel: torch.Tensor
    edge_coef: torch.Tensor

    @property
    def num_pairs(self) -> int:
        return self.token_ids.shape[0] // 2

    @property
    def num_nodes(self) -> int:
        return self.node_index.shape[0]


def collate(pairs: Sequence[tuple[TokenSequence, TokenSequence]], graphs: Sequence[AssocGraph],
            vocab: Vocab, cfg: ModelConfig, dtype: torch.dtype = torch.float32) -> PairBatch:
    seqs = [s for pair in pairs for s in pair]
    lengths = [len(s) for s in seqs]
    width = max(lengths)
    token_ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    text_index = np.zeros((len(seqs), width), dtype=np.int64)
    texts: dict[str, int] = {}
    for r, seq in enumerate(seqs):
        for c, tok in enumerate(seq.tokens):
            token_ids[r, c] = vocab.token_id(tok.text)
            text_index[r, c] = texts.setdefault(tok.text, len(texts))
    max_chars = max(cfg.char_filter_width, max(len(t) for t in texts))
    char_ids = np.full((len(texts), max_chars), PAD_ID, dtype=np.int64)
    char_lengths = np.zeros(len(texts), dtype=np.int64)
    for text, u in texts.items():
        ids = vocab.char_ids(text)
        char_ids[u, :len(ids)] = ids
        char_lengths[u] = len(ids)

    node_index, srcs, dsts, rels, coefs = [], [], [], [], []
    offset = 0
    num_rel = 1 if cfg.rgcn_aggregation is Aggregation.SHARED else cfg.num_edge_types
    for p, g in enumerate(graphs):
        la, lb = lengths[2 * p], lengths[2 * p + 1]
        if g.num_nodes != la + lb:
            raise ValueError(f"graph {p} has {g.num_nodes} nodes, sequences have {la + lb} tokens")
        node_index.append(2 * p * width + np.arange(la))
        node_index.append((2 * p + 1) * width + np.arange(lb))
        src, dst, rel, w = expand_edges(g)
        if num_rel == 1:
            rel = np.zeros_like(rel)
        coefs.append(message_coefficients(dst, rel, w, g.num_nodes, num_rel, cfg.edge_weighting))
        srcs.append(src + offset), dsts.append(dst + offset), rels.append(rel)
        offset += g.num_nodes

    def cat(parts):
        return torch.from_numpy(np.concatenate(parts)) if parts else torch.zeros(0, dtype=torch.long)

    return PairBatch(
        token_ids=torch.from_numpy(token_ids),
        lengths=torch.tensor(lengths, dtype=torch.long),
        char_ids=torch.from_numpy(char_ids),
        char_lengths=torch.from_numpy(char_lengths),
        text_index=torch.from_numpy(text_index),
        node_index=cat(node_index),
        edge_src=cat(srcs),
        edge_dst=cat(dsts),
        edge_rel=cat(rels),
        edge_coef=cat(coefs).to(dtype),
    )


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def _activation(kind: Activation):
    return torch.relu if kind is Activation.RELU else torch.tanh


class CharCNN(nn.Module):
    """Char embeddings -> 1D convolution -> max over valid output columns."""

    def __init__(self, num_chars: int, emb_dim: int, width: int, filters: int):
        super().__init__()
        self.width = width
        self.embedding = nn.Embedding(num_chars, emb_dim, padding_idx=PAD_ID)
        self.conv = nn.Conv1d(emb_dim, filters, kernel_size=width)

    def forward(self, char_ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        x = self.embedding(char_ids).transpose(1, 2)  # (U, E, M)
        maps = self.conv(x)  # (U, filters, M - width + 1)
        # short texts are right-padded to the filter width, so each has >= 1 column
        valid = lengths.clamp(min=self.width) - self.width + 1
        cols = torch.arange(maps.shape[-1], device=maps.device)
        mask = cols[None, :] < valid[:, None]
        return maps.masked_fill(~mask[:, None, :], float("-inf")).max(dim=-1).values


class RGCNLayer(nn.Module):
    """``h_v' = act(sum_r sum_{u in N_v^r} c_uv W_r h_u + W_0 h_v)`` with precomputed ``c_uv``."""

    def __init__(self, in_dim: int, out_dim: int, num_relations: int, activation: Activation):
        super().__init__()
        self.num_relations = num_relations
        self.rel_weight = nn.Parameter(torch.empty(num_relations, out_dim, in_dim))
        self.self_weight = nn.Parameter(torch.empty(out_dim, in_dim))
        self.act = _activation(Activation(activation))
        bound = 1.0 / in_dim ** 0.5
        nn.init.uniform_(self.rel_weight, -bound, bound)
        nn.init.uniform_(self.self_weight, -bound, bound)

    def forward(self, h: torch.Tensor, src: torch.Tensor, dst: torch.Tensor, rel: torch.Tensor,
                coef: torch.Tensor) -> torch.Tensor:
        n, d = h.shape
        if rel.numel() and int(rel.max()) >= self.num_relations:
            raise ValueError("edge relation id out of range for this layer")
        agg = h.new_zeros(self.num_relations * n, d)
        agg.index_add_(0, rel * n + dst, h[src] * coef[:, None])
        out = torch.einsum("rni,roi->no", agg.view(self.num_relations, n, d), self.rel_weight)
        return self.act(out + h @ self.self_weight.T)


class BinSimModel(nn.Module):
    def __init__(self, cfg: ModelConfig, num_tokens: int, num_chars: int):
        super().__init__()
        self.cfg = cfg
        self.num_tokens = num_tokens
        self.num_chars = num_chars
        self.token_embedding = nn.Embedding(num_tokens, cfg.token_emb_dim, padding_idx=PAD_ID)
        self.char_cnn = CharCNN(num_chars, cfg.char_emb_dim, cfg.char_filter_width, cfg.char_filter_count)
        half = cfg.hidden_dim // 2
        lstm_drop = cfg.dropout if cfg.bilstm_layers > 1 else 0.0
        self.encoder = nn.LSTM(cfg.token_emb_dim + cfg.char_filter_count, half, cfg.bilstm_layers,
                               batch_first=True, bidirectional=True, dropout=lstm_drop)
        num_rel = 1 if cfg.rgcn_aggregation is Aggregation.SHARED else cfg.num_edge_types
        self.rgcn = nn.ModuleList(
            RGCNLayer(cfg.hidden_dim, cfg.hidden_dim, num_rel, cfg.activation) for _ in range(cfg.rgcn_layers)
        )
        self.post_encoder = nn.LSTM(cfg.hidden_dim, half, cfg.bilstm_layers,
                                    batch_first=True, bidirectional=True, dropout=lstm_drop)
        self.classifier = nn.Linear(4 * cfg.hidden_dim, 2)
        self.drop = nn.Dropout(cfg.dropout)

    @classmethod
    def for_vocab(cls, cfg: ModelConfig, vocab: Vocab) -> "BinSimModel":
        return cls(cfg, vocab.num_tokens, vocab.num_chars)

    @property
    def out_dim(self) -> int:
        return self.cfg.hidden_dim

    # -- stages ----------------------------------------------------------

    def vectorize_tokens(self, batch: PairBatch) -> torch.Tensor:
        """(2B, L, token_emb_dim + char_filter_count) token vectors."""
        char_feats = self.char_cnn(batch.char_ids, batch.char_lengths)
        return torch.cat([self.token_embedding(batch.token_ids), char_feats[batch.text_index]], dim=-1)

    def _run_lstm(self, lstm: nn.LSTM, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = lstm(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
        return out

    def encode_sequence(self, vectors: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """Per-position ``[forward; backward]`` states; padding rows are zero."""
        return self._run_lstm(self.encoder, self.drop(vectors), lengths)

    def refine(self, h_nodes: torch.Tensor, batch: PairBatch) -> torch.Tensor:
        for i, layer in enumerate(self.rgcn):
            if i:
                h_nodes = self.drop(h_nodes)
            h_nodes = layer(h_nodes, batch.edge_src, batch.edge_dst, batch.edge_rel, batch.edge_coef)
        return h_nodes

    def pool_snippet(self, refined: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        out = self._run_lstm(self.post_encoder, refined, lengths)
        mask = torch.arange(out.shape[1], device=out.device)[None, :] < lengths[:, None]
        return out.masked_fill(~mask[..., None], float("-inf")).max(dim=1).values

    @staticmethod
    def fuse(f_a: torch.Tensor, f_b: torch.Tensor) -> torch.Tensor:
        if f_a.shape != f_b.shape:
            raise ValueError(f"snippet vectors differ in shape: {tuple(f_a.shape)} vs {tuple(f_b.shape)}")
        return torch.cat([f_a, f_b, f_a - f_b, f_a * f_b], dim=-1)

    def fuse_and_score(self, f_a: torch.Tensor, f_b: torch.Tensor) -> torch.Tensor:
        """Logits (B, 2); class 1 means "same source"."""
        return self.classifier(self.drop(self.fuse(f_a, f_b)))

    # -- full pass -------------------------------------------------------

    def snippet_vectors(self, batch: PairBatch) -> torch.Tensor:
        vectors = self.vectorize_tokens(batch)
        hidden = self.encode_sequence(vectors, batch.lengths)
        rows, width, dim = hidden.shape
        flat = hidden.reshape(rows * width, dim)
        refined_nodes = self.refine(flat[batch.node_index], batch)
        refined = flat.new_zeros(rows * width, refined_nodes.shape[1]).index_copy(
            0, batch.node_index, refined_nodes).view(rows, width, -1)
        return self.pool_snippet(refined, batch.lengths)

    def forward(self, batch: PairBatch) -> torch.Tensor:
        feats = self.snippet_vectors(batch)
        return self.fuse_and_score(feats[0::2], feats[1::2])


def loss(logits: torch.Tensor, labels: torch.Tensor | Sequence[int]) -> torch.Tensor:
    """Mean two-class cross-entropy of ``logits`` (B, 2) against 0/1 labels."""
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    if labels.shape[0] != logits.shape[0]:
        raise ValueError("scores and labels differ in length")
    if labels.numel() and not bool(((labels == 0) | (labels == 1)).all()):
        raise ValueError("labels must be 0 or 1")
    return F.cross_entropy(logits, labels)


def to_scores(logits: torch.Tensor) -> list[SimilarityScore]:
    probs = torch.softmax(logits.detach(), dim=-1)
    return [SimilarityScore(float(p[1]), (float(z[0]), float(z[1]))) for p, z in zip(probs, logits.detach())]


class PairScorer:
    """Evaluation-mode wrapper: snippet pairs in, similarity probabilities out."""

    def __init__(self, model: BinSimModel, vocab: Vocab, graph_cfg: GraphConfig | None = None,
                 batch_size: int = 64):
        self.model = model
        self.vocab = vocab
        self.graph_cfg = graph_cfg or GraphConfig()
        self.batch_size = batch_size

    def batch(self, pairs: Sequence[tuple[TokenSequence, TokenSequence]],
              graphs: Sequence[AssocGraph] | None = None) -> PairBatch:
        if graphs is None:
            graphs = [build_graph(a, b, self.graph_cfg) for a, b in pairs]
        dtype = next(self.model.parameters()).dtype
        return collate(pairs, graphs, self.vocab, self.model.cfg, dtype)

    @torch.no_grad()
    def score(self, pairs: Sequence[tuple[TokenSequence, TokenSequence]],
              graphs: Sequence[AssocGraph] | None = None) -> list[SimilarityScore]:
        was_training = self.model.training
        self.model.eval()
        out: list[SimilarityScore] = []
        try:
            for i in range(0, len(pairs), self.batch_size):
                chunk = pairs[i:i + self.batch_size]
                sub = graphs[i:i + self.batch_size] if graphs is not None else None
                out.extend(to_scores(self.model(self.batch(chunk, sub))))
        finally:
            self.model.train(was_training)
        return out

    def probabilities(self, pairs) -> np.ndarray:
        return np.array([s.probability for s in self.score(pairs)])


def forward_pair(seq_a: TokenSequence, seq_b: TokenSequence, model: BinSimModel, vocab: Vocab,
                 graph_cfg: GraphConfig | None = None) -> SimilarityScore:
    return PairScorer(model, vocab, graph_cfg).score([(seq_a, seq_b)])[0]


# ---------------------------------------------------------------------------
# Checkpoints: params.pt + meta.json (+ vocab.json for convenience)
# ---------------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def save_checkpoint(directory: str | Path, model: BinSimModel, vocab: Vocab, graph_cfg: GraphConfig,
                    extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / "params.pt")
    vocab.save(directory / "vocab.json")
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_json(),
        "graph_config": graph_cfg.to_json(),
        "vocab_hash": vocab.digest(),
        **(extra or {}),
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    return directory


def load_checkpoint(directory: str | Path, vocab: Vocab | None = None):
    """Return ``(model, vocab, graph_cfg, meta)``; the vocab must match the stored hash."""
    directory = Path(directory)
    try:
        meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint at {directory}") from None
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')!r}")
    if vocab is None:
        vocab = Vocab.load(directory / "vocab.json")
    if vocab.digest() != meta["vocab_hash"]:
        raise CheckpointError("vocabulary does not match the checkpoint (hash mismatch)")
    cfg = ModelConfig.from_json(meta["model_config"])
    model = BinSimModel.for_vocab(cfg, vocab)
    model.load_state_dict(torch.load(directory / "params.pt", weights_only=True))
    model.eval()
    return model, vocab, GraphConfig.from_json(meta["graph_config"]), meta
