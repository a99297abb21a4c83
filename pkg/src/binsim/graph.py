"""Multi-relational association graph over a pair of token sequences.

Every token occurrence of both snippets is a node (side ``a`` first, then
side ``b``).  Six relation types connect them:

=====  ===========  ==========================================================
type   sides        fires when
=====  ===========  ==========================================================
e0     same         opcode -> each operand of the same instruction (directed)
e1     same         two operands of the same instruction
e2     cross        two opcodes sharing their first ``n`` characters
e3     cross        two operands with identical normalized text
e4     cross        two operands of the same register/immediate/memory kind
e5     cross        positions satisfy ``|i * la / lb - j| < iota``
=====  ===========  ==========================================================

Undirected edges are stored once with ``src < dst``.
"""

from __future__ import annotations

import enum
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

from .tokenizer import OperandKind, Role, Token, TokenSequence

GRAPH_FORMAT_VERSION = 1


class EdgeType(enum.IntEnum):
    E0_OPCODE_OPERAND = 0
    E1_OPERAND_COOCCUR = 1
    E2_OPCODE_PREFIX = 2
    E3_OPERAND_VALUE = 3
    E4_OPERAND_TYPE = 4
    E5_POSITION_ALIGN = 5

    @property
    def tag(self) -> str:
        return f"e{self.value}"

    @property
    def directed(self) -> bool:
        return self is EdgeType.E0_OPCODE_OPERAND

    @property
    def cross_side(self) -> bool:
        return self.value >= 2

    @classmethod
    def from_tag(cls, tag: str) -> "EdgeType":
        tag = tag.strip().lower()
        if len(tag) == 2 and tag[0] == "e" and tag[1] in "012345":
            return cls(int(tag[1]))
        raise ValueError(f"unknown edge type {tag!r} (expected e0..e5)")


ALL_EDGE_TYPES = frozenset(EdgeType)
MONO_ARCH_TYPES = frozenset({EdgeType.E0_OPCODE_OPERAND, EdgeType.E1_OPERAND_COOCCUR})
CROSS_ARCH_TYPES = ALL_EDGE_TYPES - MONO_ARCH_TYPES
TYPED_OPERAND_KINDS = frozenset({OperandKind.REGISTER, OperandKind.IMMEDIATE, OperandKind.MEMORY})


class AlignFormula(str, enum.Enum):
    AS_WRITTEN = "as_written"  # |i * la / lb - j| < iota
    RESCALED = "rescaled"  # |i * lb / la - j| < iota


@dataclass(frozen=True)
class GraphConfig:
    prefix_len: int = 3
    align_threshold: float = 2.0
    align_formula: AlignFormula = AlignFormula.AS_WRITTEN
    enabled_types: frozenset = ALL_EDGE_TYPES

    def __post_init__(self):
        if self.prefix_len < 1:
            raise ValueError("prefix_len must be >= 1")
        if not self.align_threshold > 0:
            raise ValueError("align_threshold must be > 0")
        object.__setattr__(self, "align_formula", AlignFormula(self.align_formula))
        object.__setattr__(self, "enabled_types", frozenset(EdgeType(t) for t in self.enabled_types))

    def without(self, types: Iterable[EdgeType]) -> "GraphConfig":
        return GraphConfig(self.prefix_len, self.align_threshold, self.align_formula,
                           self.enabled_types - frozenset(types))

    def to_json(self) -> dict:
        return {
            "n": self.prefix_len,
            "iota": self.align_threshold,
            "align_formula": self.align_formula.value,
            "enabled_types": [t.tag for t in sorted(self.enabled_types)],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GraphConfig":
        unknown = set(obj) - {"n", "iota", "align_formula", "enabled_types"}
        if unknown:
            raise ValueError(f"unknown graph config keys: {sorted(unknown)}")
        kw = {}
        if "n" in obj:
            kw["prefix_len"] = int(obj["n"])
        if "iota" in obj:
            kw["align_threshold"] = float(obj["iota"])
        if "align_formula" in obj:
            kw["align_formula"] = AlignFormula(obj["align_formula"])
        if "enabled_types" in obj:
            kw["enabled_types"] = frozenset(EdgeType.from_tag(t) for t in obj["enabled_types"])
        return cls(**kw)


@dataclass(frozen=True)
class GraphNode:
    node_id: int
    side: str
    position: int
    token: Token


@dataclass(frozen=True)
class TypedEdge:
    src: int
    dst: int
    etype: EdgeType
    weight: int = 1


@dataclass(frozen=True)
class AssocGraph:
    nodes: tuple[GraphNode, ...]
    edges: tuple[TypedEdge, ...]
    config: GraphConfig = field(default_factory=GraphConfig)
    snippets: tuple[tuple[str, str], tuple[str, str]] = (("", ""), ("", ""))

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def len_a(self) -> int:
        return sum(1 for n in self.nodes if n.side == "a")

    @property
    def len_b(self) -> int:
        return self.num_nodes - self.len_a

    def edges_of(self, etype: EdgeType) -> list[TypedEdge]:
        return [e for e in self.edges if e.etype == etype]


# ---------------------------------------------------------------------------
# Rules.  Node ids: side a at 0..la-1, side b at la..la+lb-1.
# ---------------------------------------------------------------------------


def edges_e0_e1(seq: TokenSequence, offset: int = 0) -> list[TypedEdge]:
    by_instr: dict[int, list[Token]] = defaultdict(list)
    for tok in seq.tokens:
        by_instr[tok.instr_index].append(tok)
    edges = []
    for toks in by_instr.values():
        opcodes = [t.position + offset for t in toks if t.role is Role.OPCODE]
        operands = [t.position + offset for t in toks if t.role is Role.OPERAND]
        for o in opcodes:
            edges.extend(TypedEdge(o, p, EdgeType.E0_OPCODE_OPERAND) for p in operands)
        for i, p in enumerate(operands):
            edges.extend(TypedEdge(p, q, EdgeType.E1_OPERAND_COOCCUR) for q in operands[i + 1:])
    return edges


def edges_e2(seq_a: TokenSequence, seq_b: TokenSequence, n: int) -> list[TypedEdge]:
    if n < 1:
        raise ValueError("prefix length must be >= 1")
    off = len(seq_a)
    by_prefix: dict[str, list[int]] = defaultdict(list)
    for t in seq_b.tokens:
        if t.role is Role.OPCODE and len(t.text) >= n:
            by_prefix[t.text[:n]].append(t.position + off)
    return [
        TypedEdge(t.position, j, EdgeType.E2_OPCODE_PREFIX)
        for t in seq_a.tokens
        if t.role is Role.OPCODE and len(t.text) >= n
        for j in by_prefix.get(t.text[:n], ())
    ]


def edges_e3(seq_a: TokenSequence, seq_b: TokenSequence) -> list[TypedEdge]:
    off = len(seq_a)
    by_text: dict[str, list[int]] = defaultdict(list)
    for t in seq_b.tokens:
        if t.role is Role.OPERAND:
            by_text[t.text].append(t.position + off)
    return [
        TypedEdge(t.position, j, EdgeType.E3_OPERAND_VALUE)
        for t in seq_a.tokens
        if t.role is Role.OPERAND
        for j in by_text.get(t.text, ())
    ]


def edges_e4(seq_a: TokenSequence, seq_b: TokenSequence) -> list[TypedEdge]:
    off = len(seq_a)
    by_kind: dict[OperandKind, list[int]] = defaultdict(list)
    for t in seq_b.tokens:
        if t.operand_kind in TYPED_OPERAND_KINDS:
            by_kind[t.operand_kind].append(t.position + off)
    return [
        TypedEdge(t.position, j, EdgeType.E4_OPERAND_TYPE)
        for t in seq_a.tokens
        if t.operand_kind in TYPED_OPERAND_KINDS
        for j in by_kind.get(t.operand_kind, ())
    ]


def align_window(i: int, len_a: int, len_b: int, iota, formula: AlignFormula) -> range:
    """Positions ``j`` in ``[0, len_b)`` aligned with position ``i`` of side a.

    Exact rational arithmetic; the inequality is strict.
    """
    centre = Fraction(i * len_a, len_b) if formula is AlignFormula.AS_WRITTEN else Fraction(i * len_b, len_a)
    iota = Fraction(iota)
    lo = math.floor(centre - iota) + 1
    hi = math.ceil(centre + iota) - 1
    return range(max(lo, 0), min(hi, len_b - 1) + 1)


def edges_e5(seq_a: TokenSequence, seq_b: TokenSequence, iota: float,
             formula: AlignFormula = AlignFormula.AS_WRITTEN) -> list[TypedEdge]:
    if not iota > 0:
        raise ValueError("alignment threshold must be > 0")
    la, lb = len(seq_a), len(seq_b)
    return [
        TypedEdge(i, la + j, EdgeType.E5_POSITION_ALIGN)
        for i in range(la)
        for j in align_window(i, la, lb, iota, AlignFormula(formula))
    ]


def build_graph(seq_a: TokenSequence, seq_b: TokenSequence, cfg: GraphConfig | None = None) -> AssocGraph:
    cfg = cfg or GraphConfig()
    if len(seq_a) == 0 or len(seq_b) == 0:
        raise ValueError("both token sequences must be non-empty")
    la = len(seq_a)
    nodes = tuple(
        [GraphNode(t.position, "a", t.position, t) for t in seq_a.tokens]
        + [GraphNode(la + t.position, "b", t.position, t) for t in seq_b.tokens]
    )
    on = cfg.enabled_types
    fired: list[TypedEdge] = []
    if on & MONO_ARCH_TYPES:
        fired += edges_e0_e1(seq_a) + edges_e0_e1(seq_b, la)
    if EdgeType.E2_OPCODE_PREFIX in on:
        fired += edges_e2(seq_a, seq_b, cfg.prefix_len)
    if EdgeType.E3_OPERAND_VALUE in on:
        fired += edges_e3(seq_a, seq_b)
    if EdgeType.E4_OPERAND_TYPE in on:
        fired += edges_e4(seq_a, seq_b)
    if EdgeType.E5_POSITION_ALIGN in on:
        fired += edges_e5(seq_a, seq_b, cfg.align_threshold, cfg.align_formula)
    counts = Counter((e.etype, e.src, e.dst) for e in fired if e.etype in on)
    edges = tuple(TypedEdge(s, d, t, w) for (t, s, d), w in sorted(counts.items()))
    return AssocGraph(nodes, edges, cfg, ((seq_a.snippet_id, seq_a.arch), (seq_b.snippet_id, seq_b.arch)))


def check_side_partition(g: AssocGraph) -> None:
    """Raise ``AssertionError`` if an edge joins the wrong sides for its type."""
    sides = [n.side for n in g.nodes]
    for e in g.edges:
        same = sides[e.src] == sides[e.dst]
        if e.etype.cross_side == same:
            raise AssertionError(f"{e.etype.tag} edge {e.src}->{e.dst} violates side restriction")
        if not e.etype.directed and e.src >= e.dst:
            raise AssertionError(f"undirected edge {e} not stored with src < dst")


# ---------------------------------------------------------------------------
# JSON dump
# ---------------------------------------------------------------------------


class GraphFormatError(ValueError):
    """Malformed graph dump; ``offset`` is the byte offset of the problem when known."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def graph_to_json(g: AssocGraph) -> dict:
    (ida, archa), (idb, archb) = g.snippets
    return {
        "version": GRAPH_FORMAT_VERSION,
        "snippets": {"a": {"id": ida, "arch": archa}, "b": {"id": idb, "arch": archb}},
        "nodes": [
            {"id": n.node_id, "side": n.side, "pos": n.position, "token": n.token.text,
             "role": n.token.role.value, "kind": n.token.operand_kind.value, "instr": n.token.instr_index}
            for n in g.nodes
        ],
        "edges": [{"src": e.src, "dst": e.dst, "type": e.etype.tag, "w": e.weight} for e in g.edges],
        "config": g.config.to_json(),
    }


def serialize_graph(g: AssocGraph) -> bytes:
    return json.dumps(graph_to_json(g), ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def graph_from_json(obj: dict) -> AssocGraph:
    try:
        snip = obj.get("snippets", {})
        snippets = tuple((str(snip.get(s, {}).get("id", "")), str(snip.get(s, {}).get("arch", ""))) for s in "ab")
        nodes = []
        for i, n in enumerate(obj["nodes"]):
            if n["id"] != i or n["side"] not in ("a", "b"):
                raise ValueError(f"node {i} has bad id/side")
            tok = Token(n["token"], Role(n["role"]), OperandKind(n["kind"]), int(n.get("instr", 0)), int(n["pos"]))
            nodes.append(GraphNode(i, n["side"], int(n["pos"]), tok))
        edges = []
        for e in obj["edges"]:
            src, dst, w = int(e["src"]), int(e["dst"]), int(e["w"])
            if not (0 <= src < len(nodes) and 0 <= dst < len(nodes)) or w < 1:
                raise ValueError(f"bad edge {e}")
            edges.append(TypedEdge(src, dst, EdgeType.from_tag(e["type"]), w))
        cfg = GraphConfig.from_json(obj["config"])
    except (KeyError, TypeError, AttributeError, ValueError) as exc:
        raise GraphFormatError(f"invalid graph structure: {exc}") from None
    return AssocGraph(tuple(nodes), tuple(edges), cfg, snippets)


def deserialize_graph(data: bytes) -> AssocGraph:
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(exc.msg, len(text[:exc.pos].encode("utf-8"))) from None
    if not isinstance(obj, dict):
        raise GraphFormatError("top-level value must be an object")
    return graph_from_json(obj)
