"""Disassembly tokenization, operand normalization and vocabularies.

An instruction such as ``MOV R0, R4`` becomes one OPCODE token followed by
one OPERAND token per comma-separated field.  Numeric constants are replaced
by ``0`` (keeping a leading minus sign), everything is upper-cased, and each
operand is tagged as a register, immediate, memory expression or symbol.

Input snippets are read from JSON lines::

    {"id": "f1@x86", "arch": "x86", "instructions": ["push ebp", "mov ebp, esp"]}

``instructions`` may also hold pre-split fields (``[["push", "ebp"], ...]``).
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

logger = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<PAD>"
UNK_TOKEN = "<UNK>"
VOCAB_VERSION = 1


class Role(str, enum.Enum):
    OPCODE = "opcode"
    OPERAND = "operand"


class OperandKind(str, enum.Enum):
    REGISTER = "register"
    IMMEDIATE = "immediate"
    MEMORY = "memory"
    SYMBOL = "symbol"
    NONE = "none"


class MalformedInstructionError(ValueError):
    """Raised for an instruction line that cannot be split into fields."""

    def __init__(self, line: str, reason: str = "empty instruction"):
        super().__init__(f"{reason}: {line!r}")
        self.line = line


class CorpusFormatError(ValueError):
    """Raised for a bad snippet JSONL record; ``lineno`` is 1-based."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class RawInstruction:
    mnemonic_text: str
    arch: str


@dataclass(frozen=True)
class Token:
    text: str
    role: Role
    operand_kind: OperandKind
    instr_index: int
    position: int


@dataclass(frozen=True)
class TokenSequence:
    snippet_id: str
    arch: str
    tokens: tuple[Token, ...]
    arch_known: bool = True

    def __post_init__(self):
        if not self.tokens:
            raise ValueError(f"snippet {self.snippet_id!r} has no tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def texts(self) -> list[str]:
        return [t.text for t in self.tokens]

    @property
    def num_instructions(self) -> int:
        return self.tokens[-1].instr_index + 1


# ---------------------------------------------------------------------------
# Register tables
# ---------------------------------------------------------------------------

_REGISTERS: dict[str, set[str]] = {}
_ALIASES: dict[str, str] = {}


def load_register_tables(source: str | Path | Iterable[str]) -> None:
    """Merge a register table file (or an iterable of its lines) into the registry.

    Line format: ``regs <arch> NAME NAME ...`` or ``alias <tag> <arch>``.
    """
    if isinstance(source, (str, Path)):
        lines: Iterable[str] = Path(source).read_text(encoding="utf-8").splitlines()
    else:
        lines = source
    for lineno, line in enumerate(lines, 1):
        fields = line.split("#", 1)[0].split()
        if not fields:
            continue
        if fields[0] == "regs" and len(fields) >= 2:
            _REGISTERS.setdefault(fields[1].lower(), set()).update(f.upper() for f in fields[2:])
        elif fields[0] == "alias" and len(fields) == 3:
            _ALIASES[fields[1].lower()] = fields[2].lower()
        else:
            raise ValueError(f"register table line {lineno}: cannot parse {line!r}")


def _builtin_tables() -> None:
    text = resources.files("binsim").joinpath("data/registers.txt").read_text(encoding="utf-8")
    load_register_tables(text.splitlines())


_builtin_tables()


def canonical_arch(arch: str) -> str:
    a = arch.lower()
    return _ALIASES.get(a, a)


def is_known_arch(arch: str) -> bool:
    return canonical_arch(arch) in _REGISTERS


# Used only when no table exists for the arch: short letter prefix + index.
_GENERIC_REGISTER = re.compile(r"^[A-Z]{1,2}\d{1,2}$")

# ---------------------------------------------------------------------------
# Normalization and classification
# ---------------------------------------------------------------------------

_NUMERIC = re.compile(r"^[#$]?(-?)(?:0[xX][0-9a-fA-F]+|\d+)$")
_INNER_NUMERIC = re.compile(r"(?<![\w.])(-?)(?:0[xX][0-9a-fA-F]+|\d+)(?!\w)")
_MEMORY_PUNCT = frozenset("[]()")
_WS_NEAR_PUNCT = re.compile(r"\s*([^\w\s])\s*")
_WS = re.compile(r"\s+")


def normalize_numeric(token_text: str) -> str:
    """Map a whole numeric literal to ``"0"`` or ``"-0"``; anything else is returned as is.

    Accepts decimal or ``0x`` hex, an optional leading minus, and the ``#`` / ``$``
    immediate prefixes used by ARM and AT&T syntax.
    """
    m = _NUMERIC.match(token_text)
    if m is None:
        return token_text
    return "-0" if m.group(1) else "0"


def classify_operand(token_text: str, arch: str) -> OperandKind:
    bare = token_text.lstrip("$%").upper()
    table = _REGISTERS.get(canonical_arch(arch))
    if table is not None:
        if bare in table:
            return OperandKind.REGISTER
    elif _GENERIC_REGISTER.match(bare):
        return OperandKind.REGISTER
    if _MEMORY_PUNCT.intersection(token_text):
        return OperandKind.MEMORY
    if token_text in ("0", "-0") or normalize_numeric(token_text) != token_text:
        return OperandKind.IMMEDIATE
    return OperandKind.SYMBOL


def _clean_field(field: str) -> str:
    field = _WS_NEAR_PUNCT.sub(r"\1", field.strip())
    field = _WS.sub("_", field)
    normalized = normalize_numeric(field)
    if normalized == field:
        normalized = _INNER_NUMERIC.sub(lambda m: m.group(1) + "0", field)
    return normalized.upper()


_OPEN = {"[": "]", "(": ")", "{": "}"}


def split_operands(text: str) -> list[str]:
    """Split an operand string on top-level commas (brackets and quotes nest)."""
    fields, depth, quote, cur = [], [], None, []
    for ch in text:
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch in _OPEN:
            depth.append(_OPEN[ch])
        elif depth and ch == depth[-1]:
            depth.pop()
        elif ch == "," and not depth:
            fields.append("".join(cur))
            cur = []
            continue
        cur.append(ch)
    fields.append("".join(cur))
    return fields


def _fields_to_tokens(fields: Sequence[str], arch: str, line: str, instr_index: int, start: int) -> list[Token]:
    opcode = fields[0].strip().upper()
    if not opcode or any(c.isspace() for c in opcode):
        raise MalformedInstructionError(line, "bad opcode field")
    tokens = [Token(opcode, Role.OPCODE, OperandKind.NONE, instr_index, start)]
    for raw in fields[1:]:
        if not raw.strip():
            raise MalformedInstructionError(line, "empty operand field")
        text = _clean_field(raw)
        tokens.append(Token(text, Role.OPERAND, classify_operand(text, arch), instr_index, start + len(tokens)))
    return tokens


def tokenize(instr: RawInstruction, instr_index: int = 0, start: int = 0) -> list[Token]:
    """Tokenize one instruction line; ``start`` offsets the token positions."""
    line = instr.mnemonic_text
    stripped = line.strip()
    if not stripped:
        raise MalformedInstructionError(line)
    head, *rest = stripped.split(None, 1)
    fields = [head]
    if rest:
        fields.extend(split_operands(rest[0]))
    return _fields_to_tokens(fields, instr.arch, line, instr_index, start)


def detokenize(tokens: Sequence[Token]) -> str:
    """Render one instruction's tokens back into canonical ``OP A, B`` text."""
    head, *ops = [t.text for t in tokens]
    return head + (" " + ", ".join(ops) if ops else "")


def tokenize_snippet(snippet_id: str, arch: str, instructions: Sequence[str | Sequence[str]]) -> TokenSequence:
    known = is_known_arch(arch)
    if not known:
        logger.warning("no register table for arch %r; using heuristic operand classes", arch)
    tokens: list[Token] = []
    for i, ins in enumerate(instructions):
        if isinstance(ins, str):
            tokens.extend(tokenize(RawInstruction(ins, arch), i, len(tokens)))
        else:
            if not ins:
                raise MalformedInstructionError(repr(ins))
            tokens.extend(_fields_to_tokens(list(ins), arch, " ".join(ins), i, len(tokens)))
    if not tokens:
        raise MalformedInstructionError("", f"snippet {snippet_id!r} has no instructions")
    return TokenSequence(snippet_id, arch, tuple(tokens), known)


def iter_snippet_records(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or not {"id", "arch", "instructions"} <= rec.keys():
                raise CorpusFormatError(lineno, "expected object with id, arch, instructions")
            yield lineno, rec


def load_snippets(path: str | Path) -> dict[str, TokenSequence]:
    """Read a snippet JSONL file into ``{id: TokenSequence}`` (file order)."""
    store: dict[str, TokenSequence] = {}
    for lineno, rec in iter_snippet_records(path):
        sid = str(rec["id"])
        if sid in store:
            raise CorpusFormatError(lineno, f"duplicate snippet id {sid!r}")
        try:
            store[sid] = tokenize_snippet(sid, str(rec["arch"]), rec["instructions"])
        except MalformedInstructionError as exc:
            raise CorpusFormatError(lineno, str(exc)) from None
    return store


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


class Vocab:
    """Shared token vocabulary plus a character vocabulary; PAD=0, UNK=1 in both."""

    def __init__(self, token_to_id: dict[str, int], char_to_id: dict[str, int]):
        self.token_to_id = dict(token_to_id)
        self.char_to_id = dict(char_to_id)
        for table in (self.token_to_id, self.char_to_id):
            if table.get(PAD_TOKEN) != PAD_ID or table.get(UNK_TOKEN) != UNK_ID:
                raise ValueError("vocab must reserve PAD=0 and UNK=1")
            if sorted(table.values()) != list(range(len(table))):
                raise ValueError("vocab ids must be dense")

    @property
    def num_tokens(self) -> int:
        return len(self.token_to_id)

    @property
    def num_chars(self) -> int:
        return len(self.char_to_id)

    def token_id(self, text: str) -> int:
        return self.token_to_id.get(text, UNK_ID)

    def char_ids(self, text: str) -> list[int]:
        return [self.char_to_id.get(c, UNK_ID) for c in text]

    def to_json(self) -> dict:
        return {"version": VOCAB_VERSION, "tokens": self.token_to_id, "chars": self.char_to_id}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        if obj.get("version") != VOCAB_VERSION:
            raise ValueError(f"unsupported vocab version {obj.get('version')!r}")
        return cls(obj["tokens"], obj["chars"])

    def dumps(self) -> str:
        return json.dumps(self.to_json(), ensure_ascii=False, indent=1) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.to_json() == other.to_json()


def build_vocab(corpus: Iterable[TokenSequence]) -> Vocab:
    tokens = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
    chars = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
    seen = False
    for seq in corpus:
        seen = True
        for tok in seq.tokens:
            tokens.setdefault(tok.text, len(tokens))
            for ch in tok.text:
                chars.setdefault(ch, len(chars))
    if not seen:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return Vocab(tokens, chars)
