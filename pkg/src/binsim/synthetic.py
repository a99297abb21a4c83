"""Synthetic two-dialect corpus for desk-scale experiments.

Each function is generated once as an abstract program and then rendered in
two dialects:

* dialect A: x86-flavoured two-operand syntax (arch tag ``x86``)
* dialect B: MIPS-flavoured load/store syntax (arch tag ``mips``) with
  seeded opcode renaming (some renames keep the A prefix, e.g. ``SUB`` ->
  ``SUBU``), reordered operands, and instruction splitting (memory operands
  become a scratch-register load, ``push``/``pop`` become two instructions,
  calls get a delay-slot ``NOP``).

Both renderings of a function share its id; pairs and search queries are
built from those ids.  :func:`skeleton_from_b` inverts the B rendering back
to the abstract opcode sequence.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

ARCH_A = "x86"
ARCH_B = "mips"

REGS_A = ("EAX", "EBX", "ECX", "EDX", "ESI", "EDI", "EBP", "ESP")
REGS_B = ("V0", "V1", "A0", "A1", "A2", "A3", "FP", "SP")
FP, SP = 6, 7
GENERAL = range(6)
SCRATCH_B = "AT"

LIBRARY = (
    "memcpy", "memset", "strlen", "strcmp", "strcpy", "malloc", "free", "printf", "sprintf",
    "socket", "connect", "send", "recv", "close", "open", "read", "write", "fork", "kill",
    "time", "rand", "srand", "getpid", "sleep", "inet_addr", "htons", "atoi", "exit",
)

# abstract op -> x86 mnemonic
MNEMONIC_A = {
    "mov": "MOV", "load": "MOV", "store": "MOV", "add": "ADD", "sub": "SUB", "and": "AND",
    "or": "OR", "xor": "XOR", "mul": "IMUL", "shl": "SHL", "shr": "SHR", "cmp": "CMP",
    "inc": "INC", "dec": "DEC", "neg": "NEG", "not": "NOT", "push": "PUSH", "pop": "POP",
    "call": "CALL", "jmp": "JMP", "je": "JE", "jne": "JNE", "jl": "JL", "jg": "JG",
    "lea": "LEA", "ret": "RET", "nop": "NOP", "movi": "MOV",
}

# B mnemonics fixed by the expansions; other ops get a seeded rename (see dialect_b_mnemonics).
FIXED_B = {"load": "LW", "store": "SW", "ret": "JR", "call": "JAL", "nop": "NOP", "movi": "LI"}
RESERVED_B = {"LW", "SW", "JR", "JAL", "NOP", "LI", "ADDIU"}
UNRELATED_B = {
    "mov": "OR", "add": "PLUS", "sub": "MINUS", "and": "CONJ", "or": "DISJ", "xor": "EOR",
    "mul": "MULT", "shl": "SLL", "shr": "SRL", "cmp": "SLT", "inc": "INCR", "dec": "DECR",
    "neg": "NEGU", "not": "NOR", "jmp": "B", "je": "BEQ", "jne": "BNE", "jl": "BLTZ",
    "jg": "BGTZ", "lea": "LA",
}
PREFIX_SUFFIXES = ("U", "X", "W")

# (op, weight, operand signature)
OP_TABLE = (
    ("mov", 14, "rr"), ("movi", 8, "ri"), ("load", 12, "rm"), ("store", 10, "mr"),
    ("add", 7, "r*"), ("sub", 5, "r*"), ("and", 3, "r*"), ("or", 2, "r*"), ("xor", 3, "r*"),
    ("mul", 2, "r*"), ("shl", 2, "ri"), ("shr", 2, "ri"), ("cmp", 7, "r*"), ("inc", 2, "r"),
    ("dec", 2, "r"), ("neg", 1, "r"), ("not", 1, "r"), ("call", 6, "s"), ("jmp", 3, "l"),
    ("je", 3, "l"), ("jne", 3, "l"), ("jl", 2, "l"), ("jg", 2, "l"), ("lea", 3, "rm"),
    ("nop", 1, ""), ("push", 2, "r"), ("pop", 2, "r"),
)


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    num_functions: int = 500
    min_instructions: int = 4  # body length range, prologue/epilogue excluded
    max_instructions: int = 16
    seed: int = 0
    n_neg: int = 20
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    negative_strategy: str = "random"
    mutation_rate: float = 0.15  # per-instruction drop/insert/swap rate in the B build
    permute_registers: bool = True  # independent register allocation per B build

    def __post_init__(self):
        if self.num_functions < 2:
            raise ValueError("need at least two functions")
        if not 1 <= self.min_instructions <= self.max_instructions:
            raise ValueError("bad instruction range")
        if self.n_neg > self.num_functions - 1:
            raise ValueError(f"n_neg={self.n_neg} needs at least {self.n_neg + 1} functions, "
                             f"spec has {self.num_functions}")
        if self.negative_strategy != "random":
            raise ValueError("only the 'random' negative strategy is supported")
        if not 0 <= self.mutation_rate < 1:
            raise ValueError("mutation_rate must be in [0, 1)")
        if abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError("split fractions must be non-negative and sum to 1")


@dataclass(frozen=True)
class AbstractInstr:
    op: str
    args: tuple = ()


@dataclass
class Corpus:
    snippets: dict[str, dict]  # id -> {"id", "arch", "instructions"}
    functions: dict[str, tuple[str, str]]  # function name -> (id_a, id_b)
    splits: dict[str, list[str]]  # split -> function names
    pairs: dict[str, list[dict]] = field(default_factory=dict)  # split -> [{"a","b","label"}]
    search: dict[str, list[dict]] = field(default_factory=dict)  # "all"/split -> queries

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [_write_jsonl(out / "snippets.jsonl", self.snippets.values())]
        for name, rows in self.pairs.items():
            written.append(_write_jsonl(out / f"pairs_{name}.jsonl", rows))
        for name, rows in self.search.items():
            written.append(_write_jsonl(out / f"search_{name}.jsonl", rows))
        (out / "splits.json").write_text(json.dumps(self.splits, indent=1) + "\n", encoding="utf-8")
        written.append(out / "splits.json")
        return written


def _write_jsonl(path: Path, rows) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    return path


# ---------------------------------------------------------------------------
# Dialect tables
# ---------------------------------------------------------------------------


def dialect_b_mnemonics(seed: int) -> dict[str, str]:
    """Seeded, injective abstract-op -> B mnemonic table."""
    rng = random.Random(f"dialect-{seed}")
    table = dict(FIXED_B)
    used = set(RESERVED_B)
    for op in sorted(UNRELATED_B):
        base = MNEMONIC_A[op]
        options = [base + s for s in PREFIX_SUFFIXES] if rng.random() < 0.6 else []
        options.append(UNRELATED_B[op])
        choice = next((o for o in options if o not in used), None)
        if choice is None:
            choice = f"{base}{len(used)}"
        table[op] = choice
        used.add(choice)
    for op in ("push", "pop"):
        table[op] = "ADDIU"
    return table


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _random_body(rng: random.Random, length: int) -> list[AbstractInstr]:
    ops = [o for o, _, _ in OP_TABLE]
    weights = [w for _, w, _ in OP_TABLE]
    sig = {o: s for o, _, s in OP_TABLE}
    body = []
    for _ in range(length):
        op = rng.choices(ops, weights)[0]
        args = []
        for kind in sig[op]:
            if kind == "*":
                kind = rng.choice("rri") if op != "cmp" else rng.choice("ri")
                if op in ("add", "sub") and rng.random() < 0.25:
                    kind = "m"
            if kind == "r":
                args.append(("reg", rng.choice(GENERAL)))
            elif kind == "i":
                args.append(("imm", rng.choice((1, 2, 4, 8, 0xFF, 0x10, rng.randrange(0, 4096)))))
            elif kind == "m":
                args.append(("mem", rng.choice((FP, FP, SP, rng.choice(GENERAL))), 4 * rng.randrange(-16, 16)))
            elif kind == "s":
                args.append(("sym", rng.choice(LIBRARY)))
            elif kind == "l":
                args.append(("label", rng.randrange(length)))
        body.append(AbstractInstr(op, tuple(args)))
    return body


def generate_function(rng: random.Random, min_len: int, max_len: int) -> list[AbstractInstr]:
    frame = 4 * rng.randrange(1, 16)
    prologue = [AbstractInstr("push", (("reg", FP),)),
                AbstractInstr("mov", (("reg", FP), ("reg", SP))),
                AbstractInstr("sub", (("reg", SP), ("imm", frame)))]
    epilogue = [AbstractInstr("mov", (("reg", SP), ("reg", FP))),
                AbstractInstr("pop", (("reg", FP),)),
                AbstractInstr("ret")]
    return prologue + _random_body(rng, rng.randint(min_len, max_len)) + epilogue


def _remap(arg, perm):
    if arg[0] == "reg":
        return ("reg", perm.get(arg[1], arg[1]))
    if arg[0] == "mem":
        return ("mem", perm.get(arg[1], arg[1]), arg[2])
    return arg


def compiler_variant(fn: list[AbstractInstr], rng: random.Random, rate: float,
                     permute_registers: bool = True) -> list[AbstractInstr]:
    """Same function as another compiler might emit it.

    Register allocation is re-drawn, and each body instruction is dropped,
    followed by an extra instruction, or swapped with its successor with
    probability ``rate / 3`` each.  Prologue and epilogue are kept.
    """
    perm = {}
    if permute_registers:
        shuffled = list(GENERAL)
        rng.shuffle(shuffled)
        perm = dict(zip(GENERAL, shuffled))
    head, body, tail = fn[:3], fn[3:-3], fn[-3:]
    out: list[AbstractInstr] = []
    for ins in body:
        u = rng.random()
        if u < rate / 3 and len(body) > 1:
            continue
        out.append(ins)
        if u < 2 * rate / 3:
            out.extend(_random_body(rng, 1))
        elif u < rate and len(out) >= 2:
            out[-1], out[-2] = out[-2], out[-1]
    return [AbstractInstr(i.op, tuple(_remap(a, perm) for a in i.args)) for i in head + out + tail]


def skeleton(fn: list[AbstractInstr]) -> list[str]:
    return [i.op for i in fn]


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _imm_a(v: int) -> str:
    return hex(v) if v >= 0 else "-" + hex(-v)


def _arg_a(arg) -> str:
    kind = arg[0]
    if kind == "reg":
        return REGS_A[arg[1]].lower()
    if kind == "imm":
        return _imm_a(arg[1])
    if kind == "mem":
        off = arg[2]
        sign = "-" if off < 0 else "+"
        return f"dword [{REGS_A[arg[1]].lower()} {sign} {hex(abs(off))}]"
    if kind == "sym":
        return "sym." + arg[1]
    if kind == "label":
        return hex(0x8048000 + 4 * arg[1])
    raise ValueError(kind)


def render_a(fn: list[AbstractInstr]) -> list[str]:
    lines = []
    for ins in fn:
        mnem = MNEMONIC_A[ins.op].lower()
        ops = ", ".join(_arg_a(a) for a in ins.args)
        lines.append(f"{mnem} {ops}" if ops else mnem)
    return lines


def _arg_b(arg) -> str:
    kind = arg[0]
    if kind == "reg":
        return REGS_B[arg[1]].lower()
    if kind == "imm":
        return str(arg[1])
    if kind == "mem":
        return f"{arg[2]}({REGS_B[arg[1]].lower()})"
    if kind == "sym":
        return arg[1]
    if kind == "label":
        return hex(0x400000 + 8 * arg[1])
    raise ValueError(kind)


def render_b(fn: list[AbstractInstr], mnemonics: dict[str, str]) -> list[str]:
    at = SCRATCH_B.lower()
    sp = REGS_B[SP].lower()
    lines = []
    for ins in fn:
        op, args = ins.op, ins.args
        m = mnemonics[op].lower()
        if op == "push":
            lines += [f"addiu {sp}, {sp}, -4", f"sw {_arg_b(args[0])}, 0({sp})"]
        elif op == "pop":
            lines += [f"lw {_arg_b(args[0])}, 0({sp})", f"addiu {sp}, {sp}, 4"]
        elif op == "call":
            lines += [f"jal {_arg_b(args[0])}", "nop"]
        elif op == "ret":
            lines.append("jr ra")
        elif op == "nop":
            lines.append("nop")
        elif op == "store":  # operands reordered: value first, then address
            lines.append(f"{m} {_arg_b(args[1])}, {_arg_b(args[0])}")
        elif op in ("load", "lea", "mov", "movi"):
            lines.append(f"{m} {_arg_b(args[0])}, {_arg_b(args[1])}")
        elif op == "cmp":  # reordered comparison operands
            lines.append(f"{m} {at}, {_arg_b(args[1])}, {_arg_b(args[0])}")
        elif len(args) == 2:
            dst, src = _arg_b(args[0]), args[1]
            if src[0] == "mem":
                lines.append(f"lw {at}, {_arg_b(src)}")
                lines.append(f"{m} {dst}, {dst}, {at}")
            else:
                lines.append(f"{m} {dst}, {dst}, {_arg_b(src)}")
        elif len(args) == 1 and args[0][0] == "label":
            lines.append(f"{m} {_arg_b(args[0])}")
        elif len(args) == 1:
            lines.append(f"{m} {_arg_b(args[0])}, {_arg_b(args[0])}")
        else:
            lines.append(m)
    return lines


def skeleton_from_b(lines: list[str], mnemonics: dict[str, str]) -> list[str]:
    """Invert :func:`render_b` down to the abstract opcode sequence."""
    reverse = {v: k for k, v in mnemonics.items() if k not in ("push", "pop")}
    out = []
    i = 0
    while i < len(lines):
        head, *rest = lines[i].split(None, 1)
        head = head.upper()
        nxt = " ".join(lines[i + 1].upper().split()) if i + 1 < len(lines) else ""
        if head == "ADDIU":
            out.append("push")
            i += 2
        elif head == "LW" and nxt == f"ADDIU {REGS_B[SP]}, {REGS_B[SP]}, 4":
            out.append("pop")
            i += 2
        elif head == "LW" and rest and rest[0].upper().startswith(SCRATCH_B + ","):
            i += 1  # split memory operand; the arithmetic op follows
        elif head == "JAL":
            out.append("call")
            i += 2
        else:
            out.append(reverse[head])
            i += 1
    return out


# ---------------------------------------------------------------------------
# Corpus assembly
# ---------------------------------------------------------------------------


def _split_names(names: list[str], fractions, rng: random.Random) -> dict[str, list[str]]:
    order = names[:]
    rng.shuffle(order)
    n = len(order)
    n_train = int(round(fractions[0] * n))
    n_dev = int(round(fractions[1] * n))
    parts = {"train": order[:n_train], "dev": order[n_train:n_train + n_dev], "test": order[n_train + n_dev:]}
    return {k: sorted(v) for k, v in parts.items()}


def _queries(names: list[str], pool: list[str], functions, n_neg: int, rng: random.Random) -> list[dict]:
    rows = []
    for name in names:
        others = [g for g in pool if g != name]
        negs = rng.sample(others, n_neg)
        rows.append({"query": functions[name][0], "positive": functions[name][1],
                     "negatives": [functions[g][1] for g in negs]})
    return rows


def gen_synthetic_corpus(spec: SyntheticCorpusSpec) -> Corpus:
    rng = random.Random(spec.seed)
    mnemonics = dialect_b_mnemonics(spec.seed)
    snippets: dict[str, dict] = {}
    functions: dict[str, tuple[str, str]] = {}
    width = max(4, len(str(spec.num_functions - 1)))
    for k in range(spec.num_functions):
        name = f"fn{k:0{width}d}"
        fn = generate_function(rng, spec.min_instructions, spec.max_instructions)
        ida, idb = f"{name}@{ARCH_A}", f"{name}@{ARCH_B}"
        snippets[ida] = {"id": ida, "arch": ARCH_A, "instructions": render_a(fn)}
        variant = compiler_variant(fn, rng, spec.mutation_rate, spec.permute_registers)
        snippets[idb] = {"id": idb, "arch": ARCH_B, "instructions": render_b(variant, mnemonics)}
        functions[name] = (ida, idb)

    splits = _split_names(list(functions), spec.split, rng)
    pairs = {}
    for split, names in splits.items():
        rows = []
        for name in names:
            rows.append({"a": functions[name][0], "b": functions[name][1], "label": 1})
            if len(names) > 1:
                other = rng.choice([g for g in names if g != name])
                rows.append({"a": functions[name][0], "b": functions[other][1], "label": 0})
        pairs[split] = rows

    search = {"all": _queries(list(functions), list(functions), functions, spec.n_neg, rng)}
    for split, names in splits.items():
        if len(names) > spec.n_neg:
            search[split] = _queries(names, names, functions, spec.n_neg, rng)
    return Corpus(snippets, functions, splits, pairs, search)


def spec_to_json(spec: SyntheticCorpusSpec) -> dict:
    return asdict(spec)
