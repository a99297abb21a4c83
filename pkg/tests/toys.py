"""Small deterministic fixtures shared by the model, harness and acceptance tests."""

from __future__ import annotations

import random

import torch

from binsim.graph import GraphConfig, build_graph
from binsim.model import BinSimModel, ModelConfig, collate, loss
from binsim.tokenizer import PAD_ID, build_vocab, tokenize_snippet

from oracles import finite_difference

X86_LINES = ["mov eax, 1", "push ebp", "mov ebp, esp", "sub esp, 0x10", "add eax, ebx", "call sym.memcpy",
             "mov dword [ebp - 0x8], eax", "cmp eax, 4", "jne 0x400010", "xor ecx, ecx", "pop ebp", "ret"]
MIPS_LINES = ["li v0, 1", "addiu sp, sp, -4", "sw fp, 0(sp)", "move fp, sp", "addu v0, v0, v1", "jal memcpy",
              "sw v0, -8(fp)", "slti at, v0, 4", "bne at, zero, 0x400010", "xor a0, a0, a0", "lw fp, 0(sp)", "jr ra"]

TINY = ModelConfig(token_emb_dim=8, char_emb_dim=4, char_filter_count=8, hidden_dim=8)
MINI = ModelConfig(token_emb_dim=4, char_emb_dim=3, char_filter_count=4, hidden_dim=6)


def random_pair(rng: random.Random, max_instr: int = 8, idx: int = 0):
    a = [rng.choice(X86_LINES) for _ in range(rng.randint(1, max_instr))]
    b = [rng.choice(MIPS_LINES) for _ in range(rng.randint(1, max_instr))]
    return tokenize_snippet(f"a{idx}", "x86", a), tokenize_snippet(f"b{idx}", "mips", b)


def toy_pairs(seed: int, n: int, max_instr: int = 8):
    rng = random.Random(seed)
    return [random_pair(rng, max_instr, i) for i in range(n)]


def toy_vocab(pairs):
    return build_vocab(s for p in pairs for s in p)


def make_model(cfg: ModelConfig, vocab, seed: int = 0, dtype=torch.float32) -> BinSimModel:
    torch.manual_seed(seed)
    return BinSimModel.for_vocab(cfg, vocab).to(dtype)


def make_batch(pairs, vocab, cfg: ModelConfig, graph_cfg: GraphConfig | None = None, dtype=torch.float32):
    graphs = [build_graph(a, b, graph_cfg or GraphConfig()) for a, b in pairs]
    return collate(pairs, graphs, vocab, cfg, dtype)


def gradcheck_samples(seed: int, num_params: int, cfg: ModelConfig = MINI, max_tokens: int = 6):
    """Return ``[(name, index, autograd, finite_difference)]`` for randomly drawn scalar parameters.

    Float64 miniature model on pairs truncated to ``max_tokens`` tokens per side.
    """
    rng = random.Random(seed)
    pairs = []
    while len(pairs) < 3:
        a, b = random_pair(rng, 3, len(pairs))
        if len(a) <= max_tokens and len(b) <= max_tokens:
            pairs.append((a, b))
    vocab = toy_vocab(pairs)
    model = make_model(cfg, vocab, seed, torch.float64)
    batch = make_batch(pairs, vocab, cfg, dtype=torch.float64)
    labels = torch.tensor([1, 0, 1])

    def objective():
        return loss(model(batch), labels)

    model.zero_grad()
    objective().backward()
    named = [(n, p) for n, p in model.named_parameters()]
    sizes = [p.numel() for _, p in named]
    out = []
    while len(out) < num_params:
        k = rng.choices(range(len(named)), weights=sizes)[0]
        name, p = named[k]
        index = tuple(rng.randrange(s) for s in p.shape)
        if name.endswith("embedding.weight") and index[0] == PAD_ID:
            continue  # padding rows are frozen by design
        out.append((name, index, p.grad[index].item(), finite_difference(objective, p, index)))
    return out


def relative_error(auto: float, fd: float, floor: float = 1e-8) -> float:
    """|auto - fd| relative to the larger magnitude; both below ``floor`` counts as agreement."""
    scale = max(abs(auto), abs(fd))
    return 0.0 if scale < floor else abs(auto - fd) / scale
