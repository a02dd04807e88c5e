"""Feature fusion and the causal action policy.

The policy processes, per step, a block of merged visual tokens plus one
readout token. Blocks alternate causal self-attention within the step,
cross-attention over {pinned instruction KVs, cached frame KVs}, and an
MLP. Cached KVs are per-layer projections of the step's embedded visual
tokens, so history never needs recomputation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import TokenGrid
from .memory import PINNED_ID, DualMemory, FrameKV
from .nn import Embedding, LayerNorm, Linear, Module, MultiHeadAttention, causal_mask
from .encoders import InteractionBlock
from .nn import Mlp
from .tensor import Tensor


class Action(enum.IntEnum):
    MoveForward = 0
    TurnLeft = 1
    TurnRight = 2
    Stop = 3


ACTION_LETTERS = {Action.MoveForward: "F", Action.TurnLeft: "L",
                  Action.TurnRight: "R", Action.Stop: "S"}
LETTER_ACTIONS = {v: k for k, v in ACTION_LETTERS.items()}

FORWARD_METERS = 0.25
TURN_RADIANS = np.pi / 6.0


@dataclass
class Instruction:
    text: str
    token_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.token_ids) > 64:
            raise ValueError("instruction exceeds 64 tokens")


class PolicyProtocolError(RuntimeError):
    pass


class Fusion(Module):
    """Combine merged semantic and merged spatial tokens into fused tokens.

    ``add`` implements F = S' + lam * MLP(G') with a two-layer MLP whose
    output layer starts at zero; ``concat`` starts as the semantic identity;
    ``cross_attn`` lets S' query G' through a zero-initialized output map.
    lam only affects the add strategy.
    """

    def __init__(self, rng, dim: int, heads: int, strategy: str = "add", lam: float = 0.2):
        if strategy not in ("add", "concat", "cross_attn"):
            raise ValueError(f"unknown fusion strategy {strategy!r}")
        if lam < 0:
            raise ValueError("lam must be >= 0")
        object.__setattr__(self, "strategy", strategy)
        object.__setattr__(self, "lam", float(lam))
        if strategy == "add":
            self.mlp = Mlp(rng, dim, hidden=2 * dim, zero_out=True)
        elif strategy == "concat":
            self.proj = Linear(rng, 2 * dim, dim)
            self.proj.w.data = np.concatenate([np.eye(dim), np.zeros((dim, dim))], axis=0)
        else:
            self.attn = MultiHeadAttention(rng, dim, heads)
            self.attn.wo.w.data = np.zeros_like(self.attn.wo.w.data)

    def __call__(self, s_merged: TokenGrid, g_merged: TokenGrid | None) -> TokenGrid:
        if g_merged is None:
            return TokenGrid(s_merged.tokens, s_merged.gh, s_merged.gw, "fused")
        if s_merged.tokens.shape != g_merged.tokens.shape:
            raise T.ShapeError(
                f"fusion shapes differ: {s_merged.tokens.shape} vs {g_merged.tokens.shape}"
            )
        s, g = s_merged.tokens, g_merged.tokens
        if self.strategy == "add":
            out = s if self.lam == 0.0 else T.add(s, T.scale(self.mlp(g), self.lam))
        elif self.strategy == "concat":
            out = self.proj(T.concat([s, g], axis=1))
        else:
            k, v = self.attn.project_kv(g)
            out = T.add(s, self.attn.attend(s, k, v))
        return TokenGrid(out, s_merged.gh, s_merged.gw, "fused")


class Policy(Module):
    """Causal transformer over instruction + streaming fused visual tokens."""

    N_ACTIONS = 4

    def __init__(self, rng, dim: int, heads: int, blocks: int, vocab: int,
                 max_instr: int, n_visual: int, max_slots: int):
        self.tok_emb = Embedding(rng, vocab, dim)
        self.instr_pos = Embedding(rng, max_instr, dim)
        self.adapter = Linear(rng, dim, dim)
        self.tok_pos = Embedding(rng, n_visual + 1, dim)
        self.readout = Tensor(rng.normal(0.0, 0.02, size=(1, dim)), requires_grad=True)
        self.blocks = [InteractionBlock(rng, dim, heads, cross=True) for _ in range(blocks)]
        # slot 0 is the pinned instruction; frames re-index from slot 1
        self.slot_table = Embedding(rng, max_slots + 1, dim)
        self.ln_f = LayerNorm(dim)
        self.head = Linear(rng, dim, self.N_ACTIONS)
        object.__setattr__(self, "heads", heads)
        object.__setattr__(self, "n_visual", n_visual)
        object.__setattr__(self, "_mask", causal_mask(n_visual + 1))

    def pin_instruction(self, mem: DualMemory, instr: Instruction):
        """Embed the instruction and park its per-layer KVs ahead of frame 0."""
        ids = np.asarray(instr.token_ids, dtype=np.int64)
        if ids.size == 0:
            raise PolicyProtocolError("cannot pin an empty instruction")
        e = T.add(self.tok_emb(ids), self.instr_pos(np.arange(ids.size)))
        kvs = [blk.cross_attn.project_kv(e) for blk in self.blocks]
        mem.pin(FrameKV(PINNED_ID, kvs, ids.size))

    def visual_base(self, fused: TokenGrid) -> Tensor:
        n = fused.tokens.shape[0]
        if n != self.n_visual:
            raise T.ShapeError(f"policy expects {self.n_visual} visual tokens, got {n}")
        return T.add(self.adapter(fused.tokens), self.tok_pos(np.arange(n)))

    def step(self, fused: TokenGrid, mem: DualMemory) -> Tensor:
        """One action prediction; appends this step's KVs. Returns logits[4]."""
        if mem.pinned is None:
            raise PolicyProtocolError("policy step before instruction pinning; reset first")
        v = self.visual_base(fused)
        r = T.add(self.readout, self.tok_pos(np.array([self.n_visual])))
        x = T.concat([v, r], axis=0)
        for layer, blk in enumerate(self.blocks):
            x = blk(x, mem.gather(layer), self.slot_table, self.heads, self_mask=self._mask)
        out = self.ln_f(T.index(x, (slice(self.n_visual, self.n_visual + 1), slice(None))))
        logits = T.reshape(self.head(out), (self.N_ACTIONS,))
        kvs = [blk.cross_attn.project_kv(v) for blk in self.blocks]
        mem.append(FrameKV(mem.total_appended, kvs, self.n_visual))
        return logits


def select_action(logits, mode: str = "greedy", temperature: float = 1.0,
                  rng: np.random.Generator | None = None) -> Action:
    """Greedy argmax (ties break in Action order) or seeded sampling."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if not np.isfinite(data).all():
        raise T.NumericError("non-finite action logits")
    if mode == "greedy" or (mode == "sample" and temperature < 1e-6):
        return Action(int(np.argmax(data)))
    if mode != "sample":
        raise ValueError(f"unknown selection mode {mode!r}")
    if rng is None:
        raise ValueError("sampling requires a seeded Generator")
    z = data.astype(np.float64) / float(temperature)
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return Action(int(rng.choice(len(p), p=p)))
