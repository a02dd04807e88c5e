"""Visual encoders: a per-frame semantic encoder and a spatial-geometric
encoder (per-frame stage plus a fusion decoder that cross-attends to cached
history), the 2x2 spatial token merge, and the point-map head.

Cross-attention keys/values cached into memory are each layer's K/V
projections of the frame's memory-independent base features (patch
embeddings for the semantic encoder, the per-frame encoder output for the
geometric one). That keeps an append O(1), makes a gather a pure
concatenation, and renders an evicted frame's pixels unreachable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .memory import DualMemory, FrameKV, GatherResult
from .nn import Embedding, LayerNorm, Linear, Mlp, Module, MultiHeadAttention, split_heads
from .tensor import Tensor


@dataclass
class Observation:
    rgb: np.ndarray  # float32 [3, H, W] in [0, 1]
    frame_id: int


@dataclass
class TokenGrid:
    tokens: Tensor
    gh: int
    gw: int
    kind: str  # semantic | merged-semantic | geometric | merged-geometric | fused

    def __post_init__(self):
        if self.tokens.shape[0] != self.gh * self.gw:
            raise T.ShapeError(
                f"token count {self.tokens.shape[0]} != grid area {self.gh * self.gw}"
            )


@dataclass
class PointMap:
    points: Tensor  # [3, H, W], meters, episode frame
    confidence: Tensor  # [H, W], strictly positive


def patchify(rgb: np.ndarray, patch: int) -> np.ndarray:
    """[3, H, W] -> [n_patches, 3*p*p], row-major over the patch grid."""
    c, h, w = rgb.shape
    gh, gw = h // patch, w // patch
    x = rgb.reshape(c, gh, patch, gw, patch)
    x = x.transpose(1, 3, 0, 2, 4)  # gh, gw, c, p, p
    return np.ascontiguousarray(x.reshape(gh * gw, c * patch * patch))


def _slot_vectors(table: Embedding, result: GatherResult, heads: int, offset: int = 0) -> Tensor:
    """Per-token cache-position embeddings for the gathered keys, [h, S, d]."""
    max_slot = table.table.shape[0] - 1
    ids = np.empty(result.token_count, dtype=np.int64)
    bounds = [off for _, off in result.slots] + [result.token_count]
    for rank, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
        ids[lo:hi] = min(rank + offset, max_slot)
    return split_heads(table(ids), heads)


class InteractionBlock(Module):
    """Pre-LN block: frame-local self-attention, optional memory
    cross-attention, then an MLP."""

    def __init__(self, rng, dim: int, heads: int, cross: bool):
        self.ln1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(rng, dim, heads)
        if cross:
            self.ln2 = LayerNorm(dim)
            self.cross_attn = MultiHeadAttention(rng, dim, heads)
        self.ln3 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, hidden=2 * dim)
        object.__setattr__(self, "has_cross", cross)

    def __call__(self, x: Tensor, gathered: GatherResult | None, slot_table: Embedding,
                 heads: int, slot_offset: int = 0, self_mask=None) -> Tensor:
        x = T.add(x, self.self_attn(self.ln1(x), mask=self_mask))
        if self.has_cross and gathered is not None and not gathered.empty:
            k = T.add(gathered.k, _slot_vectors(slot_table, gathered, heads, slot_offset))
            x = T.add(x, self.cross_attn.attend(self.ln2(x), k, gathered.v))
        x = T.add(x, self.mlp(self.ln3(x)))
        return x


class SemanticEncoder(Module):
    """Per-frame patch encoder whose blocks cross-attend to its own
    frame-history cache."""

    def __init__(self, rng, img: int, patch: int, dim: int, heads: int, blocks: int,
                 max_slots: int):
        self.patch_embed = Linear(rng, 3 * patch * patch, dim)
        gh = img // patch
        self.pos = Embedding(rng, gh * gh, dim)
        self.blocks = [InteractionBlock(rng, dim, heads, cross=True) for _ in range(blocks)]
        self.slot_table = Embedding(rng, max(max_slots, 1), dim)
        object.__setattr__(self, "patch", patch)
        object.__setattr__(self, "gh", gh)
        object.__setattr__(self, "heads", heads)

    def base_tokens(self, obs: Observation) -> Tensor:
        n = self.gh * self.gh
        x = self.patch_embed(Tensor(patchify(obs.rgb, self.patch)))
        return T.add(x, self.pos(np.arange(n)))

    def __call__(self, obs: Observation, mem: DualMemory | None, append: bool = True) -> TokenGrid:
        base = self.base_tokens(obs)
        x = base
        for layer, blk in enumerate(self.blocks):
            gathered = mem.gather(layer) if mem is not None else None
            x = blk(x, gathered, self.slot_table, self.heads)
        if mem is not None and append:
            kvs = [blk.cross_attn.project_kv(base) for blk in self.blocks]
            mem.append(FrameKV(obs.frame_id, kvs, base.shape[0]))
        return TokenGrid(x, self.gh, self.gh, "semantic")


class GeometricEncoder(Module):
    """Per-frame encoder (self-attention only) followed by a fusion decoder
    that alternates frame-local attention with cross-attention over cached
    history; the cache holds each decoder layer's projections of the
    per-frame encoder output."""

    def __init__(self, rng, img: int, patch: int, dim: int, heads: int,
                 enc_blocks: int, dec_blocks: int, max_slots: int):
        self.patch_embed = Linear(rng, 3 * patch * patch, dim)
        gh = img // patch
        self.pos = Embedding(rng, gh * gh, dim)
        self.enc_blocks = [InteractionBlock(rng, dim, heads, cross=False)
                           for _ in range(enc_blocks)]
        self.dec_blocks = [InteractionBlock(rng, dim, heads, cross=True)
                           for _ in range(dec_blocks)]
        self.slot_table = Embedding(rng, max(max_slots, 1), dim)
        object.__setattr__(self, "patch", patch)
        object.__setattr__(self, "gh", gh)
        object.__setattr__(self, "heads", heads)

    def frame_features(self, obs: Observation) -> Tensor:
        n = self.gh * self.gh
        x = self.patch_embed(Tensor(patchify(obs.rgb, self.patch)))
        x = T.add(x, self.pos(np.arange(n)))
        for blk in self.enc_blocks:
            x = blk(x, None, self.slot_table, self.heads)
        return x

    def __call__(self, obs: Observation, mem: DualMemory | None, append: bool = True) -> TokenGrid:
        e = self.frame_features(obs)
        x = e
        for layer, blk in enumerate(self.dec_blocks):
            gathered = mem.gather(layer) if mem is not None else None
            x = blk(x, gathered, self.slot_table, self.heads)
        if mem is not None and append:
            kvs = [blk.cross_attn.project_kv(e) for blk in self.dec_blocks]
            mem.append(FrameKV(obs.frame_id, kvs, e.shape[0]))
        return TokenGrid(x, self.gh, self.gh, "geometric")


_MERGED_KIND = {"semantic": "merged-semantic", "geometric": "merged-geometric"}


class SpatialMerge(Module):
    """Concatenate each 2x2 token block channel-wise and project back to C.

    The projection initializes to the block average, so a constant grid maps
    to the same constant."""

    def __init__(self, rng, dim: int):
        self.proj = Linear(rng, 4 * dim, dim)
        eye = np.eye(dim)
        self.proj.w.data = np.concatenate([eye, eye, eye, eye], axis=0) / 4.0

    def __call__(self, grid: TokenGrid) -> TokenGrid:
        if grid.gh % 2 or grid.gw % 2:
            raise T.ShapeError("spatial merge needs even grid dims")
        gh, gw = grid.gh, grid.gw
        c = grid.tokens.shape[1]
        x = T.reshape(grid.tokens, (gh // 2, 2, gw // 2, 2, c))
        x = T.transpose(x, 1, 2)  # bh, bw, 2, 2, c
        x = T.reshape(x, ((gh // 2) * (gw // 2), 4 * c))
        out = self.proj(x)
        kind = _MERGED_KIND.get(grid.kind, "merged-" + grid.kind)
        return TokenGrid(out, gh // 2, gw // 2, kind)


class PointHead(Module):
    """Per-token MLP predicting a p x p block of 3D points plus confidence."""

    OUTPUT_GAIN = 4.0  # scene coordinates span several meters

    def __init__(self, rng, dim: int, patch: int, hidden: int = 128):
        self.mlp = Mlp(rng, dim, hidden=hidden, d_out=patch * patch * 4)
        object.__setattr__(self, "patch", patch)

    def __call__(self, grid: TokenGrid) -> PointMap:
        if grid.kind != "geometric":
            raise T.ShapeError("point head expects unmerged geometric tokens")
        p = self.patch
        gh, gw = grid.gh, grid.gw
        out = self.mlp(grid.tokens)  # [n, p*p*4]
        out = T.reshape(out, (gh, gw, p, p, 4))
        out = T.transpose(out, 1, 2)  # gh, p, gw, p, 4
        out = T.reshape(out, (gh * p, gw * p, 4))
        pts = T.scale(T.index(out, (Ellipsis, slice(0, 3))), self.OUTPUT_GAIN)  # [H, W, 3]
        pts = T.transpose(T.transpose(pts, 0, 2), 1, 2)  # [3, H, W]
        conf = T.softplus(T.index(out, (Ellipsis, 3)))
        return PointMap(pts, conf)
