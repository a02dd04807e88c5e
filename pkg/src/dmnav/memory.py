"""Fixed-size dual implicit memory: per-layer KV caches of past frames.

A memory keeps two stores: the first ``n_init`` frames are retained for the
whole episode (they act as global anchors), and the most recent ``n_slide``
later frames live in a FIFO window. Appending beyond capacity evicts the
oldest window frame; total footprint is bounded by ``n_init + n_slide``
frames regardless of trajectory length.

Keys/values are stored post-projection, so a gather is a concatenation and
an append never recomputes history. An optional pinned prefix (used by the
policy for instruction tokens) precedes frame 0 and is never evicted.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .tensor import Tensor, concat

PINNED_ID = -1


class MemoryConfigError(ValueError):
    pass


class MemoryProtocolError(RuntimeError):
    pass


@dataclass
class FrameKV:
    """Per-layer projected keys/values for one frame's tokens."""

    frame_id: int
    per_layer: list[tuple[Tensor, Tensor]]  # [(K[h,t,d], V[h,t,d]) per layer]
    token_count: int

    def __post_init__(self):
        for k, v in self.per_layer:
            if k.shape[1] != self.token_count or v.shape[1] != self.token_count:
                raise MemoryProtocolError("layer token counts disagree within a frame")

    def nbytes(self) -> int:
        return sum(k.data.nbytes + v.data.nbytes for k, v in self.per_layer)


@dataclass
class GatherResult:
    k: Tensor | None
    v: Tensor | None
    slots: list[tuple[int, int]] = field(default_factory=list)  # (frame_id, token offset)
    token_count: int = 0

    @property
    def empty(self) -> bool:
        return self.token_count == 0


class DualMemory:
    """Initial-window plus sliding-window KV cache over frames."""

    def __init__(self, n_init: int, n_slide: int):
        if n_init < 0:
            raise MemoryConfigError("n_init must be >= 0")
        if n_slide < 1:
            raise MemoryConfigError("n_slide must be >= 1")
        self.n_init = n_init
        self.n_slide = n_slide
        self.initial: list[FrameKV] = []
        self.sliding: deque[FrameKV] = deque()
        self.total_appended = 0
        self.pinned: FrameKV | None = None

    # ------------------------------------------------------------ mutation

    def pin(self, kv: FrameKV):
        """Install the never-evicted prefix (e.g. instruction KVs)."""
        if self.total_appended:
            raise MemoryProtocolError("pin must precede the first append")
        self.pinned = kv

    def append(self, kv: FrameKV) -> int | None:
        """Store a frame; returns the evicted frame id, if any."""
        if kv.frame_id != self.total_appended:
            raise MemoryProtocolError(
                f"out-of-order frame id {kv.frame_id}, expected {self.total_appended}"
            )
        evicted = None
        if len(self.initial) < self.n_init:
            self.initial.append(kv)
        else:
            if len(self.sliding) == self.n_slide:
                evicted = self.sliding.popleft().frame_id
            self.sliding.append(kv)
        self.total_appended += 1
        return evicted

    def reset(self):
        self.initial = []
        self.sliding = deque()
        self.total_appended = 0
        self.pinned = None

    def clone(self) -> "DualMemory":
        """Shallow copy (shares cached tensors); for dry-run timing."""
        out = DualMemory(self.n_init, self.n_slide)
        out.initial = list(self.initial)
        out.sliding = deque(self.sliding)
        out.total_appended = self.total_appended
        out.pinned = self.pinned
        return out

    # ------------------------------------------------------------- queries

    def retained(self) -> list[FrameKV]:
        return self.initial + list(self.sliding)

    def retained_ids(self) -> list[int]:
        return [f.frame_id for f in self.retained()]

    def gather(self, layer: int) -> GatherResult:
        """Concatenated K/V for one layer: pinned, then initial, then sliding.

        Frames appear in ascending frame id order; slot offsets re-index the
        cache contiguously from 0 so positional encoding never references
        absolute frame time.
        """
        frames = ([self.pinned] if self.pinned is not None else []) + self.retained()
        if not frames:
            return GatherResult(None, None, [], 0)
        ks, vs, slots = [], [], []
        offset = 0
        for f in frames:
            if layer >= len(f.per_layer):
                raise MemoryProtocolError(f"layer {layer} beyond cached depth")
            k, v = f.per_layer[layer]
            ks.append(k)
            vs.append(v)
            slots.append((f.frame_id, offset))
            offset += f.token_count
        if len(ks) == 1:
            return GatherResult(ks[0], vs[0], slots, offset)
        return GatherResult(concat(ks, axis=1), concat(vs, axis=1), slots, offset)

    def nbytes(self) -> int:
        frames = ([self.pinned] if self.pinned is not None else []) + self.retained()
        return sum(f.nbytes() for f in frames)

    def eviction_count(self) -> int:
        return max(0, self.total_appended - self.n_init - self.n_slide)


def retained_ids_oracle(n_init: int, n_slide: int, total: int) -> list[int]:
    """Closed-form retained set after ``total`` appends."""
    head = list(range(min(total, n_init)))
    tail_start = max(n_init, total - n_slide)
    return head + list(range(tail_start, total))


def footprint_row(step: int, mem: DualMemory) -> str:
    ids = " ".join(str(i) for i in mem.retained_ids())
    return f"{step},{ids},{mem.nbytes()}"


def write_footprint_csv(path, rows: list[str]):
    with open(path, "w") as fh:
        fh.write("step,retained_frame_ids,bytes_resident\n")
        for r in rows:
            fh.write(r + "\n")
