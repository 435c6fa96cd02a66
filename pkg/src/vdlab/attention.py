"""Full, banded, and multidirectional sliding window attention (MSWA).

Attention operates on per-head tensors of shape [heads, seq, d] over a
flattened token lattice. MSWA splits heads into six contiguous groups; group i
permutes the sequence into DIRECTIONS[i] order, applies banded attention
there, and permutes back. Windows are symmetric and non-causal: a query at
flat position i attends keys j with |i - j| <= size // 2, truncated at the
sequence ends (no wraparound, no padding).
"""

import math
from dataclasses import dataclass
from enum import Enum

import torch

from .grid import DIRECTIONS, GridDims, invert_permutation, permutation_for
from .numerics import ShapeError, assert_finite, masked_fill_neg_inf, softmax

N_DIRECTIONS = len(DIRECTIONS)


class AttnKind(str, Enum):
    FULL = "full"
    MSWA = "mswa"


@dataclass(frozen=True)
class WindowSpec:
    """Sliding window of `size` tokens total; half-width is size // 2."""

    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"window size must be >= 1, got {self.size}")

    @property
    def half_width(self) -> int:
        return self.size // 2

    def covers(self, seq: int) -> bool:
        """True when the band degenerates to full attention."""
        return self.half_width >= seq - 1


@dataclass(frozen=True)
class HybridSchedule:
    """Per-layer attention kind plus the shared window for MSWA layers."""

    kinds: tuple[AttnKind, ...]
    window: WindowSpec

    def __post_init__(self):
        if len(self.kinds) < 1:
            raise ValueError("schedule needs at least one layer")

    @property
    def n_layers(self) -> int:
        return len(self.kinds)

    @property
    def n_mswa(self) -> int:
        return sum(1 for k in self.kinds if k is AttnKind.MSWA)


def _check_qkv(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> None:
    if q.dim() != 3:
        raise ShapeError("attention", q.shape, ("heads", "seq", "d"))
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError("attention", q.shape, k.shape if q.shape != k.shape else v.shape)


def full_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v per head; q, k, v: [heads, seq, d]."""
    _check_qkv(q, k, v)
    d = q.shape[-1]
    scores = q @ k.transpose(-2, -1) / math.sqrt(d)
    return assert_finite(softmax(scores, dim=-1) @ v, "full_attention")


def masked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
    """Dense attention with an additive -inf mask where `allowed` is False.

    `allowed` broadcasts against [heads, seq_q, seq_k]; every query row must
    keep at least one allowed key.
    """
    _check_qkv(q, k, v)
    d = q.shape[-1]
    scores = q @ k.transpose(-2, -1) / math.sqrt(d)
    scores = masked_fill_neg_inf(scores, allowed)
    return assert_finite(softmax(scores, dim=-1) @ v, "masked_attention")


def banded_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, win: WindowSpec, block: int = 256
) -> torch.Tensor:
    """Attention restricted to |i - j| <= win.half_width on the flat sequence.

    Processes queries in blocks and only touches the keys each block can see,
    so compute scales with seq * window rather than seq^2.
    """
    _check_qkv(q, k, v)
    heads, seq, d = q.shape
    half = win.half_width
    scale = 1.0 / math.sqrt(d)
    out = torch.empty_like(q)
    idx = torch.arange(seq, device=q.device)
    for qs in range(0, seq, block):
        qe = min(qs + block, seq)
        ks = max(0, qs - half)
        ke = min(seq, qe + half)
        scores = q[:, qs:qe] @ k[:, ks:ke].transpose(-2, -1) * scale
        allowed = (idx[qs:qe, None] - idx[None, ks:ke]).abs() <= half
        scores = masked_fill_neg_inf(scores, allowed)
        out[:, qs:qe] = softmax(scores, dim=-1) @ v[:, ks:ke]
    return assert_finite(out, "banded_attention")


def head_groups(heads: int) -> list[tuple[int, int]]:
    """Contiguous equal head ranges, one per direction, in DIRECTIONS order."""
    if heads % N_DIRECTIONS != 0:
        raise ValueError(
            f"mswa requires heads divisible by {N_DIRECTIONS}, got {heads}; "
            "use full attention for this head count"
        )
    size = heads // N_DIRECTIONS
    return [(g * size, (g + 1) * size) for g in range(N_DIRECTIONS)]


def mswa(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, dims: GridDims, win: WindowSpec
) -> torch.Tensor:
    """Multidirectional sliding window attention over the token lattice.

    Head group i is permuted into DIRECTIONS[i] order, runs banded attention
    there, and is permuted back. All groups share one banded call since the
    band is identical in permuted coordinates.
    """
    _check_qkv(q, k, v)
    heads, seq, _ = q.shape
    if seq != dims.seq:
        raise ShapeError("mswa", q.shape, (heads, dims.seq, q.shape[-1]))
    groups = head_groups(heads)
    perms = [permutation_for(d, dims) for d in DIRECTIONS]

    def gather(x):
        return torch.cat([x[gs:ge, p] for (gs, ge), p in zip(groups, perms)], dim=0)

    out_p = banded_attention(gather(q), gather(k), gather(v), win)
    out = torch.empty_like(out_p)
    for (gs, ge), p in zip(groups, perms):
        out[gs:ge, p] = out_p[gs:ge]
    return out


def direction_band_mask(direction: str, dims: GridDims, win: WindowSpec) -> torch.Tensor:
    """Boolean [seq, seq] mask of the band in `direction` order, on fhw indices."""
    pos = invert_permutation(permutation_for(direction, dims))
    return (pos[:, None] - pos[None, :]).abs() <= win.half_width


def mswa_mask_oracle(dims: GridDims, win: WindowSpec, group: int) -> torch.Tensor:
    """Allowed-key mask for head group `group`, for checking mswa directly."""
    if not 0 <= group < N_DIRECTIONS:
        raise ValueError(f"group must be in [0, {N_DIRECTIONS}), got {group}")
    return direction_band_mask(DIRECTIONS[group], dims, win)


def receptive_field(
    dims: GridDims, win: WindowSpec, n_layers: int, directions: tuple[str, ...]
) -> torch.Tensor:
    """Reachable-set size per token after n_layers of unioned direction bands.

    BFS over mask adjacency: a token reaches every token within the union band,
    iterated once per layer. Returns int64 counts of length dims.seq.
    """
    if n_layers < 1:
        raise ValueError(f"n_layers must be >= 1, got {n_layers}")
    if not directions:
        raise ValueError("directions must be a non-empty subset")
    adj = torch.zeros(dims.seq, dims.seq, dtype=torch.bool)
    for d in directions:
        adj |= direction_band_mask(d, dims, win)
    reach = adj
    for _ in range(n_layers - 1):
        reach = (reach.double() @ adj.double()) > 0
    return reach.sum(dim=1)


def schedule_receptive_field(schedule: HybridSchedule, dims: GridDims) -> torch.Tensor:
    """Reachable-set size per token after a whole hybrid stack.

    Full layers contribute all-to-all adjacency, MSWA layers the union of the
    six direction bands. Returns int64 counts of length dims.seq.
    """
    seq = dims.seq
    band = torch.zeros(seq, seq, dtype=torch.bool)
    for d in DIRECTIONS:
        band |= direction_band_mask(d, dims, schedule.window)
    reach = torch.eye(seq, dtype=torch.bool)
    for kind in schedule.kinds:
        adj = torch.ones(seq, seq, dtype=torch.bool) if kind is AttnKind.FULL else band
        reach = (reach.double() @ adj.double()) > 0
    return reach.sum(dim=1)


def flop_count(kind: AttnKind, dims: GridDims, win: WindowSpec, heads: int, d: int) -> int:
    """FLOPs for one attention layer, mul-add counted as 2.

    Full: 4 * heads * seq^2 * d (scores plus weighted sum). MSWA replaces one
    seq factor by the band width, capped at seq.
    """
    seq = dims.seq
    if kind is AttnKind.FULL:
        return 4 * heads * seq * seq * d
    band = min(seq, 2 * win.half_width + 1)
    return 4 * heads * seq * band * d


PLACEMENTS = ("none", "shallow", "middle", "deep", "custom")


def build_schedule(
    n_layers: int,
    placement: str = "middle",
    win: WindowSpec = WindowSpec(16),
    band: tuple[int, int] | None = None,
) -> HybridSchedule:
    """Hybrid schedule: MSWA on a contiguous layer band, full attention elsewhere.

    Bands are half-open [start, end). shallow = [0, L/2), middle = [L/4, 3L/4),
    deep = [L/2, L); "custom" takes an explicit band, "none" is all-full.
    """
    if n_layers < 1:
        raise ValueError(f"n_layers must be >= 1, got {n_layers}")
    if placement not in PLACEMENTS:
        raise ValueError(f"unknown placement {placement!r}, expected one of {PLACEMENTS}")
    if placement == "custom":
        if band is None:
            raise ValueError("custom placement requires an explicit band")
    elif band is not None:
        raise ValueError(f"band is only valid with placement='custom', got {placement!r}")
    else:
        band = {
            "none": (0, 0),
            "shallow": (0, n_layers // 2),
            "middle": (n_layers // 4, 3 * n_layers // 4),
            "deep": (n_layers // 2, n_layers),
        }[placement]
    start, end = band
    if not (0 <= start <= end <= n_layers):
        raise ValueError(f"band {band} outside [0, {n_layers}]")
    kinds = tuple(
        AttnKind.MSWA if start <= i < end else AttnKind.FULL for i in range(n_layers)
    )
    return HybridSchedule(kinds=kinds, window=win)


def stack_self_attention(
    x: torch.Tensor, schedule: HybridSchedule, dims: GridDims
) -> torch.Tensor:
    """Chain self-attention layers (q = k = v = state) through a schedule.

    The benchmark unit for comparing full and hybrid stacks; no projections or
    FFNs, attention cost only.
    """
    for kind in schedule.kinds:
        if kind is AttnKind.FULL:
            x = full_attention(x, x, x)
        else:
            x = mswa(x, x, x, dims, schedule.window)
    return x
