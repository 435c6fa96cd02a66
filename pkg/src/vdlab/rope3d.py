"""3D rotary positional embedding.

Each head's channels are split into three disjoint slices, laid out in
(h, w, f) order with shares (3/8, 3/8, 2/8) of head_dim by default. A token at
lattice position (pf, ph, pw) has each slice rotated pairwise by angles
p * base^(-2k / d_axis), where p is the coordinate along that slice's axis.
Pairs are adjacent channels (2k, 2k+1) within a slice.
"""

from dataclasses import dataclass

import torch

from .grid import GridDims, lattice_positions
from .numerics import DTYPE, ShapeError

DEFAULT_ALLOC = (3 / 8, 3 / 8, 2 / 8)  # (h, w, f) shares of head_dim


@dataclass(frozen=True)
class RopeConfig:
    """Channel allocation and frequency base for 3D rotary embeddings."""

    head_dim: int
    alloc: tuple[float, float, float] = DEFAULT_ALLOC  # (h, w, f)
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim % 8 != 0 or self.head_dim < 8:
            raise ValueError(f"head_dim must be a positive multiple of 8, got {self.head_dim}")
        if abs(sum(self.alloc) - 1.0) > 1e-12:
            raise ValueError(f"alloc fractions must sum to 1, got {self.alloc}")
        if self.base <= 0:
            raise ValueError(f"base must be positive, got {self.base}")
        for axis, d in zip("hwf", self.slice_sizes):
            if d % 2 != 0:
                raise ValueError(
                    f"axis {axis!r} slice of {d} channels is odd; "
                    f"alloc {self.alloc} is incompatible with head_dim {self.head_dim}"
                )

    @property
    def slice_sizes(self) -> tuple[int, int, int]:
        """(h, w, f) slice widths; must be exact even integers."""
        sizes = []
        for frac in self.alloc:
            d = frac * self.head_dim
            if abs(d - round(d)) > 1e-9:
                raise ValueError(
                    f"alloc fraction {frac} of head_dim {self.head_dim} is not an integer"
                )
            sizes.append(round(d))
        return tuple(sizes)


def rope_angles(axis_len: int, d_axis: int, base: float) -> torch.Tensor:
    """Angle table [axis_len, d_axis/2]: table[p][k] = p * base^(-2k / d_axis)."""
    if d_axis % 2 != 0:
        raise ValueError(f"d_axis must be even, got {d_axis}")
    k = torch.arange(d_axis // 2, dtype=DTYPE)
    inv_freq = base ** (-2.0 * k / d_axis)
    p = torch.arange(axis_len, dtype=DTYPE)
    return p[:, None] * inv_freq[None, :]


def _rotate_slice(x: torch.Tensor, pos: torch.Tensor, base: float, inverse: bool) -> torch.Tensor:
    """Rotate adjacent channel pairs of x [..., seq, d] by per-position angles."""
    d = x.shape[-1]
    k = torch.arange(d // 2, dtype=DTYPE)
    inv_freq = base ** (-2.0 * k / d)
    ang = pos.to(DTYPE)[:, None] * inv_freq[None, :]
    if inverse:
        ang = -ang
    cos, sin = torch.cos(ang), torch.sin(ang)
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x_even * cos - x_odd * sin
    out[..., 1::2] = x_even * sin + x_odd * cos
    return out


def apply_rope3d(
    x: torch.Tensor,
    dims: GridDims,
    cfg: RopeConfig,
    offset: tuple[int, int, int] = (0, 0, 0),
    inverse: bool = False,
) -> torch.Tensor:
    """Rotate each axis's channel slice of x [heads, seq, head_dim] by position.

    `offset` shifts all lattice coordinates by (df, dh, dw) before computing
    angles (used to probe translation invariance); `inverse` negates the
    angles, undoing a forward application at the same positions.
    """
    if x.shape[-1] != cfg.head_dim:
        raise ShapeError("apply_rope3d", x.shape, ("heads", dims.seq, cfg.head_dim))
    if x.shape[-2] != dims.seq:
        raise ShapeError("apply_rope3d", x.shape, ("heads", dims.seq, cfg.head_dim))
    pos = lattice_positions(dims)  # [seq, 3] = (pf, ph, pw)
    pf = pos[:, 0] + offset[0]
    ph = pos[:, 1] + offset[1]
    pw = pos[:, 2] + offset[2]
    d_h, d_w, d_f = cfg.slice_sizes
    parts = []
    for sl, p in (
        (x[..., :d_h], ph),
        (x[..., d_h : d_h + d_w], pw),
        (x[..., d_h + d_w :], pf),
    ):
        parts.append(_rotate_slice(sl, p, cfg.base, inverse))
    return torch.cat(parts, dim=-1)
