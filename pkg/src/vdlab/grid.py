"""Token lattice geometry: grid dimensions, axis-order permutations, coordinates.

Tokens live on an (f, h, w) lattice and are flattened in "fhw" order
(f slowest, w fastest). A direction such as "whf" names an alternative
iteration order of the same lattice; `permutation_for` returns the index
permutation that reorders a flat fhw sequence into that order.
"""

from dataclasses import dataclass

import torch

# All six axis orders, in canonical order. MSWA head group i slides along
# DIRECTIONS[i].
DIRECTIONS = ("fhw", "fwh", "hfw", "hwf", "wfh", "whf")


@dataclass(frozen=True)
class GridDims:
    """Extents of the token lattice (post-patchify): frames, height, width."""

    f: int
    h: int
    w: int

    def __post_init__(self):
        for name in ("f", "h", "w"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"grid extent {name} must be a positive int, got {v!r}")

    @property
    def seq(self) -> int:
        return self.f * self.h * self.w


def check_direction(direction: str) -> str:
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}, expected one of {DIRECTIONS}")
    return direction


def permutation_for(direction: str, dims: GridDims) -> torch.Tensor:
    """Index permutation reordering a flat fhw sequence into `direction` order.

    Returns a LongTensor `perm` of length dims.seq such that `x[perm]` iterates
    the lattice with direction[0] as the slowest axis and direction[2] as the
    fastest. "fhw" yields the identity.
    """
    check_direction(direction)
    axes = tuple("fhw".index(c) for c in direction)
    idx = torch.arange(dims.seq).reshape(dims.f, dims.h, dims.w)
    return idx.permute(axes).reshape(-1)


def invert_permutation(perm: torch.Tensor) -> torch.Tensor:
    """Inverse permutation: invert_permutation(perm)[perm[i]] == i."""
    inv = torch.empty_like(perm)
    inv[perm] = torch.arange(perm.numel(), dtype=perm.dtype)
    return inv


def lattice_positions(dims: GridDims) -> torch.Tensor:
    """Per-token (f, h, w) coordinates, shape [seq, 3], in flat fhw order."""
    pf = torch.arange(dims.f).repeat_interleave(dims.h * dims.w)
    ph = torch.arange(dims.h).repeat_interleave(dims.w).repeat(dims.f)
    pw = torch.arange(dims.w).repeat(dims.f * dims.h)
    return torch.stack([pf, ph, pw], dim=1)
