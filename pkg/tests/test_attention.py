import numpy as np
import pytest
import torch

from oracles import np_full_attention, np_masked_attention, np_mswa, np_reach_counts
from vdlab.attention import (
    AttnKind,
    HybridSchedule,
    WindowSpec,
    banded_attention,
    build_schedule,
    direction_band_mask,
    flop_count,
    full_attention,
    head_groups,
    masked_attention,
    mswa,
    mswa_mask_oracle,
    receptive_field,
    schedule_receptive_field,
    stack_self_attention,
)
from vdlab.grid import DIRECTIONS, GridDims
from vdlab.numerics import ShapeError, randn


def _qkv(heads, seq, d, seed):
    g = torch.Generator().manual_seed(seed)
    return randn(heads, seq, d, gen=g), randn(heads, seq, d, gen=g), randn(heads, seq, d, gen=g)


def test_window_spec_half_width_and_covers():
    assert WindowSpec(1).half_width == 0
    assert WindowSpec(8).half_width == 4
    assert WindowSpec(9).half_width == 4
    assert WindowSpec(7).covers(4)
    assert not WindowSpec(5).covers(4)
    with pytest.raises(ValueError):
        WindowSpec(0)


def test_schedule_counts():
    s = HybridSchedule(
        kinds=(AttnKind.FULL, AttnKind.MSWA, AttnKind.MSWA), window=WindowSpec(4)
    )
    assert s.n_layers == 3 and s.n_mswa == 2
    with pytest.raises(ValueError):
        HybridSchedule(kinds=(), window=WindowSpec(4))


def test_full_attention_matches_numpy_oracle():
    q, k, v = _qkv(2, 9, 4, seed=0)
    out = full_attention(q, k, v)
    ref = np_full_attention(q.numpy(), k.numpy(), v.numpy())
    np.testing.assert_allclose(out.numpy(), ref, atol=1e-12)


def test_masked_attention_matches_numpy_oracle():
    q, k, v = _qkv(2, 8, 4, seed=1)
    g = torch.Generator().manual_seed(2)
    allowed = torch.rand(8, 8, generator=g) < 0.5
    allowed |= torch.eye(8, dtype=torch.bool)  # keep every query row non-empty
    out = masked_attention(q, k, v, allowed)
    ref = np_masked_attention(q.numpy(), k.numpy(), v.numpy(), allowed.numpy())
    np.testing.assert_allclose(out.numpy(), ref, atol=1e-12)


def test_attention_rejects_mismatched_shapes():
    q, k, v = _qkv(2, 5, 4, seed=3)
    with pytest.raises(ShapeError):
        full_attention(q, k[:, :4], v)
    with pytest.raises(ShapeError):
        full_attention(q[0], k[0], v[0])


@pytest.mark.parametrize("seq,size,block", [(10, 3, 4), (17, 5, 4), (32, 9, 256), (7, 1, 2)])
def test_banded_matches_masked_band(seq, size, block):
    q, k, v = _qkv(3, seq, 4, seed=seq * 7 + size)
    win = WindowSpec(size)
    idx = torch.arange(seq)
    allowed = (idx[:, None] - idx[None, :]).abs() <= win.half_width
    out = banded_attention(q, k, v, win, block=block)
    ref = masked_attention(q, k, v, allowed)
    assert (out - ref).abs().max() < 1e-12


def test_banded_degenerate_equals_full():
    q, k, v = _qkv(2, 12, 8, seed=4)
    out = banded_attention(q, k, v, WindowSpec(2 * 12))
    ref = full_attention(q, k, v)
    assert (out - ref).abs().max() < 1e-10


def test_band_truncates_at_ends_no_wraparound():
    # window 3 at seq end: first token sees {0, 1} only, never the last token
    q, k, v = _qkv(1, 6, 2, seed=5)
    win = WindowSpec(3)
    out = banded_attention(q, k, v, win)
    # changing the last key/value must not affect the first query's output
    k2, v2 = k.clone(), v.clone()
    k2[:, -1] += 10.0
    v2[:, -1] += 10.0
    out2 = banded_attention(q, k2, v2, win)
    assert torch.equal(out[:, 0], out2[:, 0])
    assert not torch.equal(out[:, -1], out2[:, -1])


def test_window_one_is_self_only():
    q, k, v = _qkv(2, 5, 3, seed=6)
    out = banded_attention(q, k, v, WindowSpec(1))
    assert (out - v).abs().max() < 1e-12


def test_head_groups_partition():
    assert head_groups(6) == [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6)]
    assert head_groups(12)[0] == (0, 2)
    assert head_groups(12)[-1] == (10, 12)
    with pytest.raises(ValueError):
        head_groups(7)


@pytest.mark.parametrize("dims", [GridDims(2, 3, 4), GridDims(3, 3, 3), GridDims(1, 4, 5)])
@pytest.mark.parametrize("size", [1, 3, 8])
@pytest.mark.parametrize("heads", [6, 12])
def test_mswa_matches_numpy_oracle(dims, size, heads):
    q, k, v = _qkv(heads, dims.seq, 4, seed=dims.seq * heads + size)
    out = mswa(q, k, v, dims, WindowSpec(size))
    ref = np_mswa(q.numpy(), k.numpy(), v.numpy(), dims.f, dims.h, dims.w, size)
    np.testing.assert_allclose(out.numpy(), ref, atol=1e-10)


def test_mswa_degenerate_band_equals_full():
    dims = GridDims(2, 3, 3)
    q, k, v = _qkv(6, dims.seq, 4, seed=7)
    out = mswa(q, k, v, dims, WindowSpec(2 * dims.seq))
    ref = full_attention(q, k, v)
    assert (out - ref).abs().max() < 1e-8


def test_mswa_rejects_wrong_seq():
    dims = GridDims(2, 3, 4)
    q, k, v = _qkv(6, dims.seq + 1, 4, seed=8)
    with pytest.raises(ShapeError):
        mswa(q, k, v, dims, WindowSpec(3))


def test_mswa_equals_per_group_masked_attention():
    dims = GridDims(2, 2, 3)
    win = WindowSpec(3)
    q, k, v = _qkv(6, dims.seq, 4, seed=9)
    out = mswa(q, k, v, dims, win)
    for g, (hs, he) in enumerate(head_groups(6)):
        ref = masked_attention(q[hs:he], k[hs:he], v[hs:he], mswa_mask_oracle(dims, win, g))
        assert (out[hs:he] - ref).abs().max() < 1e-10


def test_direction_band_mask_is_symmetric_with_true_diagonal():
    dims = GridDims(2, 3, 4)
    for d in DIRECTIONS:
        m = direction_band_mask(d, dims, WindowSpec(5))
        assert torch.equal(m, m.T)
        assert m.diagonal().all()


def test_mask_oracle_group_range():
    with pytest.raises(ValueError):
        mswa_mask_oracle(GridDims(2, 2, 2), WindowSpec(3), 6)


def test_receptive_field_single_direction_line():
    # 1x1xN grid, any direction is the same line; window 3 reaches +-1 per layer
    dims = GridDims(1, 1, 5)
    cov1 = receptive_field(dims, WindowSpec(3), 1, ("fhw",))
    assert cov1.tolist() == [2, 3, 3, 3, 2]
    cov2 = receptive_field(dims, WindowSpec(3), 2, ("fhw",))
    assert cov2.tolist() == [3, 4, 5, 4, 3]


def test_receptive_field_matches_numpy_reachability():
    dims = GridDims(3, 3, 2)
    win = WindowSpec(3)
    dirs = DIRECTIONS[:3]
    adj = torch.zeros(dims.seq, dims.seq, dtype=torch.bool)
    for d in dirs:
        adj |= direction_band_mask(d, dims, win)
    ref = np_reach_counts([adj.numpy()] * 2)
    got = receptive_field(dims, win, 2, dirs)
    assert got.tolist() == ref.tolist()


def test_receptive_field_direction_count_ordering():
    dims = GridDims(4, 4, 4)
    win = WindowSpec(9)
    means = [
        receptive_field(dims, win, 2, DIRECTIONS[:n]).double().mean() for n in (1, 3, 6)
    ]
    assert means[0] < means[1] < means[2]


def test_flop_count_formulas():
    dims = GridDims(13, 32, 32)
    win = WindowSpec(1024)
    seq = dims.seq
    assert flop_count(AttnKind.FULL, dims, win, 6, 64) == 4 * 6 * seq * seq * 64
    assert flop_count(AttnKind.MSWA, dims, win, 6, 64) == 4 * 6 * seq * 1025 * 64
    ratio = flop_count(AttnKind.MSWA, dims, win, 1, 1) / flop_count(AttnKind.FULL, dims, win, 1, 1)
    assert ratio == 1025 / seq
    # band caps at seq once the window covers everything
    assert flop_count(AttnKind.MSWA, dims, WindowSpec(4 * seq), 1, 1) == flop_count(
        AttnKind.FULL, dims, WindowSpec(4 * seq), 1, 1
    )


def test_build_schedule_placements():
    win = WindowSpec(4)
    for placement, band in [
        ("none", (0, 0)),
        ("shallow", (0, 24)),
        ("middle", (12, 36)),
        ("deep", (24, 48)),
    ]:
        s = build_schedule(48, placement, win)
        mswa_layers = [i for i, k in enumerate(s.kinds) if k is AttnKind.MSWA]
        expect = list(range(band[0], band[1]))
        assert mswa_layers == expect, placement
    custom = build_schedule(8, "custom", win, band=(2, 5))
    assert [i for i, k in enumerate(custom.kinds) if k is AttnKind.MSWA] == [2, 3, 4]


def test_build_schedule_validation():
    win = WindowSpec(4)
    with pytest.raises(ValueError):
        build_schedule(4, "sideways", win)
    with pytest.raises(ValueError):
        build_schedule(4, "custom", win)
    with pytest.raises(ValueError):
        build_schedule(4, "middle", win, band=(0, 2))
    with pytest.raises(ValueError):
        build_schedule(4, "custom", win, band=(3, 9))


def test_schedule_receptive_field_full_layer_saturates():
    dims = GridDims(2, 3, 3)
    sched = build_schedule(2, "shallow", WindowSpec(3))
    cov = schedule_receptive_field(sched, dims)
    assert (cov == dims.seq).all()  # one full layer reaches everything


def test_schedule_receptive_field_pure_mswa_matches_union_bfs():
    dims = GridDims(2, 3, 3)
    win = WindowSpec(3)
    sched = build_schedule(2, "custom", win, band=(0, 2))
    got = schedule_receptive_field(sched, dims)
    ref = receptive_field(dims, win, 2, DIRECTIONS)
    assert torch.equal(got, ref)


def test_stack_self_attention_full_only_chains_layers():
    dims = GridDims(2, 2, 2)
    g = torch.Generator().manual_seed(10)
    x = randn(2, dims.seq, 4, gen=g)
    sched = build_schedule(2, "none", WindowSpec(4))
    out = stack_self_attention(x, sched, dims)
    step = full_attention(x, x, x)
    ref = full_attention(step, step, step)
    assert (out - ref).abs().max() < 1e-12
