"""Independent numpy reference implementations used as test oracles.

Everything here recomputes results through a different route than the library:
attention is dense numpy with explicit masks, token orderings come from
lexsort ranks instead of tensor permutes, reachability uses numpy boolean
matrix powers, and the partition search is exhaustive. Keep this module free
of vdlab imports.
"""

import itertools

import numpy as np


def np_softmax(x, axis=-1):
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def np_masked_attention(q, k, v, allowed):
    """Dense attention, [heads, seq, d] inputs, boolean allowed [.., seq, seq]."""
    d = q.shape[-1]
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(d)
    scores = np.where(allowed, scores, -np.inf)
    return np_softmax(scores, axis=-1) @ v


def np_full_attention(q, k, v):
    return np_masked_attention(q, k, v, np.ones((q.shape[-2], q.shape[-2]), dtype=bool))


def direction_rank(direction, f, h, w):
    """rank[token] = position of the token when sorted by the direction's axes.

    Tokens are flat indices in (f, h, w) row-major order. A direction like
    "hwf" sorts by height, then width, then frame, height slowest.
    """
    pf, ph, pw = np.meshgrid(np.arange(f), np.arange(h), np.arange(w), indexing="ij")
    coords = {"f": pf.ravel(), "h": ph.ravel(), "w": pw.ravel()}
    # np.lexsort keys: last key is the primary (slowest) sort axis
    keys = [coords[c] for c in reversed(direction)]
    order = np.lexsort(keys)
    rank = np.empty(f * h * w, dtype=np.int64)
    rank[order] = np.arange(f * h * w)
    return rank


def np_band_mask(rank, half_width):
    return np.abs(rank[:, None] - rank[None, :]) <= half_width


def np_mswa(q, k, v, f, h, w, size, directions=("fhw", "fwh", "hfw", "hwf", "wfh", "whf")):
    """Per-head-group banded attention along each direction's ordering."""
    heads = q.shape[0]
    n_dir = len(directions)
    assert heads % n_dir == 0
    per = heads // n_dir
    half = size // 2
    out = np.empty_like(q)
    for g, direction in enumerate(directions):
        mask = np_band_mask(direction_rank(direction, f, h, w), half)
        hs, he = g * per, (g + 1) * per
        out[hs:he] = np_masked_attention(q[hs:he], k[hs:he], v[hs:he], mask)
    return out


def np_reach_counts(adjacencies):
    """Reachable-set sizes after applying each layer's boolean adjacency in turn."""
    n = adjacencies[0].shape[0]
    reach = np.eye(n, dtype=bool)
    for adj in adjacencies:
        reach = (reach.astype(np.int64) @ adj.astype(np.int64)) > 0
    return reach.sum(axis=1)


def np_rotate_pairs(x, angles):
    """Rotate adjacent channel pairs of x [..., d] by angles [..., d/2]."""
    x0, x1 = x[..., 0::2], x[..., 1::2]
    c, s = np.cos(angles), np.sin(angles)
    out = np.empty_like(x)
    out[..., 0::2] = x0 * c - x1 * s
    out[..., 1::2] = x0 * s + x1 * c
    return out


def all_partitions(indices, sizes):
    """Yield all unordered partitions of `indices` into blocks of the given sizes.

    `sizes` is a multiset (list) of block sizes summing to len(indices). The
    lowest remaining index is always placed in the next block, which kills
    permutation-equivalent duplicates.
    """
    if not indices:
        yield []
        return
    seen_sizes = set()
    for si, size in enumerate(sizes):
        if size in seen_sizes:
            continue
        seen_sizes.add(size)
        rest_sizes = sizes[:si] + sizes[si + 1 :]
        first, others = indices[0], indices[1:]
        for combo in itertools.combinations(others, size - 1):
            block = (first,) + combo
            remaining = [i for i in others if i not in combo]
            for tail in all_partitions(remaining, rest_sizes):
                yield [block] + tail


def min_sum_of_maxima(tokens, batch_size):
    """Exhaustive minimum of sum(max per block) over equal-size partitions.

    Blocks have batch_size samples; if len(tokens) is not divisible, exactly
    one block holds the remainder.
    """
    n = len(tokens)
    n_full, rag = divmod(n, batch_size)
    sizes = [batch_size] * n_full + ([rag] if rag else [])
    best = None
    for part in all_partitions(tuple(range(n)), sizes):
        s = sum(max(tokens[i] for i in block) for block in part)
        if best is None or s < best:
            best = s
    return best
