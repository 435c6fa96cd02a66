"""Token-length bucketing and a synchronous data-parallel throughput model.

A sample's token count is f' * (H/16) * (W/16) with f' = (F-1)/4 + 1: spatial
16x from 8x VAE compression times patch size 2, temporal 4x with the extra
first frame. The TTL planner sorts samples by token length and batches
consecutive blocks, so every iteration carries near-uniform lengths; the
naive planner batches a uniform shuffle. The simulator charges each iteration
the cost of its slowest worker, which is what makes mixed-length batches
expensive.
"""

import json
import random
from dataclasses import dataclass

__all__ = [
    "SampleMeta",
    "TokenFormula",
    "BucketPlan",
    "CostModel",
    "ManifestError",
    "token_length",
    "build_ttl_plan",
    "build_naive_plan",
    "simulate_throughput",
    "load_manifest",
    "write_manifest",
]


class ManifestError(ValueError):
    """Malformed manifest line. Carries the 1-based line number."""

    def __init__(self, line: int, reason: str):
        self.line = line
        super().__init__(f"manifest line {line}: {reason}")


@dataclass(frozen=True)
class SampleMeta:
    """One training sample: pixel extents H x W and frame count F."""

    id: str
    h: int
    w: int
    f: int

    def __post_init__(self):
        if self.h < 1 or self.w < 1 or self.f < 1:
            raise ValueError(f"sample {self.id!r}: extents must be positive")


@dataclass(frozen=True)
class TokenFormula:
    """tokens = f' * (H / spatial) * (W / spatial), f' = (F - 1) / temporal + 1.

    By default extents must divide exactly (H, W multiples of spatial and
    F = 1 mod temporal); ceil_mode rounds indivisible extents up instead.
    """

    spatial_factor: int = 16
    temporal_factor: int = 4
    ceil_mode: bool = False

    def __post_init__(self):
        if self.spatial_factor < 1 or self.temporal_factor < 1:
            raise ValueError("factors must be >= 1")


def _axis_tokens(extent: int, factor: int, ceil_mode: bool, what: str) -> int:
    if extent % factor != 0 and not ceil_mode:
        raise ValueError(f"{what}={extent} is not a multiple of {factor} (ceil_mode off)")
    return -(-extent // factor)


def token_length(meta: SampleMeta, formula: TokenFormula = TokenFormula()) -> int:
    h = _axis_tokens(meta.h, formula.spatial_factor, formula.ceil_mode, "H")
    w = _axis_tokens(meta.w, formula.spatial_factor, formula.ceil_mode, "W")
    fm1 = meta.f - 1
    if fm1 % formula.temporal_factor != 0 and not formula.ceil_mode:
        raise ValueError(
            f"F={meta.f} is not 1 mod {formula.temporal_factor} (ceil_mode off)"
        )
    fp = -(-fm1 // formula.temporal_factor) + 1
    return fp * h * w


@dataclass(frozen=True)
class BucketPlan:
    """Ordered iterations of sample ids with their token lengths.

    All iterations hold batch_size samples except possibly the last, flagged
    via ragged_last.
    """

    iterations: tuple
    tokens: dict
    batch_size: int
    ragged_last: bool

    def __post_init__(self):
        seen = [sid for it in self.iterations for sid in it]
        if len(seen) != len(set(seen)):
            raise ValueError("a sample id appears in more than one slot")
        if set(seen) != set(self.tokens):
            raise ValueError("iterations and token table disagree on sample ids")
        for it in self.iterations[:-1]:
            if len(it) != self.batch_size:
                raise ValueError(f"non-final iteration of size {len(it)} != {self.batch_size}")
        if self.iterations and len(self.iterations[-1]) > self.batch_size:
            raise ValueError("final iteration exceeds batch_size")

    @property
    def n_samples(self) -> int:
        return len(self.tokens)

    def iteration_maxima(self) -> list[int]:
        return [max(self.tokens[sid] for sid in it) for it in self.iterations]

    def sum_of_maxima(self) -> int:
        return sum(self.iteration_maxima())

    def total_tokens(self) -> int:
        return sum(self.tokens.values())


def _blocks_to_plan(ordered: list[SampleMeta], batch_size: int, formula: TokenFormula,
                    block_order: list[int] | None = None) -> BucketPlan:
    blocks = [ordered[i : i + batch_size] for i in range(0, len(ordered), batch_size)]
    if block_order is not None:
        blocks = [blocks[i] for i in block_order]
    return BucketPlan(
        iterations=tuple(tuple(s.id for s in blk) for blk in blocks),
        tokens={s.id: token_length(s, formula) for s in ordered},
        batch_size=batch_size,
        ragged_last=len(ordered) % batch_size != 0,
    )


def build_ttl_plan(dataset: list[SampleMeta], batch_size: int,
                   formula: TokenFormula = TokenFormula(), seed: int = 0) -> BucketPlan:
    """Sort by token length, batch consecutive blocks, shuffle the block order.

    Intra-iteration composition is fixed by the sort; only the visit order of
    iterations is randomized.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    ordered = sorted(dataset, key=lambda s: (token_length(s, formula), s.id))
    n_blocks = -(-len(ordered) // batch_size)
    ragged = len(ordered) % batch_size != 0
    # the ragged block stays last so every other iteration is full
    order = list(range(n_blocks - 1)) if ragged else list(range(n_blocks))
    random.Random(seed).shuffle(order)
    if ragged:
        order.append(n_blocks - 1)
    return _blocks_to_plan(ordered, batch_size, formula, order)


def build_naive_plan(dataset: list[SampleMeta], batch_size: int,
                     formula: TokenFormula = TokenFormula(), seed: int = 0) -> BucketPlan:
    """Uniformly random assignment: shuffle the dataset, batch consecutive blocks."""
    if not dataset:
        raise ValueError("dataset is empty")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    ordered = list(dataset)
    random.Random(seed).shuffle(ordered)
    return _blocks_to_plan(ordered, batch_size, formula)


@dataclass(frozen=True)
class CostModel:
    """Per-sample step time a * tokens + b * tokens^2, strictly increasing."""

    a: float = 1.0
    b: float = 1.0 / 16384.0

    def __post_init__(self):
        if self.a < 0 or self.b < 0 or self.a + self.b == 0:
            raise ValueError(f"cost model must be strictly increasing, got a={self.a}, b={self.b}")

    @classmethod
    def linear(cls) -> "CostModel":
        return cls(a=1.0, b=0.0)

    @classmethod
    def quadratic(cls) -> "CostModel":
        # quadratic term equals the linear term at 16384 tokens
        return cls(a=1.0, b=1.0 / 16384.0)

    def time(self, tokens: int) -> float:
        return self.a * tokens + self.b * tokens * tokens


def simulate_throughput(plan: BucketPlan, n_workers: int, cost: CostModel) -> dict:
    """Synchronous data-parallel run: one sample per worker per iteration.

    Iteration time is the slowest worker's cost; a worker without a sample
    (ragged final batch) costs zero but still waits. Idle fraction per
    iteration is 1 - mean(cost) / max(cost) over workers.
    """
    if plan.batch_size != n_workers:
        raise ValueError(
            f"plan batch_size {plan.batch_size} != n_workers {n_workers}"
        )
    total_tokens = 0
    total_time = 0.0
    idle = []
    for it in plan.iterations:
        costs = [cost.time(plan.tokens[sid]) for sid in it]
        costs += [0.0] * (n_workers - len(costs))
        t_max = max(costs)
        total_tokens += sum(plan.tokens[sid] for sid in it)
        total_time += t_max
        idle.append(0.0 if t_max == 0 else 1.0 - (sum(costs) / n_workers) / t_max)
    return {
        "total_tokens": total_tokens,
        "total_time": total_time,
        "tokens_per_time": total_tokens / total_time if total_time > 0 else 0.0,
        "mean_idle": sum(idle) / len(idle) if idle else 0.0,
        "idle_fractions": idle,
    }


def load_manifest(path) -> list[SampleMeta]:
    """Read a JSONL manifest of {id, h, w, f} records."""
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(lineno, f"invalid JSON ({e.msg})") from e
            if not isinstance(rec, dict):
                raise ManifestError(lineno, "record is not an object")
            missing = {"id", "h", "w", "f"} - set(rec)
            if missing:
                raise ManifestError(lineno, f"missing fields {sorted(missing)}")
            try:
                samples.append(SampleMeta(id=str(rec["id"]), h=int(rec["h"]),
                                          w=int(rec["w"]), f=int(rec["f"])))
            except (TypeError, ValueError) as e:
                raise ManifestError(lineno, str(e)) from e
    return samples


def write_manifest(samples: list[SampleMeta], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps({"id": s.id, "h": s.h, "w": s.w, "f": s.f}) + "\n")
