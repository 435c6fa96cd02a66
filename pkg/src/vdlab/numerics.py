"""Dense-tensor substrate with a reverse-mode differentiation contract.

Values are torch tensors, float64 by default (float32 is reserved for
benchmarks). Computation graphs are ordinary compositions of the ops below;
reverse-mode gradients come from torch autograd, and their correctness is
pinned by the independent central finite-difference oracle in this module
rather than by any property of the engine itself.

All ops are pure: same inputs give bit-identical outputs within a process,
and nothing here mutates shared state.
"""

from collections.abc import Callable, Iterator, Mapping

import torch

DTYPE = torch.float64


class ShapeError(ValueError):
    """Incompatible operand shapes. Carries both shapes."""

    def __init__(self, op: str, lhs, rhs):
        self.op = op
        self.lhs = tuple(lhs)
        self.rhs = tuple(rhs)
        super().__init__(f"{op}: incompatible shapes {self.lhs} and {self.rhs}")


class NonFiniteError(FloatingPointError):
    """An op produced NaN/Inf. Carries the op name."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"non-finite values produced by op {op!r}")


def assert_finite(t: torch.Tensor, op: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(op)
    return t


def tensor(data, dtype=DTYPE) -> torch.Tensor:
    return torch.as_tensor(data, dtype=dtype)


def randn(*shape, gen: torch.Generator, dtype=DTYPE) -> torch.Tensor:
    return torch.randn(shape, generator=gen, dtype=dtype)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    return assert_finite(a @ b, "matmul")


def linear(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """x @ w.T + b with w stored [out, in] (nn.Linear layout)."""
    if x.shape[-1] != w.shape[-1]:
        raise ShapeError("linear", x.shape, w.shape)
    y = x @ w.T
    if b is not None:
        y = y + b
    return y


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    # torch.softmax subtracts the row max internally, so -inf-masked rows with
    # at least one finite entry are stable.
    return assert_finite(torch.softmax(x, dim=dim), "softmax")


def rmsnorm(x: torch.Tensor, gain: torch.Tensor | None = None, eps: float = 1e-6) -> torch.Tensor:
    """x / sqrt(mean(x^2) + eps) over the last axis, scaled by `gain`."""
    y = x / torch.sqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)
    if gain is not None:
        y = y * gain
    return assert_finite(y, "rmsnorm")


def masked_fill_neg_inf(scores: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
    """Set scores to -inf wherever `allowed` is False."""
    return scores.masked_fill(~allowed, float("-inf"))


def detach(t: torch.Tensor) -> torch.Tensor:
    """Value-identical tensor contributing zero gradient upstream."""
    return t.detach()


class ParamSet:
    """Named trainable tensors. Iteration is sorted by name."""

    def __init__(self):
        self._params: dict[str, torch.Tensor] = {}

    def register(self, name: str, value: torch.Tensor) -> torch.Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        if value.dtype != DTYPE:
            value = value.to(DTYPE)
        value.requires_grad_(True)
        self._params[name] = value
        return value

    def __getitem__(self, name: str) -> torch.Tensor:
        if name not in self._params:
            raise KeyError(f"unknown parameter {name!r}")
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, torch.Tensor]]:
        for name in self.names():
            yield name, self._params[name]

    def tensors(self) -> list[torch.Tensor]:
        return [self._params[n] for n in self.names()]

    def n_elements(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def clone(self) -> "ParamSet":
        out = ParamSet()
        for name, p in self.items():
            out.register(name, p.detach().clone())
        return out


def grad(output: torch.Tensor, params: ParamSet) -> dict[str, torch.Tensor]:
    """Gradient of a scalar output per named param; unreachable params get zeros."""
    if output.dim() != 0:
        raise ShapeError("grad", output.shape, ())
    names = params.names()
    grads = torch.autograd.grad(
        output, [params[n] for n in names], allow_unused=True, retain_graph=False
    )
    return {
        n: (g if g is not None else torch.zeros_like(params[n]))
        for n, g in zip(names, grads)
    }


def finite_diff_grad(
    fn: Callable[[], torch.Tensor],
    params: ParamSet | Mapping[str, torch.Tensor],
    step: float = 1e-5,
) -> dict[str, torch.Tensor]:
    """Central finite-difference gradient of scalar fn() w.r.t. every param entry.

    `fn` must recompute its value from the current contents of `params`;
    entries are perturbed in place and restored. This is the independent
    oracle for `grad` and is deliberately engine-free.
    """
    items = list(params.items())
    out: dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for name, p in items:
            g = torch.zeros_like(p)
            flat_p = p.view(-1)
            flat_g = g.view(-1)
            for i in range(flat_p.numel()):
                orig = flat_p[i].item()
                flat_p[i] = orig + step
                f_plus = float(fn())
                flat_p[i] = orig - step
                f_minus = float(fn())
                flat_p[i] = orig
                flat_g[i] = (f_plus - f_minus) / (2.0 * step)
            out[name] = g
    return out


def grad_rel_error(g: Mapping[str, torch.Tensor], ref: Mapping[str, torch.Tensor]) -> float:
    """Worst-case per-param relative error max|g-ref| / max(|g|inf, |ref|inf, 1e-6)."""
    worst = 0.0
    for name in ref:
        a, b = g[name], ref[name]
        denom = max(a.abs().max().item(), b.abs().max().item(), 1e-6)
        worst = max(worst, (a - b).abs().max().item() / denom)
    return worst
