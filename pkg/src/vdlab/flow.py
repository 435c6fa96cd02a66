"""Rectified flow training and reward-gradient fine-tuning.

Convention: t=1 is pure noise, t=0 is data. The interpolation path is
x_t = (1-t) x0 + t eps, its constant velocity is eps - x0, and the Euler
sampler subtracts the predicted velocity while stepping t down a strictly
decreasing grid.

Reward fine-tuning differentiates a reward through the tail of the sampling
chain: the first T-K Euler steps run detached, the last K steps keep the
graph, the final latent is decoded to pixel-like frames by a causal stub, and
the negated weighted reward sum is minimized with plain gradient descent on
LoRA factors. Rewards are small analytic functionals standing in for learned
preference models.
"""

import math
from dataclasses import dataclass, field
from typing import Callable

import torch

from .model import DualStreamDiT, LoraAdapter, apply_lora, lora_param_set
from .numerics import DTYPE, NonFiniteError, ShapeError, grad, randn


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss or parameter. Carries the step index."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"training diverged at step {step}")


@dataclass(frozen=True)
class FlowSchedule:
    """Sampling grid from t=1 down to t=0, uniform unless given explicitly."""

    n_steps: int
    timesteps: tuple[float, ...] = None

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        ts = self.timesteps
        if ts is None:
            ts = tuple(1.0 - i / self.n_steps for i in range(self.n_steps + 1))
        else:
            ts = tuple(float(t) for t in ts)
        if len(ts) != self.n_steps + 1:
            raise ValueError(f"need {self.n_steps + 1} timesteps, got {len(ts)}")
        if ts[0] != 1.0 or ts[-1] != 0.0:
            raise ValueError(f"grid must run from 1 to 0, got ends ({ts[0]}, {ts[-1]})")
        if any(later >= earlier for later, earlier in zip(ts[1:], ts[:-1])):
            raise ValueError("timesteps must be strictly decreasing")
        object.__setattr__(self, "timesteps", ts)


def add_noise(x0: torch.Tensor, eps: torch.Tensor, t: float) -> torch.Tensor:
    """x_t = (1-t) x0 + t eps."""
    if x0.shape != eps.shape:
        raise ShapeError("add_noise", x0.shape, eps.shape)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    return (1.0 - t) * x0 + t * eps


def rf_loss(model, x0: torch.Tensor, text, t: float, eps: torch.Tensor, params=None) -> torch.Tensor:
    """MSE between the predicted velocity at x_t and the path velocity eps - x0."""
    x_t = add_noise(x0, eps, t)
    v = model.forward(x_t, text, t, params)
    return (v - (eps - x0)).pow(2).mean()


def euler_sample(model, x_T: torch.Tensor, text, sched: FlowSchedule, params=None):
    """Integrate the velocity field from t=1 to t=0.

    Returns (x_0 estimate, trajectory of length n_steps + 1 including x_T).
    """
    ts = sched.timesteps
    x = x_T
    trajectory = [x]
    for i in range(sched.n_steps):
        v = model.forward(x, text, ts[i], params)
        x = x - (ts[i] - ts[i + 1]) * v
        if not torch.isfinite(x).all():
            raise NonFiniteError(f"euler_sample step {i}")
        trajectory.append(x)
    return x, trajectory


class DecoderStub:
    """Fixed linear map from latent tokens to a pixel-like [frames, h, w] array.

    Each frame decodes from its own latent slice when causal; the non-causal
    variant mixes in the temporal mean, so later frames leak into earlier ones
    (the contrast case for the causality property).
    """

    def __init__(self, hidden: int, dims, seed: int = 0, causal: bool = True):
        self.dims = dims
        self.causal = causal
        gen = torch.Generator().manual_seed(seed)
        self.w = randn(hidden, gen=gen) / math.sqrt(hidden)

    def decode(self, latent: torch.Tensor, n_frames: int) -> torch.Tensor:
        d = self.dims
        if not 1 <= n_frames <= d.f:
            raise ValueError(f"n_frames must be in [1, {d.f}], got {n_frames}")
        if latent.shape[0] != d.seq:
            raise ShapeError("decode", latent.shape, (d.seq, self.w.shape[0]))
        vals = (latent @ self.w).view(d.f, d.h, d.w)
        if self.causal:
            return vals[:n_frames]
        return 0.5 * vals[:n_frames] + 0.5 * vals.mean(dim=0, keepdim=True)


# -- synthetic rewards ------------------------------------------------------


def brightness_target(frames: torch.Tensor, target: float) -> torch.Tensor:
    """-(mean - target)^2; maximal (0) when mean intensity hits the target."""
    return -(frames.mean() - target).pow(2)


def smoothness(frames: torch.Tensor) -> torch.Tensor:
    """Negative mean of squared spatial forward differences; 0 for flat frames."""
    dh = frames[:, 1:, :] - frames[:, :-1, :]
    dw = frames[:, :, 1:] - frames[:, :, :-1]
    count = dh.numel() + dw.numel()
    if count == 0:
        return torch.zeros((), dtype=frames.dtype)
    return -(dh.pow(2).sum() + dw.pow(2).sum()) / count


def center_mass(frames: torch.Tensor, target_xy: tuple[float, float]) -> torch.Tensor:
    """Negative squared distance of the intensity centroid from target (x, y).

    Weights are squared intensities so the centroid stays defined for signed
    values; coordinates are pixel indices, x along width, y along height.
    """
    _, h, w = frames.shape
    weights = frames.pow(2)
    total = weights.sum() + 1e-12
    xs = torch.arange(w, dtype=frames.dtype)
    ys = torch.arange(h, dtype=frames.dtype)
    cx = (weights * xs.view(1, 1, w)).sum() / total
    cy = (weights * ys.view(1, h, 1)).sum() / total
    tx, ty = target_xy
    return -((cx - tx).pow(2) + (cy - ty).pow(2))


@dataclass
class Prompt:
    """A named conditioning input plus per-reward targets."""

    name: str
    text: object = None
    targets: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RewardSpec:
    """Named, weighted, differentiable functional of (frames, prompt)."""

    name: str
    weight: float
    fn: Callable[[torch.Tensor, Prompt], torch.Tensor]

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError(f"reward weight must be >= 0, got {self.weight}")


REWARD_NAMES = ("brightness", "smoothness", "center_mass")


def make_reward_spec(name: str, weight: float) -> RewardSpec:
    """Build a registry reward; per-prompt targets come from prompt.targets."""
    if name == "brightness":
        fn = lambda frames, prompt: brightness_target(frames, prompt.targets.get("brightness", 0.5))
    elif name == "smoothness":
        fn = lambda frames, prompt: smoothness(frames)
    elif name == "center_mass":
        def fn(frames, prompt):
            _, h, w = frames.shape
            default = ((w - 1) / 2.0, (h - 1) / 2.0)
            return center_mass(frames, prompt.targets.get("center_mass", default))
    else:
        raise ValueError(f"unknown reward {name!r}, expected one of {REWARD_NAMES}")
    return RewardSpec(name=name, weight=weight, fn=fn)


def combine_rewards(values, specs) -> torch.Tensor:
    """Weighted sum of named reward values; every spec's name must be present."""
    by_name = dict(values)
    total = torch.zeros((), dtype=DTYPE)
    for spec in specs:
        if spec.name not in by_name:
            raise KeyError(f"missing reward value for {spec.name!r}")
        total = total + spec.weight * by_name[spec.name]
    return total


# -- truncated reward backpropagation ---------------------------------------


@dataclass
class RewardTrainerConfig:
    prompts: list
    rewards: list
    sched: FlowSchedule
    steps: int = 100
    k: int = 10
    decode_frames: int = 1
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.k > self.sched.n_steps:
            raise ValueError(
                f"k must be in [1, {self.sched.n_steps}], got {self.k}"
            )
        if self.decode_frames < 1:
            raise ValueError(f"decode_frames must be >= 1, got {self.decode_frames}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")


def truncated_reward_parts(
    model: DualStreamDiT,
    adapters: list[LoraAdapter],
    prompt: Prompt,
    x_T: torch.Tensor,
    sched: FlowSchedule,
    cfg: RewardTrainerConfig,
    decoder: DecoderStub,
    perturb_latent=None,
):
    """Run the truncated rollout; returns (loss, {reward name: tensor value}).

    The first n_steps - k Euler steps run under no_grad so their intermediates
    never enter the graph; only the last k model evaluations are tracked.
    `perturb_latent` edits the final latent inside the graph, before decoding.
    """
    k, ts = cfg.k, sched.timesteps
    if k > sched.n_steps:
        raise ValueError(f"k={k} exceeds sampler steps {sched.n_steps}")
    eff = apply_lora(model.params, adapters) if adapters else None
    x = x_T
    with torch.no_grad():
        for i in range(sched.n_steps - k):
            x = x - (ts[i] - ts[i + 1]) * model.forward(x, prompt.text, ts[i], eff)
    for i in range(sched.n_steps - k, sched.n_steps):
        x = x - (ts[i] - ts[i + 1]) * model.forward(x, prompt.text, ts[i], eff)
    if perturb_latent is not None:
        x = perturb_latent(x)
    frames = decoder.decode(x, cfg.decode_frames)
    values = [(spec.name, spec.fn(frames, prompt)) for spec in cfg.rewards]
    loss = -combine_rewards(values, cfg.rewards)
    return loss, dict(values)


def truncated_reward_objective(
    model, adapters, prompt, x_T, sched, cfg, decoder, perturb_latent=None
) -> torch.Tensor:
    """Scalar loss -sum(weight * reward) of the truncated rollout."""
    loss, _ = truncated_reward_parts(
        model, adapters, prompt, x_T, sched, cfg, decoder, perturb_latent
    )
    return loss


def reward_finetune(
    model: DualStreamDiT,
    adapters: list[LoraAdapter],
    cfg: RewardTrainerConfig,
    decoder: DecoderStub,
) -> list[dict]:
    """Gradient descent on the truncated reward loss, averaged over prompts.

    One fresh seeded x_T per prompt per step; prompt order is fixed, so the
    minibatch average has a deterministic reduction order. Returns one log row
    per step: per-reward means, combined reward, loss, gradient norm, and
    adapter update norm.
    """
    if not cfg.prompts:
        raise ValueError("need at least one prompt")
    if cfg.decode_frames > model.cfg.dims.f:
        raise ValueError(
            f"decode_frames={cfg.decode_frames} exceeds {model.cfg.dims.f} latent frames"
        )
    ada = lora_param_set(adapters)
    gen = torch.Generator().manual_seed(cfg.seed)
    seq, hidden = model.cfg.dims.seq, model.cfg.hidden
    log = []
    for step in range(cfg.steps):
        losses = []
        sums = {spec.name: 0.0 for spec in cfg.rewards}
        for prompt in cfg.prompts:
            x_T = randn(seq, hidden, gen=gen)
            loss_p, parts = truncated_reward_parts(
                model, adapters, prompt, x_T, cfg.sched, cfg, decoder
            )
            losses.append(loss_p)
            for name, v in parts.items():
                sums[name] += float(v.detach())
        loss = torch.stack(losses).mean()
        if not torch.isfinite(loss.detach()):
            raise DivergenceError(step)
        grads = grad(loss, ada)
        gnorm = math.sqrt(sum(float(g.pow(2).sum()) for g in grads.values()))
        with torch.no_grad():
            for name in ada.names():
                ada[name].sub_(cfg.lr * grads[name])
                if not torch.isfinite(ada[name]).all():
                    raise DivergenceError(step)
        n_prompts = len(cfg.prompts)
        loss_val = float(loss.detach())
        row = {"step": step, "loss": loss_val, "combined": -loss_val}
        for name in sums:
            row[f"reward_{name}"] = sums[name] / n_prompts
        row["grad_norm"] = gnorm
        row["update_norm"] = cfg.lr * gnorm
        log.append(row)
    return log
