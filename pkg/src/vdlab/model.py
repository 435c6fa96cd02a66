"""Toy dual-stream diffusion transformer over text and video tokens.

Each block has modality-specific QKV/output projections and FFNs sharing one
joint attention over [text | video]. Video queries/keys get 3D RoPE; text
tokens carry no positional signal beyond their content. In MSWA layers every
video token attends its head group's band plus all text tokens, and text
tokens attend everything. Timestep conditioning is a sinusoidal embedding of
t, projected once and added inside each normed branch.

Parameters live in a ParamSet keyed by dotted names; weight matrices are
stored [out, in]. Block output projections start at zero so every block is the
identity map at init; the final velocity head starts small-random so the model
has usable gradients from step one.
"""

import io
import json
import math
import zipfile
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .attention import AttnKind, HybridSchedule, WindowSpec, build_schedule, direction_band_mask, full_attention, head_groups, masked_attention
from .grid import DIRECTIONS, GridDims
from .numerics import DTYPE, ParamSet, ShapeError, assert_finite, linear, randn, rmsnorm
from .rope3d import DEFAULT_ALLOC, RopeConfig, apply_rope3d

NORM_EPS = 1e-6
INIT_SCALE = 0.02
CHECKPOINT_VERSION = 1
STREAMS = ("video", "text")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    heads: int
    head_dim: int
    text_len: int
    text_dim: int
    dims: GridDims
    schedule: HybridSchedule
    rope: RopeConfig
    ffn_mult: int = 4
    text_norm_eps: float = 1e-6

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.schedule.n_layers != self.n_layers:
            raise ValueError(
                f"schedule has {self.schedule.n_layers} layers, config has {self.n_layers}"
            )
        if self.schedule.n_mswa > 0 and self.heads % len(DIRECTIONS) != 0:
            raise ValueError(
                f"schedule contains MSWA layers but heads={self.heads} "
                f"is not divisible by {len(DIRECTIONS)}"
            )
        if self.rope.head_dim != self.head_dim:
            raise ValueError(
                f"rope head_dim {self.rope.head_dim} != model head_dim {self.head_dim}"
            )
        if self.text_len < 0 or (self.text_len > 0 and self.text_dim < 1):
            raise ValueError("text_len must be >= 0, with text_dim >= 1 when text is used")

    @property
    def hidden(self) -> int:
        return self.heads * self.head_dim


def make_config(
    dims: GridDims,
    heads: int = 6,
    head_dim: int = 16,
    n_layers: int = 2,
    text_len: int = 4,
    text_dim: int = 8,
    placement: str = "middle",
    window: int = 8,
    ffn_mult: int = 4,
    rope_alloc: tuple[float, float, float] = DEFAULT_ALLOC,
    rope_base: float = 10000.0,
) -> ModelConfig:
    return ModelConfig(
        n_layers=n_layers,
        heads=heads,
        head_dim=head_dim,
        text_len=text_len,
        text_dim=text_dim,
        dims=dims,
        schedule=build_schedule(n_layers, placement, WindowSpec(window)),
        rope=RopeConfig(head_dim=head_dim, alloc=rope_alloc, base=rope_base),
        ffn_mult=ffn_mult,
    )


@dataclass
class TextFeatures:
    """Synthetic stand-in for encoder features, [text_len, text_dim]."""

    tokens: torch.Tensor

    def __post_init__(self):
        self.tokens = torch.as_tensor(self.tokens, dtype=DTYPE)
        if self.tokens.dim() != 2:
            raise ShapeError("TextFeatures", self.tokens.shape, ("text_len", "text_dim"))
        assert_finite(self.tokens, "TextFeatures")


def timestep_embedding(t: float, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of a scalar timestep in [0, 1], shape [dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / half)
    args = t * 1000.0 * freqs
    return torch.cat([torch.cos(args), torch.sin(args)])


class DualStreamDiT:
    """Velocity-prediction transformer; forward maps (x_t, text, t) -> v."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = self._init_params(seed)
        self._mswa_mask = self._build_mswa_mask() if cfg.schedule.n_mswa > 0 else None
        self.tracked_forward_calls = 0
        self.untracked_forward_calls = 0

    # -- parameters ---------------------------------------------------------

    def _init_params(self, seed: int) -> ParamSet:
        cfg = self.cfg
        hidden, mult = cfg.hidden, cfg.ffn_mult
        gen = torch.Generator().manual_seed(seed)
        p = ParamSet()

        def w(name, out_dim, in_dim, zero=False):
            if zero:
                p.register(name, torch.zeros(out_dim, in_dim, dtype=DTYPE))
            else:
                p.register(name, randn(out_dim, in_dim, gen=gen) * INIT_SCALE)

        def b(name, dim):
            p.register(name, torch.zeros(dim, dtype=DTYPE))

        def gain(name, dim):
            p.register(name, torch.ones(dim, dtype=DTYPE))

        if cfg.text_len > 0:
            gain("text_norm.gain", cfg.text_dim)
            w("text_proj.w", hidden, cfg.text_dim)
            b("text_proj.b", hidden)
        w("time_proj.w", hidden, hidden)
        b("time_proj.b", hidden)
        streams = STREAMS if cfg.text_len > 0 else ("video",)
        for i in range(cfg.n_layers):
            for s in streams:
                base = f"layers.{i}.{s}"
                gain(f"{base}.attn_norm.gain", hidden)
                w(f"{base}.qkv.w", 3 * hidden, hidden)
                b(f"{base}.qkv.b", 3 * hidden)
                w(f"{base}.attn_out.w", hidden, hidden, zero=True)
                b(f"{base}.attn_out.b", hidden)
                gain(f"{base}.ffn_norm.gain", hidden)
                w(f"{base}.ffn.w1", mult * hidden, hidden)
                b(f"{base}.ffn.b1", mult * hidden)
                w(f"{base}.ffn.w2", hidden, mult * hidden, zero=True)
                b(f"{base}.ffn.b2", hidden)
        gain("head_norm.gain", hidden)
        w("head.w", hidden, hidden)
        b("head.b", hidden)
        return p

    def param_count(self) -> int:
        return self.params.n_elements()

    def reset_forward_counters(self) -> None:
        self.tracked_forward_calls = 0
        self.untracked_forward_calls = 0

    # -- attention masks ----------------------------------------------------

    def _build_mswa_mask(self) -> torch.Tensor:
        """Per-head allowed mask [heads, T, T] for MSWA layers, text first.

        Text rows and columns are fully visible; the video-video block of head
        group g is that group's direction band.
        """
        cfg = self.cfg
        tl, seq = cfg.text_len, cfg.dims.seq
        total = tl + seq
        mask = torch.ones(cfg.heads, total, total, dtype=torch.bool)
        for g, (gs, ge) in enumerate(head_groups(cfg.heads)):
            band = direction_band_mask(DIRECTIONS[g], cfg.dims, cfg.schedule.window)
            mask[gs:ge, tl:, tl:] = band
        return mask

    # -- forward ------------------------------------------------------------

    def prepare_text(self, text, params=None) -> torch.Tensor:
        """RMSNorm text features over the feature axis, then project to hidden."""
        p = self.params if params is None else params
        tokens = text.tokens if isinstance(text, TextFeatures) else torch.as_tensor(text, dtype=DTYPE)
        normed = rmsnorm(tokens, p["text_norm.gain"], eps=self.cfg.text_norm_eps)
        return linear(normed, p["text_proj.w"], p["text_proj.b"])

    def _heads_view(self, x: torch.Tensor) -> torch.Tensor:
        # [len, hidden] -> [heads, len, head_dim]
        return x.view(x.shape[0], self.cfg.heads, self.cfg.head_dim).transpose(0, 1)

    def _merge_heads(self, x: torch.Tensor) -> torch.Tensor:
        return x.transpose(0, 1).reshape(x.shape[1], self.cfg.hidden)

    def block_forward(self, video, text, t_embed, kind: AttnKind, layer: int, params=None):
        """One dual-stream block; returns (video', text'). text may be None."""
        cfg = self.cfg
        p = self.params if params is None else params
        has_text = text is not None

        def branch_in(tokens, stream, which):
            h = rmsnorm(tokens, p[f"layers.{layer}.{stream}.{which}_norm.gain"], eps=NORM_EPS)
            if t_embed is not None:
                h = h + t_embed
            return h

        def qkv(tokens, stream):
            proj = linear(
                branch_in(tokens, stream, "attn"),
                p[f"layers.{layer}.{stream}.qkv.w"],
                p[f"layers.{layer}.{stream}.qkv.b"],
            )
            q, k, v = proj.split(cfg.hidden, dim=-1)
            return self._heads_view(q), self._heads_view(k), self._heads_view(v)

        q_v, k_v, v_v = qkv(video, "video")
        q_v = apply_rope3d(q_v, cfg.dims, cfg.rope)
        k_v = apply_rope3d(k_v, cfg.dims, cfg.rope)
        if has_text:
            q_t, k_t, v_t = qkv(text, "text")
            q = torch.cat([q_t, q_v], dim=1)
            k = torch.cat([k_t, k_v], dim=1)
            v = torch.cat([v_t, v_v], dim=1)
        else:
            q, k, v = q_v, k_v, v_v

        if kind is AttnKind.FULL:
            out = full_attention(q, k, v)
        else:
            mask = self._mswa_mask
            if not has_text and cfg.text_len > 0:
                mask = mask[:, cfg.text_len :, cfg.text_len :]
            out = masked_attention(q, k, v, mask)
        out = self._merge_heads(out)

        tl = text.shape[0] if has_text else 0
        video = video + linear(
            out[tl:], p[f"layers.{layer}.video.attn_out.w"], p[f"layers.{layer}.video.attn_out.b"]
        )
        if has_text:
            text = text + linear(
                out[:tl], p[f"layers.{layer}.text.attn_out.w"], p[f"layers.{layer}.text.attn_out.b"]
            )

        def ffn(tokens, stream):
            h = branch_in(tokens, stream, "ffn")
            h = F.gelu(linear(h, p[f"layers.{layer}.{stream}.ffn.w1"], p[f"layers.{layer}.{stream}.ffn.b1"]))
            return tokens + linear(h, p[f"layers.{layer}.{stream}.ffn.w2"], p[f"layers.{layer}.{stream}.ffn.b2"])

        video = ffn(video, "video")
        if has_text:
            text = ffn(text, "text")
        return video, text

    def forward(self, x: torch.Tensor, text, t: float, params=None) -> torch.Tensor:
        """Predict velocity for noisy tokens x [seq, hidden] at time t in [0, 1]."""
        cfg = self.cfg
        if not 0.0 <= float(t) <= 1.0:
            raise ValueError(f"timestep t must be in [0, 1], got {t}")
        if x.shape != (cfg.dims.seq, cfg.hidden):
            raise ShapeError("forward", x.shape, (cfg.dims.seq, cfg.hidden))
        if torch.is_grad_enabled():
            self.tracked_forward_calls += 1
        else:
            self.untracked_forward_calls += 1
        p = self.params if params is None else params
        txt = self.prepare_text(text, p) if (text is not None and cfg.text_len > 0) else None
        t_embed = linear(timestep_embedding(float(t), cfg.hidden), p["time_proj.w"], p["time_proj.b"])
        for i, kind in enumerate(cfg.schedule.kinds):
            x, txt = self.block_forward(x, txt, t_embed, kind, i, p)
        out = linear(rmsnorm(x, p["head_norm.gain"], eps=NORM_EPS), p["head.w"], p["head.b"])
        return assert_finite(out, "forward")


# -- LoRA -------------------------------------------------------------------


@dataclass
class LoraAdapter:
    """Low-rank delta for one weight matrix: W_eff = W + (alpha / r) * B @ A."""

    target: str
    a: torch.Tensor  # [rank, in]
    b: torch.Tensor  # [out, rank]
    alpha: float = 1.0

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def delta(self) -> torch.Tensor:
        return (self.alpha / self.rank) * (self.b @ self.a)


def default_lora_targets(params: ParamSet) -> list[str]:
    """Attention QKV and output projection weights of every layer."""
    return [n for n in params.names() if n.endswith(".qkv.w") or n.endswith(".attn_out.w")]


def init_lora(
    params: ParamSet,
    targets: list[str] | None = None,
    rank: int = 2,
    alpha: float = 1.0,
    seed: int = 0,
) -> list[LoraAdapter]:
    """Fresh adapters: A gaussian, B zero, so the adapted model starts as the base."""
    if targets is None:
        targets = default_lora_targets(params)
    gen = torch.Generator().manual_seed(seed)
    adapters = []
    for t in targets:
        if t not in params:
            raise KeyError(f"unknown LoRA target {t!r}")
        out_dim, in_dim = params[t].shape
        a = randn(rank, in_dim, gen=gen) / math.sqrt(rank)
        b = torch.zeros(out_dim, rank, dtype=DTYPE)
        a.requires_grad_(True)
        b.requires_grad_(True)
        adapters.append(LoraAdapter(target=t, a=a, b=b, alpha=alpha))
    return adapters


def lora_param_set(adapters: list[LoraAdapter]) -> ParamSet:
    """The adapters' A/B tensors as a ParamSet (shared tensors, not copies)."""
    ps = ParamSet()
    for ad in adapters:
        ps.register(f"lora.{ad.target}.a", ad.a)
        ps.register(f"lora.{ad.target}.b", ad.b)
    return ps


def apply_lora(params: ParamSet, adapters: list[LoraAdapter]) -> dict[str, torch.Tensor]:
    """Effective parameter view with W_eff = W + (alpha / r) * B @ A on targets.

    Gradients flow to both the base weights and the adapter factors.
    """
    eff = {name: t for name, t in params.items()}
    for ad in adapters:
        if ad.target not in params:
            raise KeyError(f"unknown LoRA target {ad.target!r}")
        w = params[ad.target]
        d = ad.delta()
        if d.shape != w.shape:
            raise ShapeError("apply_lora", d.shape, w.shape)
        eff[ad.target] = w + d
    return eff


def merge_lora(params: ParamSet, adapters: list[LoraAdapter]) -> ParamSet:
    """New ParamSet with adapter deltas baked into the target weights."""
    merged = params.clone()
    for ad in adapters:
        if ad.target not in merged:
            raise KeyError(f"unknown LoRA target {ad.target!r}")
        with torch.no_grad():
            merged[ad.target].add_(ad.delta())
    return merged


# -- checkpoints ------------------------------------------------------------


def config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "n_layers": cfg.n_layers,
        "heads": cfg.heads,
        "head_dim": cfg.head_dim,
        "text_len": cfg.text_len,
        "text_dim": cfg.text_dim,
        "dims": [cfg.dims.f, cfg.dims.h, cfg.dims.w],
        "schedule_kinds": [k.value for k in cfg.schedule.kinds],
        "window": cfg.schedule.window.size,
        "rope_alloc": list(cfg.rope.alloc),
        "rope_base": cfg.rope.base,
        "ffn_mult": cfg.ffn_mult,
        "text_norm_eps": cfg.text_norm_eps,
    }


def config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(
        n_layers=d["n_layers"],
        heads=d["heads"],
        head_dim=d["head_dim"],
        text_len=d["text_len"],
        text_dim=d["text_dim"],
        dims=GridDims(*d["dims"]),
        schedule=HybridSchedule(
            kinds=tuple(AttnKind(k) for k in d["schedule_kinds"]),
            window=WindowSpec(d["window"]),
        ),
        rope=RopeConfig(head_dim=d["head_dim"], alloc=tuple(d["rope_alloc"]), base=d["rope_base"]),
        ffn_mult=d["ffn_mult"],
        text_norm_eps=d["text_norm_eps"],
    )


def save_checkpoint(model: DualStreamDiT, path) -> None:
    """Single-file checkpoint: config JSON + named float64 arrays, little-endian.

    Written as a zip of .npy entries (np.load-compatible) with fixed timestamps
    so identical states produce identical bytes.
    """
    entries = {
        "__config__": np.array(json.dumps(config_to_dict(model.cfg))),
        "__format_version__": np.array(CHECKPOINT_VERSION).astype("<i8"),
    }
    for name, p in model.params.items():
        entries[f"param/{name}"] = p.detach().numpy().astype("<f8")
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in entries.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path) -> DualStreamDiT:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["__format_version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        cfg = config_from_dict(json.loads(str(z["__config__"])))
        model = DualStreamDiT(cfg, seed=0)
        for name, p in model.params.items():
            key = f"param/{name}"
            if key not in z:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            with torch.no_grad():
                p.copy_(torch.from_numpy(z[key].astype(np.float64)))
    return model
