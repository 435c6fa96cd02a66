"""Experiment harness: benchmarks, ablations, toy training, and simulations.

Every subcommand writes its artifacts plus a manifest.json (config echo,
run id, artifact checksums) into --out. `rerun --manifest` re-executes the
recorded config and verifies that all non-timing artifacts reproduce
byte-identically. CSV files start with a `# key=value` metadata comment
block; floats are written with repr so they round-trip exactly.
"""

import argparse
import csv
import hashlib
import json
import math
import random
import sys
import time
from pathlib import Path

import torch

from .attention import (
    WindowSpec,
    build_schedule,
    flop_count,
    receptive_field,
    schedule_receptive_field,
    stack_self_attention,
)
from .bucketing import (
    CostModel,
    ManifestError,
    SampleMeta,
    TokenFormula,
    build_naive_plan,
    build_ttl_plan,
    load_manifest,
    simulate_throughput,
    write_manifest,
)
from .flow import (
    DecoderStub,
    DivergenceError,
    FlowSchedule,
    Prompt,
    RewardTrainerConfig,
    euler_sample,
    make_reward_spec,
    reward_finetune,
    rf_loss,
)
from .grid import DIRECTIONS, GridDims
from .model import (
    DualStreamDiT,
    TextFeatures,
    apply_lora,
    init_lora,
    load_checkpoint,
    make_config,
    save_checkpoint,
)
from .numerics import NonFiniteError, grad, randn

MANIFEST_NAME = "manifest.json"


# -- plumbing ---------------------------------------------------------------


def _config_hash(subcommand: str, cfg: dict) -> str:
    blob = json.dumps({"subcommand": subcommand, "config": cfg}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _meta(subcommand: str, cfg: dict) -> dict:
    h = _config_hash(subcommand, cfg)
    return {"run_id": h[:12], "seed": cfg.get("seed", 0), "config_hash": h}


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def write_csv(path: Path, header: list[str], rows: list[list], meta: dict) -> None:
    with open(path, "w", newline="") as fh:
        for key, value in meta.items():
            fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _median_time(fn, repeats: int, warmup: int = 1) -> tuple[float, float, float]:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    times.sort()
    n = len(times)
    med = times[n // 2] if n % 2 else 0.5 * (times[n // 2 - 1] + times[n // 2])
    return med, times[0], times[-1]


def _parse_dims(text: str) -> list[int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"--dims wants f,h,w, got {text!r}")
    return parts


def _parse_int_list(text: str) -> list[int]:
    return [int(p) for p in text.split(",")]


def _parse_rewards(text: str) -> list[list]:
    out = []
    for part in text.split(","):
        name, _, weight = part.partition(":")
        if not _:
            raise ValueError(f"reward spec {part!r} wants name:weight")
        out.append([name, float(weight)])
    return out


def _execute(subcommand: str, cfg: dict, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts, timing_files = RUNNERS[subcommand](cfg, out_dir, _meta(subcommand, cfg))
    manifest = {
        "format_version": 1,
        "subcommand": subcommand,
        "run_id": _meta(subcommand, cfg)["run_id"],
        "config": cfg,
        "artifacts": {name: _sha256(out_dir / name) for name in sorted(artifacts)},
        "timing_files": sorted(timing_files),
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# -- bench-attn -------------------------------------------------------------


def run_bench_attn(cfg: dict, out: Path, meta: dict):
    dims = GridDims(*cfg["dims"])
    win = WindowSpec(cfg["window"])
    heads, head_dim, layers = cfg["heads"], cfg["head_dim"], cfg["layers"]
    dtype = torch.float32 if cfg["dtype"] == "float32" else torch.float64

    schedules = {
        "full": build_schedule(layers, "none", win),
        "hybrid": build_schedule(layers, "middle", win),
    }
    wanted = ["full", "hybrid"] if cfg["schedule"] == "both" else [cfg["schedule"]]

    full_flops = sum(
        flop_count(k, dims, win, heads, head_dim) for k in schedules["full"].kinds
    )
    flop_rows = []
    for name in wanted:
        fl = sum(flop_count(k, dims, win, heads, head_dim) for k in schedules[name].kinds)
        flop_rows.append(
            [name, dims.f, dims.h, dims.w, dims.seq, heads, head_dim,
             win.size, layers, fl, fl / full_flops]
        )
    write_csv(
        out / "bench_attn_flops.csv",
        ["schedule", "f", "h", "w", "seq", "heads", "head_dim", "window",
         "layers", "flops", "flops_vs_full"],
        flop_rows, meta,
    )

    gen = torch.Generator().manual_seed(cfg["seed"])
    x = torch.randn(heads, dims.seq, head_dim, generator=gen, dtype=dtype)
    measured = {}
    for name in wanted:
        sched = schedules[name]
        measured[name] = _median_time(
            lambda: stack_self_attention(x, sched, dims), cfg["repeats"]
        )
    time_rows = []
    for name in wanted:
        med, lo, hi = measured[name]
        speedup = measured["full"][0] / med if "full" in measured else ""
        time_rows.append([name, med, lo, hi, speedup])
    write_csv(
        out / "bench_attn_times.csv",
        ["schedule", "median_s", "min_s", "max_s", "speedup_vs_full"],
        time_rows,
        {**meta, "reference_gpu_latency_delta": "-13.19% at 768px, -25.53% at 1024px"},
    )
    return ["bench_attn_flops.csv", "bench_attn_times.csv"], ["bench_attn_times.csv"]


# -- ablate -----------------------------------------------------------------


def run_ablate(cfg: dict, out: Path, meta: dict):
    dims = GridDims(*cfg["dims"])
    layers, heads, head_dim = cfg["layers"], cfg["heads"], cfg["head_dim"]
    axis = cfg["axis"]

    if axis == "directions":
        win = WindowSpec(cfg["window"])
        rows = []
        for n_dir in (1, 3, 6):
            cov = receptive_field(dims, win, layers, DIRECTIONS[:n_dir])
            rows.append(
                [n_dir, float(cov.double().mean()), int(cov.min()), int(cov.max())]
            )
        write_csv(
            out / "ablate_directions.csv",
            ["n_directions", "coverage_mean", "coverage_min", "coverage_max"],
            rows, meta,
        )
        return ["ablate_directions.csv"], []

    if axis == "positions":
        win = WindowSpec(cfg["window"])
        configs = [(p, build_schedule(layers, p, win))
                   for p in ("none", "shallow", "middle", "deep")]
        label = "placement"
    elif axis == "window":
        hw = dims.h * dims.w
        sizes = sorted({max(1, hw // 8), max(1, hw // 2), hw, 2 * hw})
        configs = [(s, build_schedule(layers, "middle", WindowSpec(s))) for s in sizes]
        label = "window"
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")

    gen = torch.Generator().manual_seed(cfg["seed"])
    x = torch.randn(heads, dims.seq, head_dim, generator=gen, dtype=torch.float32)
    rows, time_rows = [], []
    for key, sched in configs:
        fl = sum(flop_count(k, dims, sched.window, heads, head_dim) for k in sched.kinds)
        cov = schedule_receptive_field(sched, dims)
        rows.append(
            [key, sched.n_mswa, fl, float(cov.double().mean()),
             int(cov.min()), int(cov.max())]
        )
        med, lo, hi = _median_time(
            lambda: stack_self_attention(x, sched, dims), cfg["repeats"]
        )
        time_rows.append([key, med, lo, hi])
    base = f"ablate_{axis}"
    write_csv(
        out / f"{base}.csv",
        [label, "n_mswa", "flops_total", "coverage_mean", "coverage_min", "coverage_max"],
        rows, meta,
    )
    write_csv(
        out / f"{base}_times.csv",
        [label, "median_s", "min_s", "max_s"],
        time_rows, meta,
    )
    return [f"{base}.csv", f"{base}_times.csv"], [f"{base}_times.csv"]


# -- train-toy --------------------------------------------------------------


def run_train_toy(cfg: dict, out: Path, meta: dict):
    dims = GridDims(*cfg["dims"])
    mcfg = make_config(
        dims,
        heads=cfg["heads"],
        head_dim=cfg["head_dim"],
        n_layers=cfg["layers"],
        text_len=cfg["text_len"],
        text_dim=cfg["text_dim"],
        placement=cfg["placement"],
        window=cfg["window"],
    )
    model = DualStreamDiT(mcfg, seed=cfg["seed"])
    gen = torch.Generator().manual_seed(cfg["seed"] + 1)
    pool = [randn(dims.seq, mcfg.hidden, gen=gen) for _ in range(cfg["data_pool"])]
    text = (
        TextFeatures(randn(cfg["text_len"], cfg["text_dim"], gen=gen))
        if cfg["text_len"] > 0 else None
    )

    rows = []
    for step in range(cfg["steps"]):
        x0 = pool[step % len(pool)]
        eps = randn(dims.seq, mcfg.hidden, gen=gen)
        t = float(torch.rand((), generator=gen))
        loss = rf_loss(model, x0, text, t, eps)
        if not torch.isfinite(loss):
            raise DivergenceError(step)
        grads = grad(loss, model.params)
        gnorm = math.sqrt(sum(float(g.pow(2).sum()) for g in grads.values()))
        with torch.no_grad():
            for name in model.params.names():
                model.params[name].sub_(cfg["lr"] * grads[name])
        rows.append([step, float(loss), gnorm])
    write_csv(out / "train_toy.csv", ["step", "loss", "grad_norm"], rows, meta)
    save_checkpoint(model, out / "checkpoint.npz")
    return ["train_toy.csv", "checkpoint.npz"], []


# -- reward-ft --------------------------------------------------------------


def run_reward_ft(cfg: dict, out: Path, meta: dict):
    ckpt = Path(cfg["checkpoint"])
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    mcfg = model.cfg
    rewards = [make_reward_spec(name, weight) for name, weight in cfg["rewards"]]
    sched = FlowSchedule(cfg["sampler_steps"])

    tgen = torch.Generator().manual_seed(cfg["seed"] + 7)
    text = (
        TextFeatures(randn(mcfg.text_len, mcfg.text_dim, gen=tgen))
        if mcfg.text_len > 0 else None
    )
    prompt = Prompt(
        name="synthetic",
        text=text,
        targets={"brightness": cfg["brightness_target"]},
    )

    artifacts = []
    summary_rows = []
    for k in cfg["k"]:
        for f in cfg["f"]:
            adapters = init_lora(
                model.params, rank=cfg["lora_rank"], alpha=cfg["lora_alpha"],
                seed=cfg["seed"],
            )
            tcfg = RewardTrainerConfig(
                prompts=[prompt], rewards=rewards, sched=sched,
                steps=cfg["steps"], k=k, decode_frames=f,
                lr=cfg["lr"], seed=cfg["seed"],
            )
            decoder = DecoderStub(mcfg.hidden, mcfg.dims, seed=cfg["seed"])
            log = reward_finetune(model, adapters, tcfg, decoder)

            reward_cols = [f"reward_{spec.name}" for spec in rewards]
            header = ["step", "loss", "combined"] + reward_cols + ["grad_norm", "update_norm"]
            rows = [[r[c] for c in header] for r in log]
            name = f"reward_ft_k{k}_f{f}.csv"
            write_csv(out / name, header, rows, meta)
            artifacts.append(name)

            # post-training sample diagnostics for the frame-count sweep
            eff = apply_lora(model.params, adapters)
            sgen = torch.Generator().manual_seed(cfg["seed"] + 999)
            with torch.no_grad():
                x0, _ = euler_sample(
                    model, randn(mcfg.dims.seq, mcfg.hidden, gen=sgen), text, sched, eff
                )
                frames = decoder.decode(x0, f)
                per_frame = [
                    float(sum(s.weight * s.fn(frames[j : j + 1], prompt) for s in rewards))
                    for j in range(f)
                ]
                fvar = (
                    float(torch.tensor(per_frame).var(correction=0)) if f > 1 else 0.0
                )
                tdiff = (
                    float((frames[1:] - frames[:-1]).pow(2).mean()) if f > 1 else 0.0
                )
            final = log[-1]["combined"] if log else 0.0
            gmean = (
                sum(r["grad_norm"] for r in log) / len(log) if log else 0.0
            )
            summary_rows.append([k, f, final, gmean, fvar, tdiff])

    write_csv(
        out / "reward_ft_summary.csv",
        ["k", "f", "final_combined", "mean_grad_norm",
         "per_frame_reward_var", "temporal_diff_energy"],
        summary_rows, meta,
    )
    artifacts.append("reward_ft_summary.csv")
    return artifacts, []


# -- bucket-sim -------------------------------------------------------------


def run_bucket_sim(cfg: dict, out: Path, meta: dict):
    samples = load_manifest(cfg["manifest"])
    formula = TokenFormula()
    batch, workers = cfg["batch"], cfg["workers"]
    cost_names = ["linear", "quadratic"] if cfg["cost"] == "both" else [cfg["cost"]]

    rows, summary = [], []
    for cost_name in cost_names:
        cm = CostModel.linear() if cost_name == "linear" else CostModel.quadratic()
        acc = {"ttl": [], "naive": []}
        for seed in range(cfg["seeds"]):
            plans = {
                "ttl": build_ttl_plan(samples, batch, formula, seed),
                "naive": build_naive_plan(samples, batch, formula, seed),
            }
            for plan_name, plan in plans.items():
                rep = simulate_throughput(plan, workers, cm)
                acc[plan_name].append(rep)
                rows.append(
                    [cost_name, seed, plan_name, rep["total_tokens"],
                     rep["total_time"], rep["tokens_per_time"], rep["mean_idle"]]
                )
        mean_tpt = {
            name: sum(r["tokens_per_time"] for r in reps) / len(reps)
            for name, reps in acc.items()
        }
        mean_idle = {
            name: sum(r["mean_idle"] for r in reps) / len(reps)
            for name, reps in acc.items()
        }
        summary.append(
            [cost_name, mean_tpt["ttl"], mean_tpt["naive"],
             mean_tpt["ttl"] / mean_tpt["naive"], mean_idle["ttl"], mean_idle["naive"]]
        )
    write_csv(
        out / "bucket_sim.csv",
        ["cost_model", "seed", "plan", "total_tokens", "total_time",
         "tokens_per_time", "mean_idle"],
        rows, meta,
    )
    write_csv(
        out / "bucket_sim_summary.csv",
        ["cost_model", "ttl_tokens_per_time", "naive_tokens_per_time",
         "ttl_vs_naive", "ttl_mean_idle", "naive_mean_idle"],
        summary, {**meta, "reference_large_scale_ratio": "2.21x on 256 workers"},
    )
    return ["bucket_sim.csv", "bucket_sim_summary.csv"], []


# -- make-manifest ----------------------------------------------------------


def _paper_mix_samples(n: int, seed: int) -> list[SampleMeta]:
    """20% at 512x512x49 (13312 tokens), 80% spread over [832, 13312] tokens."""
    rng = random.Random(seed)
    n_big = round(0.2 * n)
    samples = []
    for i in range(n):
        if i < n_big:
            h, w, f = 512, 512, 49
        else:
            for _ in range(100):
                target = rng.randint(832, 13312)
                fp = rng.randint(1, 13)
                area = max(4, round(target / fp))
                aspect = rng.uniform(0.5, 2.0)
                hp = max(2, min(64, round(math.sqrt(area * aspect))))
                wp = max(2, min(64, round(area / hp)))
                if 832 <= fp * hp * wp <= 13312:
                    break
            else:
                fp, hp, wp = 1, 32, 32
            h, w, f = 16 * hp, 16 * wp, 4 * (fp - 1) + 1
        samples.append(SampleMeta(id=f"s{i:05d}", h=h, w=w, f=f))
    return samples


def run_make_manifest(cfg: dict, out: Path, meta: dict):
    if cfg["profile"] == "paper-mix":
        samples = _paper_mix_samples(cfg["n"], cfg["seed"])
    elif cfg["profile"] == "uniform":
        samples = [
            SampleMeta(id=f"s{i:05d}", h=512, w=512, f=49) for i in range(cfg["n"])
        ]
    else:
        raise ValueError(f"unknown profile {cfg['profile']!r}")
    name = cfg["out_file"]
    write_manifest(samples, out / name)
    return [name], []


# -- rerun ------------------------------------------------------------------


RUNNERS = {
    "bench-attn": run_bench_attn,
    "ablate": run_ablate,
    "train-toy": run_train_toy,
    "reward-ft": run_reward_ft,
    "bucket-sim": run_bucket_sim,
    "make-manifest": run_make_manifest,
}


def rerun_from_manifest(manifest_path: Path, out_dir: Path) -> int:
    with open(manifest_path) as fh:
        recorded = json.load(fh)
    sub = recorded["subcommand"]
    if sub not in RUNNERS:
        raise ValueError(f"manifest names unknown subcommand {sub!r}")
    _execute(sub, recorded["config"], out_dir)
    timing = set(recorded.get("timing_files", []))
    failures = 0
    for name, sha in sorted(recorded["artifacts"].items()):
        if name in timing:
            print(f"skip     {name} (timing)")
            continue
        new_sha = _sha256(Path(out_dir) / name)
        if new_sha == sha:
            print(f"match    {name}")
        else:
            print(f"MISMATCH {name}")
            failures += 1
    return 1 if failures else 0


# -- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vdlab",
        description="attention benchmarks, ablations, toy diffusion training, "
        "reward fine-tuning, and batching simulations",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    def add_common(p):
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench-attn", help="wall time and FLOPs, full vs hybrid stacks")
    add_common(p)
    p.add_argument("--dims", type=_parse_dims, default=[4, 32, 32], help="f,h,w token grid")
    p.add_argument("--heads", type=int, default=6)
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--window", type=int, default=1024)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--schedule", choices=["full", "hybrid", "both"], default="both")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")

    p = sub.add_parser("ablate", help="sweep placement, window size, or direction count")
    add_common(p)
    p.add_argument("--axis", choices=["positions", "window", "directions"], required=True)
    p.add_argument("--dims", type=_parse_dims, default=[4, 4, 4])
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--window", type=int, default=9)
    p.add_argument("--heads", type=int, default=6)
    p.add_argument("--head-dim", type=int, default=8)
    p.add_argument("--repeats", type=int, default=5)

    p = sub.add_parser("train-toy", help="rectified-flow training on synthetic tokens")
    add_common(p)
    p.add_argument("--dims", type=_parse_dims, default=[2, 4, 4])
    p.add_argument("--heads", type=int, default=3)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--placement", choices=["none", "shallow", "middle", "deep"], default="none")
    p.add_argument("--window", type=int, default=16)
    p.add_argument("--text-len", type=int, default=0)
    p.add_argument("--text-dim", type=int, default=8)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--data-pool", type=int, default=16)

    p = sub.add_parser("reward-ft", help="LoRA reward fine-tuning with K/F sweeps")
    add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--k", type=_parse_int_list, default=[10], help="comma list of K values")
    p.add_argument("--f", type=_parse_int_list, default=[1], help="comma list of F values")
    p.add_argument("--rewards", type=_parse_rewards, default=[["brightness", 1.0]],
                   help="name:weight,... from brightness, smoothness, center_mass")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--sampler-steps", type=int, default=12)
    p.add_argument("--lora-rank", type=int, default=4)
    p.add_argument("--lora-alpha", type=float, default=4.0)
    p.add_argument("--brightness-target", type=float, default=0.5)

    p = sub.add_parser("bucket-sim", help="TTL vs naive batching throughput")
    add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--workers", type=int, default=256)
    p.add_argument("--cost", choices=["linear", "quadratic", "both"], default="both")
    p.add_argument("--seeds", type=int, default=5)

    p = sub.add_parser("make-manifest", help="generate a synthetic dataset manifest")
    add_common(p)
    p.add_argument("--profile", choices=["paper-mix", "uniform"], default="paper-mix")
    p.add_argument("--n", type=int, default=8192)
    p.add_argument("--out-file", default="paper_mix.jsonl")

    p = sub.add_parser("rerun", help="re-execute a recorded run and verify artifacts")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    return parser


def _args_to_config(args: argparse.Namespace) -> dict:
    skip = {"cmd", "out"}
    cfg = {}
    for key, value in vars(args).items():
        if key in skip:
            continue
        cfg[key] = str(value) if isinstance(value, Path) else value
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.cmd == "rerun":
            return rerun_from_manifest(args.manifest, args.out)
        _execute(args.cmd, _args_to_config(args), args.out)
        return 0
    except (ValueError, KeyError, FileNotFoundError, ManifestError,
            DivergenceError, NonFiniteError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
