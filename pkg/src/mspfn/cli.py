"""``mspfn`` command line: synth, train, derain, eval, inspect.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data
from .losses import LossConfig, psnr, ssim
from .model import VARIANTS, ModelConfig, make_variant, mspfn_forward, param_breakdown, param_count
from .tensor import Tensor, no_grad
from .train import TrainConfig, load_checkpoint, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _thread_limit():
    """Cap BLAS threads at ``MSPFN_THREADS`` when that variable is set."""
    if "MSPFN_THREADS" not in os.environ:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=data.env_threads())


# -- synth ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    ranges = data.RainRanges(
        angle_deg=(args.angle_min, args.angle_max),
        streak_length_px=(args.length_min, args.length_max),
        density=(args.density_min, args.density_max),
        intensity=(args.intensity_min, args.intensity_max),
    )
    _, path = data.make_dataset(args.clean_dir, args.out, args.count, ranges, args.seed, args.test_fraction, args.format)
    print(path)
    return 0


# -- train ---------------------------------------------------------------------------


def _model_config(args) -> ModelConfig:
    cfg = make_variant(args.variant)
    overrides = {}
    if args.channels:
        overrides["scale_channels"] = tuple(int(c) for c in args.channels.split(","))
        overrides["levels"] = len(overrides["scale_channels"])
    for key in ("M", "N", "T"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    return replace(cfg, **overrides) if overrides else cfg


def cmd_train(args) -> int:
    manifest_path = Path(args.manifest)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    manifest = data.load_manifest(manifest_path)
    cfg = _model_config(args)
    base = TrainConfig.paper() if args.paper_defaults else TrainConfig()
    fields = {
        "batch_size": args.batch_size,
        "lr_init": args.lr,
        "lr_half_every": args.lr_half_every,
        "lr_floor": args.lr_floor,
        "epochs": args.epochs,
        "seed": args.seed,
        "patch": args.patch,
        "ckpt_every": args.ckpt_every,
        "steps": args.steps,
    }
    tcfg = replace(base, **{k: v for k, v in fields.items() if v is not None})
    if args.epsilon is not None or args.lam is not None:
        tcfg = replace(tcfg, loss=LossConfig(
            epsilon=tcfg.loss.epsilon if args.epsilon is None else args.epsilon,
            lam=tcfg.loss.lam if args.lam is None else args.lam,
        ))
    resume = load_checkpoint(args.resume) if args.resume else None
    n_train = manifest.counts["train"]
    print(
        f"mspfn train: variant={args.variant} params={param_count(cfg)} lr={tcfg.lr_init:g} "
        f"batch={tcfg.batch_size} epochs={tcfg.epochs} steps={tcfg.total_steps(n_train)} "
        f"patch={tcfg.patch} lambda={tcfg.loss.lam:g} eps={tcfg.loss.epsilon:g}",
        flush=True,
    )

    def report(rec):
        if rec["step"] % args.log_every == 0:
            print(json.dumps(rec), flush=True)

    final, _ = train(cfg, tcfg, manifest, out_dir=args.out, resume=resume, on_record=report)
    print(Path(args.out) / "final.mspfn")
    return 0


# -- derain --------------------------------------------------------------------------


def derain_array(img: Tensor, ckpt) -> Tensor:
    """Pad (reflect) to the model's size multiple, run the network, crop back."""
    cfg = ckpt.model_config
    m = cfg.size_multiple
    _, _, h, w = img.shape
    ph, pw = (-h) % m, (-w) % m
    x = img.data
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect" if min(h, w) > max(ph, pw) else "edge")
    with no_grad():
        out = mspfn_forward(Tensor(np.ascontiguousarray(x, dtype=np.float32)), ckpt.params, cfg)
    return Tensor(np.ascontiguousarray(out.derained.data[:, :, :h, :w]))


def cmd_derain(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    img = data.load_image(args.inp)
    data.save_image(derain_array(img, ckpt), args.out)
    print(args.out)
    return 0


# -- eval ----------------------------------------------------------------------------


def score_pair(pred: Tensor, ref: Tensor, luma: bool = False) -> tuple[float, float]:
    if pred.shape != ref.shape:
        raise ValueError(f"pair dimensions differ: {pred.shape} vs {ref.shape}")
    return psnr(pred, ref, luma=luma), ssim(pred, ref, luma=luma)


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.6f}"


def _json_num(v: float):
    return "inf" if math.isinf(v) else v


def evaluate(jobs: list[tuple[str, str, str]], ckpt=None, luma: bool = False) -> dict:
    """Score ``(name, pred_path, ref_path)`` triples; ``ckpt`` derains ``pred`` first."""

    def one(job):
        name, pred_path, ref_path = job
        pred = data.load_image(pred_path)
        ref = data.load_image(ref_path)
        if pred.shape != ref.shape:
            raise ValueError(f"{pred_path} vs {ref_path}: pair dimensions differ {pred.shape[2:]} vs {ref.shape[2:]}")
        if ckpt is not None:
            pred = derain_array(pred, ckpt)
        p, s = score_pair(pred, ref, luma)
        return {"name": name, "psnr": p, "ssim": s}

    with ThreadPoolExecutor(max_workers=data.env_threads()) as pool:
        rows = list(pool.map(one, jobs))  # map keeps job order
    mean_psnr = float(np.mean([r["psnr"] for r in rows])) if rows else float("nan")
    mean_ssim = float(np.mean([r["ssim"] for r in rows])) if rows else float("nan")
    return {"images": rows, "mean": {"psnr": mean_psnr, "ssim": mean_ssim}, "luma": luma}


def format_table(result: dict) -> str:
    rows = result["images"]
    width = max([len("image"), len("mean")] + [len(r["name"]) for r in rows])
    lines = [f"{'image':<{width}}  {'psnr_db':>12}  {'ssim':>10}"]
    for r in rows:
        lines.append(f"{r['name']:<{width}}  {_fmt(r['psnr']):>12}  {_fmt(r['ssim']):>10}")
    m = result["mean"]
    lines.append(f"{'mean':<{width}}  {_fmt(m['psnr']):>12}  {_fmt(m['ssim']):>10}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    if args.manifest is None and not args.pairs:
        raise UsageError("eval needs --manifest or --pairs")
    jobs = []
    if args.manifest is not None:
        manifest = data.load_manifest(args.manifest)
        pairs = manifest.pairs if args.split == "all" else manifest.split(args.split)
        jobs += [(p.rain, str(manifest.resolve(p.rain)), str(manifest.resolve(p.clean))) for p in pairs]
    for spec in args.pairs or []:
        if ":" not in spec:
            raise UsageError(f"--pairs entries look like PRED:REF, got {spec!r}")
        pred, ref = spec.split(":", 1)
        jobs.append((Path(pred).name, pred, ref))
    ckpt = load_checkpoint(args.ckpt) if args.ckpt else None
    result = evaluate(jobs, ckpt, args.luma)
    print(format_table(result))
    doc = json.dumps(
        {
            "images": [{**r, "psnr": _json_num(r["psnr"]), "ssim": r["ssim"]} for r in result["images"]],
            "mean": {"psnr": _json_num(result["mean"]["psnr"]), "ssim": result["mean"]["ssim"]},
            "luma": args.luma,
        },
        indent=1,
    )
    if args.json:
        Path(args.json).write_text(doc + "\n")
    else:
        print(doc)
    return 0


# -- inspect -------------------------------------------------------------------------


def cmd_inspect(args) -> int:
    cfg = make_variant(args.variant)
    report = {
        "variant": args.variant,
        "config": cfg.to_dict(),
        "param_count": param_count(cfg),
        "breakdown": param_breakdown(cfg),
    }
    if args.json:
        print(json.dumps(report, indent=1))
        return 0
    print(f"variant: {args.variant}")
    for k, v in cfg.to_dict().items():
        print(f"  {k}: {v}")
    print(f"param_count: {report['param_count']} ({report['param_count'] / 1e6:.2f}M)")
    for k, v in report["breakdown"].items():
        print(f"  {k:<5} {v:>12}")
    return 0


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mspfn", description="Multi-scale progressive fusion deraining toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("synth", help="synthesize clean/rain pairs and a manifest")
    s.add_argument("--clean-dir", required=True, help="directory of clean .png/.ppm images")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--count", type=int, default=4, help="number of pairs (default 4)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--test-fraction", type=float, default=0.0, help="fraction of pairs marked as test")
    s.add_argument("--format", choices=["png", "ppm"], default="png")
    s.add_argument("--angle-min", type=float, default=-30.0)
    s.add_argument("--angle-max", type=float, default=30.0)
    s.add_argument("--length-min", type=int, default=7)
    s.add_argument("--length-max", type=int, default=15)
    s.add_argument("--density-min", type=float, default=0.01)
    s.add_argument("--density-max", type=float, default=0.04)
    s.add_argument("--intensity-min", type=float, default=0.6)
    s.add_argument("--intensity-max", type=float, default=1.0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model from a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--variant", default="tiny", choices=sorted(VARIANTS))
    t.add_argument("--steps", type=int, help="optimizer steps (desk default 2000)")
    t.add_argument("--out", required=True, help="directory for checkpoints and metrics.jsonl")
    t.add_argument("--paper-defaults", action="store_true", help="batch 8, epoch-based run length")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float, help="initial learning rate")
    t.add_argument("--lr-half-every", type=int)
    t.add_argument("--lr-floor", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--patch", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--ckpt-every", type=int)
    t.add_argument("--epsilon", type=float, help="Charbonnier epsilon")
    t.add_argument("--lambda", dest="lam", type=float, help="edge-loss weight")
    t.add_argument("--channels", help="comma-separated per-level widths, coarse to fine")
    t.add_argument("--M", type=int, help="number of fine-fusion modules")
    t.add_argument("--N", type=int, help="attention units per block")
    t.add_argument("--T", type=int, help="recurrent steps")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("derain", help="derain one image")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_derain)

    e = sub.add_parser("eval", help="PSNR/SSIM over a manifest or explicit pairs")
    e.add_argument("--manifest")
    e.add_argument("--ckpt", help="derain the rain images with this checkpoint before scoring")
    e.add_argument("--pairs", nargs="+", metavar="PRED:REF", help="explicit image pairs")
    e.add_argument("--split", choices=["all", "train", "test"], default="all")
    e.add_argument("--luma", action="store_true", help="score the luma channel only")
    e.add_argument("--json", help="write the JSON report here instead of stdout")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="print a configuration and its parameter counts")
    i.add_argument("--variant", required=True, choices=sorted(VARIANTS))
    i.add_argument("--json", action="store_true")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mspfn: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"mspfn: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
