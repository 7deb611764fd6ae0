"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``. The learning check
trains for 2000 steps and takes about 14 minutes on one CPU core.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from mspfn import cli
from mspfn.bench import learning_check
from mspfn.data import load_image, load_manifest, procedural_scene, save_image
from mspfn.gradcheck import grad_check
from mspfn.losses import LossConfig, charbonnier, edge_loss, loss_terms, psnr, ssim
from mspfn.model import ModelConfig, ParamStore, cau_forward, conv_lstm_step, init_params, make_variant, mspfn_forward, param_count
from mspfn.pyramid import laplacian_map
from mspfn.tensor import (
    Tensor,
    add,
    clamp,
    conv2d,
    conv2d_transpose,
    global_avg_pool,
    mul,
    no_grad,
    relu,
    scale,
    sigmoid,
    sub,
    tanh,
)
from mspfn.train import TrainConfig, checkpoint_bytes, load_checkpoint, lr_schedule, save_checkpoint, train

from conftest import build_pairs
from oracles import conv2d_loops, conv2d_transpose_scatter, project, ssim_naive


@pytest.fixture
def verdict(capsys):
    def emit(n, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {title}" + (f" ({detail})" if detail else ""))
        assert ok, f"criterion {n} failed: {detail}"

    return emit


def _f64(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), dtype=np.float64)


# -- 1 ----------------------------------------------------------------------------------

SHAPES = [(1, 2, 4, 4), (2, 3, 5, 3), (1, 4, 6, 7)]


def _lstm(c_in, c, rng):
    return ParamStore(
        {
            "l.w_x": _f64(rng, (4 * c, c_in, 3, 3), -0.4, 0.4),
            "l.w_h": _f64(rng, (4 * c, c, 3, 3), -0.4, 0.4),
            "l.b": _f64(rng, (1, 4 * c, 1, 1), -0.4, 0.4),
        }
    )


def _cau(c, rng):
    mid = max(1, c // 4)
    shapes = {
        "u.conv1.w": (c, c, 3, 3),
        "u.conv1.b": (1, c, 1, 1),
        "u.conv2.w": (c, c, 3, 3),
        "u.conv2.b": (1, c, 1, 1),
        "u.fc_reduce.w": (mid, c, 1, 1),
        "u.fc_reduce.b": (1, mid, 1, 1),
        "u.fc_expand.w": (c, mid, 1, 1),
        "u.fc_expand.b": (1, c, 1, 1),
    }
    return ParamStore({k: _f64(rng, s, -0.5, 0.5) for k, s in shapes.items()})


def _away_from_kinks(t: Tensor, kinks) -> Tensor:
    d = t.data
    for k in kinks:
        d[np.abs(d - k) < 0.05] = k + 0.1
    return t


def _grad_cases():
    cases = []
    for si, shape in enumerate(SHAPES):
        rng = np.random.default_rng(1000 + si)
        n, c, h, w = shape
        x = _f64(rng, shape)

        wt, b = _f64(rng, (3, c, 3, 3)), _f64(rng, (1, 3, 1, 1))
        cases.append(("conv2d", lambda a, ww, bb: project(conv2d(a, ww, bb, stride=1 + si % 2, padding=1)), [x, wt, b]))

        wt_t = _f64(rng, (c, 2, 4, 4))
        cases.append(("conv2d_transpose", lambda a, ww: project(conv2d_transpose(a, ww, stride=2, padding=1)), [_f64(rng, shape), wt_t]))

        y, col = _f64(rng, shape), _f64(rng, (n, c, 1, 1))
        for name, fn in [("add", add), ("sub", sub), ("mul", mul)]:
            cases.append((name, lambda a, bb, fn=fn: project(fn(a, bb)), [_f64(rng, shape), y]))
            cases.append((name + "_broadcast", lambda a, bb, fn=fn: project(fn(a, bb)), [_f64(rng, shape), col]))
        cases.append(("sigmoid", lambda a: project(sigmoid(a)), [_f64(rng, shape, -3, 3)]))
        cases.append(("tanh", lambda a: project(tanh(a)), [_f64(rng, shape, -2, 2)]))
        cases.append(("relu", lambda a: project(relu(a)), [_away_from_kinks(_f64(rng, shape), [0.0])]))
        cases.append(("scale", lambda a: project(scale(a, -1.7)), [_f64(rng, shape)]))
        cases.append(("clamp", lambda a: project(clamp(a, -0.5, 0.5)), [_away_from_kinks(_f64(rng, shape), [-0.5, 0.5])]))
        cases.append(("global_avg_pool", lambda a: project(global_avg_pool(a)), [_f64(rng, shape)]))

        lp = _lstm(c, 2, rng)
        names = list(lp)
        h0, c0 = _f64(rng, (n, 2, h, w)), _f64(rng, (n, 2, h, w))

        def lstm_fn(a, hh, cc, *ws, names=names):
            from mspfn.model import LstmState

            st = conv_lstm_step(a, LstmState(hh, cc), ParamStore(zip(names, ws)), "l")
            return project(add(st.h, scale(st.c, 0.5)))

        cases.append(("conv_lstm_step", lstm_fn, [_f64(rng, shape), h0, c0] + list(lp.values())))

        cp = _cau(c, rng)
        cnames = list(cp)
        cases.append(
            ("cau_forward", lambda a, *ws, cnames=cnames: project(cau_forward(a, ParamStore(zip(cnames, ws)), "u")),
             [_f64(rng, shape)] + list(cp.values()))
        )
        cases.append(("laplacian_map", lambda a: project(laplacian_map(a)), [_f64(rng, shape)]))

        t = _f64(rng, shape)
        cases.append(("charbonnier", lambda a, tt: charbonnier(a, tt, 1e-3), [_f64(rng, shape), t], 1e-6))
        cases.append(("charbonnier_wide_eps", lambda a, tt: charbonnier(a, tt, 0.1), [_f64(rng, shape), t]))
        clean, der = _f64(rng, shape, 0, 1), _f64(rng, shape, 0, 1)
        # truncation error grows like (step / gap)^2 where gap is the smallest Laplacian difference,
        # round-off like 1e-16 / step; gap / 300 keeps both under tolerance
        gap = np.abs(laplacian_map(der).data - laplacian_map(clean).data).min()
        cases.append(("edge_loss", lambda d, clean=clean: edge_loss(clean, d, 1e-3), [der], min(1e-4, gap / 300)))
    return cases


def test_criterion_1_gradient_suite(verdict):
    t0 = time.perf_counter()
    counts, failures, worst = {}, [], 0.0
    for case in _grad_cases():
        name, fn, inputs = case[:3]
        step = case[3] if len(case) > 3 else 1e-4
        rep = grad_check(fn, inputs, step=step, tol=1e-4)
        counts[name] = counts.get(name, 0) + 1
        worst = max(worst, rep.max_rel_err)
        if not rep.passed:
            failures.append((name, rep.max_rel_err))
    seconds = time.perf_counter() - t0
    required = [
        "conv2d", "conv2d_transpose", "add", "sub", "mul", "sigmoid", "tanh", "relu", "scale", "clamp",
        "global_avg_pool", "conv_lstm_step", "cau_forward", "laplacian_map", "charbonnier", "edge_loss",
    ]
    ok = not failures and all(counts.get(k, 0) >= 3 for k in required) and seconds < 60
    verdict(1, "gradient suite", ok, f"{sum(counts.values())} checks, worst rel err {worst:.2e}, {seconds:.1f}s, failures {failures}")


# -- 2 ----------------------------------------------------------------------------------


def test_criterion_2_oracles(verdict):
    rng = np.random.default_rng(2)
    worst_conv = worst_tr = worst_adj = 0.0
    for n, c, h, w, o, k, s, p in [(1, 1, 5, 5, 1, 3, 1, 1), (2, 3, 7, 7, 4, 3, 2, 1), (1, 2, 8, 8, 3, 4, 2, 1), (2, 2, 9, 7, 3, 5, 1, 2)]:
        x, wt, b = rng.normal(size=(n, c, h, w)), rng.normal(size=(o, c, k, k)), rng.normal(size=(1, o, 1, 1))
        got = conv2d(Tensor(x), Tensor(wt), Tensor(b), stride=s, padding=p).data
        worst_conv = max(worst_conv, np.abs(got - conv2d_loops(x, wt, b, s, p)).max())

        op = (h + 2 * p - k) % s
        y = rng.normal(size=got.shape)
        tb = rng.normal(size=(1, c, 1, 1))
        gt = conv2d_transpose(Tensor(y), Tensor(wt), Tensor(tb), stride=s, padding=p, output_padding=op).data
        worst_tr = max(worst_tr, np.abs(gt - conv2d_transpose_scatter(y, wt, tb, s, p, op)).max())

        # every case has the same output_padding along both axes
        fwd = conv2d(Tensor(x), Tensor(wt), stride=s, padding=p).data
        back = conv2d_transpose(Tensor(y), Tensor(wt), stride=s, padding=p, output_padding=op).data
        lhs, rhs = float(np.sum(fwd * y)), float(np.sum(x * back))
        worst_adj = max(worst_adj, abs(lhs - rhs) / max(1.0, abs(lhs)))

    a = rng.uniform(0, 1, (1, 2, 20, 17))
    bimg = np.clip(a + 0.2 * rng.normal(size=a.shape), 0, 1)
    ssim_err = abs(ssim(a, bimg) - ssim_naive(a, bimg))
    ok = worst_conv <= 1e-12 and worst_tr <= 1e-12 and worst_adj <= 1e-10 and ssim_err <= 1e-6
    verdict(2, "oracle suite", ok, f"conv {worst_conv:.1e}, transpose {worst_tr:.1e}, adjoint {worst_adj:.1e}, ssim {ssim_err:.1e}")


# -- 3 ----------------------------------------------------------------------------------


def test_criterion_3_loss_identities(verdict):
    rng = np.random.default_rng(3)
    res = Tensor(rng.uniform(-0.2, 0.2, (2, 3, 16, 16)), dtype=np.float64)
    clean = Tensor(rng.uniform(0, 1, (2, 3, 16, 16)), dtype=np.float64)
    terms = loss_terms(res, Tensor(res.data.copy()), clean, Tensor(clean.data.copy()), LossConfig(1e-3, 0.05))
    errs = (abs(terms.l_con - 1e-3), abs(terms.l_edge - 1e-3), abs(terms.total.item() - 1.05e-3))
    verdict(3, "loss identities", max(errs) <= 1e-12, f"l_con {terms.l_con!r}, l_edge {terms.l_edge!r}, total {terms.total.item()!r}")


# -- 4 ----------------------------------------------------------------------------------

NAMED = [f"model{i}" for i in range(1, 7)] + ["baseline_m10n3", "final_m17n1", "m30n1", "m17n2", "m13n2", "m8n5", "lightweight"]


def test_criterion_4_architecture_contracts(verdict):
    t0 = time.perf_counter()
    x = Tensor(np.random.default_rng(4).uniform(0, 1, (1, 3, 64, 64)).astype(np.float32))
    bad = []
    for name in NAMED:
        cfg = make_variant(name)
        with no_grad():
            out = mspfn_forward(x, init_params(cfg, 0), cfg).derained
        if out.shape != x.shape or not np.all(np.isfinite(out.data)):
            bad.append(name)

    base = ModelConfig(levels=3, scale_channels=(8, 16, 32), M=2, N=2, T=2)
    mono = {
        "M": [param_count(replace(base, M=m)) for m in range(0, 5)],
        "N": [param_count(replace(base, N=n)) for n in range(1, 5)],
        "levels": [param_count(replace(base, levels=lv, scale_channels=(8, 16, 32, 64)[:lv])) for lv in range(1, 5)],
        "width": [param_count(replace(base, scale_channels=tuple(c * m for c in (8, 16, 32)))) for m in (1, 2, 3, 4)],
    }
    not_mono = [k for k, v in mono.items() if not all(a < b for a, b in zip(v, v[1:]))]
    ordered = param_count(make_variant("model3")) < param_count(make_variant("baseline_m10n3"))
    seconds = time.perf_counter() - t0
    ok = not bad and not not_mono and ordered and seconds < 120
    verdict(4, "architecture contracts", ok, f"{len(NAMED)} variants, bad {bad}, non-monotone {not_mono}, model3<baseline {ordered}, {seconds:.1f}s")


# -- 5 ----------------------------------------------------------------------------------


def test_criterion_5_schedule(verdict):
    cfg = TrainConfig()
    want = {0: 2e-4, 20000: 1e-4, 40000: 5e-5, 10**9: 1e-6}
    got = {s: lr_schedule(s, cfg) for s in want}
    verdict(5, "learning-rate schedule", got == want, str(got))


# -- 6 ----------------------------------------------------------------------------------


def test_criterion_6_learning_check(verdict):
    rep = learning_check(steps=2000, pairs=8, size=64, seed=0)
    ok = rep.gain_db >= 5.0 and rep.blocks_decreasing
    blocks = ", ".join(f"{v:.5f}" for v in rep.block_means)
    verdict(
        6,
        "learning check",
        ok,
        f"{rep.baseline_psnr:.2f} dB -> {rep.derained_psnr:.2f} dB (+{rep.gain_db:.2f}), 200-step means [{blocks}], {rep.seconds:.0f}s",
    )


# -- 7 ----------------------------------------------------------------------------------


def test_criterion_7_determinism_and_persistence(verdict, tmp_path):
    manifest, _ = build_pairs(tmp_path / "data", 4)
    cfg = make_variant("tiny")
    tcfg = TrainConfig(steps=20, patch=32, batch_size=2, ckpt_every=10, seed=7)
    full_a, log_a = train(cfg, tcfg, manifest)
    _, log_b = train(cfg, tcfg, manifest)
    same_logs = json.dumps(log_a) == json.dumps(log_b)

    train(cfg, tcfg, manifest, out_dir=tmp_path / "run", max_steps=10)
    resumed, log_rest = train(cfg, tcfg, manifest, resume=load_checkpoint(tmp_path / "run" / "ckpt_000010.mspfn"))
    resume_ok = json.dumps(log_rest) == json.dumps(log_a[10:]) and len(log_rest) == 10
    resume_ok = resume_ok and all(resumed.params[k].data.tobytes() == full_a.params[k].data.tobytes() for k in full_a.params)

    save_checkpoint(full_a, tmp_path / "a.mspfn")
    raw = (tmp_path / "a.mspfn").read_bytes()
    round_trip = checkpoint_bytes(load_checkpoint(tmp_path / "a.mspfn")) == raw
    ok = same_logs and resume_ok and round_trip
    verdict(7, "determinism and persistence", ok, f"logs identical {same_logs}, 10-step resume exact {resume_ok}, bytes identical {round_trip}")


# -- 8 ----------------------------------------------------------------------------------


def test_criterion_8_cli_pipeline(verdict, tmp_path, capsys):
    src = tmp_path / "clean"
    src.mkdir()
    for i in range(4):
        save_image(procedural_scene(200 + i, 64, 64), src / f"s{i}.png")
    codes = []
    codes.append(cli.main(["synth", "--clean-dir", str(src), "--out", str(tmp_path / "ds"), "--count", "4", "--seed", "3"]))
    manifest_path = tmp_path / "ds" / "manifest.json"
    codes.append(cli.main(["train", "--manifest", str(manifest_path), "--out", str(tmp_path / "run"), "--steps", "50"]))
    ckpt = tmp_path / "run" / "final.mspfn"
    manifest = load_manifest(manifest_path)
    pairs = []
    for i, pair in enumerate(manifest.pairs):
        out = tmp_path / f"derained_{i}.png"
        codes.append(cli.main(["derain", "--ckpt", str(ckpt), "--in", str(manifest.resolve(pair.rain)), "--out", str(out)]))
        pairs.append((out, manifest.resolve(pair.clean)))
    report = tmp_path / "eval.json"
    codes.append(cli.main(["eval", "--pairs", *[f"{a}:{b}" for a, b in pairs], "--json", str(report)]))
    capsys.readouterr()

    rows = json.loads(report.read_text())["images"]
    errs = []
    for row, (a, b) in zip(rows, pairs):
        la, lb = load_image(a), load_image(b)
        errs += [abs(row["psnr"] - psnr(la, lb)), abs(row["ssim"] - ssim(la, lb))]
    ok = codes == [0] * len(codes) and len(rows) == 4 and max(errs) <= 1e-6
    verdict(8, "end-to-end CLI", ok, f"exit codes {codes}, max |cli - library| {max(errs):.1e}")
