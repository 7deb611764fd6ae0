"""Desk-scale learning check: train the tiny network on synthetic pairs and score it."""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetManifest, load_image, make_dataset, procedural_scene, save_image
from .losses import psnr
from .model import ModelConfig, ParamStore, make_variant, mspfn_forward
from .tensor import no_grad
from .train import TrainConfig, train


@dataclass
class LearningReport:
    baseline_psnr: float
    derained_psnr: float
    block_means: list[float]
    seconds: float
    log: list[dict] = field(repr=False, default_factory=list)

    @property
    def gain_db(self) -> float:
        return self.derained_psnr - self.baseline_psnr

    @property
    def blocks_decreasing(self) -> bool:
        b = self.block_means
        return all(x > y for x, y in zip(b, b[1:]))


def synthetic_pairs(root, count: int = 8, size: int = 64, seed: int = 1) -> DatasetManifest:
    """Write ``count`` procedural scenes under ``root`` and rain them."""
    root = Path(root)
    clean = root / "clean"
    clean.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        save_image(procedural_scene(100 + i, size, size), clean / f"scene_{i:02d}.png")
    manifest, _ = make_dataset(clean, root / "pairs", count, seed=seed)
    return manifest


def mean_psnr(manifest: DatasetManifest, params: ParamStore, cfg: ModelConfig) -> tuple[float, float]:
    """Mean PSNR of rain-vs-clean and derained-vs-clean over every pair."""
    base, out = [], []
    for pair in manifest.pairs:
        rain, clean = load_image(manifest.resolve(pair.rain)), load_image(manifest.resolve(pair.clean))
        with no_grad():
            derained = mspfn_forward(rain, params, cfg).derained
        base.append(psnr(rain, clean))
        out.append(psnr(derained, clean))
    return float(np.mean(base)), float(np.mean(out))


def block_means(values, block: int = 200) -> list[float]:
    """Means of consecutive non-overlapping blocks; a short tail block is dropped."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v) // block
    return v[: n * block].reshape(n, block).mean(axis=1).tolist()


def learning_check(
    steps: int = 2000,
    pairs: int = 8,
    size: int = 64,
    seed: int = 0,
    block: int = 200,
    workdir=None,
    on_record=None,
) -> LearningReport:
    cfg = make_variant("tiny")
    tcfg = TrainConfig(steps=steps, patch=size, seed=seed, ckpt_every=max(1, steps))
    with tempfile.TemporaryDirectory() as tmp:
        manifest = synthetic_pairs(Path(workdir or tmp), pairs, size)
        t0 = time.perf_counter()
        ckpt, log = train(cfg, tcfg, manifest, on_record=on_record)
        seconds = time.perf_counter() - t0
        base, derained = mean_psnr(manifest, ckpt.params, cfg)
    return LearningReport(base, derained, block_means([r["loss"] for r in log], block), seconds, log)
