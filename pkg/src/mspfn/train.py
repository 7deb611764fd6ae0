"""Adam, the step-halving learning-rate schedule, the training loop and checkpoints.

Checkpoint layout (all integers little-endian)::

    b"MSPFN" | version byte (1) | uint32 header length | JSON header | payload

The payload is float32 data for every parameter in ParamStore order, then
every Adam first moment, then every second moment. The header records the
model config, tensor names and shapes, step counters, sampler RNG state and
a CRC-32 of the payload.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .data import DatasetManifest, PatchSampler
from .losses import LossConfig, loss_terms, psnr
from .model import ModelConfig, ParamStore, check_params, init_params, mspfn_forward
from .tensor import Tensor

MAGIC = b"MSPFN"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 2
    lr_init: float = 2e-4
    lr_half_every: int = 20000
    lr_floor: float = 1e-6
    epochs: int = 30
    steps: int | None = 2000  # None: derive from epochs and the training-set size
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    patch: int = 64
    ckpt_every: int = 500
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if min(self.batch_size, self.lr_half_every, self.epochs, self.patch, self.ckpt_every) <= 0:
            raise ValueError("batch_size, lr_half_every, epochs, patch and ckpt_every must be positive")
        if not 0 < self.lr_floor <= self.lr_init:
            raise ValueError(f"need 0 < lr_floor <= lr_init, got {self.lr_floor}, {self.lr_init}")
        if self.steps is not None and self.steps < 0:
            raise ValueError("steps must be non-negative")

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        """Settings of the original GPU training run."""
        return replace(cls(batch_size=8, steps=None, epochs=30, lr_init=2e-4, lr_half_every=20000, lr_floor=1e-6),
                       **overrides)

    def total_steps(self, n_train: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * math.ceil(n_train / self.batch_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossConfig(**d["loss"])
        return cls(**d)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Halve ``lr_init`` every ``lr_half_every`` steps, never below ``lr_floor``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return max(cfg.lr_floor, cfg.lr_init * 0.5 ** (step // cfg.lr_half_every))


# -- Adam --------------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ParamStore) -> "AdamState":
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(params: ParamStore, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, grads: dict[str, np.ndarray] | None = None) -> None:
    """Bias-corrected Adam update applied in place to ``params`` and ``state``."""
    if grads is None:
        grads = {}
        for k, p in params.items():
            if p.grad is None:
                raise ValueError(f"missing gradient for parameter {k}")
            grads[k] = p.grad
    else:
        for k in params:
            if k not in grads:
                raise ValueError(f"missing gradient for parameter {k}")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for k, p in params.items():
        g = grads[k].astype(np.float64)
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        state.m[k] = m.astype(p.dtype)
        state.v[k] = v.astype(p.dtype)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype)


# -- checkpoints ----------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: ParamStore
    adam: AdamState
    step: int = 0
    rng_state: dict | None = None
    train_config: TrainConfig | None = None


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    names = list(ckpt.params)
    blobs = [np.ascontiguousarray(ckpt.params[k].data, dtype="<f4").tobytes() for k in names]
    blobs += [np.ascontiguousarray(ckpt.adam.m[k], dtype="<f4").tobytes() for k in names]
    blobs += [np.ascontiguousarray(ckpt.adam.v[k], dtype="<f4").tobytes() for k in names]
    payload = b"".join(blobs)
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": None if ckpt.train_config is None else ckpt.train_config.to_dict(),
        "step": ckpt.step,
        "adam_t": ckpt.adam.t,
        "rng_state": ckpt.rng_state,
        "tensor_count": len(names),
        "tensors": [{"name": k, "shape": list(ckpt.params[k].shape)} for k in names],
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + bytes([FORMAT_VERSION]) + struct.pack("<I", len(hbytes)) + hbytes + payload


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def read_header(raw: bytes) -> tuple[dict, int]:
    if raw[:5] != MAGIC:
        raise CheckpointMagicError(f"not an MSPFN checkpoint (magic {raw[:5]!r})")
    if len(raw) < 10:
        raise CheckpointTruncatedError("checkpoint ends inside the preamble")
    if raw[5] != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {raw[5]} (expected {FORMAT_VERSION})")
    (hlen,) = struct.unpack("<I", raw[6:10])
    if len(raw) < 10 + hlen:
        raise CheckpointTruncatedError("checkpoint ends inside the header")
    header = json.loads(raw[10 : 10 + hlen])
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"header declares version {header.get('format_version')}")
    return header, 10 + hlen


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    header, off = read_header(raw)
    payload = raw[off:]
    if len(payload) < header["payload_bytes"]:
        raise CheckpointTruncatedError(f"payload has {len(payload)} bytes, header declares {header['payload_bytes']}")
    if len(payload) > header["payload_bytes"]:
        raise CheckpointError("trailing bytes after payload")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CheckpointChecksumError("payload checksum mismatch")

    cfg = ModelConfig.from_dict(header["model_config"])
    specs = [(t["name"], tuple(t["shape"])) for t in header["tensors"]]
    if len(specs) != header["tensor_count"]:
        raise CheckpointError("tensor count does not match the tensor table")
    arrays = []
    pos = 0
    for _ in range(3):
        group = []
        for _, shape in specs:
            n = math.prod(shape)
            group.append(np.frombuffer(payload, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32))
            pos += 4 * n
        arrays.append(group)
    names = [n for n, _ in specs]
    params = ParamStore((n, Tensor(a, requires_grad=True)) for n, a in zip(names, arrays[0]))
    check_params(params, cfg)
    adam = AdamState(dict(zip(names, arrays[1])), dict(zip(names, arrays[2])), header["adam_t"])
    tcfg = None if header["train_config"] is None else TrainConfig.from_dict(header["train_config"])
    return Checkpoint(cfg, params, adam, header["step"], header["rng_state"], tcfg)


# -- training loop ----------------------------------------------------------------------


class TrainingDivergedError(RuntimeError):
    pass


def train_step(params: ParamStore, adam: AdamState, cfg: ModelConfig, tcfg: TrainConfig,
               rain: Tensor, clean: Tensor, step: int) -> dict:
    """One optimization step; returns the metrics-log record for it."""
    params.zero_grad()
    lr = lr_schedule(step, tcfg)
    out = mspfn_forward(rain, params, cfg)
    terms = loss_terms(out.residual, rain - clean, clean, out.derained, tcfg.loss)
    loss = terms.total.item()
    if not math.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite loss at step {step}: lr={lr!r} loss={loss!r} l_con={terms.l_con!r} l_edge={terms.l_edge!r}"
        )
    terms.total.backward()
    adam_step(params, adam, lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    batch_psnr = float(np.mean([psnr(out.derained.data[i], clean.data[i]) for i in range(rain.shape[0])]))
    return {"step": step, "lr": lr, "loss": loss, "l_con": terms.l_con, "l_edge": terms.l_edge, "psnr": batch_psnr}


def train(
    cfg: ModelConfig,
    tcfg: TrainConfig,
    manifest: DatasetManifest,
    out_dir=None,
    resume: Checkpoint | None = None,
    max_steps: int | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Run the training loop and return the final checkpoint and metrics log.

    With ``out_dir`` set, log records are appended to ``metrics.jsonl`` and
    checkpoints written as ``ckpt_{step}.mspfn`` every ``ckpt_every`` steps
    plus ``final.mspfn``. ``max_steps`` stops early without changing the
    schedule (used to produce mid-run checkpoints).
    """
    sampler = PatchSampler(manifest, tcfg.patch, tcfg.batch_size, tcfg.seed, multiple=cfg.size_multiple)
    total = tcfg.total_steps(len(sampler.rain))
    if resume is not None:
        check_params(resume.params, resume.model_config)
        if resume.model_config != cfg:
            raise ValueError("checkpoint model configuration differs from the requested one")
        params, adam, step = resume.params.copy(), _copy_adam(resume.adam), resume.step
        if resume.rng_state is not None:
            sampler.state = resume.rng_state
    else:
        params = init_params(cfg, tcfg.seed)
        adam, step = AdamState.zeros_like(params), 0
    stop = total if max_steps is None else min(total, max_steps)

    out = None if out_dir is None else Path(out_dir)
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "metrics.jsonl", "a" if resume is not None else "w")

    def snapshot() -> Checkpoint:
        return Checkpoint(cfg, params, adam, step, sampler.state, tcfg)

    log: list[dict] = []
    try:
        while step < stop:
            rain, clean = next(sampler)
            record = train_step(params, adam, cfg, tcfg, rain, clean, step)
            step += 1
            log.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if on_record is not None:
                on_record(record)
            if out is not None and step % tcfg.ckpt_every == 0:
                save_checkpoint(snapshot(), out / f"ckpt_{step:06d}.mspfn")
    finally:
        if log_file is not None:
            log_file.close()
    params.zero_grad()
    final = snapshot()
    if out is not None:
        save_checkpoint(final, out / "final.mspfn")
    return final, log


def _copy_adam(a: AdamState) -> AdamState:
    return AdamState({k: v.copy() for k, v in a.m.items()}, {k: v.copy() for k, v in a.v.items()}, a.t)


def fresh_checkpoint(cfg: ModelConfig, seed: int = 0) -> Checkpoint:
    params = init_params(cfg, seed)
    return Checkpoint(cfg, params, AdamState.zeros_like(params), 0, None, None)


__all__ = [
    "TrainConfig",
    "lr_schedule",
    "AdamState",
    "adam_step",
    "Checkpoint",
    "CheckpointError",
    "CheckpointMagicError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "CheckpointChecksumError",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "train",
    "train_step",
    "TrainingDivergedError",
    "fresh_checkpoint",
]
