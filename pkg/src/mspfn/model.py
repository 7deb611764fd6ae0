"""Multi-scale progressive fusion network.

The network sees a Gaussian pyramid of the rain image (coarsest level first),
runs per-level initial convolutions, a coarse-fusion module of parallel
Conv-LSTM residual recurrent units, a cascade of fine-fusion modules built
from U-shaped residual attention blocks, and a reconstruction module that
regresses the residual rain layer at full resolution.

Parameter naming
----------------
Names are dotted paths; ``l`` indexes pyramid levels coarse to fine, ``k``
the FFM cascade, ``j`` sampling pairs, ``n`` attention units. Iteration
order of :func:`param_shapes` is the serialization order::

    init.level{l}.{w,b}
    cfm.level{l}.up.{w,b}, cfm.level{l}.fuse.{w,b}        (l > 0, cross-scale variants)
    cfm.level{l}.lstm.{w_x,w_h,b}                          (gates stacked i, f, o, g)
    ffm{k}.level{l}.up.{w,b}, ffm{k}.level{l}.fuse.{w,b}  (l > 0, cross-scale variants)
    ffm{k}.level{l}.urab.down{j}.{w,b}
    ffm{k}.level{l}.urab.cau{n}.{conv1,conv2,fc_reduce,fc_expand}.{w,b}
    ffm{k}.level{l}.urab.up{j}.{w,b}                       (j descending)
    rm.level{l}.merge.{w,b}
    rm.level{l}.up.{w,b}, rm.level{l}.fuse.{w,b}          (l > 0)
    rm.out.{w,b}

Convolution weights are ``[Cout, Cin, k, k]``, transposed-convolution
weights ``[Cin, Cout, 4, 4]`` and biases ``[1, C, 1, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np

from .pyramid import build_pyramid
from .tensor import (
    ShapeError,
    Tensor,
    clamp,
    concat_channels,
    conv2d,
    conv2d_transpose,
    global_avg_pool,
    relu,
    sigmoid,
    slice_channels,
    tanh,
)

UP_KERNEL = 4  # stride-2 deconv with padding 1 doubles H and W exactly


class Variant(str, Enum):
    FULL = "Full"
    SINGLE_SCALE = "Model1_SingleScale"
    NO_CFM = "Model2_NoCFM"
    NO_FFM = "Model3_NoFFM"
    PARALLEL_FUSION = "Model4_ParallelFusion"
    LIGHTWEIGHT = "Lightweight"


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 3
    scale_channels: tuple[int, ...] = (32, 64, 128)
    M: int = 10
    N: int = 3
    T: int = 3
    urab_sampling_pairs: int = 1
    kernel_size: int = 3
    attention_reduction: int = 4
    variant: Variant = Variant.FULL

    def __post_init__(self):
        object.__setattr__(self, "scale_channels", tuple(int(c) for c in self.scale_channels))
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if len(self.scale_channels) != self.levels:
            raise ValueError(f"scale_channels {self.scale_channels} must have one entry per level ({self.levels})")
        if any(c <= 0 for c in self.scale_channels):
            raise ValueError(f"scale_channels must be positive, got {self.scale_channels}")
        if self.M < 0 or (self.M >= 1 and self.N < 1):
            raise ValueError(f"need M >= 0 and N >= 1 when M >= 1, got M={self.M}, N={self.N}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.urab_sampling_pairs < 0:
            raise ValueError("urab_sampling_pairs must be >= 0")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.attention_reduction < 1:
            raise ValueError("attention_reduction must be >= 1")

    @property
    def has_cfm(self) -> bool:
        return self.variant is not Variant.NO_CFM

    @property
    def has_ffm(self) -> bool:
        return self.M >= 1 and self.variant is not Variant.NO_FFM

    @property
    def cross_scale(self) -> bool:
        return self.variant is not Variant.PARALLEL_FUSION

    @property
    def size_multiple(self) -> int:
        """Input height and width must be multiples of this."""
        extra = self.urab_sampling_pairs if self.has_ffm else 0
        return 2 ** (self.levels - 1 + extra)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_channels"] = list(self.scale_channels)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ParamStore(dict):
    """Ordered ``name -> Tensor`` mapping; insertion order is the canonical order."""

    def numel(self) -> int:
        return int(sum(t.data.size for t in self.values()))

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def requires_grad_(self, flag: bool = True) -> "ParamStore":
        for t in self.values():
            t.requires_grad = flag
        return self

    def copy(self) -> "ParamStore":
        return ParamStore((k, Tensor(v.data.copy(), requires_grad=v.requires_grad)) for k, v in self.items())

    def astype(self, dtype) -> "ParamStore":
        return ParamStore((k, Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)) for k, v in self.items())


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise ShapeError(f"LSTM hidden {self.h.shape} and cell {self.c.shape} shapes differ")


# -- parameter schema --------------------------------------------------------------


def _conv(name: str, cout: int, cin: int, k: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{name}.w", (cout, cin, k, k)), (f"{name}.b", (1, cout, 1, 1))]


def _deconv(name: str, cin: int, cout: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{name}.w", (cin, cout, UP_KERNEL, UP_KERNEL)), (f"{name}.b", (1, cout, 1, 1))]


def _cau_shapes(prefix: str, c: int, k: int, reduction: int) -> list:
    mid = max(1, c // reduction)
    return (
        _conv(f"{prefix}.conv1", c, c, k)
        + _conv(f"{prefix}.conv2", c, c, k)
        + _conv(f"{prefix}.fc_reduce", mid, c, 1)
        + _conv(f"{prefix}.fc_expand", c, mid, 1)
    )


def _urab_shapes(prefix: str, c: int, cfg: ModelConfig) -> list:
    k = cfg.kernel_size
    out = []
    for j in range(cfg.urab_sampling_pairs):
        out += _conv(f"{prefix}.down{j}", c, c, k)
    for n in range(cfg.N):
        out += _cau_shapes(f"{prefix}.cau{n}", c, k, cfg.attention_reduction)
    for j in reversed(range(cfg.urab_sampling_pairs)):
        out += _deconv(f"{prefix}.up{j}", c, c)
    return out


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical ``(name, shape)`` list for a configuration."""
    ch = cfg.scale_channels
    k = cfg.kernel_size
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for lv in range(cfg.levels):
        shapes += _conv(f"init.level{lv}", ch[lv], 3, k)
    if cfg.has_cfm:
        for lv in range(cfg.levels):
            p = f"cfm.level{lv}"
            if lv > 0 and cfg.cross_scale:
                shapes += _deconv(f"{p}.up", ch[lv - 1], ch[lv]) + _conv(f"{p}.fuse", ch[lv], 2 * ch[lv], 1)
            shapes += [
                (f"{p}.lstm.w_x", (4 * ch[lv], ch[lv], k, k)),
                (f"{p}.lstm.w_h", (4 * ch[lv], ch[lv], k, k)),
                (f"{p}.lstm.b", (1, 4 * ch[lv], 1, 1)),
            ]
    if cfg.has_ffm:
        for m in range(cfg.M):
            for lv in range(cfg.levels):
                p = f"ffm{m}.level{lv}"
                if lv > 0 and cfg.cross_scale:
                    shapes += _deconv(f"{p}.up", ch[lv - 1], ch[lv]) + _conv(f"{p}.fuse", ch[lv], 2 * ch[lv], 1)
                shapes += _urab_shapes(f"{p}.urab", ch[lv], cfg)
    for lv in range(cfg.levels):
        p = f"rm.level{lv}"
        shapes += _conv(f"{p}.merge", ch[lv], 2 * ch[lv], 1)
        if lv > 0:
            shapes += _deconv(f"{p}.up", ch[lv - 1], ch[lv]) + _conv(f"{p}.fuse", ch[lv], 2 * ch[lv], 1)
    shapes += _conv("rm.out", 3, ch[-1], k)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.split(".")[-2].startswith("up"):
        # stride-2 deconv: each output pixel sees Cin * (k/2)^2 taps
        return max(1, shape[0] * shape[2] * shape[3] // 4)
    return shape[1] * shape[2] * shape[3]


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Fan-in scaled uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.Generator(np.random.PCG64(seed))
    store = ParamStore()
    for name, shape in param_shapes(cfg):
        if name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shape))
            arr = rng.uniform(-bound, bound, size=shape)
        store[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return store


def param_count(cfg: ModelConfig) -> int:
    return int(sum(math.prod(s) for _, s in param_shapes(cfg)))


def param_breakdown(cfg: ModelConfig) -> dict[str, int]:
    """Scalar parameter totals per top-level module (init, cfm, ffm, rm)."""
    out = {"init": 0, "cfm": 0, "ffm": 0, "rm": 0}
    for name, shape in param_shapes(cfg):
        head = name.split(".", 1)[0]
        key = "ffm" if head.startswith("ffm") else head
        out[key] += math.prod(shape)
    return out


def check_params(params: ParamStore, cfg: ModelConfig) -> None:
    expected = param_shapes(cfg)
    if len(expected) != len(params):
        raise ValueError(f"parameter store has {len(params)} tensors, configuration expects {len(expected)}")
    for (name, shape), (got_name, t) in zip(expected, params.items()):
        if name != got_name or t.shape != shape:
            raise ValueError(f"parameter mismatch: expected {name}{shape}, found {got_name}{t.shape}")


# -- building blocks ---------------------------------------------------------------


def _c(x: Tensor, params: ParamStore, name: str, stride: int = 1) -> Tensor:
    w = params[f"{name}.w"]
    return conv2d(x, w, params[f"{name}.b"], stride=stride, padding=w.shape[2] // 2)


def _up(x: Tensor, params: ParamStore, name: str) -> Tensor:
    return conv2d_transpose(x, params[f"{name}.w"], params[f"{name}.b"], stride=2, padding=1)


def conv_lstm_step(x: Tensor, state: LstmState | None, params: ParamStore, prefix: str) -> LstmState:
    """One convolutional LSTM update; ``state=None`` means zero hidden and cell state."""
    w_x, w_h, b = params[f"{prefix}.w_x"], params[f"{prefix}.w_h"], params[f"{prefix}.b"]
    c = w_x.shape[0] // 4
    pad = w_x.shape[2] // 2
    z = conv2d(x, w_x, b, padding=pad)
    if state is not None:
        if state.h.shape != (x.shape[0], c, x.shape[2], x.shape[3]):
            raise ShapeError(f"{prefix}: state {state.h.shape} does not align with input {x.shape}")
        z = z + conv2d(state.h, w_h, padding=pad)
    i = sigmoid(slice_channels(z, 0, c))
    f = sigmoid(slice_channels(z, c, 2 * c))
    o = sigmoid(slice_channels(z, 2 * c, 3 * c))
    g = tanh(slice_channels(z, 3 * c, 4 * c))
    cell = i * g if state is None else f * state.c + i * g
    return LstmState(o * tanh(cell), cell)


def rru_forward(
    features: list[Tensor],
    params: ParamStore,
    cfg: ModelConfig,
    T: int | None = None,
    states: list[LstmState | None] | None = None,
    return_states: bool = False,
):
    """Coarse-fusion module: parallel residual recurrent units with coarse-to-fine guidance."""
    if len(features) != cfg.levels:
        raise ShapeError(f"rru_forward: got {len(features)} levels, configuration has {cfg.levels}")
    steps = cfg.T if T is None else T
    states = list(states) if states is not None else [None] * cfg.levels
    for _ in range(steps):
        for lv in range(cfg.levels):
            x = features[lv]
            p = f"cfm.level{lv}"
            if lv > 0 and cfg.cross_scale:
                x = _c(concat_channels(x, _up(states[lv - 1].h, params, f"{p}.up")), params, f"{p}.fuse")
            states[lv] = conv_lstm_step(x, states[lv], params, f"{p}.lstm")
    out = [s.h + f for s, f in zip(states, features)]
    return (out, states) if return_states else out


def cau_forward(x: Tensor, params: ParamStore, prefix: str, gate: float | None = None) -> Tensor:
    """Channel attention unit with a short skip.

    ``gate`` replaces the learned attention vector by a constant (test hook).
    """
    c = params[f"{prefix}.conv1.w"].shape[1]
    if x.shape[1] != c:
        raise ShapeError(f"{prefix}: input has {x.shape[1]} channels, unit expects {c}")
    f = _c(relu(_c(x, params, f"{prefix}.conv1")), params, f"{prefix}.conv2")
    if gate is not None:
        return x + f * gate
    s = sigmoid(_c(relu(_c(global_avg_pool(f), params, f"{prefix}.fc_reduce")), params, f"{prefix}.fc_expand"))
    return x + f * s


def urab_forward(x: Tensor, params: ParamStore, prefix: str, cfg: ModelConfig, gate: float | None = None) -> Tensor:
    """U-shaped residual attention block: stride-2 convs, CAUs, deconvs, outer skip."""
    pairs = cfg.urab_sampling_pairs
    h, w = x.shape[2:]
    if h % (2**pairs) or w % (2**pairs):
        raise ShapeError(f"{prefix}: spatial size {h}x{w} not divisible by {2 ** pairs}")
    y = x
    for j in range(pairs):
        y = _c(y, params, f"{prefix}.down{j}", stride=2)
    for n in range(cfg.N):
        y = cau_forward(y, params, f"{prefix}.cau{n}", gate=gate)
    for j in reversed(range(pairs)):
        y = _up(y, params, f"{prefix}.up{j}")
    return x + y


def ffm_forward(streams: list[Tensor], params: ParamStore, cfg: ModelConfig, k: int) -> list[Tensor]:
    """A single fine-fusion module (no long skip)."""
    outs: list[Tensor] = []
    for lv in range(cfg.levels):
        p = f"ffm{k}.level{lv}"
        y = streams[lv]
        if lv > 0 and cfg.cross_scale:
            y = _c(concat_channels(y, _up(outs[lv - 1], params, f"{p}.up")), params, f"{p}.fuse")
        outs.append(urab_forward(y, params, f"{p}.urab", cfg))
    return outs


def ffm_chain(features: list[Tensor], params: ParamStore, cfg: ModelConfig) -> list[Tensor]:
    """Cascade of ``cfg.M`` FFMs; the chain input is added after every module."""
    if cfg.M < 1:
        raise ValueError("ffm_chain needs M >= 1")
    cur = features
    for k in range(cfg.M):
        cur = [o + x for o, x in zip(ffm_forward(cur, params, cfg, k), features)]
    return cur


def rm_forward(cfm_out: list[Tensor], ffm_out: list[Tensor], params: ParamStore, cfg: ModelConfig) -> Tensor:
    """Merge coarse and fine features per level, fuse coarse-to-fine, emit 3-channel residual."""
    if len(cfm_out) != cfg.levels or len(ffm_out) != cfg.levels:
        raise ShapeError(f"rm_forward: expected {cfg.levels} levels, got {len(cfm_out)} and {len(ffm_out)}")
    merged = [
        _c(concat_channels(a, b), params, f"rm.level{lv}.merge") for lv, (a, b) in enumerate(zip(cfm_out, ffm_out))
    ]
    r = merged[0]
    for lv in range(1, cfg.levels):
        p = f"rm.level{lv}"
        r = _c(concat_channels(merged[lv], _up(r, params, f"{p}.up")), params, f"{p}.fuse")
    return _c(r, params, "rm.out")


@dataclass
class ForwardResult:
    residual: Tensor
    derained: Tensor
    pyramid: list[Tensor] = field(default_factory=list)


def mspfn_forward(rain: Tensor, params: ParamStore, cfg: ModelConfig) -> ForwardResult:
    """Residual rain estimate and ``clamp(rain - residual, 0, 1)``."""
    if rain.shape[1] != 3:
        raise ShapeError(f"expected an RGB batch [N, 3, H, W], got {rain.shape}")
    m = cfg.size_multiple
    if rain.shape[2] % m or rain.shape[3] % m:
        raise ShapeError(f"input {rain.shape[2]}x{rain.shape[3]} must be a multiple of {m} (pad first)")
    if f"init.level{cfg.levels - 1}.w" not in params:
        raise ValueError("parameter store does not match the configuration")
    pyr = build_pyramid(rain, cfg.levels)
    feats = [_c(img, params, f"init.level{lv}") for lv, img in enumerate(pyr)]
    cfm = rru_forward(feats, params, cfg) if cfg.has_cfm else feats
    ffm = ffm_chain(cfm, params, cfg) if cfg.has_ffm else cfm
    residual = rm_forward(cfm, ffm, params, cfg)
    return ForwardResult(residual, clamp(rain - residual, 0.0, 1.0), pyr)


# -- named configurations -------------------------------------------------------------

_BASE = ModelConfig()

VARIANTS: dict[str, ModelConfig] = {
    "baseline_m10n3": _BASE,
    "final_m17n1": replace(_BASE, M=17, N=1),
    "m30n1": replace(_BASE, M=30, N=1),
    "m17n2": replace(_BASE, M=17, N=2),
    "m13n2": replace(_BASE, M=13, N=2),
    "m8n5": replace(_BASE, M=8, N=5),
    "model1": replace(_BASE, levels=1, scale_channels=(128,), variant=Variant.SINGLE_SCALE),
    "model2": replace(_BASE, variant=Variant.NO_CFM),
    "model3": replace(_BASE, M=0, variant=Variant.NO_FFM),
    "model4": replace(_BASE, variant=Variant.PARALLEL_FUSION),
    "model5": replace(_BASE, M=5, N=1),
    "model6": replace(_BASE, M=6, N=3),
    "lightweight": replace(
        _BASE, scale_channels=(32, 32, 32), M=5, N=1, urab_sampling_pairs=2, variant=Variant.LIGHTWEIGHT
    ),
    # desk-scale configuration used for CPU training runs
    "tiny": ModelConfig(levels=3, scale_channels=(8, 16, 32), M=2, N=1, T=2),
}


def make_variant(name: str) -> ModelConfig:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}") from None
