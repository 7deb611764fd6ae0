"""Image IO, procedural rain synthesis, dataset manifests and patch sampling.

All randomness here comes from raw 64-bit PCG64 outputs converted to floats
by hand, so generated files do not depend on numpy's distribution code.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

from .tensor import Tensor

IMAGE_SUFFIXES = (".png", ".ppm")


class ImageIOError(OSError):
    """Raised for unreadable or unsupported image files."""

    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)


# -- random streams ------------------------------------------------------------------


class RawStream:
    """Portable uniform stream over PCG64 raw outputs."""

    def __init__(self, seed: int):
        self.bitgen = np.random.PCG64(seed)

    def uniform(self, size=None, lo: float = 0.0, hi: float = 1.0):
        n = 1 if size is None else int(np.prod(size))
        bits = self.bitgen.random_raw(n)
        u = (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        u = lo + (hi - lo) * u
        return float(u[0]) if size is None else u.reshape(size)

    def integers(self, n: int, size=None):
        bits = self.bitgen.random_raw(1 if size is None else size)
        vals = (bits % np.uint64(n)).astype(np.int64)
        return int(vals[0]) if size is None else vals

    def seed64(self) -> int:
        return int(self.bitgen.random_raw())

    @property
    def state(self) -> dict:
        return self.bitgen.state

    @state.setter
    def state(self, value: dict) -> None:
        self.bitgen.state = value


# -- image IO ------------------------------------------------------------------------


def _read_ppm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageIOError(path, "truncated PPM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ImageIOError(path, f"unsupported PPM magic {tokens[0]!r} (only P6)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ImageIOError(path, f"unsupported PPM maxval {maxval}")
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos) if len(raw) - pos >= w * h * 3 else None
    if data is None:
        raise ImageIOError(path, "truncated PPM pixel data")
    return data.reshape(h, w, 3)


def _write_ppm(path: Path, arr: np.ndarray) -> None:
    h, w, _ = arr.shape
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes())


def load_image(path) -> Tensor:
    """Read a PPM (P6) or 8-bit PNG as a ``[1, 3, H, W]`` float32 tensor in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise ImageIOError(path, "no such file")
    suffix = path.suffix.lower()
    try:
        if suffix == ".ppm":
            arr = _read_ppm(path)
        elif suffix == ".png":
            from PIL import Image

            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"))
        else:
            raise ImageIOError(path, f"unsupported image format {suffix!r}")
    except ImageIOError:
        raise
    except Exception as exc:  # decoder errors
        raise ImageIOError(path, f"cannot decode image ({exc})") from exc
    return Tensor((arr.astype(np.float32) / 255.0).transpose(2, 0, 1)[None].copy())


def to_uint8(img) -> np.ndarray:
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    if arr.ndim == 4:
        arr = arr[0]
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_image(img, path) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise ImageIOError(path, "parent directory does not exist")
    arr = to_uint8(img)
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        _write_ppm(path, arr)
    elif suffix == ".png":
        from PIL import Image

        Image.fromarray(arr, "RGB").save(path, format="PNG")
    else:
        raise ImageIOError(path, f"unsupported image format {suffix!r}")


# -- rain synthesis ------------------------------------------------------------------


@dataclass(frozen=True)
class RainParams:
    angle_deg: float = 0.0
    streak_length_px: int = 9
    density: float = 0.02
    intensity: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not -45.0 <= self.angle_deg <= 45.0:
            raise ValueError(f"angle_deg must lie in [-45, 45], got {self.angle_deg}")
        if self.streak_length_px < 1:
            raise ValueError(f"streak_length_px must be >= 1, got {self.streak_length_px}")
        if not 0.0 <= self.density <= 1.0:
            raise ValueError(f"density must lie in [0, 1], got {self.density}")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"intensity must lie in [0, 1], got {self.intensity}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


def motion_kernel(length: int, angle_deg: float) -> np.ndarray:
    """Unit-sum line kernel; 0 degrees is vertical, positive angles lean right going down."""
    size = length if length % 2 else length + 1
    k = np.zeros((size, size))
    c = (size - 1) / 2
    theta = math.radians(angle_deg)
    dy, dx = math.cos(theta), math.sin(theta)
    # supersample the segment so the rasterized line has no gaps
    for t in np.linspace(-(length - 1) / 2, (length - 1) / 2, 4 * length):
        k[int(round(c + t * dy)), int(round(c + t * dx))] = 1.0
    return k / k.sum()


def streak_layer(shape: tuple[int, int], p: RainParams) -> np.ndarray:
    """Single-channel additive streak layer with values in [0, intensity]."""
    h, w = shape
    if p.density == 0 or p.intensity == 0:
        return np.zeros((h, w))
    noise = RawStream(p.seed).uniform((h, w))
    seeds = (noise >= 1.0 - p.density).astype(np.float64)
    blurred = ndimage.correlate(seeds, motion_kernel(p.streak_length_px, p.angle_deg), mode="constant")
    return np.clip(blurred, 0.0, 1.0) * p.intensity


def synth_rain(clean: Tensor, p: RainParams) -> Tensor:
    """Add a procedurally generated streak layer to every channel of ``clean``."""
    n, c, h, w = clean.shape
    layer = streak_layer((h, w), p).astype(clean.dtype)
    return Tensor(np.clip(clean.data + layer[None, None], 0.0, 1.0))


def procedural_scene(seed: int, height: int = 64, width: int = 64) -> Tensor:
    """Smooth synthetic 'clean' picture: gradients, soft blobs and a few hard edges."""
    rs = RawStream(seed)
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    img = np.empty((3, height, width))
    for ch in range(3):
        a, b, c0 = rs.uniform(3, -0.4, 0.4)
        img[ch] = 0.45 + a * xx + b * yy + 0.05 * c0
    for _ in range(4):
        cy, cx = rs.uniform(2)
        r = rs.uniform(None, 0.08, 0.3)
        col = rs.uniform(3, -0.3, 0.3)
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r)))
        img += col[:, None, None] * blob
    for _ in range(2):
        y0, x0 = (rs.uniform(2) * [height, width]).astype(int)
        hh, ww = (rs.uniform(2, 0.15, 0.4) * [height, width]).astype(int)
        img[:, y0 : y0 + hh, x0 : x0 + ww] += rs.uniform(3, -0.2, 0.2)[:, None, None]
    return Tensor(np.clip(img, 0.05, 0.95)[None].astype(np.float32))


# -- datasets ------------------------------------------------------------------------


@dataclass(frozen=True)
class RainRanges:
    angle_deg: tuple[float, float] = (-30.0, 30.0)
    streak_length_px: tuple[int, int] = (7, 15)
    density: tuple[float, float] = (0.01, 0.04)
    intensity: tuple[float, float] = (0.6, 1.0)

    def sample(self, rs: RawStream) -> RainParams:
        lo, hi = self.streak_length_px
        return RainParams(
            angle_deg=rs.uniform(None, *self.angle_deg),
            streak_length_px=lo + rs.integers(hi - lo + 1),
            density=rs.uniform(None, *self.density),
            intensity=rs.uniform(None, *self.intensity),
            seed=rs.seed64(),
        )


@dataclass
class Pair:
    clean: str
    rain: str
    split: str = "train"


@dataclass
class DatasetManifest:
    pairs: list[Pair]
    root: Path = field(default_factory=Path)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def split(self, name: str) -> list[Pair]:
        return [p for p in self.pairs if p.split == name]

    @property
    def counts(self) -> dict[str, int]:
        out = {"train": 0, "test": 0}
        for p in self.pairs:
            out[p.split] = out.get(p.split, 0) + 1
        return out

    def to_json(self) -> str:
        return json.dumps([{"clean": p.clean, "rain": p.rain, "split": p.split} for p in self.pairs], indent=1) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def load_manifest(path, validate: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = json.loads(path.read_text())
    if not isinstance(entries, list):
        raise ValueError(f"{path}: manifest must be a JSON array")
    pairs = []
    for e in entries:
        if e.get("split") not in ("train", "test"):
            raise ValueError(f"{path}: bad split {e.get('split')!r}")
        pairs.append(Pair(e["clean"], e["rain"], e["split"]))
    m = DatasetManifest(pairs, path.parent)
    if validate:
        for p in m.pairs:
            for rel in (p.clean, p.rain):
                if not m.resolve(rel).is_file():
                    raise FileNotFoundError(f"{path}: referenced image missing: {m.resolve(rel)}")
    return m


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def make_dataset(
    clean_dir,
    out_dir,
    count: int,
    ranges: RainRanges = RainRanges(),
    seed: int = 0,
    test_fraction: float = 0.0,
    fmt: str = "png",
) -> tuple[DatasetManifest, Path]:
    """Write ``count`` clean/rain pairs plus ``manifest.json`` into ``out_dir``."""
    sources = list_images(clean_dir)
    if not sources:
        raise ValueError(f"no loadable images (.png/.ppm) in {clean_dir}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rs = RawStream(seed)
    n_test = int(round(count * test_fraction))
    pairs = []
    for i in range(count):
        clean = load_image(sources[i % len(sources)])
        rain = synth_rain(clean, ranges.sample(rs))
        cname, rname = f"clean_{i:04d}.{fmt}", f"rain_{i:04d}.{fmt}"
        save_image(clean, out / cname)
        save_image(rain, out / rname)
        pairs.append(Pair(cname, rname, "test" if i >= count - n_test else "train"))
    manifest = DatasetManifest(pairs, out)
    path = out / "manifest.json"
    manifest.save(path)
    return manifest, path


# -- patch sampling ------------------------------------------------------------------


class PatchSampler:
    """Endless, seeded stream of aligned (rain, clean) crops.

    The stream position is fully described by :attr:`state`, which the
    training loop stores in checkpoints.
    """

    def __init__(self, manifest: DatasetManifest, patch: int, batch: int, seed: int = 0,
                 split: str = "train", multiple: int = 1):
        if patch % multiple:
            raise ValueError(f"patch {patch} must be divisible by {multiple}")
        pairs = manifest.split(split)
        if not pairs:
            raise ValueError(f"manifest has no {split!r} pairs")
        self.rain: list[np.ndarray] = []
        self.clean: list[np.ndarray] = []
        for p in pairs:
            r = load_image(manifest.resolve(p.rain)).data[0]
            c = load_image(manifest.resolve(p.clean)).data[0]
            if r.shape != c.shape:
                raise ValueError(f"pair {p.rain} / {p.clean}: dimensions differ {r.shape} vs {c.shape}")
            if min(r.shape[1:]) < patch:
                raise ValueError(f"patch {patch} larger than image {p.rain} ({r.shape[1]}x{r.shape[2]})")
            self.rain.append(r)
            self.clean.append(c)
        self.patch = patch
        self.batch = batch
        self.stream = RawStream(seed)

    @property
    def state(self) -> dict:
        return self.stream.state

    @state.setter
    def state(self, value: dict) -> None:
        self.stream.state = value

    def __iter__(self) -> Iterator[tuple[Tensor, Tensor]]:
        return self

    def __next__(self) -> tuple[Tensor, Tensor]:
        rains, cleans = [], []
        for _ in range(self.batch):
            k = self.stream.integers(len(self.rain))
            _, h, w = self.rain[k].shape
            y = self.stream.integers(h - self.patch + 1)
            x = self.stream.integers(w - self.patch + 1)
            rains.append(self.rain[k][:, y : y + self.patch, x : x + self.patch])
            cleans.append(self.clean[k][:, y : y + self.patch, x : x + self.patch])
        return Tensor(np.stack(rains)), Tensor(np.stack(cleans))


def sample_patches(manifest: DatasetManifest, patch: int, batch: int, seed: int = 0, **kw) -> PatchSampler:
    return PatchSampler(manifest, patch, batch, seed, **kw)


def env_threads(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("MSPFN_THREADS", default)))
    except ValueError:
        return default
