"""Synthetic haze / rain / noise corruption and batched patch sampling.

Images are float32 numpy arrays shaped (C, H, W) with values in [0, 1].
Every generator takes an explicit ``numpy.random.Generator`` (or an int
seed) so that identical inputs give identical bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, RangeError, ShapeError

HAZE_RANGE = (0.0, 150.0)
RAIN_RANGE = (0.0, 300.0)
NOISE_RANGE = (0.0, 50.0)

COMBOS = ("H+R+N", "H+R", "H+N", "R+N", "H", "R", "N")

RngLike = Union[np.random.Generator, int, None]


def as_rng(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def derive_seed(base_seed: int, index: int) -> int:
    """Independent per-item seed, stable across workers and runs."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


def _check_level(name, value, bounds):
    lo, hi = bounds
    if not (lo <= value <= hi) or math.isnan(value):
        raise RangeError(f"{name}={value} outside [{lo:g}, {hi:g}]")


@dataclass
class HazeParams:
    beta_max: float = 2.0
    depth_near: float = 0.5
    depth_far: float = 1.5
    airlight: Tuple[float, float] = (0.7, 1.0)


@dataclass
class RainParams:
    streaks_per_megapixel: float = 1500.0  # at the maximum level
    length: Tuple[float, float] = (8.0, 24.0)
    angle_deg: Tuple[float, float] = (70.0, 110.0)
    intensity: Tuple[float, float] = (0.15, 0.5)
    blur_sigma: float = 0.7


@dataclass
class DegradationSpec:
    haze_level: float = 0.0
    rain_level: float = 0.0
    noise_level: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        _check_level("haze_level", self.haze_level, HAZE_RANGE)
        _check_level("rain_level", self.rain_level, RAIN_RANGE)
        _check_level("noise_level", self.noise_level, NOISE_RANGE)

    @property
    def combo(self) -> str:
        parts = [tag for tag, lvl in (("H", self.haze_level), ("R", self.rain_level),
                                      ("N", self.noise_level)) if lvl > 0]
        return "+".join(parts) or "clean"


@dataclass
class SamplePair:
    clean: np.ndarray
    degraded: np.ndarray
    spec: DegradationSpec
    pyramid: List[np.ndarray] = field(default_factory=list)


# ---------------------------------------------------------------------------
# haze
# ---------------------------------------------------------------------------


def depth_ramp(width: int, params: HazeParams = HazeParams()) -> np.ndarray:
    """Left-to-right linear depth, shape (W,)."""
    return np.linspace(params.depth_near, params.depth_far, width)


def scatter(clean: np.ndarray, transmission, airlight: float) -> np.ndarray:
    """Atmospheric scattering J*t + A*(1-t), clipped to [0, 1]."""
    t = np.asarray(transmission, dtype=np.float64)
    out = clean.astype(np.float64) * t + airlight * (1.0 - t)
    return np.clip(out, 0.0, 1.0).astype(clean.dtype)


def apply_haze(clean: np.ndarray, haze_level: float, rng: RngLike = None,
               params: HazeParams = HazeParams(), airlight: Optional[float] = None):
    _check_level("haze_level", haze_level, HAZE_RANGE)
    if haze_level == 0:
        return clean.copy()
    rng = as_rng(rng)
    a = rng.uniform(*params.airlight)
    if airlight is not None:
        a = airlight
    beta = haze_level / HAZE_RANGE[1] * params.beta_max
    t = np.exp(-beta * depth_ramp(clean.shape[-1], params))
    return scatter(clean, t, a)


# ---------------------------------------------------------------------------
# rain
# ---------------------------------------------------------------------------


def streak_count(rain_level: float, height: int, width: int,
                 params: RainParams = RainParams()) -> int:
    density = rain_level / RAIN_RANGE[1] * params.streaks_per_megapixel
    return int(round(density * height * width / 1e6))


def _draw_segment(mask, cy, cx, length, angle, value):
    h, w = mask.shape
    dy, dx = math.sin(angle), math.cos(angle)
    n = max(2, int(math.ceil(2 * length)) + 1)
    s = np.linspace(-length / 2, length / 2, n)
    ys = np.rint(cy + s * dy).astype(int)
    xs = np.rint(cx + s * dx).astype(int)
    ok = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
    np.maximum.at(mask, (ys[ok], xs[ok]), value)


def render_rain(height: int, width: int, rain_level: float, rng: RngLike = None,
                params: RainParams = RainParams()):
    """Blurred streak layer (H, W) and the list of streak parameters.

    Each streak is (center_y, center_x, length, angle_rad, intensity).
    """
    rng = as_rng(rng)
    n = streak_count(rain_level, height, width, params)
    layer = np.zeros((height, width), dtype=np.float64)
    streaks = []
    for _ in range(n):
        cy = rng.uniform(0, height - 1)
        cx = rng.uniform(0, width - 1)
        length = rng.uniform(*params.length)
        angle = math.radians(rng.uniform(*params.angle_deg))
        value = rng.uniform(*params.intensity)
        _draw_segment(layer, cy, cx, length, angle, value)
        streaks.append((cy, cx, length, angle, value))
    if params.blur_sigma > 0:
        layer = gaussian_filter(layer, params.blur_sigma, mode="constant")
    return layer, streaks


def apply_rain(clean: np.ndarray, rain_level: float, rng: RngLike = None,
               params: RainParams = RainParams(), clip: bool = True):
    _check_level("rain_level", rain_level, RAIN_RANGE)
    if rain_level == 0:
        return clean.copy()
    layer, _ = render_rain(clean.shape[-2], clean.shape[-1], rain_level, rng, params)
    out = clean.astype(np.float64) + layer
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(clean.dtype)


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------


def apply_noise(clean: np.ndarray, sigma: float, rng: RngLike = None, clip: bool = True):
    """Additive white Gaussian noise with std ``sigma / 255``."""
    _check_level("noise_level", sigma, NOISE_RANGE)
    if sigma == 0:
        return clean.copy()
    rng = as_rng(rng)
    out = clean.astype(np.float64) + rng.normal(0.0, sigma / 255.0, size=clean.shape)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(clean.dtype)


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------


def build_pyramid(image, scales: int = 4):
    """Antialiased bilinear pyramid at 1, 1/2, ... 1/2^(scales-1).

    Accepts a numpy (C, H, W) array or a torch (B, C, H, W) tensor and
    returns the same kind.  Level 0 is the input itself.
    """
    as_numpy = isinstance(image, np.ndarray)
    x = torch.from_numpy(image)[None] if as_numpy else image
    h, w = x.shape[-2:]
    levels = [x]
    for k in range(1, scales):
        size = (math.ceil(h / 2**k), math.ceil(w / 2**k))
        levels.append(F.interpolate(x, size=size, mode="bilinear", align_corners=False,
                                    antialias=True).clamp_(0.0, 1.0))
    if as_numpy:
        return [image] + [lv[0].numpy() for lv in levels[1:]]
    return levels


def compose_degradations(clean: np.ndarray, spec: DegradationSpec, scales: int = 4,
                         haze: HazeParams = HazeParams(),
                         rain: RainParams = RainParams()) -> SamplePair:
    """Haze, then rain, then noise, all drawn from one seeded stream."""
    rng = np.random.default_rng(spec.rng_seed)
    out = apply_haze(clean, spec.haze_level, rng, haze)
    out = apply_rain(out, spec.rain_level, rng, rain)
    out = apply_noise(out, spec.noise_level, rng)
    return SamplePair(clean, out, spec, build_pyramid(out, scales))


def combo_levels(combo: str) -> Tuple[bool, bool, bool]:
    if combo not in COMBOS:
        raise ConfigError(f"unknown combo {combo!r}; expected one of {COMBOS}")
    parts = combo.split("+")
    return "H" in parts, "R" in parts, "N" in parts


def sample_spec(combo: str, rng: np.random.Generator, seed: int) -> DegradationSpec:
    """Active levels uniform over their full range, inactive levels 0."""
    h, r, n = combo_levels(combo)
    return DegradationSpec(
        haze_level=float(rng.uniform(*HAZE_RANGE)) if h else 0.0,
        rain_level=float(rng.uniform(*RAIN_RANGE)) if r else 0.0,
        noise_level=float(rng.uniform(*NOISE_RANGE)) if n else 0.0,
        rng_seed=int(seed))


def make_test_suite(clean_set: Sequence[np.ndarray], rng: RngLike = 0,
                    combos: Sequence[str] = COMBOS) -> Dict[str, List[SamplePair]]:
    if len(clean_set) == 0:
        raise ValueError("make_test_suite needs at least one clean image")
    base = int(as_rng(rng).integers(2**31))
    suite = {}
    for c_idx, combo in enumerate(combos):
        pairs = []
        for i, clean in enumerate(clean_set):
            seed = derive_seed(base, c_idx * len(clean_set) + i)
            spec = sample_spec(combo, np.random.default_rng(seed), seed)
            pairs.append(compose_degradations(clean, spec))
        suite[combo] = pairs
    return suite


def make_training_set(clean_set: Sequence[np.ndarray], seed: int = 0,
                      combos: Sequence[str] = COMBOS) -> List[SamplePair]:
    """One degraded pair per clean image, combos assigned round-robin."""
    pairs = []
    for i, clean in enumerate(clean_set):
        combo = combos[i % len(combos)]
        s = derive_seed(seed, i)
        pairs.append(compose_degradations(clean, sample_spec(combo, np.random.default_rng(s), s)))
    return pairs


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def sample_batch(dataset: Sequence[SamplePair], patch: int, batch: int,
                 augment: bool = True, rng: RngLike = None, scales: int = 4):
    """Random crops (with synchronized flips) and their pyramids.

    Returns ``(degraded_pyramid, clean_pyramid)``, each a list of float32
    tensors from (batch, 3, patch, patch) down by factors of two.
    """
    div = 2 ** (scales - 1)
    if patch % div:
        raise ConfigError(f"patch {patch} is not divisible by {div}")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = as_rng(rng)
    degraded, clean = [], []
    for _ in range(batch):
        pair = dataset[int(rng.integers(len(dataset)))]
        h, w = pair.clean.shape[-2:]
        if patch > h or patch > w:
            raise ConfigError(f"patch {patch} larger than image {h}x{w}")
        y = int(rng.integers(h - patch + 1))
        x = int(rng.integers(w - patch + 1))
        c = pair.clean[:, y:y + patch, x:x + patch]
        d = pair.degraded[:, y:y + patch, x:x + patch]
        if augment:
            if rng.random() < 0.5:
                c, d = c[:, :, ::-1], d[:, :, ::-1]
            if rng.random() < 0.5:
                c, d = c[:, ::-1, :], d[:, ::-1, :]
        clean.append(np.ascontiguousarray(c, dtype=np.float32))
        degraded.append(np.ascontiguousarray(d, dtype=np.float32))
    d_pyr = build_pyramid(torch.from_numpy(np.stack(degraded)), scales)
    c_pyr = build_pyramid(torch.from_numpy(np.stack(clean)), scales)
    for t in d_pyr + c_pyr:
        if t.min() < 0 or t.max() > 1:
            raise RangeError("batch values escaped [0, 1]")
    return d_pyr, c_pyr


def full_pyramids(pairs: Sequence[SamplePair], scales: int = 4):
    """Stack whole images (no crop / flip) into pyramid tensors."""
    d = torch.from_numpy(np.stack([p.degraded for p in pairs]).astype(np.float32))
    c = torch.from_numpy(np.stack([p.clean for p in pairs]).astype(np.float32))
    return build_pyramid(d, scales), build_pyramid(c, scales)


# ---------------------------------------------------------------------------
# clean sources and file I/O
# ---------------------------------------------------------------------------


def procedural_textures(n: int, size: int = 64, seed: int = 0) -> List[np.ndarray]:
    """Self-contained clean images: smooth colour gradients, a few low
    frequency waves and soft-edged discs."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    images = []
    for _ in range(n):
        img = np.empty((3, size, size))
        base = rng.uniform(0.15, 0.85, size=3)
        gy, gx = rng.uniform(-0.3, 0.3, size=(2, 3))
        for ch in range(3):
            img[ch] = base[ch] + gy[ch] * (yy - 0.5) + gx[ch] * (xx - 0.5)
        for _ in range(rng.integers(2, 5)):
            fy, fx = rng.uniform(0.5, 4.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.03, 0.12, size=3)
            wave = np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
            img += amp[:, None, None] * wave
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0.1, 0.9, size=2)
            r = rng.uniform(0.08, 0.25)
            d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
            soft = 1.0 / (1.0 + np.exp((d - r) * size / 1.5))
            color = rng.uniform(0.05, 0.95, size=3)
            img = img * (1 - soft) + color[:, None, None] * soft
        images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
    return images


def read_png(path) -> np.ndarray:
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255)
    Image.fromarray(arr.astype(np.uint8)).save(path)


def write_manifest(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def synthesize_directory(clean_dir, out_dir, combo: str = "H+R+N", count: Optional[int] = None,
                         seed: int = 0) -> List[dict]:
    """Degrade PNGs from ``clean_dir`` into ``out_dir`` and write
    ``manifest.jsonl`` with one record per pair."""
    combo_levels(combo)
    clean_paths = sorted(Path(clean_dir).glob("*.png"))
    if not clean_paths:
        raise ValueError(f"no PNG images in {clean_dir}")
    if count is not None:
        clean_paths = clean_paths[:count]
    out = Path(out_dir)
    (out / "degraded").mkdir(parents=True, exist_ok=True)
    records = []
    for i, path in enumerate(clean_paths):
        s = derive_seed(seed, i)
        spec = sample_spec(combo, np.random.default_rng(s), s)
        pair = compose_degradations(read_png(path), spec)
        deg_path = out / "degraded" / f"{combo.replace('+', '')}_{i:05d}.png"
        write_png(deg_path, pair.degraded)
        records.append({"clean_path": str(Path(path).resolve()),
                        "degraded_path": str(deg_path.resolve()),
                        "haze_level": spec.haze_level, "rain_level": spec.rain_level,
                        "noise_level": spec.noise_level, "seed": s, "combo": combo})
    manifest = out / "manifest.jsonl"
    existing = read_manifest(manifest) if manifest.exists() else []
    existing = [r for r in existing if r.get("combo") != combo]
    write_manifest(manifest, existing + records)
    return records


def load_suite(directory) -> Dict[str, List[SamplePair]]:
    """Rebuild a suite from ``manifest.jsonl``; degraded images are read
    back from disk when present, otherwise regenerated from the seed."""
    suite: Dict[str, List[SamplePair]] = {}
    for rec in read_manifest(Path(directory) / "manifest.jsonl"):
        clean = read_png(rec["clean_path"])
        spec = DegradationSpec(rec["haze_level"], rec["rain_level"], rec["noise_level"],
                               rec["seed"])
        deg_path = rec.get("degraded_path")
        if deg_path and Path(deg_path).exists():
            degraded = read_png(deg_path)
            pair = SamplePair(clean, degraded, spec, build_pyramid(degraded))
        else:
            pair = compose_degradations(clean, spec)
        suite.setdefault(rec["combo"], []).append(pair)
    return suite


def spec_dict(spec: DegradationSpec) -> dict:
    return asdict(spec)
