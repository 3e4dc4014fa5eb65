"""SAR images, amplitude normalization, patch grids, synthetic scenes and despeckling."""

from __future__ import annotations

import math
import re
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .config import ConfigError, coerce, parse_kv
from .container import read_tensor, write_tensor
from .seeding import SeedStream

TEXTURES = ("flat", "furrowed", "point-scatterer-field")
# cross-polar channels are weaker than co-polar ones: HH, HV, VH, VV
POLARIZATION_GAINS = (1.0, 0.2, 0.2, 1.0)


@dataclass
class SlcImage:
    """Complex single-look image of shape (H, W, c) with c in {1, 4}."""

    samples: np.ndarray
    sensor_id: str = "synthetic"
    range_resolution_m: float = 1.0
    azimuth_resolution_m: float = 1.0

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim == 2:
            samples = samples[..., None]
        if samples.ndim != 3 or samples.shape[2] not in (1, 4):
            raise ValueError(f"SLC samples must be H x W x c with c in {{1, 4}}, got {samples.shape}")
        if not np.iscomplexobj(samples):
            samples = samples.astype(np.complex64)
        if not np.all(np.isfinite(samples)):
            raise ValueError("SLC samples must be finite")
        if self.range_resolution_m <= 0 or self.azimuth_resolution_m <= 0:
            raise ValueError("resolutions must be positive")
        self.samples = samples

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.samples.shape

    def amplitude(self) -> np.ndarray:
        return floor_amplitude(np.abs(self.samples))


def floor_amplitude(x: np.ndarray) -> np.ndarray:
    """Replace zeros by the smallest positive normal float of the array's dtype."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return np.maximum(x, np.finfo(x.dtype).tiny)


# ---------------------------------------------------------------- normalization


@dataclass(frozen=True)
class NormalizationParams:
    """Log-amplitude clip bounds ``m_s < M_s`` of one sensor."""

    low: float
    high: float

    def __post_init__(self):
        if not self.high > self.low:
            raise ValueError(f"normalization requires high > low, got {self.low}, {self.high}")

    @classmethod
    def from_percentiles(cls, amplitude: np.ndarray, low_pct: float = 1.0, high_pct: float = 99.0):
        """Bounds at the given percentiles of ``log(amplitude)``.

        A constant image has equal percentiles; its upper bound is then
        placed one log unit above the lower one.
        """
        logs = np.log(floor_amplitude(np.asarray(amplitude, dtype=np.float64)))
        lo, hi = np.percentile(logs, [low_pct, high_pct])
        if hi <= lo:
            hi = lo + 1.0
        return cls(float(lo), float(hi))


def normalize_amplitude(x: np.ndarray, params: NormalizationParams) -> np.ndarray:
    """Map an amplitude image to [0, 1] via clipped, rescaled log-amplitude."""
    logs = np.log(floor_amplitude(np.asarray(x, dtype=np.float64)))
    out = (logs - params.low) / (params.high - params.low)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------- patch grids


def grid_shape(height: int, width: int, size: int, stride: int, pad: bool = True) -> tuple[int, int]:
    if size < 1 or stride < 1:
        raise ValueError("patch size and stride must be >= 1")
    if pad:
        return math.ceil(height / stride), math.ceil(width / stride)
    if size > height or size > width:
        raise ValueError(f"patch size {size} larger than image {height}x{width}")
    return (height - size) // stride + 1, (width - size) // stride + 1


def patch_origin(i: int, j: int, size: int, stride: int, pad: bool = True) -> tuple[int, int]:
    """Top-left pixel (may be negative when padded) of grid cell ``(i, j)``.

    With padding, each patch is centred on its ``stride x stride`` cell so
    every pixel lies under at least one patch when ``stride <= size``.
    """
    off = (stride - size) // 2 if pad else 0
    return i * stride + off, j * stride + off


def extract_patches(
    image: np.ndarray, size: int, stride: int, pad: str | None = "reflect"
) -> tuple[np.ndarray, tuple[int, int]]:
    """Slide a ``size x size`` window over the first two axes of ``image``.

    Returns a read-only view of shape ``(gh, gw, size, size, *rest)`` and the
    grid shape ``(gh, gw)``. With ``pad`` set (a ``numpy.pad`` mode), the
    grid is ``(ceil(H/stride), ceil(W/stride))``; with ``pad=None`` only
    fully interior patches are kept.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    gh, gw = grid_shape(h, w, size, stride, pad is not None)
    if pad is not None:
        top, _ = patch_origin(0, 0, size, stride)
        bottom, right = patch_origin(gh - 1, gw - 1, size, stride)
        before = max(0, -top)
        after_h = max(0, bottom + size - h)
        after_w = max(0, right + size - w)
        widths = [(before, after_h), (before, after_w)] + [(0, 0)] * (image.ndim - 2)
        padded = np.pad(image, widths, mode=pad)
        start = top + before
    else:
        padded = image
        start = 0
    windows = sliding_window_view(padded, (size, size), axis=(0, 1))
    # sliding_window_view puts window axes last; move them in front of channels
    if image.ndim == 3:
        windows = np.moveaxis(windows, 2, -1)
    windows = windows[start::stride, start::stride][:gh, :gw]
    if windows.shape[:2] != (gh, gw):
        raise ValueError(f"patch size {size} larger than padded image")
    return windows, (gh, gw)


# ---------------------------------------------------------------- synthetic scenes


@dataclass
class Region:
    polygon: list[tuple[float, float]]  # (x, y) vertices in pixel units
    reflectivity: float
    texture: str = "flat"
    period: float = 8.0  # furrow period in pixels
    angle_deg: float = 0.0  # furrow orientation
    density: float = 0.02  # share of bright pixels in a point-scatterer field
    gain: float = 25.0  # reflectivity multiplier of those pixels

    def __post_init__(self):
        if len(self.polygon) < 3:
            raise ValueError("region polygon needs at least 3 vertices")
        if self.reflectivity < 0 or not math.isfinite(self.reflectivity):
            raise ValueError("reflectivity must be finite and non-negative")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}; choose from {TEXTURES}")


@dataclass
class SceneSpec:
    height: int
    width: int
    regions: list[Region]
    targets: list[tuple[tuple[float, float], float]] = field(default_factory=list)
    channels: int = 1
    sensor_id: str = "synthetic"

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("scene size must be positive")
        if self.channels not in (1, 4):
            raise ValueError("channels must be 1 or 4")
        if not self.regions:
            raise ValueError("scene needs at least one region")


def _inside(polygon: Sequence[tuple[float, float]], x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test."""
    inside = np.zeros(x.shape, dtype=bool)
    n = len(polygon)
    for k in range(n):
        x1, y1 = polygon[k]
        x2, y2 = polygon[(k + 1) % n]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xc)
    return inside


def rasterize_regions(spec: SceneSpec) -> np.ndarray:
    """Label map; later regions win where polygons overlap."""
    y, x = np.mgrid[0 : spec.height, 0 : spec.width] + 0.5
    labels = np.full((spec.height, spec.width), -1, dtype=np.int32)
    for idx, region in enumerate(spec.regions):
        labels[_inside(region.polygon, x, y)] = idx
    if (labels < 0).any():
        raise ValueError(f"regions leave {(labels < 0).sum()} pixels uncovered")
    return labels


def reflectivity_map(spec: SceneSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    y, x = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    refl = np.zeros(labels.shape, dtype=np.float64)
    for idx, region in enumerate(spec.regions):
        sel = labels == idx
        base = np.full(labels.shape, region.reflectivity)
        if region.texture == "furrowed":
            theta = math.radians(region.angle_deg)
            phase = 2 * math.pi * (x * math.cos(theta) + y * math.sin(theta)) / region.period
            base = base * (1.0 + 0.9 * np.sin(phase))
        elif region.texture == "point-scatterer-field":
            bright = rng.random(labels.shape) < region.density
            base = np.where(bright, base * region.gain, base)
        refl[sel] = base[sel]
    return refl


def synthesize_scene(spec: SceneSpec, seed: SeedStream) -> tuple[SlcImage, np.ndarray]:
    """Fully developed speckle over a piecewise reflectivity map.

    Each pixel is ``sqrt(R/2) * (g1 + 1j*g2)`` with independent standard
    normal ``g1, g2`` so that ``E|z|^2 = R``. Returns the image and the
    uint8 region-label map.
    """
    labels = rasterize_regions(spec)
    refl = reflectivity_map(spec, labels, seed.child("texture").rng())
    rng = seed.child("speckle").rng()
    h, w, c = spec.height, spec.width, spec.channels
    gains = POLARIZATION_GAINS if c == 4 else (1.0,)
    out = np.empty((h, w, c), dtype=np.complex128)
    for ch in range(c):
        g = rng.standard_normal((2, h, w))
        amp = np.sqrt(refl * gains[ch] / 2.0)
        out[..., ch] = amp * (g[0] + 1j * g[1])
    if spec.targets:
        phases = seed.child("targets").rng().uniform(0, 2 * math.pi, len(spec.targets))
        for ((tx, ty), amplitude), phi in zip(spec.targets, phases):
            r, col = int(ty), int(tx)
            if 0 <= r < h and 0 <= col < w:
                out[r, col, :] += amplitude * np.exp(1j * phi)
    slc = SlcImage(out.astype(np.complex64), sensor_id=spec.sensor_id)
    return slc, labels.astype(np.uint8)


def _points(raw: str) -> list[tuple[float, float]]:
    pts = []
    for tok in re.split(r"[;\s]+", raw.strip()):
        xs, _, ys = tok.partition(",")
        pts.append((float(xs), float(ys)))
    return pts


def parse_scene_spec(text: str) -> SceneSpec:
    """Parse a scene description in the ``key=value`` config format.

    Keys: ``scene.height``, ``scene.width``, ``scene.channels``,
    ``scene.sensor``; ``region.<i>.polygon`` (``x,y`` vertices separated by
    spaces or semicolons), ``region.<i>.reflectivity``, ``region.<i>.texture`` and the
    optional ``period``/``angle``/``density``/``gain``;
    ``target.<i>.position`` (``x,y``) and ``target.<i>.amplitude``.
    """
    scene: dict[str, object] = {"channels": 1, "sensor": "synthetic"}
    regions: dict[int, dict] = {}
    targets: dict[int, dict] = {}
    region_keys = {"polygon": str, "reflectivity": float, "texture": str, "period": float,
                   "angle": float, "density": float, "gain": float}
    for no, key, raw in parse_kv(text):
        parts = key.split(".")
        if parts[0] == "scene" and len(parts) == 2 and parts[1] in ("height", "width", "channels", "sensor"):
            scene[parts[1]] = raw if parts[1] == "sensor" else coerce(key, raw, int)
        elif parts[0] == "region" and len(parts) == 3 and parts[2] in region_keys:
            idx = coerce(key, parts[1], int)
            regions.setdefault(idx, {})[parts[2]] = coerce(key, raw, region_keys[parts[2]])
        elif parts[0] == "target" and len(parts) == 3 and parts[2] in ("position", "amplitude"):
            idx = coerce(key, parts[1], int)
            targets.setdefault(idx, {})[parts[2]] = raw if parts[2] == "position" else coerce(key, raw, float)
        else:
            raise ConfigError(f"line {no}: unknown key {key!r}")
    try:
        region_list = []
        for idx in sorted(regions):
            r = regions[idx]
            region_list.append(Region(
                polygon=_points(r["polygon"]),
                reflectivity=r["reflectivity"],
                texture=r.get("texture", "flat"),
                period=r.get("period", 8.0),
                angle_deg=r.get("angle", 0.0),
                density=r.get("density", 0.02),
                gain=r.get("gain", 25.0),
            ))
        target_list = [(_points(targets[i]["position"])[0], targets[i]["amplitude"]) for i in sorted(targets)]
        return SceneSpec(
            height=scene["height"], width=scene["width"], regions=region_list,
            targets=target_list, channels=scene["channels"], sensor_id=scene["sensor"],
        )
    except KeyError as exc:
        raise ConfigError(f"scene spec missing {exc.args[0]!r}") from None
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"invalid scene spec: {exc}") from None


# ---------------------------------------------------------------- despeckling


def despeckle_boxcar(slc: SlcImage | np.ndarray, window: int) -> np.ndarray:
    """Multilook amplitude: sqrt of the windowed mean intensity, reflect-padded."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    samples = slc.samples if isinstance(slc, SlcImage) else np.asarray(slc)
    if window == 1:
        return np.abs(samples).astype(np.float32)
    intensity = np.abs(samples.astype(np.complex128)) ** 2
    size = (window, window) + (1,) * (intensity.ndim - 2)
    mean = ndimage.uniform_filter(intensity, size=size, mode="reflect")
    return np.sqrt(np.maximum(mean, 0.0)).astype(np.float32)


Despeckler = Callable[[np.ndarray], np.ndarray]
"""Maps complex samples (H, W[, c]) to a despeckled amplitude image of the same shape."""


@dataclass(frozen=True)
class BoxcarDespeckler:
    window: int = 5

    def __call__(self, samples: np.ndarray) -> np.ndarray:
        return despeckle_boxcar(samples, self.window)


@dataclass(frozen=True)
class ExternalDespeckler:
    """Delegate despeckling to an external program through SAFT files.

    ``command`` is a shell-style template with ``{input}`` and ``{output}``
    placeholders. The input file holds complex64 samples; the program must
    write a float32 amplitude container of the same shape to ``{output}``.
    """

    command: str

    def __call__(self, samples: np.ndarray) -> np.ndarray:
        samples = np.asarray(samples, dtype=np.complex64)
        with tempfile.TemporaryDirectory() as tmp:
            src, dst = Path(tmp, "input.saft"), Path(tmp, "output.saft")
            write_tensor(src, samples)
            args = [a.format(input=src, output=dst) for a in shlex.split(self.command)]
            proc = subprocess.run(args, capture_output=True, text=True)
            if proc.returncode != 0:
                raise RuntimeError(f"despeckler failed ({proc.returncode}): {proc.stderr.strip()}")
            out = read_tensor(dst)
        if out.shape != samples.shape:
            raise ValueError(f"despeckler returned shape {out.shape}, expected {samples.shape}")
        return out.astype(np.float32)


def make_despeckler(window: int = 5, command: str = "") -> Despeckler:
    return ExternalDespeckler(command) if command else BoxcarDespeckler(window)
