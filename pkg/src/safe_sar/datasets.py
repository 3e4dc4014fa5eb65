"""On-disk dataset layout and synthetic dataset builders.

A patch dataset directory holds::

    slc.saft         complex64 (N, H, W, c) single-look samples
    normalized.saft  float32   (N, H, W, c) normalized amplitude
    despeckled.saft  float32   (N, H, W, c) normalized despeckled amplitude
    labels.saft      int32     (N,)          optional class labels
    norm.cfg         norm.low / norm.high log-amplitude bounds

A segmentation dataset directory holds ``slc.saft``, ``images.saft``
(normalized, float32 (N, H, W, c)), ``labels.saft`` (uint8 (N, H, W)) and
``norm.cfg``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import TrainingSample
from .config import parse_kv
from .container import read_tensor, write_tensor
from .sar import (
    Despeckler,
    NormalizationParams,
    Region,
    SceneSpec,
    floor_amplitude,
    normalize_amplitude,
    synthesize_scene,
)
from .seeding import SeedStream

CLASS_TEXTURES = ("flat", "furrowed", "point-scatterer-field")


def write_norm(path, params: NormalizationParams) -> None:
    Path(path).write_text(f"norm.low={params.low!r}\nnorm.high={params.high!r}\n", encoding="utf-8")


def read_norm(path) -> NormalizationParams:
    values = {k: float(v) for _, k, v in parse_kv(Path(path).read_text(encoding="utf-8"))}
    return NormalizationParams(values["norm.low"], values["norm.high"])


# Texture draw ranges shared by the synthetic builders.
REFLECTIVITY_RANGE = (0.5, 2.0)
PERIOD_RANGE = (12.0, 24.0)
DENSITY_RANGE = (0.1, 0.2)


def random_region(texture: str, polygon, rng: np.random.Generator, refl_range=REFLECTIVITY_RANGE,
                  period_range=PERIOD_RANGE, density_range=DENSITY_RANGE) -> Region:
    """Region with log-uniform reflectivity and uniformly drawn texture parameters."""
    lo, hi = np.log(refl_range[0]), np.log(refl_range[1])
    return Region(
        polygon=polygon,
        reflectivity=float(np.exp(rng.uniform(lo, hi))),
        texture=texture,
        period=float(rng.uniform(*period_range)),
        angle_deg=float(rng.uniform(0.0, 180.0)),
        density=float(rng.uniform(*density_range)),
        gain=25.0,
    )


def synth_patches(n_per_class: int, seed: SeedStream, size: int = 100, channels: int = 1):
    """Speckled single-texture patches, one class per texture.

    All classes share the same reflectivity range, so only texture
    separates them. Returns complex samples (N, size, size, c) and labels.
    """
    frame = [(0, 0), (size, 0), (size, size), (0, size)]
    slcs, labels = [], []
    for cls, texture in enumerate(CLASS_TEXTURES):
        for i in range(n_per_class):
            s = seed.child(texture, i)
            region = random_region(texture, frame, s.child("region").rng())
            slc, _ = synthesize_scene(SceneSpec(size, size, [region], channels=channels), s)
            slcs.append(slc.samples)
            labels.append(cls)
    return np.stack(slcs), np.asarray(labels, dtype=np.int32)


def synth_segmentation_scenes(n: int, seed: SeedStream, size: int = 256, channels: int = 1):
    """Three-region scenes: a left band and a right band split top/bottom.

    Each region gets a distinct texture in random order; the label of a
    pixel is the index of its texture. Returns samples (N, size, size, c)
    and uint8 labels (N, size, size).
    """
    slcs, labels = [], []
    for i in range(n):
        s = seed.child("scene", i)
        rng = s.child("layout").rng()
        x1 = float(rng.uniform(0.3, 0.6) * size)
        y1 = float(rng.uniform(0.35, 0.65) * size)
        polys = [
            [(0, 0), (x1, 0), (x1, size), (0, size)],
            [(x1, 0), (size, 0), (size, y1), (x1, y1)],
            [(x1, y1), (size, y1), (size, size), (x1, size)],
        ]
        order = rng.permutation(3)
        regions = [random_region(CLASS_TEXTURES[c], p, rng) for c, p in zip(order, polys)]
        slc, region_map = synthesize_scene(SceneSpec(size, size, regions, channels=channels), s)
        slcs.append(slc.samples)
        labels.append(order[region_map].astype(np.uint8))
    return np.stack(slcs), np.stack(labels)


def fit_normalization(slc: np.ndarray, low_pct=1.0, high_pct=99.0) -> NormalizationParams:
    return NormalizationParams.from_percentiles(np.abs(slc), low_pct, high_pct)


def write_patch_dataset(out, slc: np.ndarray, despeckler: Despeckler, labels=None,
                        params: NormalizationParams | None = None, low_pct=1.0, high_pct=99.0) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    params = params or fit_normalization(slc, low_pct, high_pct)
    normalized = normalize_amplitude(np.abs(slc), params)
    despeckled = np.stack([normalize_amplitude(despeckler(x), params) for x in slc])
    write_tensor(out / "slc.saft", slc.astype(np.complex64))
    write_tensor(out / "normalized.saft", normalized)
    write_tensor(out / "despeckled.saft", despeckled)
    if labels is not None:
        write_tensor(out / "labels.saft", np.asarray(labels, dtype=np.int32))
    write_norm(out / "norm.cfg", params)
    return out


def write_segmentation_dataset(out, slc: np.ndarray, labels: np.ndarray,
                               params: NormalizationParams | None = None, low_pct=1.0, high_pct=99.0) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    params = params or fit_normalization(slc, low_pct, high_pct)
    write_tensor(out / "slc.saft", slc.astype(np.complex64))
    write_tensor(out / "images.saft", normalize_amplitude(np.abs(slc), params))
    write_tensor(out / "labels.saft", labels.astype(np.uint8))
    write_norm(out / "norm.cfg", params)
    return out


@dataclass
class PatchDataset:
    slc: np.ndarray
    normalized: np.ndarray
    despeckled: np.ndarray
    params: NormalizationParams
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.normalized)

    def sample(self, i: int) -> TrainingSample:
        return TrainingSample(self.slc[i], self.normalized[i], self.despeckled[i], self.params)


def load_patch_dataset(path) -> PatchDataset:
    path = Path(path)
    for name in ("slc.saft", "normalized.saft", "despeckled.saft", "norm.cfg"):
        if not (path / name).is_file():
            raise FileNotFoundError(f"dataset {path} lacks {name}")
    labels = read_tensor(path / "labels.saft") if (path / "labels.saft").is_file() else None
    ds = PatchDataset(
        read_tensor(path / "slc.saft"),
        read_tensor(path / "normalized.saft"),
        read_tensor(path / "despeckled.saft"),
        read_norm(path / "norm.cfg"),
        labels,
    )
    if not (ds.slc.shape == ds.normalized.shape == ds.despeckled.shape):
        raise ValueError("slc, normalized and despeckled arrays differ in shape")
    if len(ds) == 0:
        raise ValueError(f"dataset {path} is empty")
    return ds


def load_segmentation_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    images = read_tensor(path / "images.saft")
    labels = read_tensor(path / "labels.saft")
    if images.ndim == 3:
        images = images[..., None]
    if images.shape[:3] != labels.shape:
        raise ValueError(f"images {images.shape} and labels {labels.shape} disagree")
    return images, labels


def load_image(path, low_pct=1.0, high_pct=99.0) -> np.ndarray:
    """Load a SAFT image as a normalized (H, W, c) float32 array.

    Complex containers are treated as SLC samples and normalized with
    percentile bounds; real containers are assumed already normalized.
    """
    arr = read_tensor(path)
    if arr.ndim == 2:
        arr = arr[..., None]
    if np.iscomplexobj(arr):
        amp = floor_amplitude(np.abs(arr))
        arr = normalize_amplitude(amp, NormalizationParams.from_percentiles(amp, low_pct, high_pct))
    return arr.astype(np.float32)


def steps_per_epoch(n: int, batch_size: int) -> int:
    """Full batches per epoch; a smaller dataset forms one batch of all samples."""
    return max(n // batch_size, 1)
