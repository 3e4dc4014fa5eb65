"""Student/teacher view generation for self-supervised pretraining."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sar import NormalizationParams, normalize_amplitude
from .seeding import SeedStream


@dataclass(frozen=True)
class ShiftParams:
    """Bounds of the uniform log-amplitude shift ``B ~ U(a, b)``."""

    a: float = 0.0
    b: float = 0.3

    def __post_init__(self):
        if self.a > self.b:
            raise ValueError(f"shift bounds must satisfy a <= b, got ({self.a}, {self.b})")
        if max(abs(self.a), abs(self.b)) > 0.5:
            raise ValueError("shift bounds must stay within [-0.5, 0.5]")


@dataclass(frozen=True)
class SubApertureParams:
    rho_az: float = 0.32
    rho_rg: float = 0.32
    recenter: bool = False

    def __post_init__(self):
        for rho in (self.rho_az, self.rho_rg):
            if not 0.0 < rho <= 1.0:
                raise ValueError(f"kept bandwidth fraction must be in (0, 1], got {rho}")


def draw_shift(params: ShiftParams, rng: np.random.Generator) -> float:
    return float(rng.uniform(params.a, params.b)) if params.b > params.a else float(params.a)


def amplitude_shift(patch: np.ndarray, params: ShiftParams, rng: np.random.Generator) -> np.ndarray:
    """Add one scalar drawn from ``U(a, b)`` to every pixel, then clip to [0, 1]."""
    shift = draw_shift(params, rng)
    return np.clip(patch + np.float32(shift), 0.0, 1.0).astype(np.float32)


def random_crop(patch: np.ndarray, out_size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = patch.shape[:2]
    if out_size > h or out_size > w or out_size < 1:
        raise ValueError(f"crop size {out_size} does not fit a {h}x{w} patch")
    top = int(rng.integers(0, h - out_size + 1))
    left = int(rng.integers(0, w - out_size + 1))
    return patch[top : top + out_size, left : left + out_size]


def _centroid_shift(power: np.ndarray, axis: int) -> int:
    """Roll (in bins) that moves the circular power centroid along ``axis`` to the centre."""
    n = power.shape[axis]
    profile = power.sum(axis=tuple(a for a in range(power.ndim) if a != axis))
    angle = np.angle(np.sum(profile * np.exp(2j * np.pi * np.arange(n) / n)))
    centroid = angle * n / (2 * np.pi)
    return int(round(n // 2 - centroid))


def subaperture_decompose(slc_patch: np.ndarray, params: SubApertureParams) -> np.ndarray:
    """Low-pass the 2-D spectrum and return the reduced-resolution complex image.

    The central ``round(rho_az*H) x round(rho_rg*W)`` block of the centred
    spectrum is kept and inverse transformed at its own size, without zero
    padding. The output is scaled by ``sqrt(h*w / (H*W))`` so that its
    energy equals the energy of the kept spectral block divided by ``H*W``;
    this keeps the mean intensity of white speckle unchanged.
    """
    x = np.asarray(slc_patch)
    if not np.iscomplexobj(x):
        raise ValueError("sub-aperture decomposition needs complex samples")
    H, W = x.shape[:2]
    h, w = round(params.rho_az * H), round(params.rho_rg * W)
    if h < 4 or w < 4:
        raise ValueError(f"kept block {h}x{w} is smaller than 4 pixels")
    spec = np.fft.fftshift(np.fft.fft2(x, axes=(0, 1)), axes=(0, 1))
    if params.recenter:
        power = np.abs(spec) ** 2
        spec = np.roll(spec, (_centroid_shift(power, 0), _centroid_shift(power, 1)), axis=(0, 1))
    r0, c0 = H // 2 - h // 2, W // 2 - w // 2
    block = spec[r0 : r0 + h, c0 : c0 + w]
    out = np.fft.ifft2(np.fft.ifftshift(block, axes=(0, 1)), axes=(0, 1))
    out *= np.sqrt(h * w / (H * W))
    return out.astype(x.dtype)


@dataclass(frozen=True)
class ViewPolicy:
    q_sub: float = 0.5
    shift: ShiftParams = field(default_factory=ShiftParams)
    subaperture: SubApertureParams = field(default_factory=SubApertureParams)
    n_global: int = 2
    n_local: int = 3
    global_size: int = 64
    local_size: int = 32

    @classmethod
    def from_config(cls, cfg) -> "ViewPolicy":
        return cls(
            q_sub=cfg["augment.q_sub"],
            shift=ShiftParams(cfg["augment.shift_a"], cfg["augment.shift_b"]),
            subaperture=SubApertureParams(cfg["augment.rho"], cfg["augment.rho"], cfg["augment.recenter"]),
            n_global=cfg["augment.n_global"],
            n_local=cfg["augment.n_local"],
            global_size=cfg["augment.global_size"],
            local_size=cfg["augment.local_size"],
        )


@dataclass
class TrainingSample:
    """One pretraining patch: complex samples, their normalized amplitude and
    the normalized despeckled twin, all ``(H, W, c)``."""

    slc: np.ndarray
    normalized: np.ndarray
    despeckled: np.ndarray
    params: NormalizationParams


@dataclass
class ViewBundle:
    teacher: np.ndarray
    students: list[np.ndarray]

    @property
    def k(self) -> int:
        return 1 + len(self.students)


def make_views(sample: TrainingSample, policy: ViewPolicy, seed: SeedStream) -> ViewBundle:
    """Teacher view plus ``n_global`` global and ``n_local`` local student views.

    The teacher gets a plain global crop of the despeckled twin. Student
    views come from the speckled patch; each local view is, with
    probability ``q_sub``, a sub-aperture image of the full patch instead
    of a spatial crop. Every student view is amplitude-shifted.
    """
    if sample.despeckled is None:
        raise ValueError("make_views needs the despeckled twin")
    if sample.despeckled.shape != sample.normalized.shape:
        raise ValueError("despeckled twin and patch differ in shape")
    teacher = np.ascontiguousarray(
        random_crop(sample.despeckled, policy.global_size, seed.child("teacher").rng()), dtype=np.float32
    )
    students = []
    for j in range(policy.n_global + policy.n_local):
        rng = seed.child("view", j).rng()
        if j < policy.n_global:
            view = random_crop(sample.normalized, policy.global_size, rng)
        elif rng.random() < policy.q_sub:
            sub = subaperture_decompose(sample.slc, policy.subaperture)
            if sub.shape[:2] != (policy.local_size, policy.local_size):
                raise ValueError(
                    f"sub-aperture view is {sub.shape[:2]}, local views must be {policy.local_size}"
                )
            view = normalize_amplitude(np.abs(sub), sample.params)
        else:
            view = random_crop(sample.normalized, policy.local_size, rng)
        students.append(amplitude_shift(view, policy.shift, rng))
    return ViewBundle(teacher, students)
