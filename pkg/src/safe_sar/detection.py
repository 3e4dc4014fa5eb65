"""Reference-patch pattern detection by thresholded cosine similarity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .probe import _extractor, extract_features, feature_map


def cosine_similarity(z1: np.ndarray, z2: np.ndarray) -> float:
    a = np.asarray(z1, dtype=np.float64).ravel()
    b = np.asarray(z2, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class DetectionMap:
    scores: np.ndarray  # (gh, gw) cosine similarities
    threshold: float
    patch_size: int
    stride: int

    @property
    def mask(self) -> np.ndarray:
        return self.scores >= self.threshold

    def rethreshold(self, threshold: float) -> "DetectionMap":
        return DetectionMap(self.scores, min(float(threshold), 1.0), self.patch_size, self.stride)


def grid_cosine(grid: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Cosine of every (…, d) grid vector against ``ref``."""
    g = np.asarray(grid, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64).ravel()
    nr = np.linalg.norm(r)
    if nr == 0:
        raise ValueError("reference features are zero")
    ng = np.linalg.norm(g, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = (g @ r) / (ng * nr)
    return np.clip(np.nan_to_num(c, nan=0.0), -1.0, 1.0)


def detect_pattern(image: np.ndarray, ref_patch: np.ndarray, model, threshold: float = 0.8,
                   patch_size: int = 64, stride: int = 4, batch_size: int = 64,
                   center: bool = False) -> DetectionMap:
    """Score each padded ``patch_size`` window against the reference patch.

    A reference larger than ``patch_size`` is centre-cropped to it. The
    threshold is clamped to 1, and cells with score >= threshold are kept.
    With ``center`` the mean grid feature is subtracted from the grid and
    the reference first; pooled features share a large common component,
    which otherwise pushes every raw cosine towards 1.
    """
    fx = _extractor(model)
    ref = np.asarray(ref_patch, dtype=np.float32)
    if ref.ndim == 2:
        ref = ref[..., None]
    h, w = ref.shape[:2]
    if h < patch_size or w < patch_size:
        raise ValueError(f"reference {h}x{w} is smaller than the {patch_size}px patch")
    top, left = (h - patch_size) // 2, (w - patch_size) // 2
    ref = ref[top : top + patch_size, left : left + patch_size]
    ref_feat = extract_features(fx, ref[None])[0]
    grid = feature_map(fx, image, patch_size, stride, batch_size)
    feats = grid.features
    if center:
        if feats.shape[0] * feats.shape[1] < 2:
            raise ValueError("centring needs a feature grid of at least two cells")
        mean = feats.mean(axis=(0, 1))
        feats, ref_feat = feats - mean, ref_feat - mean
    scores = grid_cosine(feats, ref_feat).astype(np.float32)
    return DetectionMap(scores, min(float(threshold), 1.0), patch_size, stride)
