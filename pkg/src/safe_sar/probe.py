"""Frozen-feature evaluation: feature extraction, k-NN and linear probes,
few-shot trials and feature-grid visualization."""

from __future__ import annotations

import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .container import read_tensor, write_tensor
from .encoder import to_tensor
from .model import FeatureExtractor, SafeModel, load_feature_extractor
from .sar import extract_patches
from .seeding import SeedStream


class FewShotError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2:
            raise ValueError("features must be (N, d)")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels).astype(np.int64)
            if self.labels.shape != (len(self.features),):
                raise ValueError("labels must be one integer per row")

    def __len__(self) -> int:
        return len(self.features)

    def subset(self, idx) -> "FeatureMatrix":
        return FeatureMatrix(self.features[idx], None if self.labels is None else self.labels[idx])


def _extractor(model) -> FeatureExtractor:
    if isinstance(model, (str, Path)):
        return load_feature_extractor(model)
    if isinstance(model, FeatureExtractor):
        return model
    if isinstance(model, SafeModel):
        return FeatureExtractor(model.teacher_encoder)
    return FeatureExtractor(model)


def crop_to_tokens(patch: np.ndarray, token: int) -> np.ndarray:
    """Centre crop of the first two axes to the largest multiples of ``token``."""
    h, w = patch.shape[:2]
    th, tw = h - h % token, w - w % token
    if th == 0 or tw == 0:
        raise ValueError(f"patch {h}x{w} is smaller than the {token}px token")
    top, left = (h - th) // 2, (w - tw) // 2
    return patch[top : top + th, left : left + tw]


@torch.no_grad()
def extract_features(model, patches: np.ndarray | Sequence[np.ndarray], batch_size: int = 64) -> np.ndarray:
    """Features of channel-last patches, row order preserved.

    ``patches`` may be one (N, h, w, c) array or a list of arrays of mixed
    sizes; same-size patches are batched together. Sides that are not a
    multiple of the token size are centre-cropped to the largest multiple.
    """
    fx = _extractor(model).eval()
    token = fx.cfg.token_size
    dtype = next(fx.parameters()).dtype
    items = list(patches) if not isinstance(patches, np.ndarray) else patches
    n = len(items)
    if n == 0:
        return np.zeros((0, fx.cfg.embed_dim), dtype=np.float32)
    groups: dict[tuple, list[int]] = {}
    for i in range(n):
        shape = np.shape(items[i])
        groups.setdefault(shape, []).append(i)
    out = None
    for idx in groups.values():
        for start in range(0, len(idx), batch_size):
            chunk = idx[start : start + batch_size]
            x = to_tensor(np.stack([crop_to_tokens(np.asarray(items[i], dtype=np.float32), token)
                                    for i in chunk])).to(dtype)
            f = fx(x).float().numpy()
            if out is None:
                out = np.empty((n, f.shape[1]), dtype=np.float32)
            out[chunk] = f
    return out


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norm > 0, norm, 1.0)


def knn_classify(train: FeatureMatrix, query, k: int = 1) -> np.ndarray:
    """Cosine k-NN with majority vote.

    Ties between labels go to the tied label whose member is nearest to
    the query.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    if not 1 <= k <= len(train):
        raise ValueError(f"k must be in [1, {len(train)}], got {k}")
    q = query.features if isinstance(query, FeatureMatrix) else np.asarray(query)
    sim = _unit_rows(q) @ _unit_rows(train.features).T
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    neigh = train.labels[order]
    if k == 1:
        return neigh[:, 0]
    preds = np.empty(len(q), dtype=train.labels.dtype)
    for r, row in enumerate(neigh):
        values, counts = np.unique(row, return_counts=True)
        tied = set(values[counts == counts.max()].tolist())
        preds[r] = next(lab for lab in row if lab in tied)
    return preds


@dataclass
class LinearProbe:
    weight: np.ndarray  # (d, n_classes)
    bias: np.ndarray
    classes: np.ndarray

    def predict(self, features) -> np.ndarray:
        f = features.features if isinstance(features, FeatureMatrix) else np.asarray(features)
        logits = f.astype(np.float64) @ self.weight + self.bias
        return self.classes[np.argmax(logits, axis=1)]


def linear_probe_train(train: FeatureMatrix, epochs: int = 300, lr: float = 3e-3, seed: int = 0) -> LinearProbe:
    """Multinomial logistic regression, full-batch Adam, zero-initialized."""
    classes, y = np.unique(train.labels, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("linear probe needs at least two classes")
    x = torch.from_numpy(np.asarray(train.features, dtype=np.float64))
    target = torch.from_numpy(y.astype(np.int64))
    torch.manual_seed(seed)
    layer = torch.nn.Linear(x.shape[1], len(classes), dtype=torch.float64)
    torch.nn.init.zeros_(layer.weight)
    torch.nn.init.zeros_(layer.bias)
    opt = torch.optim.Adam(layer.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        torch.nn.functional.cross_entropy(layer(x), target).backward()
        opt.step()
    return LinearProbe(layer.weight.detach().numpy().T.copy(), layer.bias.detach().numpy().copy(), classes)


@dataclass
class FewShotReport:
    labels_per_class: int
    trials: int
    method: str
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def __str__(self) -> str:
        return (f"method={self.method} labels_per_class={self.labels_per_class} trials={self.trials} "
                f"mean={self.mean:.4f} std={self.std:.4f}")


def fewshot_eval(
    features: FeatureMatrix,
    labels_per_class: int,
    trials: int = 10,
    method: str = "knn",
    seed: int = 0,
    k: int = 1,
    query: FeatureMatrix | None = None,
    epochs: int = 300,
    lr: float = 3e-3,
) -> FewShotReport:
    """Repeatedly sample ``labels_per_class`` labelled rows per class, fit, and score.

    Without ``query`` the remaining rows are the evaluation set, so every
    class needs more than ``labels_per_class`` rows.
    """
    if method not in ("knn", "linear"):
        raise ValueError(f"unknown method {method!r}")
    if features.labels is None:
        raise FewShotError("few-shot evaluation needs labels")
    if labels_per_class < 1 or trials < 1:
        raise FewShotError("labels_per_class and trials must be >= 1")
    classes, counts = np.unique(features.labels, return_counts=True)
    if len(classes) < 2:
        raise FewShotError("few-shot evaluation needs at least two classes")
    need = labels_per_class + (1 if query is None else 0)
    short = [int(c) for c, n in zip(classes, counts) if n < need]
    if short:
        raise FewShotError(
            f"classes {short} have fewer than {need} samples for {labels_per_class} labels per class"
        )
    by_class = [np.flatnonzero(features.labels == c) for c in classes]
    root = SeedStream(seed)
    accs = []
    for t in range(trials):
        rng = root.child("trial", t).rng()
        picked = np.sort(np.concatenate([rng.choice(idx, labels_per_class, replace=False) for idx in by_class]))
        train = features.subset(picked)
        test = query if query is not None else features.subset(np.setdiff1d(np.arange(len(features)), picked))
        if method == "knn":
            pred = knn_classify(train, test, min(k, len(train)))
        else:
            pred = linear_probe_train(train, epochs, lr, seed=root.child("probe", t).int_seed()).predict(test)
        accs.append(float(np.mean(pred == test.labels)))
    return FewShotReport(labels_per_class, trials, method, accs)


# ---------------------------------------------------------------- visualization


@dataclass
class FeatureGrid:
    features: np.ndarray  # (gh, gw, d)
    patch_size: int
    stride: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.features.shape[:2]


def feature_map(model, image: np.ndarray, patch_size: int, stride: int, batch_size: int = 64) -> FeatureGrid:
    """Encode every padded ``patch_size`` window at ``stride`` into a grid of features."""
    fx = _extractor(model)
    if patch_size % fx.cfg.token_size:
        raise ValueError(f"patch size {patch_size} is not a multiple of token size {fx.cfg.token_size}")
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[..., None]
    windows, (gh, gw) = extract_patches(image, patch_size, stride)
    # windows is a strided view; materialize one batch of cells at a time
    cells = [(i, j) for i in range(gh) for j in range(gw)]
    feats = []
    for start in range(0, len(cells), batch_size):
        chunk = np.stack([windows[i, j] for i, j in cells[start : start + batch_size]])
        feats.append(extract_features(fx, chunk, batch_size))
    return FeatureGrid(np.concatenate(feats).reshape(gh, gw, -1), patch_size, stride)


def _minmax(channel: np.ndarray) -> np.ndarray:
    lo, hi = channel.min(), channel.max()
    return (channel - lo) / (hi - lo) if hi > lo else np.zeros_like(channel)


def pca_rgb(features: np.ndarray, rel_tol: float = 1e-9) -> np.ndarray:
    """Top-3 principal components of (N, d) rows, each min-max scaled to [0, 1].

    Components are ordered by decreasing variance and signed so that their
    largest loading (the first one, among near-ties) is positive. Missing
    components (rank < 3) are zero.
    """
    x = np.asarray(features, dtype=np.float64)
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    rank = int(np.sum(s > rel_tol * s[0])) if s.size and s[0] > 0 else 0
    out = np.zeros((len(x), 3))
    for c in range(min(3, rank)):
        comp = vt[c]
        mag = np.abs(comp)
        lead = np.flatnonzero(mag >= mag.max() * (1 - 1e-9))[0]
        if comp[lead] < 0:
            comp = -comp
        out[:, c] = _minmax(xc @ comp)
    return out


def reduce_to_rgb(grid: FeatureGrid, method: str = "pca", command: str = "") -> np.ndarray:
    """Compress a feature grid to an (gh, gw, 3) image in [0, 1].

    ``external`` writes the grid to a float32 SAFT file and runs ``command``
    (with ``{input}``/``{output}`` placeholders); the program must write a
    (gh, gw, 3) container back.
    """
    gh, gw = grid.shape
    if gh * gw < 3:
        raise ValueError("need at least 3 grid cells")
    if method == "pca":
        return pca_rgb(grid.features.reshape(gh * gw, -1)).reshape(gh, gw, 3)
    if method != "external":
        raise ValueError(f"unknown reducer {method!r}")
    if not command:
        raise ValueError("external reducer needs a command")
    with tempfile.TemporaryDirectory() as tmp:
        src, dst = Path(tmp, "grid.saft"), Path(tmp, "rgb.saft")
        write_tensor(src, grid.features.astype(np.float32))
        args = [a.format(input=src, output=dst) for a in shlex.split(command)]
        proc = subprocess.run(args, capture_output=True, text=True)
        if proc.returncode != 0:
            raise RuntimeError(f"reducer failed ({proc.returncode}): {proc.stderr.strip()}")
        rgb = read_tensor(dst)
    if rgb.shape != (gh, gw, 3):
        raise ValueError(f"reducer returned shape {rgb.shape}, expected {(gh, gw, 3)}")
    return np.clip(rgb.astype(np.float64), 0.0, 1.0)
