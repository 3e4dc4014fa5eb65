"""Segmentation head on frozen multi-scale feature grids, its training loop and metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .checkpoint import load_checkpoint, save_checkpoint
from .probe import FeatureGrid, feature_map
from .seeding import SeedStream

# ---------------------------------------------------------------- metrics


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, n: int) -> np.ndarray:
    """Counts with rows = ground-truth class and columns = predicted class."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise ValueError(f"{name} labels outside [0, {n})")
    idx = gt.astype(np.int64).ravel() * n + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=n * n).reshape(n, n)


@dataclass(frozen=True)
class SegMetrics:
    oa: float
    aa: float
    kappa: float
    miou: float

    def as_text(self) -> str:
        return f"OA={self.oa!r}\nAA={self.aa!r}\nKappa={self.kappa!r}\nmIoU={self.miou!r}\n"


def seg_metrics(x: np.ndarray) -> SegMetrics:
    """Overall accuracy, average per-class accuracy, Cohen's kappa and mean IoU.

    Classes absent from both prediction and ground truth are left out of
    the AA and mIoU averages. A class that is only predicted has recall 0.
    When chance agreement is 1 (a single class everywhere) kappa is 1.
    """
    x = np.asarray(x, dtype=np.float64)
    total = x.sum()
    if x.ndim != 2 or x.shape[0] != x.shape[1] or total <= 0:
        raise ValueError("confusion matrix must be square with a positive total")
    diag = np.diag(x)
    rows, cols = x.sum(axis=1), x.sum(axis=0)
    present = (rows + cols) > 0
    oa = diag.sum() / total
    recall = np.divide(diag, rows, out=np.zeros_like(diag), where=rows > 0)
    aa = recall[present].mean()
    pe = float((rows * cols).sum() / total**2)
    kappa = 1.0 if pe >= 1.0 else (oa - pe) / (1.0 - pe)
    union = rows + cols - diag
    iou = np.divide(diag, union, out=np.zeros_like(diag), where=union > 0)
    return SegMetrics(float(oa), float(aa), float(kappa), float(iou[present].mean()))


# ---------------------------------------------------------------- head


class ScaleBranch(nn.Module):
    """1x1 reduction, 3x3 refinement and three stride-2 transposed convolutions (x8)."""

    def __init__(self, in_dim: int, reduced: int):
        super().__init__()
        self.reduce = nn.Conv2d(in_dim, reduced, 1)
        self.refine = nn.Conv2d(reduced, reduced, 3, padding=1)
        self.up = nn.ModuleList(nn.ConvTranspose2d(reduced, reduced, 2, stride=2) for _ in range(3))

    def forward(self, x: Tensor) -> Tensor:
        x = F.relu(self.refine(F.relu(self.reduce(x))))
        for i, up in enumerate(self.up):
            x = up(x)
            if i < len(self.up) - 1:
                x = F.relu(x)
        return x


def attention_aggregate(maps: Sequence[Tensor], score_convs: Sequence[nn.Module]) -> Tensor:
    """Per-location softmax over one scalar score per scale, then a weighted sum of the maps."""
    if len({tuple(m.shape) for m in maps}) != 1:
        raise ValueError("attention aggregation needs equal-shape maps")
    scores = torch.stack([conv(m) for conv, m in zip(score_convs, maps)])  # (S, B, 1, h, w)
    weights = scores.softmax(dim=0)
    return (weights * torch.stack(list(maps))).sum(dim=0)


class SegHead(nn.Module):
    def __init__(self, in_dim: int, n_classes: int, reduced: int = 64, n_scales: int = 3):
        super().__init__()
        self.branches = nn.ModuleList(ScaleBranch(in_dim, reduced) for _ in range(n_scales))
        self.scores = nn.ModuleList(nn.Conv2d(reduced, 1, 1) for _ in range(n_scales))
        self.classifier = nn.Conv2d(reduced, n_classes, 3, padding=1)
        # per-scale channel statistics of the training features; frozen encoder
        # features share a large common offset, so the head sees them standardized
        self.register_buffer("in_mean", torch.zeros(n_scales, in_dim))
        self.register_buffer("in_std", torch.ones(n_scales, in_dim))
        self.arch = dict(in_dim=in_dim, n_classes=n_classes, reduced=reduced, n_scales=n_scales)

    @torch.no_grad()
    def fit_input_stats(self, feats: Sequence[Tensor], eps: float = 1e-6) -> None:
        """Set the input standardization from (B, d_f, gh, gw) feature stacks, one per scale."""
        for s, f in enumerate(feats):
            flat = f.transpose(0, 1).reshape(f.shape[1], -1)
            self.in_mean[s] = flat.mean(dim=1)
            self.in_std[s] = flat.std(dim=1, unbiased=False) + eps

    def forward(self, feats: Sequence[Tensor], out_size: tuple[int, int]) -> Tensor:
        """``feats``: one (B, d_f, gh, gw) tensor per scale. Returns (B, n_classes, H, W) logits."""
        if len(feats) != len(self.branches):
            raise ValueError(f"expected {len(self.branches)} feature maps, got {len(feats)}")
        if len({tuple(f.shape) for f in feats}) != 1:
            raise ValueError("feature grids of all scales must share their shape")
        maps = [branch((f - self.in_mean[s, :, None, None]) / self.in_std[s, :, None, None])
                for s, (branch, f) in enumerate(zip(self.branches, feats))]
        fused = attention_aggregate(maps, self.scores)
        logits = self.classifier(fused)
        return F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)


def seg_forward(feats: Sequence[np.ndarray | Tensor], head: SegHead, out_size: tuple[int, int]) -> Tensor:
    """Logits for channel-last grids: each ``feats[s]`` is (gh, gw, d) or (B, gh, gw, d)."""
    tensors = []
    for f in feats:
        t = torch.as_tensor(np.asarray(f, dtype=np.float32)) if not isinstance(f, Tensor) else f
        if t.ndim == 3:
            t = t.unsqueeze(0)
        tensors.append(t.permute(0, 3, 1, 2).contiguous())
    return head(tensors, out_size)


def multiscale_features(model, image: np.ndarray, patch_sizes=(16, 32, 64), stride: int = 32,
                        batch_size: int = 64) -> list[FeatureGrid]:
    return [feature_map(model, image, p, stride, batch_size) for p in patch_sizes]


def stack_multiscale(model, images: np.ndarray, patch_sizes=(16, 32, 64), stride: int = 32) -> list[np.ndarray]:
    """Per-scale arrays (N, gh, gw, d) for a stack of images."""
    grids = [multiscale_features(model, im, patch_sizes, stride) for im in images]
    return [np.stack([g[s].features for g in grids]) for s in range(len(patch_sizes))]


# ---------------------------------------------------------------- training


@dataclass
class SegTrainConfig:
    epochs: int = 100
    lr: float = 3.125e-5
    milestones: tuple[int, ...] = (40, 80)
    weight_decay: float = 0.01
    batch_size: int = 4
    val_fraction: float = 0.25
    reduced_dim: int = 64
    seed: int = 0

    @classmethod
    def from_config(cls, cfg) -> "SegTrainConfig":
        from .config import parse_int_list

        return cls(
            epochs=cfg["seg.epochs"], lr=cfg["seg.lr"], milestones=tuple(parse_int_list(cfg["seg.milestones"])),
            weight_decay=cfg["seg.weight_decay"], batch_size=cfg["seg.batch_size"],
            val_fraction=cfg["seg.val_fraction"], reduced_dim=cfg["seg.reduced_dim"], seed=cfg["seed"],
        )


@dataclass
class SegTrainResult:
    head: SegHead
    train_idx: np.ndarray
    val_idx: np.ndarray
    val_metrics: SegMetrics | None
    losses: list[float] = field(default_factory=list)


def split_indices(n: int, val_fraction: float, seed: SeedStream) -> tuple[np.ndarray, np.ndarray]:
    perm = seed.child("split").rng().permutation(n)
    n_val = int(round(val_fraction * n))
    if n >= 2:
        n_val = min(max(n_val, 1), n - 1)
    else:
        n_val = 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


@torch.no_grad()
def seg_predict(head: SegHead, feats: Sequence[np.ndarray], out_size: tuple[int, int], batch_size: int = 8) -> np.ndarray:
    """Label maps (N, H, W) from per-scale feature stacks (N, gh, gw, d)."""
    head.eval()
    n = len(feats[0])
    out = np.empty((n,) + tuple(out_size), dtype=np.uint8)
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        logits = seg_forward([f[sl] for f in feats], head, out_size)
        out[sl] = logits.argmax(dim=1).numpy().astype(np.uint8)
    return out


def evaluate(head: SegHead, feats, labels: np.ndarray, n_classes: int) -> SegMetrics:
    pred = seg_predict(head, feats, labels.shape[1:])
    return seg_metrics(confusion_matrix(pred, labels, n_classes))


def seg_train(feats: Sequence[np.ndarray], labels: np.ndarray, n_classes: int,
              cfg: SegTrainConfig = SegTrainConfig()) -> SegTrainResult:
    """Train a head on precomputed frozen features with per-pixel cross-entropy.

    ``feats`` holds one (N, gh, gw, d) array per scale and ``labels`` is
    (N, H, W). The head standardizes its inputs with statistics of the training
    split. The learning rate is divided by 10 at each milestone epoch.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise ValueError("empty segmentation dataset")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels outside [0, {n_classes})")
    if any(len(f) != n for f in feats):
        raise ValueError("feature stacks and labels differ in length")
    seed = SeedStream(cfg.seed).child("seg")
    train_idx, val_idx = split_indices(n, cfg.val_fraction, seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed.child("init").int_seed())
        head = SegHead(feats[0].shape[-1], n_classes, cfg.reduced_dim, len(feats))
    opt = torch.optim.AdamW(head.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(cfg.milestones), gamma=0.1)
    tensors = [torch.from_numpy(np.ascontiguousarray(f, dtype=np.float32)).permute(0, 3, 1, 2) for f in feats]
    head.fit_input_stats([t[torch.from_numpy(train_idx)] for t in tensors])
    target = torch.from_numpy(labels.astype(np.int64))
    out_size = tuple(labels.shape[1:])
    losses = []
    for epoch in range(cfg.epochs):
        head.train()
        order = train_idx[seed.child("epoch", epoch).rng().permutation(len(train_idx))]
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[start : start + cfg.batch_size])
            logits = head([t[idx] for t in tensors], out_size)
            loss = F.cross_entropy(logits, target[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        losses.append(total / max(len(order), 1))
    metrics = None
    if len(val_idx):
        metrics = evaluate(head, [f[val_idx] for f in feats], labels[val_idx], n_classes)
    return SegTrainResult(head, train_idx, val_idx, metrics, losses)


def save_head(path, head: SegHead, patch_sizes, stride: int):
    meta = dict(head.arch)
    meta["patch_sizes"] = ",".join(map(str, patch_sizes))
    meta["stride"] = stride
    return save_checkpoint(path, {f"head.{k}": v for k, v in head.state_dict().items()}, meta)


def load_head(path) -> tuple[SegHead, tuple[int, ...], int]:
    tensors, meta = load_checkpoint(path)
    head = SegHead(int(meta["in_dim"]), int(meta["n_classes"]), int(meta["reduced"]), int(meta["n_scales"]))
    head.load_state_dict({k[len("head."):]: torch.from_numpy(v) for k, v in tensors.items()})
    patch_sizes = tuple(int(p) for p in meta["patch_sizes"].split(","))
    return head, patch_sizes, int(meta["stride"])
