"""Self-supervised pretraining: schedules, the optimization step and the epoch loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .augment import ViewBundle, ViewPolicy, make_views
from .config import RunConfig
from .datasets import PatchDataset, load_patch_dataset, steps_per_epoch
from .encoder import to_tensor
from .model import SafeModel, load_model, save_model
from .objective import ema_update, loss_cross_entropy, loss_mean_entropy, prototype_scores, tempered_softmax, total_loss
from .seeding import SeedStream

log = logging.getLogger(__name__)

SCHEDULE_KINDS = ("linear", "cosine", "warmup_then_cosine", "constant")
LOSS_LOG_HEADER = "step,l_ce,r,lr,wd,momentum\n"


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str
    start: float
    end: float
    total: int
    warmup: int = 0
    warmup_start: float = 0.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.total >= self.warmup >= 0:
            raise ValueError("schedule needs total >= warmup >= 0")


def _cosine(start: float, end: float, t: int, total: int) -> float:
    if total == 0:
        return start
    return end + (start - end) * (1 + math.cos(math.pi * t / total)) / 2


def schedule_value(spec: ScheduleSpec, step: int) -> float:
    if not 0 <= step <= spec.total:
        raise ValueError(f"step {step} outside [0, {spec.total}]")
    if spec.kind == "constant":
        return spec.start
    if spec.kind == "linear":
        if spec.total == 0:
            return spec.start
        return spec.start + (spec.end - spec.start) * step / spec.total
    if spec.kind == "cosine":
        return _cosine(spec.start, spec.end, step, spec.total)
    # warmup_then_cosine: linear warmup_start -> start, then cosine start -> end
    if step < spec.warmup:
        return spec.warmup_start + (spec.start - spec.warmup_start) * step / spec.warmup
    return _cosine(spec.start, spec.end, step - spec.warmup, spec.total - spec.warmup)


@dataclass(frozen=True)
class Hyper:
    lr: ScheduleSpec
    wd: ScheduleSpec
    momentum: ScheduleSpec
    tau_student: float = 0.1
    tau_teacher: float = 0.04
    lam: float = 1.0
    entropy_sign: float = -1.0
    mask_p: float = 0.3
    clip_grad: float = 3.0
    center_momentum: float = 0.0

    @classmethod
    def from_config(cls, cfg: RunConfig, steps_per_epoch: int) -> "Hyper":
        total = cfg["train.epochs"] * steps_per_epoch
        warmup = min(cfg["train.warmup_epochs"] * steps_per_epoch, total)
        return cls(
            lr=ScheduleSpec("warmup_then_cosine", cfg["train.lr"], cfg["train.min_lr"], total, warmup),
            wd=ScheduleSpec("cosine", cfg["train.wd_start"], cfg["train.wd_end"], total),
            momentum=ScheduleSpec("linear", cfg["train.momentum_start"], cfg["train.momentum_end"], total),
            tau_student=cfg["objective.tau_student"],
            tau_teacher=cfg["objective.tau_teacher"],
            lam=cfg["objective.lambda"],
            entropy_sign=cfg["objective.entropy_sign"],
            mask_p=cfg["train.mask_p"],
            clip_grad=cfg["train.clip_grad"],
            center_momentum=cfg["objective.center_momentum"],
        )

    def at(self, step: int) -> tuple[float, float, float]:
        s = min(step, self.lr.total)
        return schedule_value(self.lr, s), schedule_value(self.wd, s), schedule_value(self.momentum, s)


def build_optimizer(model: SafeModel, beta1=0.9, beta2=0.999) -> torch.optim.AdamW:
    """AdamW over student parameters and prototypes; biases and norms are not decayed."""
    decay, no_decay = [], []
    for module in (*model.student_modules(), model.prototypes):
        for p in module.parameters():
            (decay if p.ndim >= 2 else no_decay).append(p)
    return torch.optim.AdamW(
        [{"params": decay, "decay": True}, {"params": no_decay, "decay": False, "weight_decay": 0.0}],
        lr=0.0, betas=(beta1, beta2), weight_decay=0.0,
    )


@dataclass
class TrainState:
    model: SafeModel
    optimizer: torch.optim.Optimizer
    seed: SeedStream
    step: int = 0
    epoch: int = 0


def new_state(cfg: RunConfig) -> TrainState:
    model = SafeModel.from_config(cfg)
    opt = build_optimizer(model, cfg["train.beta1"], cfg["train.beta2"])
    return TrainState(model, opt, SeedStream(cfg["seed"]))


def _student_projections(model: SafeModel, views: list[list[np.ndarray]], mask_p: float,
                         generator: torch.Generator) -> Tensor:
    """Encode all student views, grouping same-size views into one forward pass.

    Returns (b, k-1, d_g) in view order.
    """
    b, nv = len(views), len(views[0])
    groups: dict[tuple, list[int]] = {}
    for j, v in enumerate(views[0]):
        groups.setdefault(v.shape, []).append(j)
    out: list[Tensor | None] = [None] * nv
    for _, idx in groups.items():
        x = to_tensor(np.stack([views[i][j] for j in idx for i in range(b)]))
        h = model.student_head(model.student_encoder(x, mask_p=mask_p, generator=generator))
        h = h.reshape(len(idx), b, -1)
        for pos, j in enumerate(idx):
            out[j] = h[pos]
    return torch.stack(out, dim=1)


def pretrain_step(batch: list[ViewBundle], state: TrainState, hyper: Hyper) -> tuple[TrainState, dict]:
    """One AdamW update of the student and prototypes, then the EMA teacher update.

    Raises :class:`NonFiniteLossError` (without touching any parameter) if
    the loss is not finite.
    """
    if not batch:
        raise ValueError("empty batch")
    model = state.model
    lr, wd, momentum = hyper.at(state.step)
    model.train()
    # forward passes update normalization statistics; keep a copy to roll back on failure
    buffers = {k: b.clone() for k, b in model.named_buffers()}

    with torch.no_grad():
        t_h = model.teacher_head(model.teacher_encoder(to_tensor(np.stack([v.teacher for v in batch]))))
        t_raw = prototype_scores(t_h, model.prototypes.Q)
        t_s = t_raw - model.teacher_center if hyper.center_momentum > 0 else t_raw
        teacher_p = tempered_softmax(t_s, hyper.tau_teacher)

    generator = state.seed.child("mask", state.step).torch_generator()
    s_h = _student_projections(model, [v.students for v in batch], hyper.mask_p, generator)
    student_p = tempered_softmax(prototype_scores(s_h, model.prototypes.Q), hyper.tau_student)
    l_ce = loss_cross_entropy(teacher_p, student_p)
    r = loss_mean_entropy(student_p)
    loss = total_loss(l_ce, r, hyper.lam, hyper.entropy_sign)
    if not torch.isfinite(loss):
        with torch.no_grad():
            for k, b in model.named_buffers():
                b.copy_(buffers[k])
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step}: L_ce={l_ce.item()}, R={r.item()}, lr={lr}, wd={wd}"
        )

    opt = state.optimizer
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if hyper.clip_grad > 0:
        params = [p for g in opt.param_groups for p in g["params"]]
        torch.nn.utils.clip_grad_norm_(params, hyper.clip_grad)
    for group in opt.param_groups:
        group["lr"] = lr
        group["weight_decay"] = wd if group.get("decay") else 0.0
    opt.step()
    ema_update(model.teacher_modules(), model.student_modules(), momentum)
    if hyper.center_momentum > 0:
        with torch.no_grad():
            model.teacher_center.lerp_(t_raw.mean(dim=0), 1.0 - hyper.center_momentum)
    state.step += 1
    stats = dict(
        loss=loss.item(), l_ce=l_ce.item(), r=r.item(), lr=lr, wd=wd, momentum=momentum,
        mean_p=student_p.detach().reshape(-1, student_p.shape[-1]).mean(dim=0).double(),
    )
    return state, stats


# ---------------------------------------------------------------- checkpoints


def _optimizer_tensors(opt: torch.optim.Optimizer) -> dict[str, Tensor]:
    out = {}
    idx = 0
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if st:
                out[f"optim.{idx}.step"] = torch.as_tensor(st["step"], dtype=torch.float64).reshape(1)
                out[f"optim.{idx}.exp_avg"] = st["exp_avg"]
                out[f"optim.{idx}.exp_avg_sq"] = st["exp_avg_sq"]
            idx += 1
    return out


def _restore_optimizer(opt: torch.optim.Optimizer, tensors: dict) -> None:
    idx = 0
    for group in opt.param_groups:
        for p in group["params"]:
            key = f"optim.{idx}.step"
            if key in tensors:
                opt.state[p] = {
                    "step": torch.tensor(float(tensors[key][0])),
                    "exp_avg": torch.from_numpy(tensors[f"optim.{idx}.exp_avg"]).clone(),
                    "exp_avg_sq": torch.from_numpy(tensors[f"optim.{idx}.exp_avg_sq"]).clone(),
                }
            idx += 1


def save_state(path, state: TrainState, cfg: RunConfig) -> Path:
    return save_model(
        path, state.model, cfg,
        extra_tensors=_optimizer_tensors(state.optimizer),
        extra_meta={"step": state.step, "epoch": state.epoch, "seed": state.seed.root_seed},
    )


def load_state(path, cfg: RunConfig) -> TrainState:
    model, rest, meta = load_model(path)
    opt = build_optimizer(model, cfg["train.beta1"], cfg["train.beta2"])
    _restore_optimizer(opt, rest)
    return TrainState(model, opt, SeedStream(int(meta["seed"])), int(meta["step"]), int(meta["epoch"]))


# ---------------------------------------------------------------- loop


def epoch_order(seed: SeedStream, epoch: int, n: int) -> np.ndarray:
    return seed.child("shuffle", epoch).rng().permutation(n)


def build_batch(ds: PatchDataset, indices, policy: ViewPolicy, seed: SeedStream, epoch: int) -> list[ViewBundle]:
    views = seed.child("views").child("epoch", epoch)
    return [make_views(ds.sample(int(i)), policy, views.child("sample", int(i))) for i in indices]


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def pretrain(cfg: RunConfig, data, out_dir, resume=None) -> Path:
    """Train from scratch (or from ``resume``) and return the final checkpoint path.

    ``out_dir`` receives ``loss_log.csv`` (one line per step),
    ``epoch_log.csv`` (mean loss and prototype-usage entropy per epoch),
    periodic ``checkpoint_epochNNNN`` directories and ``final``.
    """
    ds = data if isinstance(data, PatchDataset) else load_patch_dataset(data)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if ds.normalized.shape[-1] != cfg["encoder.in_channels"]:
        raise ValueError(f"dataset has {ds.normalized.shape[-1]} channels, encoder expects {cfg['encoder.in_channels']}")

    bs = cfg["train.batch_size"]
    spe = steps_per_epoch(len(ds), bs)
    hyper = Hyper.from_config(cfg, spe)
    policy = ViewPolicy.from_config(cfg)
    state = load_state(resume, cfg) if resume else new_state(cfg)
    max_steps = cfg["train.max_steps"]

    loss_log = out / "loss_log.csv"
    epoch_log = out / "epoch_log.csv"
    if not resume:
        loss_log.write_text(LOSS_LOG_HEADER)
        epoch_log.write_text("epoch,loss,usage_entropy\n")

    def done() -> bool:
        return bool(max_steps) and state.step >= max_steps

    while state.epoch < cfg["train.epochs"] and not done():
        order = epoch_order(state.seed, state.epoch, len(ds))
        usage = np.zeros(state.model.prototypes.n)
        losses = []
        with loss_log.open("a") as fh:
            for start in range(0, spe * bs, bs):
                if done():
                    break
                batch = build_batch(ds, order[start : start + bs], policy, state.seed, state.epoch)
                state, stats = pretrain_step(batch, state, hyper)
                fh.write(f"{state.step},{stats['l_ce']!r},{stats['r']!r},{stats['lr']!r},"
                         f"{stats['wd']!r},{stats['momentum']!r}\n")
                usage += stats["mean_p"].numpy()
                losses.append(stats["loss"])
        if done() and len(losses) < spe:
            break
        state.epoch += 1
        h = entropy(usage / max(len(losses), 1))
        with epoch_log.open("a") as fh:
            fh.write(f"{state.epoch},{float(np.mean(losses))!r},{h!r}\n")
        log.info("epoch %d loss %.4f usage entropy %.3f", state.epoch, np.mean(losses), h)
        every = cfg["train.checkpoint_every"]
        if every and state.epoch % every == 0:
            save_state(out / f"checkpoint_epoch{state.epoch:04d}", state, cfg)
    return save_state(out / "final", state, cfg)


def read_epoch_log(path) -> list[dict]:
    lines = Path(path).read_text().strip().splitlines()[1:]
    return [dict(epoch=int(e), loss=float(l), usage_entropy=float(h))
            for e, l, h in (line.split(",") for line in lines)]


def read_loss_log(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
