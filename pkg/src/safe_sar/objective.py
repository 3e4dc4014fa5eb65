"""Projection head, cosine prototype scoring, losses and the EMA teacher update."""

from __future__ import annotations

from typing import Iterable

import torch
from torch import Tensor, nn


class ProjectionHead(nn.Module):
    """MLP ``d_f -> d_g``: linear layers separated by GELU.

    With ``norm="batch"`` every hidden layer is followed by BatchNorm, which
    removes the component shared by the whole batch before the prototypes
    see it. ``n_layers=1`` gives a single linear map.
    """

    def __init__(self, in_dim: int = 192, out_dim: int = 192, hidden_dim: int = 384, n_layers: int = 3,
                 norm: str = "batch"):
        super().__init__()
        if n_layers < 1:
            raise ValueError("projection head needs at least one layer")
        if norm not in ("batch", "none"):
            raise ValueError(f"norm must be 'batch' or 'none', got {norm!r}")
        dims = [in_dim] + [hidden_dim] * (n_layers - 1) + [out_dim]
        layers: list[nn.Module] = []
        for i in range(n_layers):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < n_layers - 1:
                if norm == "batch":
                    layers.append(nn.BatchNorm1d(dims[i + 1]))
                layers.append(nn.GELU())
        self.mlp = nn.Sequential(*layers)
        self.in_dim, self.out_dim, self.norm = in_dim, out_dim, norm
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)

    def forward(self, z: Tensor) -> Tensor:
        if z.shape[-1] != self.in_dim:
            raise ValueError(f"projection head expects dimension {self.in_dim}, got {z.shape[-1]}")
        return self.mlp(z)


def project(z: Tensor, head: ProjectionHead) -> Tensor:
    return head(z)


class PrototypeBank(nn.Module):
    """Learnable ``d_g x n`` matrix whose columns are the prototypes."""

    def __init__(self, dim: int = 192, n: int = 256, generator: torch.Generator | None = None):
        super().__init__()
        q = torch.randn(dim, n, generator=generator)
        self.Q = nn.Parameter(q / q.norm(dim=0, keepdim=True))

    @property
    def n(self) -> int:
        return self.Q.shape[1]


def prototype_scores(h: Tensor, Q: Tensor) -> Tensor:
    """Cosine similarity of each row of ``h`` (..., d_g) with each column of ``Q``."""
    h_norm = h.norm(dim=-1, keepdim=True)
    q_norm = Q.norm(dim=0, keepdim=True)
    if (h_norm == 0).any():
        raise ValueError("cannot score a zero projection vector")
    if (q_norm == 0).any():
        raise ValueError("prototype bank contains a zero column")
    return (h / h_norm) @ (Q / q_norm)


def tempered_softmax(s: Tensor, tau: float) -> Tensor:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = s / tau
    logits = logits - logits.max(dim=-1, keepdim=True).values
    e = logits.exp()
    return e / e.sum(dim=-1, keepdim=True)


def loss_cross_entropy(teacher_p: Tensor, student_p: Tensor) -> Tensor:
    """Mean cross-entropy between each sample's teacher target and its student views.

    ``teacher_p`` is (b, n) and ``student_p`` is (b, k-1, n). The teacher
    side is detached.
    """
    if teacher_p.ndim != 2 or student_p.ndim != 3:
        raise ValueError("expected teacher (b, n) and student (b, k-1, n) distributions")
    if teacher_p.shape[0] != student_p.shape[0] or teacher_p.shape[-1] != student_p.shape[-1]:
        raise ValueError(f"shape mismatch: {tuple(teacher_p.shape)} vs {tuple(student_p.shape)}")
    target = teacher_p.detach().unsqueeze(1)
    return -(target * student_p.log()).sum(dim=-1).mean()


def loss_mean_entropy(student_p: Tensor) -> Tensor:
    """Entropy of the average student distribution over all views in the batch."""
    if student_p.numel() == 0:
        raise ValueError("no distributions to average")
    mean_p = student_p.reshape(-1, student_p.shape[-1]).mean(dim=0)
    return torch.special.entr(mean_p).sum()


def total_loss(l_ce: Tensor, r: Tensor, lam: float = 1.0, entropy_sign: float = -1.0) -> Tensor:
    """Minimized objective. The default sign subtracts ``lam * R`` so that
    minimizing the loss maximizes the mean entropy."""
    return l_ce + entropy_sign * lam * r


def safe_loss(
    teacher_p: Tensor,
    student_h: Tensor,
    Q: Tensor,
    tau_student: float,
    lam: float = 1.0,
    entropy_sign: float = -1.0,
) -> tuple[Tensor, Tensor, Tensor]:
    """Loss from fixed teacher targets (b, n) and student projections (b, k-1, d_g).

    Returns ``(total, L_ce, R)``.
    """
    student_p = tempered_softmax(prototype_scores(student_h, Q), tau_student)
    l_ce = loss_cross_entropy(teacher_p, student_p)
    r = loss_mean_entropy(student_p)
    return total_loss(l_ce, r, lam, entropy_sign), l_ce, r


def _tensors(obj) -> list[Tensor]:
    if isinstance(obj, nn.Module):
        return list(obj.parameters())
    out: list[Tensor] = []
    for item in obj:
        out.extend(item.parameters() if isinstance(item, nn.Module) else [item])
    return out


@torch.no_grad()
def ema_update(teacher: nn.Module | Iterable[Tensor], student: nn.Module | Iterable[Tensor], m: float) -> None:
    """In place: ``teacher <- m * teacher + (1 - m) * student`` for every tensor.

    Computed as a lerp, which is exact at ``m = 0`` and ``m = 1`` and
    leaves the teacher bit-identical where it already equals the student.
    """
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {m}")
    t_params, s_params = _tensors(teacher), _tensors(student)
    if len(t_params) != len(s_params):
        raise ValueError("teacher and student have different parameter counts")
    for t, s in zip(t_params, s_params):
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
    for t, s in zip(t_params, s_params):
        t.lerp_(s.detach(), 1.0 - m)
