"""Student/teacher model bundle and its checkpoint round trip."""

from __future__ import annotations

import copy
from pathlib import Path

import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config
from .encoder import EncoderConfig, SafeEncoder
from .objective import ProjectionHead, PrototypeBank, prototype_scores
from .seeding import SeedStream


class SafeModel(nn.Module):
    """Student encoder and head, their EMA teacher copies and the shared prototypes."""

    def __init__(self, enc_cfg: EncoderConfig, proj_dim=192, proj_hidden=384, proj_layers=3, n_prototypes=256,
                 proj_norm: str = "batch", seed: SeedStream | None = None):
        super().__init__()
        seed = seed or SeedStream(0)
        with torch.random.fork_rng():
            torch.manual_seed(seed.child("init").int_seed())
            self.student_encoder = SafeEncoder(enc_cfg)
            self.student_head = ProjectionHead(enc_cfg.embed_dim, proj_dim, proj_hidden, proj_layers, proj_norm)
        self.prototypes = PrototypeBank(proj_dim, n_prototypes, seed.child("prototypes").torch_generator())
        # running mean of teacher scores, subtracted from them when centering is enabled
        self.register_buffer("teacher_center", torch.zeros(n_prototypes))
        self.teacher_encoder = copy.deepcopy(self.student_encoder)
        self.teacher_head = copy.deepcopy(self.student_head)
        for p in (*self.teacher_encoder.parameters(), *self.teacher_head.parameters()):
            p.requires_grad_(False)
        self.arch = dict(proj_dim=proj_dim, proj_hidden=proj_hidden, proj_layers=proj_layers,
                         n_prototypes=n_prototypes, proj_norm=proj_norm)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "SafeModel":
        return cls(
            EncoderConfig.from_config(cfg),
            proj_dim=cfg["objective.proj_dim"],
            proj_hidden=cfg["objective.proj_hidden"],
            proj_layers=cfg["objective.proj_layers"],
            n_prototypes=cfg["objective.n_prototypes"],
            proj_norm=cfg["objective.proj_norm"],
            seed=SeedStream(cfg["seed"]),
        )

    def student_modules(self) -> list[nn.Module]:
        return [self.student_encoder, self.student_head]

    def teacher_modules(self) -> list[nn.Module]:
        return [self.teacher_encoder, self.teacher_head]

    def branch(self, name: str) -> tuple[SafeEncoder, ProjectionHead]:
        if name == "teacher":
            return self.teacher_encoder, self.teacher_head
        if name == "student":
            return self.student_encoder, self.student_head
        raise ValueError(f"unknown branch {name!r}")


class FeatureExtractor(nn.Module):
    """Frozen encoder that outputs ``z``, the projection ``h`` or the prototype scores ``s``."""

    def __init__(self, encoder: SafeEncoder, head: ProjectionHead | None = None, Q: torch.Tensor | None = None,
                 feature: str = "z"):
        super().__init__()
        if feature not in ("z", "h", "s"):
            raise ValueError(f"feature must be z, h or s, got {feature!r}")
        if feature != "z" and head is None:
            raise ValueError(f"feature {feature!r} needs the projection head")
        self.encoder, self.head, self.feature = encoder, head, feature
        self.register_buffer("Q", Q if Q is not None else torch.empty(0))
        self.eval()

    @property
    def cfg(self) -> EncoderConfig:
        return self.encoder.cfg

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.encoder(x)
        if self.feature == "z":
            return z
        h = self.head(z)
        return h if self.feature == "h" else prototype_scores(h, self.Q)


def model_meta(model: SafeModel) -> dict:
    meta = {f"encoder.{k}": v for k, v in model.student_encoder.cfg.to_dict().items()}
    meta.update({f"objective.{k}": v for k, v in model.arch.items()})
    return meta


def save_model(path, model: SafeModel, cfg: RunConfig | None = None, extra_tensors=None, extra_meta=None) -> Path:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors.update(extra_tensors or {})
    meta = model_meta(model)
    meta.update(extra_meta or {})
    files = {"config.cfg": cfg.to_text()} if cfg is not None else None
    return save_checkpoint(path, tensors, meta, files)


def model_from_meta(meta: dict[str, str]) -> SafeModel:
    enc = EncoderConfig(
        token_size=int(meta["encoder.token_size"]),
        embed_dim=int(meta["encoder.embed_dim"]),
        depth=int(meta["encoder.depth"]),
        n_heads=int(meta["encoder.n_heads"]),
        mlp_ratio=float(meta["encoder.mlp_ratio"]),
        in_channels=int(meta["encoder.in_channels"]),
    )
    return SafeModel(
        enc,
        proj_dim=int(meta["objective.proj_dim"]),
        proj_hidden=int(meta["objective.proj_hidden"]),
        proj_layers=int(meta["objective.proj_layers"]),
        n_prototypes=int(meta["objective.n_prototypes"]),
        proj_norm=meta.get("objective.proj_norm", "none"),
    )


def load_model(path) -> tuple[SafeModel, dict[str, object], dict[str, str]]:
    """Model, the non-model tensors (optimizer state etc.) and the manifest meta."""
    tensors, meta = load_checkpoint(path)
    model = model_from_meta(meta)
    state = {k[len("model."):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    rest = {k: v for k, v in tensors.items() if not k.startswith("model.")}
    return model, rest, meta


def load_run_config(path) -> RunConfig | None:
    cfg_file = Path(path) / "config.cfg"
    return parse_config(cfg_file.read_text(encoding="utf-8")) if cfg_file.exists() else None


def load_feature_extractor(path, branch: str = "teacher", feature: str = "z") -> FeatureExtractor:
    model, _, _ = load_model(path)
    encoder, head = model.branch(branch)
    return FeatureExtractor(encoder, head, model.prototypes.Q.detach(), feature)
