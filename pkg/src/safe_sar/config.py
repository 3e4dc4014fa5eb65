"""Flat ``key=value`` run configuration.

One entry per line; ``#`` starts a comment; blank lines are ignored. Later
duplicates override earlier ones. Every key is declared in :data:`DEFAULTS`
with its type, and unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Mapping


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    default: Any
    kind: type
    doc: str


# fmt: off
DEFAULTS: dict[str, Key] = {
    "seed": Key(0, int, "root seed of every random stream"),

    "data.norm_low_pct": Key(1.0, float, "percentile of log-amplitude mapped to 0"),
    "data.norm_high_pct": Key(99.0, float, "percentile of log-amplitude mapped to 1"),
    "data.despeckle_window": Key(5, int, "boxcar window of the default despeckler"),
    "data.despeckle_command": Key("", str, "external despeckler command; empty selects boxcar"),

    "encoder.token_size": Key(8, int, "tokenizer kernel and stride in pixels"),
    "encoder.embed_dim": Key(192, int, "feature dimension d_f"),
    "encoder.depth": Key(6, int, "number of transformer blocks"),
    "encoder.n_heads": Key(3, int, "attention heads per block"),
    "encoder.mlp_ratio": Key(4.0, float, "hidden width of block MLPs relative to d_f"),
    "encoder.in_channels": Key(1, int, "polarization channels (1 or 4)"),

    "objective.proj_dim": Key(192, int, "projection dimension d_g"),
    "objective.proj_hidden": Key(384, int, "hidden width of the projection MLP"),
    "objective.proj_layers": Key(3, int, "linear layers in the projection MLP"),
    "objective.proj_norm": Key("batch", str, "normalization after hidden projection layers: batch or none"),
    "objective.n_prototypes": Key(256, int, "number of prototypes n"),
    "objective.tau_student": Key(0.1, float, "student softmax temperature"),
    "objective.tau_teacher": Key(0.04, float, "teacher softmax temperature"),
    "objective.lambda": Key(1.0, float, "weight of the mean-entropy term"),
    "objective.center_momentum": Key(0.0, float, "EMA momentum of the teacher score centre (0 disables centering)"),
    "objective.entropy_sign": Key(-1.0, float, "sign applied to lambda*R in the minimized loss"),

    "train.batch_size": Key(64, int, "patches per optimization step"),
    "train.epochs": Key(30, int, "passes over the dataset"),
    "train.max_steps": Key(0, int, "stop after this many steps (0 = no limit)"),
    "train.lr": Key(1e-3, float, "peak learning rate after warmup"),
    "train.min_lr": Key(1e-6, float, "learning rate at the end of the cosine decay"),
    "train.warmup_epochs": Key(10, int, "linear warmup length from lr 0"),
    "train.wd_start": Key(0.04, float, "initial weight decay"),
    "train.wd_end": Key(0.4, float, "final weight decay (cosine schedule)"),
    "train.momentum_start": Key(0.9995, float, "initial EMA momentum"),
    "train.momentum_end": Key(1.0, float, "final EMA momentum (linear schedule)"),
    "train.beta1": Key(0.9, float, "AdamW first-moment decay"),
    "train.beta2": Key(0.999, float, "AdamW second-moment decay"),
    "train.clip_grad": Key(3.0, float, "global gradient-norm clip (0 disables)"),
    "train.mask_p": Key(0.3, float, "fraction of student tokens dropped"),
    "train.checkpoint_every": Key(10, int, "epochs between periodic checkpoints (0 = final only)"),

    "augment.q_sub": Key(0.5, float, "probability that a local view is a sub-aperture view"),
    "augment.shift_a": Key(0.0, float, "lower bound of the log-amplitude shift"),
    "augment.shift_b": Key(0.3, float, "upper bound of the log-amplitude shift"),
    "augment.n_global": Key(2, int, "student global views"),
    "augment.n_local": Key(3, int, "student local views"),
    "augment.global_size": Key(64, int, "global crop size"),
    "augment.local_size": Key(32, int, "local crop size"),
    "augment.rho": Key(0.32, float, "kept bandwidth fraction of sub-aperture views"),
    "augment.recenter": Key(False, bool, "recenter the spectrum on its centroid before cropping"),

    "probe.branch": Key("teacher", str, "encoder used for downstream features: teacher|student"),
    "probe.feature": Key("z", str, "feature fed to probes: z|h|s"),
    "probe.method": Key("knn", str, "few-shot classifier: knn|linear"),
    "probe.k": Key(1, int, "neighbours of the k-NN classifier"),
    "probe.epochs": Key(300, int, "linear-probe epochs"),
    "probe.lr": Key(3e-3, float, "linear-probe Adam learning rate"),
    "probe.labels_per_class": Key(5, int, "few-shot labels per class"),
    "probe.trials": Key(10, int, "few-shot trials"),
    "probe.batch_size": Key(64, int, "patches per feature-extraction batch"),

    "seg.patch_sizes": Key("16,32,64", str, "comma-separated patch sizes of the three branches"),
    "seg.stride": Key(32, int, "feature-grid stride"),
    "seg.reduced_dim": Key(64, int, "channels after the 1x1 reduction"),
    "seg.n_classes": Key(3, int, "segmentation classes"),
    "seg.epochs": Key(100, int, "head training epochs"),
    "seg.lr": Key(3.125e-5, float, "initial head learning rate"),
    "seg.milestones": Key("40,80", str, "epochs at which the lr is divided by 10"),
    "seg.weight_decay": Key(0.01, float, "AdamW weight decay of the head"),
    "seg.batch_size": Key(4, int, "images per head update"),
    "seg.val_fraction": Key(0.25, float, "share of images held out for validation"),

    "detect.threshold": Key(0.8, float, "cosine threshold of retained cells"),
    "detect.patch": Key(64, int, "detection patch size"),
    "detect.stride": Key(4, int, "detection stride"),
    "detect.center": Key(False, bool, "subtract the mean grid feature before the cosine"),

    "visualize.patch": Key(64, int, "visualization patch size"),
    "visualize.stride": Key(16, int, "visualization stride"),
    "visualize.reducer": Key("pca", str, "pca|external"),
    "visualize.command": Key("", str, "external reducer command"),
}
# fmt: on

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def coerce(key: str, raw: str, kind: type) -> Any:
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


def parse_kv(text: str) -> list[tuple[int, str, str]]:
    """Split ``key=value`` text into ``(line_no, key, raw_value)`` triples."""
    entries = []
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key or any(c.isspace() for c in key):
            raise ConfigError(f"line {no}: malformed entry {line!r}")
        entries.append((no, key, value.strip()))
    return entries


class RunConfig(Mapping[str, Any]):
    """Immutable mapping of every declared key to its value."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        self._values = {k: spec.default for k, spec in DEFAULTS.items()}
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            kind = DEFAULTS[key].kind
            if isinstance(value, str) and kind is not str:
                value = coerce(key, value, kind)
            elif kind is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            elif not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
                raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}")
            self._values[key] = value

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        return RunConfig({**self._values, **overrides})

    def to_text(self, keys: Iterable[str] | None = None) -> str:
        keys = list(keys) if keys is not None else list(self._values)
        return "".join(f"{k}={_fmt(self._values[k])}\n" for k in keys)

    def section(self, prefix: str) -> dict[str, Any]:
        """Values under ``prefix.`` with the prefix stripped."""
        head = prefix + "."
        return {k[len(head):]: v for k, v in self._values.items() if k.startswith(head)}

    def __repr__(self) -> str:
        changed = {k: v for k, v in self._values.items() if v != DEFAULTS[k].default}
        return f"RunConfig({changed})"


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str) -> RunConfig:
    values: dict[str, Any] = {}
    for no, key, raw in parse_kv(text):
        if key not in DEFAULTS:
            raise ConfigError(f"line {no}: unknown key {key!r}")
        values[key] = coerce(key, raw, DEFAULTS[key].kind)
    return RunConfig(values)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def parse_int_list(raw: str) -> list[int]:
    return [int(tok) for tok in raw.replace(" ", "").split(",") if tok]
