"""Checkpoints: a directory of SAFT containers plus a ``manifest.cfg``.

The manifest is in the ``key=value`` config format. ``meta.<key>`` lines
carry scalars (step, epoch, architecture); ``tensor.<name>=<dtype>:<shape>``
lines list every stored tensor with its logical dtype and shape; the
payload lives in ``tensors/<name>.saft``. Scalars are stored as length-1
vectors and int64 counters as int32, both restored on load.
"""

from __future__ import annotations

import os
import shutil
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .config import parse_kv
from .container import ContainerError, read_tensor, write_tensor

MANIFEST = "manifest.cfg"


def _as_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    return np.asarray(t)


def save_checkpoint(path, tensors: Mapping[str, object], meta: Mapping[str, object], extra_files=None) -> Path:
    """Write atomically: build in a sibling temp dir, then swap into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    try:
        (tmp / "tensors").mkdir()
        lines = [f"meta.{k}={v}" for k, v in meta.items()]
        for name, value in tensors.items():
            arr = _as_numpy(value)
            lines.append(f"tensor.{name}={arr.dtype.name}:{','.join(map(str, arr.shape))}")
            stored = arr.reshape(1) if arr.ndim == 0 else arr
            if stored.dtype == np.int64:
                if stored.size and (stored.min() < -(2**31) or stored.max() >= 2**31):
                    raise ContainerError(f"{name}: int64 values do not fit in int32")
                stored = stored.astype(np.int32)
            write_tensor(tmp / "tensors" / f"{name}.saft", stored)
        (tmp / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
        for fname, text in (extra_files or {}).items():
            (tmp / fname).write_text(text, encoding="utf-8")
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            shutil.rmtree(old, ignore_errors=True)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    manifest = path / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for _, key, value in parse_kv(manifest.read_text(encoding="utf-8")):
        kind, _, name = key.partition(".")
        if kind == "meta":
            meta[name] = value
        elif kind == "tensor":
            arr = read_tensor(path / "tensors" / f"{name}.saft")
            dtype, _, dims = value.partition(":")
            shape = tuple(int(s) for s in dims.split(",") if s)
            if arr.size != int(np.prod(shape)) or (shape and arr.shape != shape):
                raise ContainerError(f"{name}: manifest shape {shape} != stored {arr.shape}")
            tensors[name] = arr.reshape(shape).astype(np.dtype(dtype), copy=False)
    return tensors, meta
