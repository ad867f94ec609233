"""Checkpoints and the linear algebra of weight space."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from ..errors import InvalidArgument


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.tensors = {k: np.asarray(self.tensors[k]) for k in sorted(self.tensors)}
        self.meta = {str(k): str(v) for k, v in self.meta.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def signature(self) -> tuple:
        return tuple((k, v.shape) for k, v in self.tensors.items())

    def compatible(self, other: "Checkpoint") -> bool:
        return self.signature() == other.signature()

    def digest(self) -> str:
        """Content hash over names, shapes, dtypes and raw bytes (metadata excluded)."""
        h = hashlib.sha256()
        for k, v in self.tensors.items():
            h.update(k.encode())
            h.update(repr((v.shape, v.dtype.str)).encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "Checkpoint":
        return Checkpoint({k: v.astype(dtype) for k, v in self.items()}, dict(self.meta))

    def copy(self) -> "Checkpoint":
        return Checkpoint({k: v.copy() for k, v in self.items()}, dict(self.meta))


def _require_compatible(a: Checkpoint, b: Checkpoint) -> None:
    if not a.compatible(b):
        missing = set(a.tensors) ^ set(b.tensors)
        detail = f"names differ: {sorted(missing)[:3]}" if missing else "shapes differ"
        raise InvalidArgument(f"checkpoints are not algebra-compatible ({detail})")


def interpolate(a: Checkpoint, b: Checkpoint, lam: float) -> Checkpoint:
    """lam * a + (1 - lam) * b, tensor by tensor."""
    if not 0.0 <= lam <= 1.0:
        raise InvalidArgument(f"interpolation ratio {lam} outside [0, 1]")
    _require_compatible(a, b)
    if lam == 1.0:
        out = {k: v.copy() for k, v in a.items()}
    elif lam == 0.0:
        out = {k: v.copy() for k, v in b.items()}
    else:
        out = {k: (lam * a[k] + (1.0 - lam) * b[k]).astype(a[k].dtype) for k in a}
    meta = {"parent_a": a.digest()[:16], "parent_b": b.digest()[:16], "lambda": repr(float(lam))}
    return Checkpoint(out, meta)


def final_patch(theta_clip: Checkpoint, theta_swa: Checkpoint, lam: float) -> Checkpoint:
    """Inference-time patch between the pretrained and the averaged weights."""
    return interpolate(theta_clip, theta_swa, lam)


def mean_checkpoint(ckpts: Iterable[Checkpoint]) -> Checkpoint:
    ckpts = list(ckpts)
    if not ckpts:
        raise InvalidArgument("mean of zero checkpoints")
    for c in ckpts[1:]:
        _require_compatible(ckpts[0], c)
    out = {}
    for k, v in ckpts[0].items():
        acc = np.zeros(v.shape, dtype=np.float64)
        for c in ckpts:
            acc += c[k]
        out[k] = (acc / len(ckpts)).astype(v.dtype)
    return Checkpoint(out)


@dataclass
class SwaState:
    """Running mean of checkpoints absorbed along a training trajectory."""

    start: int = 0
    cycle: int = 1
    count: int = 0
    mean: dict[str, np.ndarray] | None = None
    dtype: str = "float32"

    def due(self, step: int) -> bool:
        return step > self.start and (step - self.start) % self.cycle == 0

    def checkpoint(self) -> Checkpoint:
        if self.mean is None:
            raise InvalidArgument("SWA state has absorbed no checkpoints")
        return Checkpoint({k: v.astype(self.dtype) for k, v in self.mean.items()},
                          {"swa_count": str(self.count)})


def swa_update(state: SwaState, theta: Checkpoint | Mapping[str, np.ndarray]) -> SwaState:
    """theta_swa <- (theta_swa * l + theta) / (l + 1); the mean is kept in float64."""
    tensors = theta.tensors if isinstance(theta, Checkpoint) else dict(theta)
    if state.mean is None:
        mean = {k: np.asarray(v, dtype=np.float64).copy() for k, v in sorted(tensors.items())}
        dtype = np.asarray(next(iter(tensors.values()))).dtype.name
    else:
        if set(tensors) != set(state.mean) or any(tensors[k].shape != state.mean[k].shape for k in state.mean):
            raise InvalidArgument("checkpoint is not compatible with the SWA average")
        l = state.count
        mean = {k: (m * l + tensors[k]) / (l + 1) for k, m in state.mean.items()}
        dtype = state.dtype
    return SwaState(state.start, state.cycle, state.count + 1, mean, dtype)
