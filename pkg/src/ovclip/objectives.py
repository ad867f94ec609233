"""Contrastive video-text losses and the l2 weight-anchor penalty."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import numkit as nk
from .errors import InvalidArgument
from .numkit import Tensor

UNIT_TOL = 1e-3


def _check_unit(x: Tensor, what: str) -> None:
    norms = np.linalg.norm(np.asarray(x.data, dtype=np.float64), axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise InvalidArgument(f"{what} embeddings are not unit-norm (max dev {np.abs(norms - 1).max():.2e})")


def contrastive_loss(videos, texts, inv_temp) -> Tensor:
    """Symmetric InfoNCE over an index-aligned batch.

    Row i of ``videos`` matches row i of ``texts``; every other row is a
    negative, including rows that happen to share a label.
    """
    videos, texts, inv_temp = nk.tensor(videos), nk.tensor(texts), nk.tensor(inv_temp)
    if videos.ndim != 2 or videos.shape != texts.shape or videos.shape[0] < 1:
        raise InvalidArgument(f"expected matching (n, d) batches, got {videos.shape} and {texts.shape}")
    _check_unit(videos, "video")
    _check_unit(texts, "text")
    n = videos.shape[0]
    logits = nk.mul(nk.matmul(videos, nk.swap_last(texts)), inv_temp)
    diag = Tensor(np.eye(n))
    v2t = nk.log_softmax_lastdim(logits)
    t2v = nk.log_softmax_lastdim(nk.swap_last(logits))
    picked = nk.add(nk.tsum(nk.mul(v2t, diag)), nk.tsum(nk.mul(t2v, diag)))
    return nk.mul(picked, -0.5 / n)


def combined_caption_loss(loss_label, loss_caption, gamma: float):
    """label loss + gamma * caption loss."""
    if gamma < 0:
        raise InvalidArgument("gamma must be nonnegative")
    if isinstance(loss_label, Tensor) or isinstance(loss_caption, Tensor):
        if gamma == 0:
            return nk.tensor(loss_label)
        return nk.add(loss_label, nk.mul(loss_caption, gamma))
    if not (np.isfinite(loss_label) and np.isfinite(loss_caption)):
        raise InvalidArgument("losses must be finite")
    return loss_label + gamma * loss_caption


def l2_anchor_loss(theta: Mapping, anchor: Mapping[str, np.ndarray], mu: float, names=None):
    """mu * sum_k ||theta_k - anchor_k||^2.

    Works on plain arrays (returns a float) or on leaf tensors (returns a
    differentiable scalar).  ``names`` restricts the penalty to a subset.
    """
    if mu < 0:
        raise InvalidArgument("mu must be nonnegative")
    if set(theta) != set(anchor):
        raise InvalidArgument("parameter names differ from the anchor")
    keys = sorted(theta) if names is None else sorted(names)
    for k in keys:
        if np.shape(theta[k]) != np.shape(anchor[k]):
            raise InvalidArgument(f"shape mismatch for {k}: {np.shape(theta[k])} vs {np.shape(anchor[k])}")
    if any(isinstance(v, Tensor) for v in theta.values()):
        total = Tensor(0.0)
        for k in keys:
            diff = nk.sub(theta[k], Tensor(anchor[k]))
            total = nk.add(total, nk.tsum(nk.square(diff)))
        return nk.mul(total, mu)
    if mu == 0:
        return 0.0
    acc = sum(float(np.sum((np.asarray(theta[k], np.float64) - anchor[k]) ** 2)) for k in keys)
    return mu * acc
