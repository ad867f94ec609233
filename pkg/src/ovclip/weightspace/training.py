"""Fine-tuning with interpolated weight regularization and weight averaging.

Each step evaluates the batch loss at the current weights and, when the
regularizer is on, again at a random interpolation toward the anchor
weights.  Since the penalty weight is C / (1 - alpha), the chain-rule
factor (1 - alpha) cancels and the update direction is

    g(theta) + C * g(alpha * theta_anchor + (1 - alpha) * theta)

with both gradients taken w.r.t. the weights they were evaluated at.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .. import numkit as nk
from ..errors import InvalidArgument, InvalidConfig, NumericFailure
from ..model import INV_TEMP_RANGE, as_tensors, encode_texts, encode_videos, is_text_param
from ..objectives import combined_caption_loss, contrastive_loss, l2_anchor_loss
from .checkpoint import Checkpoint, SwaState, _require_compatible, swa_update

log = logging.getLogger(__name__)

MAX_R = 0.95


@dataclass
class IwrConfig:
    R: float = 0.6
    C: float = 0.5
    gamma: float = 4.0
    lr: float = 0.5
    lr_floor: float = 0.005
    warmup_epochs: int = 1
    epochs: int = 12
    batch_size: int = 24
    momentum: float = 0.0
    l2_anchor: float = 0.0
    window: int = 3
    freeze_text: bool = True
    caption_at_theta: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.R <= MAX_R:
            raise InvalidConfig(f"R must lie in [0, {MAX_R}], got {self.R}")
        if self.C < 0 or self.gamma < 0 or self.l2_anchor < 0:
            raise InvalidConfig("C, gamma and l2_anchor must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise InvalidConfig("epochs and batch_size must be positive")
        if self.warmup_epochs >= self.epochs:
            raise InvalidConfig("warmup must be shorter than training")


@dataclass
class TrainData:
    clips: np.ndarray  # (N, T, H, W)
    label_ids: np.ndarray  # (N, L) padded token ids
    caption_ids: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.clips)


def sample_alpha(cfg: IwrConfig, rng: np.random.Generator) -> float:
    """alpha ~ U[0, R)."""
    if cfg.R == 0:
        return 0.0
    return float(rng.uniform(0.0, cfg.R))


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, n // batch_size)


def lr_at(step: int, cfg: IwrConfig, spe: int) -> float:
    """Linear ramp from the floor to lr during warmup, then cosine decay back (1-based steps)."""
    warm = cfg.warmup_epochs * spe
    total = cfg.epochs * spe
    if step <= warm:
        return cfg.lr_floor + (cfg.lr - cfg.lr_floor) * step / warm
    frac = (step - warm - 1) / max(1, total - warm - 1)
    return cfg.lr_floor + 0.5 * (cfg.lr - cfg.lr_floor) * (1.0 + math.cos(math.pi * frac))


def batch_order(n: int, batch_size: int, epochs: int, rng: np.random.Generator):
    """Yield index arrays; a fresh permutation each epoch, last partial batch dropped."""
    spe = steps_per_epoch(n, batch_size)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for i in range(spe):
            yield perm[i * batch_size:(i + 1) * batch_size]


def _trainable(cfg: IwrConfig) -> Callable[[str], bool]:
    if cfg.freeze_text:
        return lambda k: not is_text_param(k)
    return lambda k: True


def batch_loss(P: Mapping[str, nk.Tensor], data: TrainData, idx: np.ndarray, window: int,
               gamma: float):
    """Label contrastive loss plus gamma times the caption contrastive loss."""
    v = encode_videos(P, data.clips[idx], window)
    scale = nk.clip(P["logit_scale"], *INV_TEMP_RANGE)
    loss = contrastive_loss(v, encode_texts(P, _trim(data.label_ids[idx])), scale)
    if gamma > 0:
        if data.caption_ids is None:
            raise InvalidArgument("gamma > 0 needs captions")
        cap = contrastive_loss(v, encode_texts(P, _trim(data.caption_ids[idx])), scale)
        loss = combined_caption_loss(loss, cap, gamma)
    return loss


def _trim(ids: np.ndarray) -> np.ndarray:
    keep = int((ids != 0).any(axis=0).nonzero()[0].max()) + 1
    return ids[:, :keep]


def _grad(theta: Mapping[str, np.ndarray], loss_fn, trainable) -> tuple[float, dict[str, np.ndarray]]:
    P = as_tensors(theta, trainable)
    loss = loss_fn(P)
    value = float(loss.data)
    tape = nk.backward(loss, P)
    return value, dict(tape)


def iwr_gradient(theta: Mapping[str, np.ndarray], theta_anchor: Mapping[str, np.ndarray], alpha: float,
                 C: float, loss_fn, trainable=None, interp_loss_fn=None, return_losses: bool = False):
    """g(theta) + C * g(alpha * anchor + (1 - alpha) * theta).

    ``loss_fn`` maps a dict of leaf tensors to a scalar tensor;
    ``interp_loss_fn`` (default: the same) is used at the interpolated point.
    """
    if set(theta) != set(theta_anchor):
        raise InvalidArgument("theta and anchor have different parameter names")
    plain, g = _grad(theta, loss_fn, trainable)
    if not np.isfinite(plain):
        raise NumericFailure(f"non-finite loss at theta ({plain})", term="plain", alpha=alpha)
    interp_loss = None
    if C != 0:
        tilde = {k: (alpha * theta_anchor[k] + (1.0 - alpha) * theta[k]).astype(theta[k].dtype) for k in theta}
        interp_loss, gi = _grad(tilde, interp_loss_fn or loss_fn, trainable)
        if not np.isfinite(interp_loss):
            raise NumericFailure(f"non-finite loss at interpolated weights ({interp_loss})",
                                 term="interpolated", alpha=alpha)
        g = {k: g[k] + C * gi[k] for k in g}
    if return_losses:
        return g, plain, interp_loss
    return g


def train(theta_init: Checkpoint, theta_anchor: Checkpoint, data: TrainData, cfg: IwrConfig,
          swa: SwaState | None = None, on_step: Callable[[int, dict], None] | None = None,
          on_log: Callable[[dict], None] | None = None,
          loss_fn: Callable | None = None) -> tuple[Checkpoint, SwaState | None]:
    """Run ``cfg.epochs`` of SGD from ``theta_init`` with ``theta_anchor`` as the IWR anchor.

    ``loss_fn(P, idx, gamma)`` replaces the model batch loss (used for
    surrogate checks); it defaults to the video-text contrastive loss.
    """
    _require_compatible(theta_init, theta_anchor)
    if loss_fn is None:
        def loss_fn(P, idx, gamma):
            return batch_loss(P, data, idx, cfg.window, gamma)
    trainable = _trainable(cfg)
    spe = steps_per_epoch(len(data), cfg.batch_size)
    batch_ss, alpha_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    batch_rng = np.random.default_rng(batch_ss)
    alpha_rng = np.random.default_rng(alpha_ss)
    theta = {k: v.copy() for k, v in theta_init.items()}
    anchor = dict(theta_anchor.items())
    velocity = {k: np.zeros_like(v) for k, v in theta.items()} if cfg.momentum else None

    use_iwr = cfg.C > 0
    for step, idx in enumerate(batch_order(len(data), cfg.batch_size, cfg.epochs, batch_rng), start=1):
        alpha = sample_alpha(cfg, alpha_rng) if use_iwr else 0.0
        # literal pseudocode variant: interpolated caption term stays at theta, weighted by beta
        cap_boost = cfg.C / (1.0 - alpha) if (use_iwr and cfg.caption_at_theta) else 0.0

        def plain_loss(P):
            loss = loss_fn(P, idx, cfg.gamma * (1.0 + cap_boost))
            if cfg.l2_anchor > 0:
                names = [k for k in P if trainable(k)]
                loss = nk.add(loss, l2_anchor_loss(P, anchor, cfg.l2_anchor, names))
            return loss

        def interp_loss(P):
            gamma = 0.0 if cfg.caption_at_theta else cfg.gamma
            return loss_fn(P, idx, gamma)

        try:
            g, loss, iloss = iwr_gradient(theta, anchor, alpha, cfg.C, plain_loss, trainable,
                                          interp_loss_fn=interp_loss, return_losses=True)
        except NumericFailure as exc:
            raise NumericFailure(f"training diverged at step {step} (alpha={alpha:.4f}): {exc}",
                                 term=exc.term, step=step, alpha=alpha) from exc

        lr = lr_at(step, cfg, spe)
        for k in theta:
            if not trainable(k):
                continue
            if velocity is not None:
                velocity[k] = cfg.momentum * velocity[k] + g[k]
                theta[k] = theta[k] - lr * velocity[k]
            else:
                theta[k] = theta[k] - lr * g[k]

        if swa is not None and swa.due(step):
            swa = swa_update(swa, theta)
        if on_step is not None:
            on_step(step, theta)
        if on_log is not None:
            on_log({"step": step, "loss": loss, "interp_loss": iloss, "alpha": alpha, "lr": lr})
        if step % spe == 0:
            log.info("epoch %d step %d loss %.4f lr %.4g", step // spe, step, loss, lr)

    meta = dict(theta_init.meta)
    meta.update({"step": str(step), "seed": str(cfg.seed)})
    return Checkpoint(theta, meta), swa
