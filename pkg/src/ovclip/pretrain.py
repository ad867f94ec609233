"""Image-caption contrastive pretraining that produces the anchor weights.

Static images are fed as single-frame clips, so the result is equally an
image model and a video model on static videos.  Adam is used here only;
video fine-tuning uses plain SGD.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .datagen import Dataset, pad_batch, tokenize
from .model import INV_TEMP_RANGE, as_tensors, encode_texts, encode_videos, init_params
from .objectives import contrastive_loss
from .weightspace import Checkpoint

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-3
    warmup_epochs: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


def _lr(t: int, peak: float, warm: int, total: int) -> float:
    if t <= warm:
        return peak * t / warm
    return peak * 0.5 * (1 + np.cos(np.pi * (t - warm) / max(1, total - warm)))


def pretrain(ds: Dataset, cfg: PretrainConfig = PretrainConfig(), on_log=None) -> Checkpoint:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    theta = init_params(cfg.seed)
    images = np.stack([s.image for s in ds.pretrain])[:, None]  # (N, 1, H, W)
    caps = [[tokenize(c) for c in s.captions] for s in ds.pretrain]
    m = {k: np.zeros_like(v) for k, v in theta.items()}
    v = {k: np.zeros_like(v) for k, v in theta.items()}
    n = len(images)
    spe = max(1, n // cfg.batch_size)
    t = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for i in range(spe):
            idx = perm[i * cfg.batch_size:(i + 1) * cfg.batch_size]
            pick = rng.integers(0, len(caps[0]), size=len(idx))
            ids = pad_batch([caps[j][c] for j, c in zip(idx, pick)])
            P = as_tensors(theta)
            ve = encode_videos(P, images[idx], window=1)
            te = encode_texts(P, ids)
            loss = contrastive_loss(ve, te, nk.clip(P["logit_scale"], *INV_TEMP_RANGE))
            grads = nk.backward(loss, P)
            t += 1
            lr = _lr(t, cfg.lr, cfg.warmup_epochs * spe, cfg.epochs * spe)
            for k in theta:
                g = grads[k]
                m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g
                v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * g * g
                mhat = m[k] / (1 - cfg.beta1**t)
                vhat = v[k] / (1 - cfg.beta2**t)
                # the temperature gets a larger step so it can leave its init within the budget
                scale = 30.0 if k == "logit_scale" else 1.0
                theta[k] = (theta[k] - scale * lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(np.float32)
        if on_log is not None:
            on_log({"epoch": epoch + 1, "loss": float(loss.data)})
        log.info("pretrain epoch %d loss %.4f", epoch + 1, float(loss.data))
    return Checkpoint(theta, {"phase": "pretrain", "seed": str(cfg.seed), "step": str(t)})
