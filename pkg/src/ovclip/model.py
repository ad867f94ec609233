"""Toy dual encoder: a patch transformer over video frames and a text transformer.

Video tokens of frame ``t`` attend to the tokens of frames within
``(window - 1) // 2`` of ``t``; window 1 is plain per-frame attention and
window 3 lets every patch see its neighbouring frames.  The window only
changes the attention mask, never the parameters, and there are no
temporal position embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import numkit as nk
from .datagen import CELL, FRAME, MAX_TEXT_LEN, PAD_ID, VOCAB, TextSequence, pad_batch
from .errors import InvalidArgument
from .numkit import Tensor

INV_TEMP_INIT = 14.0
INV_TEMP_RANGE = (1.0, 100.0)


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32
    heads: int = 2
    layers: int = 2
    mlp_ratio: int = 4
    embed_dim: int = 16
    patch: int = CELL
    frame: int = FRAME
    vocab: int = len(VOCAB)
    max_text_len: int = MAX_TEXT_LEN

    @property
    def tokens_per_frame(self) -> int:
        return (self.frame // self.patch) ** 2


def _block_shapes(prefix: str, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.dim, cfg.dim * cfg.mlp_ratio
    out = {}
    for i in range(cfg.layers):
        p = f"{prefix}.blocks.{i}"
        out.update({
            f"{p}.ln1.g": (d,), f"{p}.ln1.b": (d,),
            f"{p}.attn.wq": (d, d), f"{p}.attn.wk": (d, d), f"{p}.attn.wv": (d, d),
            f"{p}.attn.bq": (d,), f"{p}.attn.bk": (d,), f"{p}.attn.bv": (d,),
            f"{p}.attn.wo": (d, d), f"{p}.attn.bo": (d,),
            f"{p}.ln2.g": (d,), f"{p}.ln2.b": (d,),
            f"{p}.mlp.w1": (d, h), f"{p}.mlp.b1": (h,),
            f"{p}.mlp.w2": (h, d), f"{p}.mlp.b2": (d,),
        })
    out[f"{prefix}.ln_f.g"] = (d,)
    out[f"{prefix}.ln_f.b"] = (d,)
    return out


def param_shapes(cfg: ModelConfig = ModelConfig()) -> dict[str, tuple[int, ...]]:
    d = cfg.dim
    shapes = {
        "visual.patch_embed.w": (cfg.patch * cfg.patch, d),
        "visual.patch_embed.b": (d,),
        "visual.pos_embed": (cfg.tokens_per_frame, d),
        "visual.proj": (d, cfg.embed_dim),
        "text.token_embed": (cfg.vocab, d),
        "text.pos_embed": (cfg.max_text_len, d),
        "text.proj": (d, cfg.embed_dim),
        "logit_scale": (),
    }
    shapes.update(_block_shapes("visual", cfg))
    shapes.update(_block_shapes("text", cfg))
    return dict(sorted(shapes.items()))


def init_params(seed: int, cfg: ModelConfig = ModelConfig()) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "logit_scale":
            arr = np.array(INV_TEMP_INIT)
        elif leaf == "g":
            arr = np.ones(shape)
        elif leaf.startswith("b") and len(shape) == 1:
            arr = np.zeros(shape)
        elif "embed" in name and name.endswith(("pos_embed", "token_embed")):
            arr = rng.normal(0.0, 0.1, size=shape)
        else:
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        params[name] = arr.astype(np.float32)
    return params


def is_text_param(name: str) -> bool:
    return name.startswith("text.")


# ------------------------------------------------------------------ helpers


def window_mask(frames: int, tokens_per_frame: int, window: int) -> np.ndarray:
    """Additive mask (0 / -inf) letting frame t see frames t-r..t+r."""
    if window < 1 or window % 2 == 0:
        raise InvalidArgument(f"window must be an odd positive int, got {window}")
    r = (window - 1) // 2
    f = np.repeat(np.arange(frames), tokens_per_frame)
    allowed = np.abs(f[:, None] - f[None, :]) <= r
    return np.where(allowed, 0.0, -np.inf).astype(nk.compute_dtype())


def patchify(clips: np.ndarray, patch: int) -> np.ndarray:
    """(B, T, H, W) -> (B, T * S, patch*patch) with S patches per frame, row-major."""
    B, T, H, W = clips.shape
    x = clips.reshape(B, T, H // patch, patch, W // patch, patch)
    x = x.transpose(0, 1, 2, 4, 3, 5)
    return x.reshape(B, T * (H // patch) * (W // patch), patch * patch)


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = nk.matmul(x, w)
    return y if b is None else nk.add(y, b)


def _attention(p: Mapping[str, Tensor], prefix: str, x: Tensor, heads: int, mask: np.ndarray) -> Tensor:
    B, N, D = x.shape
    hd = D // heads

    def split(t: Tensor) -> Tensor:
        return nk.transpose(nk.reshape(t, (B, N, heads, hd)), (0, 2, 1, 3))

    q = split(_linear(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"]))
    k = split(_linear(x, p[f"{prefix}.wk"], p[f"{prefix}.bk"]))
    v = split(_linear(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"]))
    y = nk.scaled_attention(q, k, v, mask)
    y = nk.reshape(nk.transpose(y, (0, 2, 1, 3)), (B, N, D))
    return _linear(y, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def _tower(p: Mapping[str, Tensor], prefix: str, x: Tensor, cfg: ModelConfig, mask: np.ndarray) -> Tensor:
    for i in range(cfg.layers):
        b = f"{prefix}.blocks.{i}"
        h = nk.layer_norm(x, p[f"{b}.ln1.g"], p[f"{b}.ln1.b"])
        x = nk.add(x, _attention(p, f"{b}.attn", h, cfg.heads, mask))
        h = nk.layer_norm(x, p[f"{b}.ln2.g"], p[f"{b}.ln2.b"])
        h = nk.gelu(_linear(h, p[f"{b}.mlp.w1"], p[f"{b}.mlp.b1"]))
        x = nk.add(x, _linear(h, p[f"{b}.mlp.w2"], p[f"{b}.mlp.b2"]))
    return nk.layer_norm(x, p[f"{prefix}.ln_f.g"], p[f"{prefix}.ln_f.b"])


def as_tensors(params: Mapping[str, np.ndarray], trainable=None) -> dict[str, Tensor]:
    """Wrap arrays as leaf tensors; ``trainable`` is a predicate on names."""
    return {
        k: Tensor(v, requires_grad=trainable is None or trainable(k), name=k)
        for k, v in params.items()
    }


def _ensure_tensors(params) -> Mapping[str, Tensor]:
    first = next(iter(params.values()))
    return params if isinstance(first, Tensor) else as_tensors(params, trainable=lambda _: False)


# ------------------------------------------------------------------ encoders


def encode_videos(params, clips: np.ndarray, window: int = 3, cfg: ModelConfig = ModelConfig()) -> Tensor:
    """Embed a batch of clips (B, T, H, W) -> (B, embed_dim) unit rows."""
    p = _ensure_tensors(params)
    clips = np.asarray(clips)
    if clips.ndim == 3:
        clips = clips[None]
    B, T = clips.shape[:2]
    S = cfg.tokens_per_frame
    mask = window_mask(T, S, window)
    patches = Tensor(patchify(clips, cfg.patch))
    x = _linear(patches, p["visual.patch_embed.w"], p["visual.patch_embed.b"])
    # spatial positions are shared by every frame
    x = nk.reshape(nk.add(nk.reshape(x, (B, T, S, cfg.dim)), p["visual.pos_embed"]), (B, T * S, cfg.dim))
    x = _tower(p, "visual", x, cfg, mask)
    # mean over tokens of a frame then over frames == mean over all tokens
    pooled = nk.mean(x, axis=1)
    return nk.l2_normalize(nk.matmul(pooled, p["visual.proj"]))


def encode_video(params, clip: np.ndarray, window: int = 3, cfg: ModelConfig = ModelConfig()) -> np.ndarray:
    return encode_videos(params, np.asarray(clip)[None], window, cfg).data[0]


def encode_texts(params, texts: list[TextSequence] | np.ndarray, cfg: ModelConfig = ModelConfig()) -> Tensor:
    p = _ensure_tensors(params)
    ids = texts if isinstance(texts, np.ndarray) else pad_batch(list(texts))
    if ids.ndim != 2:
        raise InvalidArgument("token ids must be a (batch, length) array")
    if np.any(ids < 0) or np.any(ids >= cfg.vocab):
        raise InvalidArgument("token id outside the vocabulary")
    valid = ids != PAD_ID
    if not valid.any(axis=1).all():
        raise InvalidArgument("text sequence contains only padding")
    B, N = ids.shape
    dt = nk.compute_dtype()
    key_mask = np.where(valid, 0.0, -np.inf).astype(dt)[:, None, None, :]
    x = nk.take_rows(p["text.token_embed"], ids)
    x = nk.add(x, nk.getitem(p["text.pos_embed"], slice(0, N)))
    x = _tower(p, "text", x, cfg, key_mask)
    weights = (valid / valid.sum(axis=1, keepdims=True)).astype(dt)[:, :, None]
    pooled = nk.tsum(nk.mul(x, weights), axis=1)
    return nk.l2_normalize(nk.matmul(pooled, p["text.proj"]))


def encode_text(params, text: TextSequence, cfg: ModelConfig = ModelConfig()) -> np.ndarray:
    return encode_texts(params, [text], cfg).data[0]


def similarity(v: np.ndarray, t: np.ndarray) -> float:
    v = np.asarray(v, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    nv, nt = np.linalg.norm(v), np.linalg.norm(t)
    if nv == 0 or nt == 0:
        raise InvalidArgument("similarity of a zero vector")
    return float(np.clip(v @ t / (nv * nt), -1.0, 1.0))
