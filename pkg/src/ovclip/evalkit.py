"""Zero-shot classification, retrieval and weight-interpolation sweeps."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .datagen import TextSequence, make_static_video, pad_batch
from .errors import InvalidArgument
from .model import encode_texts, encode_videos
from .weightspace import Checkpoint, final_patch

PROTOCOLS = ("EP1", "EP2", "EP3", "K600SPLIT")


@dataclass
class Metrics:
    top1: float | None = None
    top5: float | None = None
    recall: dict[str, dict[int, float]] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)
    repeats: int = 1

    def rows(self) -> list[tuple[str, float, float]]:
        out = []
        for name in ("top1", "top5"):
            value = getattr(self, name)
            if value is not None:
                out.append((name, value, self.std.get(name, 0.0)))
        for direction, by_k in self.recall.items():
            for k, value in sorted(by_k.items()):
                key = f"{direction}_R@{k}"
                out.append((key, value, self.std.get(key, 0.0)))
        return out


@dataclass
class SweepRow:
    lam: float
    closeset_top1: float
    zeroshot_top1: float


def _params(theta):
    return theta.tensors if isinstance(theta, Checkpoint) else theta


def embed_clips(theta, clips: np.ndarray, window: int = 3, chunk: int = 64) -> np.ndarray:
    p = _params(theta)
    clips = np.asarray(clips)
    out = [encode_videos(p, clips[i:i + chunk], window).data for i in range(0, len(clips), chunk)]
    return np.concatenate(out).astype(np.float64)


def embed_texts(theta, texts: Sequence[TextSequence]) -> np.ndarray:
    return encode_texts(_params(theta), pad_batch(list(texts))).data.astype(np.float64)


def temporal_views(clip: np.ndarray, views: int, length: int | None = None) -> list[np.ndarray]:
    """``views`` evenly spaced windows of ``length`` frames (default: the whole clip)."""
    if views < 1:
        raise InvalidArgument("views must be >= 1")
    T = len(clip)
    length = T if length is None else length
    if not 1 <= length <= T:
        raise InvalidArgument(f"view length {length} incompatible with {T} frames")
    if views == 1:
        starts = [(T - length) // 2]
    else:
        starts = [round(i * (T - length) / (views - 1)) for i in range(views)]
    return [clip[s:s + length] for s in starts]


def argmax_lowest(scores: np.ndarray) -> np.ndarray:
    """Row argmax; ties go to the lowest column index (np.argmax already does this)."""
    return np.argmax(scores, axis=1)


def topk_hits(scores: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    # rank = number of classes beating the true one, ties broken by lower index
    true = scores[np.arange(len(labels)), labels][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    beats = (scores > true) | ((scores == true) & (cols < labels[:, None]))
    return beats.sum(axis=1) < k


def class_scores(theta, clips, class_texts, views: int = 1, window: int = 3,
                 view_len: int | None = None) -> np.ndarray:
    if len(class_texts) == 0:
        raise InvalidArgument("empty class list")
    t = embed_texts(theta, class_texts)
    clips = np.asarray(clips)
    total = np.zeros((len(clips), len(class_texts)))
    per_view = [np.stack([temporal_views(c, views, view_len)[i] for c in clips]) for i in range(views)]
    for vclips in per_view:
        total += embed_clips(theta, vclips, window) @ t.T
    return total / views


def metrics_from_scores(scores: np.ndarray, labels) -> Metrics:
    labels = np.asarray(labels)
    top1 = float(np.mean(argmax_lowest(scores) == labels))
    top5 = float(np.mean(topk_hits(scores, labels, 5)))
    return Metrics(top1=top1, top5=top5)


def classify_zero_shot(theta, clips, class_texts: Sequence[TextSequence], labels, views: int = 1,
                       window: int = 3) -> Metrics:
    """Top-1/top-5 of clips against class prompts; ``labels`` index ``class_texts``."""
    return metrics_from_scores(class_scores(theta, clips, class_texts, views, window), labels)


# ------------------------------------------------------------------ protocols


def _protocol_subsets(protocol: str, classes: Sequence[int], labels: np.ndarray, repeats: int | None,
                      rng: np.random.Generator) -> list[tuple[list[int], np.ndarray]]:
    """(class subset, sample mask) per repeat."""
    classes = list(classes)
    every = np.ones(len(labels), dtype=bool)
    if protocol == "EP2":
        return [(classes, every)]
    if protocol == "EP1":
        if len(classes) < 2:
            raise InvalidArgument("EP1 needs at least 2 classes to halve")
        out = []
        for _ in range(repeats or 10):
            sub = sorted(rng.choice(classes, size=len(classes) // 2, replace=False).tolist())
            out.append((sub, np.isin(labels, sub)))
        return out
    if protocol == "EP3":
        # three fixed splits: a seeded half of each class's test videos
        out = []
        for _ in range(repeats or 3):
            mask = np.zeros(len(labels), dtype=bool)
            for c in classes:
                idx = np.flatnonzero(labels == c)
                mask[rng.choice(idx, size=max(1, len(idx) // 2), replace=False)] = True
            out.append((classes, mask))
        return out
    if protocol == "K600SPLIT":
        # 60/220 of the novel classes go to validation; test on the rest
        n_test = max(1, len(classes) - round(len(classes) * 60 / 220))
        out = []
        for _ in range(repeats or 3):
            sub = sorted(rng.choice(classes, size=n_test, replace=False).tolist())
            out.append((sub, np.isin(labels, sub)))
        return out
    raise InvalidArgument(f"unknown protocol {protocol!r}")


def protocol_from_scores(protocol: str, scores: np.ndarray, labels, classes: Sequence[int],
                         repeats: int | None = None, seed: int = 0) -> Metrics:
    """Run a protocol on a precomputed (clip x class) score matrix.

    ``classes`` are the class ids heading the score columns and ``labels``
    hold each clip's class id.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    col = {c: i for i, c in enumerate(classes)}
    top1s, top5s = [], []
    for sub, mask in _protocol_subsets(protocol, classes, labels, repeats, rng):
        cols = [col[c] for c in sub]
        local = {c: i for i, c in enumerate(sub)}
        m = metrics_from_scores(scores[mask][:, cols], [local[c] for c in labels[mask]])
        top1s.append(m.top1)
        top5s.append(m.top5)
    return Metrics(top1=float(np.mean(top1s)), top5=float(np.mean(top5s)),
                   std={"top1": float(np.std(top1s)), "top5": float(np.std(top5s))}, repeats=len(top1s))


def protocol_subsets(protocol: str, classes: Sequence[int], labels, repeats: int | None = None,
                     seed: int = 0) -> list[list[int]]:
    rng = np.random.default_rng(seed)
    return [s for s, _ in _protocol_subsets(protocol, classes, np.asarray(labels), repeats, rng)]


def run_protocol(protocol: str, theta, clips, labels, classes: Sequence[int],
                 class_texts: Sequence[TextSequence], repeats: int | None = None, seed: int = 0,
                 views: int = 1, window: int = 3) -> Metrics:
    scores = class_scores(theta, clips, class_texts, views, window)
    return protocol_from_scores(protocol, scores, labels, classes, repeats, seed)


# ------------------------------------------------------------------ retrieval


def ranks_of_truth(sim: np.ndarray) -> np.ndarray:
    """0-based rank of item i for query i, ties broken by lower index."""
    true = np.diag(sim)[:, None]
    cols = np.arange(sim.shape[1])[None, :]
    beats = (sim > true) | ((sim == true) & (cols < np.arange(len(sim))[:, None]))
    return beats.sum(axis=1)


def recall_at_k(sim: np.ndarray, ks: Sequence[int]) -> dict[str, dict[int, float]]:
    """Recall@K both ways for a square (video x text) similarity matrix."""
    v2t = ranks_of_truth(sim)
    t2v = ranks_of_truth(sim.T)
    return {
        "t2v": {k: float(np.mean(t2v < k)) for k in ks},
        "v2t": {k: float(np.mean(v2t < k)) for k in ks},
    }


def retrieval_eval(theta, clips, captions: Sequence[TextSequence], ks=(1, 5, 10), window: int = 3) -> Metrics:
    if len(clips) != len(captions):
        raise InvalidArgument("clips and captions must pair up")
    if len(set(c.ids for c in captions)) != len(captions):
        raise InvalidArgument("captions must be pairwise distinct")
    if len(captions) < max(ks):
        raise InvalidArgument(f"need at least {max(ks)} pairs")
    sim = embed_clips(theta, clips, window) @ embed_texts(theta, captions).T
    return Metrics(recall=recall_at_k(sim, ks))


# ------------------------------------------------------------------ sweeps


def tradeoff_sweep(theta_a: Checkpoint, theta_tuned: Checkpoint, grid: Sequence[float],
                   closeset: tuple, zeroshot: tuple, window: int = 3, views: int = 1) -> list[SweepRow]:
    """Patch at every ratio in ``grid`` and score both splits.

    ``closeset`` and ``zeroshot`` are ``(clips, labels, class_texts)`` with
    labels indexing the class_texts list.
    """
    if any(not 0.0 <= g <= 1.0 for g in grid):
        raise InvalidArgument("interpolation grid must lie in [0, 1]")
    rows = []
    for lam in grid:
        theta = final_patch(theta_a, theta_tuned, lam)
        cs = classify_zero_shot(theta, closeset[0], closeset[2], closeset[1], views, window)
        zs = classify_zero_shot(theta, zeroshot[0], zeroshot[2], zeroshot[1], views, window)
        rows.append(SweepRow(float(lam), cs.top1, zs.top1))
    return rows


def image_task_eval(theta, images, labels, class_texts: Sequence[TextSequence]) -> Metrics:
    """Images become one-frame clips; the widened attention has nothing to add."""
    clips = np.stack([make_static_video(im, 1) for im in images])
    return classify_zero_shot(theta, clips, class_texts, labels, views=1, window=1)


# ------------------------------------------------------------------ csv


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    buf.write("lambda,closeset_top1,zeroshot_top1\n")
    for r in rows:
        buf.write(f"{r.lam:.6f},{r.closeset_top1:.6f},{r.zeroshot_top1:.6f}\n")
    return buf.getvalue()


def metrics_csv(metrics: Metrics | Mapping[str, Metrics]) -> str:
    buf = io.StringIO()
    buf.write("metric,mean,std\n")
    items = metrics.items() if isinstance(metrics, Mapping) else [("", metrics)]
    for prefix, m in items:
        for name, mean, std in m.rows():
            key = f"{prefix}.{name}" if prefix else name
            buf.write(f"{key},{mean:.6f},{std:.6f}\n")
    return buf.getvalue()


def parse_sweep_csv(text: str) -> list[SweepRow]:
    lines = text.strip().split("\n")
    return [SweepRow(*map(float, line.split(","))) for line in lines[1:]]
