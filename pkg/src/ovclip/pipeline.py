"""Glue between the corpus, caption store, trainer and evaluator.

Also holds the reference desk-scale recipe used by the command line and the
acceptance runs.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .datagen import CorpusConfig, Dataset, Sample, build_corpus, label_prompt, pad_batch, tokenize, write_manifest
from .errors import InvalidArgument, InvalidConfig
from .evalkit import Metrics, classify_zero_shot, retrieval_eval
from .pretrain import PretrainConfig, pretrain
from .weightspace import Checkpoint, IwrConfig, SwaState, TrainData, steps_per_epoch, train

CORPUS_FILE = "corpus.cfg"
MANIFEST_FILE = "manifest.tsv"

# Reference fine-tuning recipe.  Momentum is on because plain SGD at a
# stable step size does not pick up the temporal cue within the budget.
REFERENCE_FINETUNE = dict(lr=0.03, lr_floor=0.005, momentum=0.9, epochs=40, warmup_epochs=1,
                          batch_size=24)
REFERENCE_PRETRAIN = dict(epochs=80)


@dataclass(frozen=True)
class Split:
    clips: np.ndarray
    labels: list[int]  # index into class_texts
    class_ids: list[int]
    class_texts: list

    def as_tuple(self) -> tuple:
        return self.clips, self.labels, self.class_texts


# ------------------------------------------------------------------ corpus on disk


def dump_corpus(ds: Dataset, out_dir) -> None:
    """Write the generating config, seed and a manifest; the data itself is regenerated on load."""
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"seed={ds.seed}"]
    for f in dataclasses.fields(CorpusConfig):
        value = getattr(ds.config, f.name)
        if f.name == "heldout":
            value = ";".join(f"{s} {p}" for s, p in value)
        lines.append(f"{f.name}={value}")
    lines.append(f"digest={ds.config.digest()}")
    _atomic_text(os.path.join(out_dir, CORPUS_FILE), "\n".join(lines) + "\n")
    tmp = os.path.join(out_dir, MANIFEST_FILE + ".tmp")
    write_manifest(ds, tmp)
    os.replace(tmp, os.path.join(out_dir, MANIFEST_FILE))


def load_corpus(corpus_dir) -> Dataset:
    path = os.path.join(corpus_dir, CORPUS_FILE)
    with open(path, encoding="utf-8") as fh:
        kv = dict(line.split("=", 1) for line in fh.read().splitlines() if "=" in line)
    kw = {}
    for f in dataclasses.fields(CorpusConfig):
        if f.name not in kv:
            continue
        raw = kv[f.name]
        if f.name == "heldout":
            kw[f.name] = tuple(tuple(item.split()) for item in raw.split(";") if item)
        else:
            kw[f.name] = type(f.default)(raw)
    cfg = CorpusConfig(**kw)
    if "digest" in kv and kv["digest"] != cfg.digest():
        raise InvalidConfig(f"{path}: config digest mismatch")
    return build_corpus(cfg, int(kv.get("seed", 0)))


def _atomic_text(path, text: str) -> None:
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ------------------------------------------------------------------ data assembly


def train_data(samples: list[Sample], captions: Mapping[str, str] | None = None) -> TrainData:
    clips = np.stack([s.clip for s in samples])
    labels = pad_batch([label_prompt(s.label) for s in samples])
    cap_ids = None
    if captions is not None:
        missing = [s.video_id for s in samples if s.video_id not in captions]
        if missing:
            raise InvalidArgument(f"no caption for video {missing[0]}")
        cap_ids = pad_batch([tokenize(captions[s.video_id]) for s in samples])
    return TrainData(clips, labels, cap_ids)


def eval_split(ds: Dataset, which: str) -> Split:
    if which in ("closeset", "seen", "seen_test"):
        samples, ids = ds.seen_test, ds.seen_ids
    elif which in ("zeroshot", "heldout", "heldout_test"):
        samples, ids = ds.heldout_test, ds.heldout_ids
    else:
        raise InvalidArgument(f"unknown split {which!r}")
    return Split(np.stack([s.clip for s in samples]), [ids.index(s.class_id) for s in samples], list(ids),
                 ds.class_prompts(list(ids)))


def confusable_accuracy(theta, ds: Dataset, window: int) -> float:
    """Mean top-1 over the seen pairs that only differ in frame order."""
    accs = []
    for a, b in ds.confusable_pairs():
        ss = [s for s in ds.seen_test if s.class_id in (a, b)]
        clips = np.stack([s.clip for s in ss])
        labels = [0 if s.class_id == a else 1 for s in ss]
        accs.append(classify_zero_shot(theta, clips, ds.class_prompts([a, b]), labels, window=window).top1)
    return float(np.mean(accs))


# ------------------------------------------------------------------ reference runs


def reference_pretrain(ds: Dataset, seed: int, **overrides) -> Checkpoint:
    return pretrain(ds, PretrainConfig(seed=seed, **{**REFERENCE_PRETRAIN, **overrides}))


def reference_finetune_config(seed: int, **overrides) -> IwrConfig:
    kw = dict(REFERENCE_FINETUNE, R=0.0, C=0.0, gamma=0.0, seed=seed)
    kw.update(overrides)
    return IwrConfig(**kw)


def default_swa(cfg: IwrConfig, n_train: int) -> SwaState:
    """Averaging starts once warmup ends and absorbs once per epoch."""
    spe = steps_per_epoch(n_train, cfg.batch_size)
    return SwaState(start=cfg.warmup_epochs * spe, cycle=spe)


def finetune(theta_a: Checkpoint, data: TrainData, cfg: IwrConfig, use_swa: bool = False, **kw) -> Checkpoint:
    """Train from theta_a (which is also the anchor); returns the SWA average when enabled."""
    swa = default_swa(cfg, len(data)) if use_swa else None
    last, swa = train(theta_a, theta_a, data, cfg, swa=swa, **kw)
    if swa is None:
        return last
    out = swa.checkpoint()
    out.meta.update(last.meta)
    out.meta["swa_count"] = str(swa.count)
    return out


def caption_retrieval(theta, samples: list[Sample], captions: Mapping[str, str], ks=(1, 5, 10), draws: int = 25,
                      seed: int = 0, window: int = 3) -> Metrics:
    """Text-to-video and video-to-text Recall@K over repeated draws.

    Captions repeat across videos of one class, so each draw keeps one random
    video per distinct caption.  K values above the number of pairs are dropped.
    """
    groups: dict[str, list[Sample]] = {}
    for s in samples:
        if s.video_id not in captions:
            raise InvalidArgument(f"no caption for video {s.video_id}")
        groups.setdefault(captions[s.video_id], []).append(s)
    if len(groups) < 2:
        raise InvalidArgument("retrieval needs at least 2 distinct captions")
    ks = [k for k in ks if k <= len(groups)]
    texts = [tokenize(c) for c in groups]
    rng = np.random.default_rng(seed)
    runs = []
    for _ in range(draws):
        picks = [members[int(rng.integers(len(members)))] for members in groups.values()]
        runs.append(retrieval_eval(theta, np.stack([s.clip for s in picks]), texts, ks, window).recall)
    recall, std = {}, {}
    for direction in ("t2v", "v2t"):
        recall[direction] = {}
        for k in ks:
            values = [r[direction][k] for r in runs]
            recall[direction][k] = float(np.mean(values))
            std[f"{direction}_R@{k}"] = float(np.std(values))
    return Metrics(recall=recall, std=std, repeats=draws)
