"""Synthetic shapes-on-a-grid corpus.

Frames are 16x16 single-channel images split into a 4x4 grid of 4x4 cells.
A video moves one glyph along a fixed 4-cell track (one grid row, in either
direction).  The four trajectory patterns come in two confusable
pairs that share a multiset of positions:

    LINEAR    [p0, p1, p2, p3]   ZIGZAG     [p0, p2, p1, p3]
    HOLDJUMP  [p0, p0, p3, p3]   ALTERNATE  [p0, p3, p0, p3]

so a model that looks at frames independently cannot tell the members of a
pair apart, while one that sees neighbouring frames can.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, InvalidConfig

GRID = 4
CELL = 4
FRAME = GRID * CELL
MAX_TEXT_LEN = 24
TRACK_ROW = 1

SHAPES = ("square", "triangle", "cross", "ring")
PATTERNS = ("linear", "zigzag", "holdjump", "alternate")
PATTERN_INDEX = {
    "linear": (0, 1, 2, 3),
    "zigzag": (0, 2, 1, 3),
    "holdjump": (0, 0, 3, 3),
    "alternate": (0, 3, 0, 3),
}
CONFUSABLE = {"linear": "zigzag", "zigzag": "linear", "holdjump": "alternate", "alternate": "holdjump"}

_GLYPHS = {
    "square": ["XXXX", "X..X", "X..X", "XXXX"],
    "triangle": ["X...", "XX..", "XXX.", "XXXX"],
    "cross": ["X..X", ".XX.", ".XX.", "X..X"],
    "ring": [".XX.", "X..X", "X..X", ".XX."],
}
GLYPHS = {k: np.array([[c == "X" for c in row] for row in v], dtype=np.float32) for k, v in _GLYPHS.items()}

# (shape, pattern) combinations withheld from fine-tuning: one per shape, one per pattern
DEFAULT_HELDOUT = (("square", "alternate"), ("triangle", "holdjump"), ("cross", "zigzag"), ("ring", "linear"))

PRETRAIN_TEMPLATES = (
    "a {shape} at row {row} column {col}",
    "a picture of a {shape}",
    "a video of {shape}",
)
# long-exposure stills: the glyph at every trajectory position, later frames brighter
TRAIL_TEMPLATES = (
    "a photo of a {shape} {pattern} trail",
    "a picture of a {shape} {pattern}",
    "a {pattern} trail of a {shape}",
)

PAD = "<pad>"
_BASE_WORDS = (
    "a", "an", "the", "of", "at", "in", "on", "video", "picture", "photo", "shows", "moving",
    "manner", "across", "grid", "row", "column", "trail", "0", "1", "2", "3",
)
VOCAB: tuple[str, ...] = (PAD,) + _BASE_WORDS + SHAPES + PATTERNS
WORD_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = 0


# ------------------------------------------------------------------ text


@dataclass(frozen=True)
class TextSequence:
    ids: tuple[int, ...]
    length: int

    def padded(self, n: int) -> np.ndarray:
        out = np.full(n, PAD_ID, dtype=np.int64)
        out[: len(self.ids)] = self.ids
        return out


def tokenize(text: str, max_len: int = MAX_TEXT_LEN) -> TextSequence:
    words = text.lower().split()
    unknown = [w for w in words if w not in WORD_ID or w == PAD]
    if unknown:
        raise InvalidArgument(f"out-of-vocabulary word {unknown[0]!r}")
    if not words:
        raise InvalidArgument("empty text")
    if len(words) > max_len:
        raise InvalidArgument(f"text longer than {max_len} tokens: {text!r}")
    ids = tuple(WORD_ID[w] for w in words)
    return TextSequence(ids, len(ids))


def label_prompt(label: str) -> TextSequence:
    return tokenize(f"a video of {label}")


def pad_batch(seqs: list[TextSequence]) -> np.ndarray:
    n = max(len(s.ids) for s in seqs)
    return np.stack([s.padded(n) for s in seqs])


# ------------------------------------------------------------------ rendering


def render_frame(shape: str, position: tuple[int, int], noise_seed: int, noise: float = 0.05) -> np.ndarray:
    if shape not in GLYPHS:
        raise InvalidArgument(f"unknown shape {shape!r}")
    r, c = position
    if not (0 <= r < GRID and 0 <= c < GRID):
        raise InvalidArgument(f"position {position} is off the {GRID}x{GRID} grid")
    frame = np.zeros((FRAME, FRAME), dtype=np.float32)
    frame[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL] = GLYPHS[shape]
    if noise > 0:
        rng = np.random.default_rng(noise_seed)
        frame += rng.uniform(-noise, noise, size=frame.shape).astype(np.float32)
    return np.clip(frame, 0.0, 1.0)


def all_tracks() -> list[tuple[tuple[int, int], ...]]:
    """The 4-cell track (row ``TRACK_ROW``), left-to-right and right-to-left."""
    row = tuple((TRACK_ROW, j) for j in range(GRID))
    return [row, row[::-1]]


@dataclass(frozen=True)
class ClassSpec:
    shape: str
    pattern: str

    @property
    def label(self) -> str:
        return f"{self.shape} {self.pattern}"


def class_specs() -> list[ClassSpec]:
    return [ClassSpec(s, p) for s in SHAPES for p in PATTERNS]


def gen_video(spec: ClassSpec, seed: int, noise: float = 0.05) -> tuple[np.ndarray, list[dict]]:
    """Render a T=4 clip for ``spec``; returns (frames, per-frame metadata).

    The track and the per-position noise seeds depend only on ``seed``, so
    two patterns with the same position multiset yield the same frames.
    """
    if spec.pattern not in PATTERN_INDEX:
        raise InvalidArgument(f"unknown pattern {spec.pattern!r}")
    rng = np.random.default_rng(seed)
    tracks = all_tracks()
    track = tracks[int(rng.integers(len(tracks)))]
    noise_seeds = rng.integers(0, 2**31 - 1, size=GRID)
    frames, meta = [], []
    for k in PATTERN_INDEX[spec.pattern]:
        frames.append(render_frame(spec.shape, track[k], int(noise_seeds[k]), noise))
        meta.append({"shape": spec.shape, "row": track[k][0], "col": track[k][1]})
    return np.stack(frames), meta


def render_trail(spec: ClassSpec, seed: int, noise: float = 0.05) -> tuple[np.ndarray, tuple]:
    """One still encoding a trajectory: frame k's glyph drawn at intensity (k+1)/T."""
    rng = np.random.default_rng(seed)
    tracks = all_tracks()
    track = tracks[int(rng.integers(len(tracks)))]
    order = PATTERN_INDEX[spec.pattern]
    img = np.zeros((FRAME, FRAME), dtype=np.float32)
    for k, pos in enumerate(order):
        glyph = render_frame(spec.shape, track[pos], 0, noise=0.0) * ((k + 1) / len(order))
        img = np.maximum(img, glyph)
    if noise > 0:
        img += rng.uniform(-noise, noise, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0), track


def make_static_video(frame: np.ndarray, T: int) -> np.ndarray:
    if T < 1:
        raise InvalidArgument("T must be >= 1")
    return np.repeat(np.asarray(frame)[None], T, axis=0)


# ------------------------------------------------------------------ corpus


@dataclass
class Sample:
    video_id: str
    clip: np.ndarray  # (T, H, W)
    class_id: int
    label: str
    meta: list[dict] = field(default_factory=list)
    caption: str | None = None


@dataclass
class ImageSample:
    image_id: str
    image: np.ndarray  # (H, W)
    shape_id: int
    captions: tuple[str, ...]


@dataclass
class CorpusConfig:
    pretrain_per_shape: int = 64
    pretrain_test_per_shape: int = 16
    train_per_class: int = 40
    test_per_class: int = 20
    heldout_per_class: int = 20
    trail_fraction: float = 0.5
    noise: float = 0.05
    heldout: tuple[tuple[str, str], ...] = DEFAULT_HELDOUT

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Dataset:
    config: CorpusConfig
    seed: int
    classes: list[ClassSpec]
    seen_ids: list[int]
    heldout_ids: list[int]
    pretrain: list[ImageSample]
    pretrain_test: list[ImageSample]
    seen_train: list[Sample]
    seen_test: list[Sample]
    heldout_test: list[Sample]

    @property
    def vocabulary(self) -> tuple[str, ...]:
        return VOCAB

    def splits(self) -> dict[str, list[Sample]]:
        return {"seen_train": self.seen_train, "seen_test": self.seen_test, "heldout_test": self.heldout_test}

    def class_prompts(self, ids: list[int]) -> list[TextSequence]:
        return [label_prompt(self.classes[i].label) for i in ids]

    def confusable_pairs(self) -> list[tuple[int, int]]:
        """Seen (class, class) pairs sharing a shape and a position multiset."""
        seen = set(self.seen_ids)
        pairs = []
        for i in self.seen_ids:
            spec = self.classes[i]
            j = self.classes.index(ClassSpec(spec.shape, CONFUSABLE[spec.pattern]))
            if j in seen and i < j:
                pairs.append((i, j))
        return pairs


def _check_heldout(heldout) -> None:
    seen_shapes, seen_patterns = set(), set()
    held = set(map(tuple, heldout))
    for spec in class_specs():
        if (spec.shape, spec.pattern) not in held:
            seen_shapes.add(spec.shape)
            seen_patterns.add(spec.pattern)
    for shape, pattern in held:
        if shape not in SHAPES or pattern not in PATTERNS:
            raise InvalidConfig(f"unknown held-out class {shape} {pattern}")
        if shape not in seen_shapes or pattern not in seen_patterns:
            raise InvalidConfig(f"held-out class '{shape} {pattern}' uses an atom absent from seen labels")


def _image_sample(rng: np.random.Generator, shape_id: int, tag: str, noise: float,
                  trail: bool) -> ImageSample:
    shape = SHAPES[shape_id]
    if trail:
        pattern = PATTERNS[int(rng.integers(len(PATTERNS)))]
        image, _ = render_trail(ClassSpec(shape, pattern), int(rng.integers(2**31 - 1)), noise)
        caps = tuple(t.format(shape=shape, pattern=pattern) for t in TRAIL_TEMPLATES)
        return ImageSample(tag, image, shape_id, caps)
    r, c = (int(v) for v in rng.integers(0, GRID, size=2))
    image = render_frame(shape, (r, c), int(rng.integers(2**31 - 1)), noise)
    caps = tuple(t.format(shape=shape, row=r, col=c) for t in PRETRAIN_TEMPLATES)
    return ImageSample(tag, image, shape_id, caps)


def build_corpus(cfg: CorpusConfig | None = None, seed: int = 0) -> Dataset:
    cfg = cfg or CorpusConfig()
    counts = (cfg.pretrain_per_shape, cfg.train_per_class, cfg.test_per_class, cfg.heldout_per_class)
    if min(counts) < 1 or cfg.pretrain_test_per_shape < 0:
        raise InvalidConfig("per-class sample counts must be >= 1")
    if not 0.0 <= cfg.trail_fraction <= 1.0:
        raise InvalidConfig("trail_fraction must lie in [0, 1]")
    _check_heldout(cfg.heldout)
    classes = class_specs()
    held = {tuple(h) for h in cfg.heldout}
    heldout_ids = [i for i, c in enumerate(classes) if (c.shape, c.pattern) in held]
    seen_ids = [i for i in range(len(classes)) if i not in heldout_ids]

    ss = np.random.SeedSequence(seed)
    pre_ss, vid_ss = ss.spawn(2)
    rng = np.random.default_rng(pre_ss)
    pretrain, pretrain_test = [], []
    n_trail = round(cfg.pretrain_per_shape * cfg.trail_fraction)
    n_trail_test = round(cfg.pretrain_test_per_shape * cfg.trail_fraction)
    for s in range(len(SHAPES)):
        for k in range(cfg.pretrain_per_shape):
            pretrain.append(_image_sample(rng, s, f"img-{s}-{k:03d}", cfg.noise, k < n_trail))
        for k in range(cfg.pretrain_test_per_shape):
            pretrain_test.append(_image_sample(rng, s, f"imgtest-{s}-{k:03d}", cfg.noise, k < n_trail_test))

    vrng = np.random.default_rng(vid_ss)

    def make(split: str, cid: int, n: int) -> list[Sample]:
        out = []
        for k in range(n):
            spec = classes[cid]
            clip, meta = gen_video(spec, int(vrng.integers(2**31 - 1)), cfg.noise)
            out.append(Sample(f"{split}-{cid:02d}-{k:03d}", clip, cid, spec.label, meta))
        return out

    seen_train = [s for cid in seen_ids for s in make("train", cid, cfg.train_per_class)]
    seen_test = [s for cid in seen_ids for s in make("test", cid, cfg.test_per_class)]
    heldout_test = [s for cid in heldout_ids for s in make("heldout", cid, cfg.heldout_per_class)]
    return Dataset(cfg, seed, classes, seen_ids, heldout_ids, pretrain, pretrain_test,
                   seen_train, seen_test, heldout_test)


def write_manifest(ds: Dataset, path) -> None:
    lines = ["sample_id\tsplit\tclass_id\tlabel"]
    for split, samples in ds.splits().items():
        for s in samples:
            lines.append(f"{s.video_id}\t{split}\t{s.class_id}\t{s.label}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
