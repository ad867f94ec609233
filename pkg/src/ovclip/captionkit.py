"""Video captions from per-frame captions and a chat-style summarizer.

Each frame gets a short caption, the frame captions are packed into a fixed
pair of prompts, and a backend completes the sentence "The video shows ...".
Two backends exist: a deterministic stub for offline runs and tests, and a
client for an HTTP chat-completion service.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Protocol, Sequence

from .datagen import PATTERN_INDEX, Sample
from .errors import BackendUnavailable, CaptionError, EmptyCompletion, InvalidArgument

log = logging.getLogger(__name__)

SYSTEM_PROMPT = "Always answer in one sentence."
USER_PREFIX = "Input: These are captions of the frames in a sequential order within the same video: "
USER_SUFFIX = (". Please summarize the whole video according to the frame captions in short. "
               "Output: The video shows")
CAPTION_PREFIX = "The video shows"
JOIN = ", "


@dataclass(frozen=True)
class FrameCaptionSet:
    items: tuple[tuple[int, str], ...]

    def __post_init__(self):
        idx = [i for i, _ in self.items]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise InvalidArgument("frame indices must be strictly increasing")
        if any(not c.strip() for _, c in self.items):
            raise InvalidArgument("frame captions must be non-empty")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def captions(self) -> list[str]:
        return [c for _, c in self.items]


@dataclass(frozen=True)
class VideoCaption:
    video_id: str
    caption: str
    backend: str


class CaptionBackend(Protocol):
    tag: str

    def complete(self, system: str, user: str) -> str: ...


def build_prompts(frames: FrameCaptionSet) -> tuple[str, str]:
    if len(frames) == 0:
        raise InvalidArgument("no frame captions to summarize")
    return SYSTEM_PROMPT, USER_PREFIX + JOIN.join(frames.captions) + USER_SUFFIX


def stub_frame_captioner(meta: Sequence[Mapping]) -> FrameCaptionSet:
    """One template caption per frame from the generator's ground truth."""
    return FrameCaptionSet(tuple(
        (i, f"a {m['shape']} at row {int(m['row'])} column {int(m['col'])}") for i, m in enumerate(meta)
    ))


_FRAME_RE = re.compile(r"a (\w+) at row (\d+) column (\d+)")


class StubBackend:
    """Reads the frame captions back out of the user prompt and names the motion."""

    tag = "stub"

    def complete(self, system: str, user: str) -> str:
        frames = _FRAME_RE.findall(user)
        if not frames:
            raise EmptyCompletion("stub backend found no frame captions in the prompt")
        shape = frames[0][0]
        cells = [(int(r), int(c)) for _, r, c in frames]
        r0, c0 = cells[0]
        steps = tuple(abs(r - r0) + abs(c - c0) for r, c in cells)
        for name, order in PATTERN_INDEX.items():
            if steps == order:
                return f"a {shape} moving in a {name} manner across the grid"
        return f"a {shape} moving across the grid"


class ServiceBackend:
    """Chat-completion client: POST {model, messages} as JSON, read choices[0].message.content."""

    tag = "service"

    def __init__(self, endpoint: str, model: str, token_env: str | None = None, attempts: int = 3,
                 backoff: float = 1.0, timeout: float = 30.0, sleep: Callable[[float], None] = time.sleep):
        if not endpoint:
            raise InvalidArgument("caption.endpoint is required for the service backend")
        if attempts < 1:
            raise InvalidArgument("attempts must be >= 1")
        self.endpoint = endpoint
        self.model = model
        self.token_env = token_env
        self.attempts = attempts
        self.backoff = backoff
        self.timeout = timeout
        self.sleep = sleep

    @classmethod
    def from_config(cls, cfg: Mapping[str, str], **kw) -> "ServiceBackend":
        return cls(cfg.get("caption.endpoint", ""), cfg.get("caption.model", ""),
                   cfg.get("caption.token_env") or None, **kw)

    def _request(self, system: str, user: str) -> urllib.request.Request:
        body = {"model": self.model, "messages": [
            {"role": "system", "content": system},
            {"role": "user", "content": user},
        ]}
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env) if self.token_env else None
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return urllib.request.Request(self.endpoint, data=json.dumps(body).encode("utf-8"),
                                      headers=headers, method="POST")

    def complete(self, system: str, user: str) -> str:
        last = None
        for attempt in range(1, self.attempts + 1):
            try:
                with urllib.request.urlopen(self._request(system, user), timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                return _content(payload)
            except (urllib.error.URLError, TimeoutError, ConnectionError, json.JSONDecodeError, KeyError,
                    IndexError, TypeError) as exc:
                last = exc
                log.warning("caption service attempt %d/%d failed: %s", attempt, self.attempts, exc)
                if attempt < self.attempts:
                    self.sleep(self.backoff * 2 ** (attempt - 1))
        raise BackendUnavailable(f"caption service unavailable after {self.attempts} attempts: {last}",
                                 attempts=self.attempts)


def _content(payload) -> str:
    if "choices" in payload:
        return payload["choices"][0]["message"]["content"]
    return payload["message"]["content"]


def aggregate(frames: FrameCaptionSet, backend: CaptionBackend, video_id: str = "") -> VideoCaption:
    system, user = build_prompts(frames)
    text = " ".join((backend.complete(system, user) or "").split())
    if text.startswith(CAPTION_PREFIX):
        text = text[len(CAPTION_PREFIX):].lstrip()
    if not text:
        raise EmptyCompletion(f"backend returned an empty completion for video {video_id!r}")
    return VideoCaption(video_id, f"{CAPTION_PREFIX} {text}", backend.tag)


def caption_samples(samples: Iterable[Sample], backend: CaptionBackend,
                    max_in_flight: int = 4) -> list[VideoCaption]:
    samples = list(samples)

    def one(s: Sample) -> VideoCaption:
        try:
            return aggregate(stub_frame_captioner(s.meta), backend, s.video_id)
        except CaptionError as exc:
            raise _with_video(exc, s.video_id) from exc

    if backend.tag == "stub" or max_in_flight <= 1:
        return [one(s) for s in samples]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(one, samples))


def _with_video(exc: CaptionError, video_id: str) -> CaptionError:
    msg = f"captioning video {video_id} failed: {exc}"
    if isinstance(exc, BackendUnavailable):
        out = BackendUnavailable(msg, attempts=exc.attempts)
    else:
        out = type(exc)(msg)
    out.video_id = video_id
    return out


def serialize_store(captions: Iterable[VideoCaption]) -> str:
    lines = []
    for c in captions:
        for field in (c.video_id, c.caption):
            if "\t" in field or "\n" in field or "\r" in field:
                raise InvalidArgument(f"tab or newline in caption store field for {c.video_id!r}")
        lines.append(f"{c.video_id}\t{c.caption}\n")
    return "".join(lines)


def parse_store(text: str, backend: str = "stub") -> list[VideoCaption]:
    out = []
    for n, line in enumerate(text.split("\n"), start=1):
        if not line:
            continue
        if "\t" not in line:
            raise InvalidArgument(f"caption store line {n} has no tab")
        vid, cap = line.split("\t", 1)
        out.append(VideoCaption(vid, cap, backend))
    return out


def write_store(captions: Iterable[VideoCaption], path) -> None:
    path = os.fspath(path)
    text = serialize_store(captions)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def read_store(path) -> dict[str, str]:
    with open(path, encoding="utf-8", newline="\n") as fh:
        return {c.video_id: c.caption for c in parse_store(fh.read())}


def caption_dataset(samples: Iterable[Sample], backend: CaptionBackend, out_path,
                    max_in_flight: int = 4) -> list[VideoCaption]:
    """Caption every sample and write the store; nothing is written if any video fails."""
    caps = caption_samples(samples, backend, max_in_flight)
    ids = [c.video_id for c in caps]
    if len(set(ids)) != len(ids):
        raise InvalidArgument("duplicate video ids in caption input")
    write_store(caps, out_path)
    return caps
