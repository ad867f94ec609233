import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from ovclip.captionkit import (
    SYSTEM_PROMPT,
    FrameCaptionSet,
    ServiceBackend,
    StubBackend,
    VideoCaption,
    aggregate,
    build_prompts,
    caption_dataset,
    caption_samples,
    parse_store,
    read_store,
    serialize_store,
    stub_frame_captioner,
)
from ovclip.datagen import SHAPES, ClassSpec, CorpusConfig, build_corpus, gen_video, tokenize
from ovclip.errors import BackendUnavailable, EmptyCompletion, InvalidArgument


def _frames(*caps):
    return FrameCaptionSet(tuple(enumerate(caps)))


class _Fixed:
    tag = "fixed"

    def __init__(self, text):
        self.text = text

    def complete(self, system, user):
        return self.text


class _FailOn:
    tag = "stub"

    def __init__(self, needle):
        self.needle = needle

    def complete(self, system, user):
        if self.needle in user:
            raise EmptyCompletion("nothing")
        return "ok"


@pytest.fixture(scope="module")
def small():
    return build_corpus(CorpusConfig(pretrain_per_shape=1, pretrain_test_per_shape=0, train_per_class=1,
                                     test_per_class=1, heldout_per_class=1), seed=0)


class TestPrompts:
    def test_golden_strings(self):
        system, user = build_prompts(_frames("a dog runs"))
        assert system.encode() == b"Always answer in one sentence."
        assert "Please summarize the whole video according to the frame captions in short." in user
        assert user.endswith("Output: The video shows")

    def test_order_kept(self):
        _, user = build_prompts(_frames("first thing", "second thing"))
        assert user.index("first thing") < user.index("second thing")

    def test_empty(self):
        with pytest.raises(InvalidArgument):
            build_prompts(FrameCaptionSet(()))

    def test_frame_set_validation(self):
        with pytest.raises(InvalidArgument):
            FrameCaptionSet(((1, "a"), (0, "b")))
        with pytest.raises(InvalidArgument):
            FrameCaptionSet(((0, " "),))


class TestStub:
    def test_frame_template(self):
        fs = stub_frame_captioner([{"shape": "square", "row": 1, "col": 2}])
        assert fs.captions == ["a square at row 1 column 2"]

    def test_four_frames(self):
        _, meta = gen_video(ClassSpec("ring", "zigzag"), 4)
        fs = stub_frame_captioner(meta)
        assert [i for i, _ in fs.items] == [0, 1, 2, 3]
        assert fs == stub_frame_captioner(meta)

    def test_square_linear(self):
        _, meta = gen_video(ClassSpec("square", "linear"), 0)
        cap = aggregate(stub_frame_captioner(meta), StubBackend(), "v")
        assert cap.caption == "The video shows a square moving in a linear manner across the grid"

    @pytest.mark.parametrize("pattern", ["linear", "zigzag", "holdjump", "alternate"])
    def test_every_pattern_recovered(self, pattern):
        for seed in range(4):
            for shape in SHAPES:
                _, meta = gen_video(ClassSpec(shape, pattern), seed)
                cap = aggregate(stub_frame_captioner(meta), StubBackend()).caption
                assert f"a {shape} moving in a {pattern} manner" in cap
                tokenize(cap)


class TestAggregate:
    def test_prefix(self):
        cap = aggregate(_frames("x"), _Fixed("a girl riding a horse in a field"))
        assert cap.caption == "The video shows a girl riding a horse in a field"

    def test_duplicated_prefix_and_whitespace(self):
        cap = aggregate(_frames("x"), _Fixed("  The video shows  a  cat\n"))
        assert cap.caption == "The video shows a cat"

    def test_empty(self):
        with pytest.raises(EmptyCompletion):
            aggregate(_frames("x"), _Fixed("  "))


class TestStore:
    def test_dataset_rows(self, small, tmp_path):
        samples = small.seen_train + small.heldout_test
        out = tmp_path / "caps.tsv"
        caps = caption_dataset(samples, StubBackend(), out)
        assert len(caps) == 16
        store = read_store(out)
        assert len(store) == 16 and set(store) == {s.video_id for s in samples}

    def test_rerun_byte_identical(self, small, tmp_path):
        a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
        caption_dataset(small.seen_train, StubBackend(), a)
        caption_dataset(small.seen_train, StubBackend(), b)
        assert a.read_bytes() == b.read_bytes()

    def test_failure_writes_nothing(self, small, tmp_path):
        out = tmp_path / "caps.tsv"
        victim = small.seen_train[5]
        needle = stub_frame_captioner(victim.meta).captions[0]
        targets = [s for s in small.seen_train if stub_frame_captioner(s.meta).captions[0] != needle]
        with pytest.raises(EmptyCompletion, match=victim.video_id):
            caption_dataset(targets[:3] + [victim], _FailOn(needle), out)
        assert not out.exists()

    def test_serialize_rejects_tabs(self):
        with pytest.raises(InvalidArgument):
            serialize_store([VideoCaption("a\tb", "x", "stub")])

    def test_parse(self):
        text = serialize_store([VideoCaption("v1", "The video shows x", "stub")])
        assert parse_store(text)[0].caption == "The video shows x"
        with pytest.raises(InvalidArgument):
            parse_store("no tab here\n")


class _Handler(BaseHTTPRequestHandler):
    fail_first = 0
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((body, self.headers.get("Authorization")))
        if len(type(self).seen) <= type(self).fail_first:
            self.send_response(503)
            self.end_headers()
            return
        payload = {"choices": [{"message": {"content": "a girl riding a horse in a field"}}]}
        data = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    _Handler.seen = []
    _Handler.fail_first = 0
    httpd = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    yield httpd
    httpd.shutdown()
    httpd.server_close()


def _url(httpd):
    return f"http://127.0.0.1:{httpd.server_address[1]}/v1/chat/completions"


class TestService:
    def test_request_shape(self, server, monkeypatch):
        monkeypatch.setenv("OVCLIP_TEST_TOKEN", "sekrit")
        backend = ServiceBackend(_url(server), "chat-small", token_env="OVCLIP_TEST_TOKEN")
        cap = aggregate(_frames("a horse"), backend)
        assert cap.caption == "The video shows a girl riding a horse in a field"
        body, auth = _Handler.seen[0]
        assert body["model"] == "chat-small"
        assert body["messages"][0] == {"role": "system", "content": SYSTEM_PROMPT}
        assert body["messages"][1]["role"] == "user"
        assert auth == "Bearer sekrit"

    def test_retry_then_succeed(self, server):
        _Handler.fail_first = 2
        sleeps = []
        backend = ServiceBackend(_url(server), "m", attempts=3, backoff=0.5, sleep=sleeps.append)
        assert backend.complete("s", "u") == "a girl riding a horse in a field"
        assert sleeps == [0.5, 1.0]

    def test_gives_up_with_attempt_count(self, server):
        _Handler.fail_first = 10
        backend = ServiceBackend(_url(server), "m", attempts=3, sleep=lambda s: None)
        with pytest.raises(BackendUnavailable) as info:
            backend.complete("s", "u")
        assert info.value.attempts == 3 and len(_Handler.seen) == 3

    def test_concurrent_dataset(self, server, small):
        backend = ServiceBackend(_url(server), "m")
        caps = caption_samples(small.seen_train[:6], backend, max_in_flight=3)
        assert [c.video_id for c in caps] == [s.video_id for s in small.seen_train[:6]]
        assert all(c.backend == "service" for c in caps)

    def test_config(self):
        b = ServiceBackend.from_config({"caption.endpoint": "http://x", "caption.model": "m"})
        assert b.token_env is None and b.model == "m"
        with pytest.raises(InvalidArgument):
            ServiceBackend("", "m")
