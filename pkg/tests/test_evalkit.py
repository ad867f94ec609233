import numpy as np
import pytest

from ovclip.datagen import ClassSpec, gen_video, label_prompt, render_frame, tokenize
from ovclip.errors import InvalidArgument
from ovclip.evalkit import (
    Metrics,
    SweepRow,
    classify_zero_shot,
    embed_clips,
    embed_texts,
    image_task_eval,
    metrics_csv,
    parse_sweep_csv,
    protocol_from_scores,
    protocol_subsets,
    recall_at_k,
    retrieval_eval,
    run_protocol,
    sweep_csv,
    temporal_views,
    topk_hits,
    tradeoff_sweep,
)
from ovclip.model import init_params
from ovclip.weightspace import Checkpoint

LABELS = ["square linear", "ring zigzag", "cross holdjump", "triangle alternate"]


@pytest.fixture(scope="module")
def theta():
    return Checkpoint(init_params(2))


@pytest.fixture(scope="module")
def clips():
    rng = np.random.default_rng(0)
    return np.stack([gen_video(ClassSpec("ring", "linear"), int(s))[0] for s in rng.integers(0, 1000, 8)])


def _rank_oracle(sim):
    # stable sort on -score keeps lower indices first among ties
    ranks = []
    for i, row in enumerate(sim):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        ranks.append(order.index(i))
    return np.array(ranks)


class TestClassify:
    def test_single_class(self, theta, clips):
        m = classify_zero_shot(theta, clips, [label_prompt("ring linear")], [0] * len(clips))
        assert m.top1 == 1.0

    def test_duplicated_views(self, theta, clips):
        texts = [label_prompt(x) for x in LABELS]
        labels = [0, 1, 2, 3] * 2
        one = classify_zero_shot(theta, clips, texts, labels, views=1)
        two = classify_zero_shot(theta, clips, texts, labels, views=2)
        assert (one.top1, one.top5) == (two.top1, two.top5)

    def test_brute_force_argmax(self, theta, clips):
        texts = [label_prompt(x) for x in LABELS]
        labels = np.array([0, 1, 2, 3, 3, 2, 1, 0])
        v, t = embed_clips(theta, clips), embed_texts(theta, texts)
        pred = [max(range(4), key=lambda j: (v[i] @ t[j], -j)) for i in range(len(clips))]
        m = classify_zero_shot(theta, clips, texts, labels)
        assert m.top1 == np.mean(np.array(pred) == labels)

    def test_empty_classes(self, theta, clips):
        with pytest.raises(InvalidArgument):
            classify_zero_shot(theta, clips, [], [])

    def test_topk_ties_go_low(self):
        scores = np.array([[1.0, 1.0, 1.0]])
        assert topk_hits(scores, np.array([0]), 1)[0]
        assert not topk_hits(scores, np.array([2]), 2)[0]

    def test_temporal_views(self):
        clip = np.arange(8)[:, None, None]
        views = temporal_views(clip, 3, 4)
        assert [int(v[0, 0, 0]) for v in views] == [0, 2, 4]
        with pytest.raises(InvalidArgument):
            temporal_views(clip, 0)
        with pytest.raises(InvalidArgument):
            temporal_views(clip, 1, 9)


class TestProtocols:
    def test_ep1_oracle_classifier(self):
        classes = [3, 5, 7, 9]
        labels = np.repeat(classes, 5)
        scores = (labels[:, None] == np.array(classes)[None]).astype(float)
        m = protocol_from_scores("EP1", scores, labels, classes, seed=1)
        assert m.top1 == 1.0 and m.std["top1"] == 0.0 and m.repeats == 10

    def test_ep1_golden_subsets(self):
        got = protocol_subsets("EP1", [1, 6, 11, 12], [1, 6, 11, 12], repeats=10, seed=0)
        assert got == [[11, 12], [1, 6], [1, 12], [11, 12], [6, 11], [11, 12], [6, 12], [11, 12], [6, 12],
                       [1, 12]]

    def test_ep1_needs_two_classes(self):
        with pytest.raises(InvalidArgument):
            protocol_subsets("EP1", [4], [4])

    def test_ep2_single_number(self):
        classes = [0, 1]
        scores = np.array([[1.0, 0.0], [1.0, 0.0]])
        m = protocol_from_scores("EP2", scores, [0, 1], classes)
        assert m.top1 == 0.5 and m.repeats == 1

    @pytest.mark.parametrize("protocol", ["EP3", "K600SPLIT"])
    def test_three_splits(self, protocol):
        classes = list(range(6))
        labels = np.repeat(classes, 4)
        scores = np.random.default_rng(0).normal(size=(len(labels), 6))
        m = protocol_from_scores(protocol, scores, labels, classes, seed=2)
        assert m.repeats == 3
        assert m.top1 == protocol_from_scores(protocol, scores, labels, classes, seed=2).top1

    def test_unknown(self):
        with pytest.raises(InvalidArgument):
            protocol_subsets("EP9", [0, 1], [0, 1])

    def test_run_protocol(self, theta, clips):
        texts = [label_prompt(x) for x in LABELS]
        m = run_protocol("EP2", theta, clips, [10, 11, 12, 13] * 2, [10, 11, 12, 13], texts)
        assert 0.0 <= m.top1 <= 1.0


class TestRetrieval:
    def test_diagonal(self):
        r = recall_at_k(np.eye(5) + 0.1, [1, 5])
        assert r["t2v"][1] == r["v2t"][1] == 1.0

    def test_k_equals_n(self):
        sim = np.random.default_rng(1).normal(size=(6, 6))
        r = recall_at_k(sim, [6])
        assert r["t2v"][6] == r["v2t"][6] == 1.0

    def test_sort_oracle(self):
        rng = np.random.default_rng(2)
        sim = np.round(rng.normal(size=(32, 32)), 1)  # rounding forces ties
        r = recall_at_k(sim, [1, 5, 10])
        for direction, mat in (("v2t", sim), ("t2v", sim.T)):
            ranks = _rank_oracle(mat)
            for k in (1, 5, 10):
                assert r[direction][k] == np.mean(ranks < k)

    def test_retrieval_eval_validation(self, theta, clips):
        caps = [tokenize(f"a video of {x}") for x in LABELS]
        with pytest.raises(InvalidArgument):
            retrieval_eval(theta, clips[:3], caps)
        with pytest.raises(InvalidArgument):
            retrieval_eval(theta, clips[:2], [caps[0], caps[0]], ks=(1,))
        m = retrieval_eval(theta, clips[:4], caps, ks=(1, 4))
        assert m.recall["t2v"][4] == 1.0


class TestSweep:
    def test_grid_rows(self, theta, clips):
        other = Checkpoint(init_params(3))
        texts = [label_prompt(x) for x in LABELS]
        split = (clips, [0, 1, 2, 3] * 2, texts)
        rows = tradeoff_sweep(theta, other, [0.0, 0.5, 1.0], split, split)
        assert [r.lam for r in rows] == [0.0, 0.5, 1.0]
        with pytest.raises(InvalidArgument):
            tradeoff_sweep(theta, other, [1.5], split, split)

    def test_csv_round_trip(self):
        rows = [SweepRow(0.0, 0.5, 0.25), SweepRow(0.5, 0.75, 0.125)]
        text = sweep_csv(rows)
        assert text.splitlines()[0] == "lambda,closeset_top1,zeroshot_top1"
        assert parse_sweep_csv(text) == rows

    def test_metrics_csv(self):
        m = Metrics(top1=0.5, top5=1.0, std={"top1": 0.1})
        assert metrics_csv(m).splitlines()[1] == "top1,0.500000,0.100000"
        assert metrics_csv({"seen": m}).splitlines()[2] == "seen.top5,1.000000,0.000000"

    def test_image_task(self, theta):
        images = np.stack([render_frame(s, (1, 1), 0) for s in ("square", "ring")])
        m = image_task_eval(theta, images, [0, 1], [label_prompt("square"), label_prompt("ring")])
        assert m.top1 in (0.0, 0.5, 1.0)
