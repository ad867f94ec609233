import numpy as np
import pytest

from ovclip.datagen import (
    GRID,
    PATTERN_INDEX,
    SHAPES,
    ClassSpec,
    CorpusConfig,
    build_corpus,
    gen_video,
    label_prompt,
    make_static_video,
    pad_batch,
    render_frame,
    render_trail,
    tokenize,
    write_manifest,
)
from ovclip.errors import InvalidArgument, InvalidConfig

SMALL = CorpusConfig(pretrain_per_shape=4, pretrain_test_per_shape=2, train_per_class=3, test_per_class=2,
                     heldout_per_class=2)


def _frame_set(clip):
    return sorted(f.tobytes() for f in clip)


class TestText:
    def test_label_prompt(self):
        assert label_prompt("square linear") == tokenize("a video of square linear")
        assert label_prompt("ring zigzag").ids == label_prompt("ring zigzag").ids

    def test_unknown_word_named(self):
        with pytest.raises(InvalidArgument, match="hexagon"):
            label_prompt("hexagon linear")

    def test_case_folding_and_length(self):
        assert tokenize("A Video of Ring") == tokenize("a video of ring")
        with pytest.raises(InvalidArgument):
            tokenize(" ".join(["a"] * 100))
        with pytest.raises(InvalidArgument):
            tokenize("   ")

    def test_pad_batch(self):
        batch = pad_batch([tokenize("a ring"), tokenize("a video of ring")])
        assert batch.shape == (2, 4)
        assert batch[0, 2:].tolist() == [0, 0]


class TestRender:
    def test_deterministic(self):
        a = render_frame("cross", (1, 2), 9)
        assert np.array_equal(a, render_frame("cross", (1, 2), 9))

    def test_noiseless_is_binary(self):
        f = render_frame("ring", (0, 3), 0, noise=0.0)
        assert set(np.unique(f).tolist()) <= {0.0, 1.0}
        assert f.sum() > 0

    @pytest.mark.parametrize("pos", [(-1, 0), (0, GRID), (GRID, GRID)])
    def test_off_grid(self, pos):
        with pytest.raises(InvalidArgument):
            render_frame("square", pos, 0)

    def test_static_video(self):
        f = render_frame("square", (2, 2), 1)
        assert np.array_equal(make_static_video(f, 1)[0], f)
        clip = make_static_video(f, 4)
        assert clip.shape[0] == 4 and all(np.array_equal(c, f) for c in clip)
        with pytest.raises(InvalidArgument):
            make_static_video(f, 0)

    def test_trail_brightness_follows_order(self):
        img, track = render_trail(ClassSpec("square", "linear"), 3, noise=0.0)
        levels = []
        for pos in PATTERN_INDEX["linear"]:
            r, c = track[pos]
            levels.append(img[r * 4:(r + 1) * 4, c * 4:(c + 1) * 4].max())
        assert levels == sorted(levels) and levels[0] < levels[-1]


class TestGenVideo:
    @pytest.mark.parametrize("shape", SHAPES)
    def test_confusable_pairs_share_frames(self, shape):
        for a, b in (("linear", "zigzag"), ("holdjump", "alternate")):
            va, _ = gen_video(ClassSpec(shape, a), 11)
            vb, _ = gen_video(ClassSpec(shape, b), 11)
            assert _frame_set(va) == _frame_set(vb)
            assert not np.array_equal(va, vb)

    def test_reversed_linear_is_not_zigzag(self):
        for seed in range(20):
            rev = gen_video(ClassSpec("cross", "linear"), seed)[0][::-1]
            for s2 in range(20):
                assert not np.array_equal(rev, gen_video(ClassSpec("cross", "zigzag"), s2)[0])

    def test_deterministic_and_meta(self):
        clip, meta = gen_video(ClassSpec("ring", "holdjump"), 5)
        clip2, meta2 = gen_video(ClassSpec("ring", "holdjump"), 5)
        assert np.array_equal(clip, clip2) and meta == meta2
        assert clip.shape == (4, 16, 16)
        assert [m["col"] for m in meta][0] == [m["col"] for m in meta][1]

    def test_unknown_pattern(self):
        with pytest.raises(InvalidArgument):
            gen_video(ClassSpec("ring", "spiral"), 0)


class TestCorpus:
    def test_default_split_sizes(self):
        ds = build_corpus(SMALL, seed=0)
        assert len(ds.classes) == 16 and len(ds.seen_ids) == 12 and len(ds.heldout_ids) == 4
        assert len(ds.seen_train) == 12 * 3 and len(ds.heldout_test) == 4 * 2
        assert len(ds.pretrain) == 4 * 4
        assert len(ds.confusable_pairs()) == 4

    def test_same_seed_same_membership(self):
        a, b = build_corpus(SMALL, 3), build_corpus(SMALL, 3)
        for split in a.splits():
            assert [s.video_id for s in a.splits()[split]] == [s.video_id for s in b.splits()[split]]
            assert all(np.array_equal(x.clip, y.clip) for x, y in zip(a.splits()[split], b.splits()[split]))
        c = build_corpus(SMALL, 4)
        assert not np.array_equal(a.seen_train[0].clip, c.seen_train[0].clip)

    def test_heldout_atoms_must_be_seen(self):
        bad = tuple(("square", p) for p in ("linear", "zigzag", "holdjump", "alternate"))
        with pytest.raises(InvalidConfig):
            build_corpus(CorpusConfig(heldout=bad))

    def test_heldout_disjoint_from_training(self):
        ds = build_corpus(SMALL, 0)
        assert not {s.class_id for s in ds.seen_train} & set(ds.heldout_ids)

    def test_captions_tokenize(self):
        ds = build_corpus(SMALL, 0)
        for im in ds.pretrain:
            for cap in im.captions:
                tokenize(cap)

    def test_manifest(self, tmp_path):
        ds = build_corpus(SMALL, 0)
        path = tmp_path / "m.tsv"
        write_manifest(ds, path)
        lines = path.read_text().splitlines()
        assert lines[0].split("\t") == ["sample_id", "split", "class_id", "label"]
        assert len(lines) == 1 + sum(len(v) for v in ds.splits().values())
