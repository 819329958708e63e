import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from rqmotion.data import (F, CorpusSpec, Dataset, MotionSequence, NormStats, batch_iter, denormalize,
                           load_corpus, normalize, read_sequence, render_archetype, save_corpus,
                           synthesize_corpus, write_sequence)
from rqmotion.errors import ConfigError, DimensionError, ExhaustionError, ValidationError


def small_spec(**kw):
    return CorpusSpec.default(train_count=12, eval_count=4, min_frames=40, max_frames=80, **kw)


class TestCorpus:
    def test_deterministic(self):
        a = synthesize_corpus(small_spec(), seed=7)
        b = synthesize_corpus(small_spec(), seed=7)
        for x, y in zip(a.train + a.eval, b.train + b.eval):
            assert x.frames.tobytes() == y.frames.tobytes()
            assert x.caption == y.caption

    def test_seed_changes_corpus(self):
        a = synthesize_corpus(small_spec(), seed=1)
        b = synthesize_corpus(small_spec(), seed=2)
        assert any(x.frames.shape != y.frames.shape or not np.array_equal(x.frames, y.frames)
                   for x, y in zip(a.train, b.train))

    def test_zero_amplitude_is_constant(self):
        for name in ("walk_circle", "jump", "wave", "spin", "squat"):
            seq = render_archetype(name, {"amplitude": 0.0}, 50)
            assert np.ptp(seq.frames, axis=0).max() == 0.0

    def test_walk_circle_closes(self):
        seq = render_archetype("walk_circle", {"radius": 1.0, "laps": 1}, 120)
        root = seq.frames[:, [F["root_x"], F["root_z"]]]
        assert np.abs(root[-1] - root[0]).max() < 1e-3

    def test_empty_archetypes(self):
        with pytest.raises(ConfigError):
            synthesize_corpus(CorpusSpec(archetypes={}), 0)

    def test_unknown_archetype(self):
        with pytest.raises(ConfigError):
            synthesize_corpus(CorpusSpec(archetypes={"fly": {}}), 0)

    def test_lengths_and_captions(self):
        ds = synthesize_corpus(small_spec(), 3)
        assert len(ds.train) == 12 and len(ds.eval) == 4
        assert all(40 <= s.length <= 80 and s.dim == 16 for s in ds.train)
        assert all(s.caption.startswith("a person ") for s in ds.train)

    def test_spec_text_round_trip(self, tmp_path):
        spec = small_spec(seed=5)
        path = tmp_path / "corpus.ini"
        path.write_text(spec.to_text())
        again = CorpusSpec.from_file(path)
        assert again == spec


class TestNormalize:
    def test_identity_stats(self, rng):
        seq = MotionSequence(rng.standard_normal((10, 4)).astype(np.float32))
        out = normalize(seq, NormStats.identity(4))
        assert np.array_equal(out.frames, seq.frames)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 6), st.integers(0, 2 ** 16))
    def test_round_trip(self, T, d, seed):
        r = np.random.default_rng(seed)
        seq = MotionSequence((r.standard_normal((T, d)) * 3 + 1).astype(np.float32))
        stats = NormStats(r.standard_normal(d), r.uniform(0.1, 5.0, d))
        back = denormalize(normalize(seq, stats), stats)
        assert np.abs(back.frames - seq.frames).max() < 1e-5

    def test_constant_feature_clamped(self):
        frames = np.ones((20, 3), np.float32)
        frames[:, 0] = np.arange(20)
        ds = Dataset([MotionSequence(frames)])
        assert ds.stats.std[1] == pytest.approx(1e-6)
        out = normalize(ds.train[0], ds.stats)
        assert np.isfinite(out.frames).all()

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            normalize(MotionSequence(np.zeros((3, 4))), NormStats.identity(5))

    def test_stats_from_train_only(self, rng):
        train = [MotionSequence(rng.standard_normal((10, 2)))]
        ev = [MotionSequence(rng.standard_normal((10, 2)) + 100)]
        ds = Dataset(train, ev)
        np.testing.assert_allclose(ds.stats.mean, train[0].frames.mean(0), atol=1e-6)

    def test_rejects_non_finite(self):
        with pytest.raises(ValidationError):
            MotionSequence(np.array([[np.nan]]))


class TestFiles:
    def test_sequence_round_trip(self, tmp_path, rng):
        seq = MotionSequence(rng.standard_normal((7, 16)), fps=30.0)
        write_sequence(tmp_path / "a.mot", seq)
        raw = (tmp_path / "a.mot").read_bytes()
        assert raw[:4] == (7).to_bytes(4, "little")
        back = read_sequence(tmp_path / "a.mot")
        assert back.frames.tobytes() == seq.frames.tobytes() and back.fps == 30.0

    def test_truncated(self, tmp_path):
        (tmp_path / "bad.mot").write_bytes(b"\x01\x00")
        with pytest.raises(ValidationError):
            read_sequence(tmp_path / "bad.mot")

    def test_corpus_round_trip(self, tmp_path):
        ds = synthesize_corpus(small_spec(), 0)
        save_corpus(ds, tmp_path / "c")
        assert {p.name for p in (tmp_path / "c").iterdir()} == {"train", "eval", "captions"}
        back = load_corpus(tmp_path / "c")
        assert [s.caption for s in back.train] == [s.caption for s in ds.train]
        assert all(np.array_equal(a.frames, b.frames) for a, b in zip(ds.train, back.train))


class TestBatching:
    def test_full_length_single(self):
        seq = MotionSequence(np.arange(40, dtype=np.float32).reshape(20, 2))
        ds = Dataset([seq], stats=NormStats.identity(2))
        b = next(batch_iter(ds, 1, 20, 0))
        assert np.array_equal(b.motion[0].numpy(), seq.frames) and bool(b.mask.all())

    def test_deterministic(self):
        ds = synthesize_corpus(small_spec(), 0)
        a = [b.motion for _, b in zip(range(5), batch_iter(ds, 4, 32, 9))]
        b = [b.motion for _, b in zip(range(5), batch_iter(ds, 4, 32, 9))]
        assert all(torch.equal(x, y) for x, y in zip(a, b))

    def test_windows_contiguous_in_bounds(self):
        base = np.arange(100, dtype=np.float32)[:, None]
        ds = Dataset([MotionSequence(base)], stats=NormStats.identity(1))
        for _, b in zip(range(200), batch_iter(ds, 1, 32, 3)):
            w = b.motion[0, :, 0].numpy()
            assert w.shape == (32,)
            assert np.array_equal(np.diff(w), np.ones(31, np.float32))
            assert 0 <= w[0] and w[-1] <= 99

    def test_exhaustion(self):
        ds = synthesize_corpus(small_spec(), 0)
        with pytest.raises(ExhaustionError):
            next(batch_iter(ds, 13, 32, 0))

    def test_window_too_long_without_padding(self):
        ds = synthesize_corpus(small_spec(), 0)
        with pytest.raises(ValidationError):
            next(batch_iter(ds, 2, 500, 0))
        b = next(batch_iter(ds, 2, 500, 0, pad=True))
        assert b.motion.shape[1] == 500
        assert not bool(b.mask.all())
        assert float(b.motion[~b.mask].abs().sum()) == 0.0

    def test_start_step_skips_ahead(self):
        ds = synthesize_corpus(small_spec(), 0)
        full = [b.motion for _, b in zip(range(8), batch_iter(ds, 4, 32, 1))]
        tail = [b.motion for _, b in zip(range(3), batch_iter(ds, 4, 32, 1, start_step=5))]
        assert all(torch.equal(x, y) for x, y in zip(full[5:], tail))
