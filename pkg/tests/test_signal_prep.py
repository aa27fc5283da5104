import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from taac.errors import ConfigError, DegenerateInputError, EmptyResultError, FormatError
from taac.signal_prep import (Annotation, RawRecording, Segment, extract_segments, peak_normalize,
                              preprocess_recording, read_annotations, read_audio, read_wav, recombine,
                              resample_to, write_wav)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def _seg(seconds, sr=10, tag="A"):
    return Segment(np.arange(int(round(seconds * sr)), dtype=float), tag, sr)


class TestPeakNormalize:
    def test_hand_values(self):
        np.testing.assert_array_equal(peak_normalize(np.array([2.0, -4.0])), [0.5, -1.0])
        np.testing.assert_array_equal(peak_normalize(np.array([-3.0])), [-1.0])

    def test_unit_peak_unchanged(self):
        x = np.array([0.3, -1.0, 0.5])
        np.testing.assert_array_equal(peak_normalize(x), x)

    def test_all_zero(self):
        with pytest.raises(DegenerateInputError):
            peak_normalize(np.zeros(4))

    @given(arrays(np.float64, st.integers(1, 50), elements=finite).filter(lambda a: np.abs(a).max() > 1e-3))
    def test_idempotent(self, x):
        once = peak_normalize(x)
        assert np.array_equal(peak_normalize(once), once)


class TestSegments:
    @pytest.fixture
    def rec(self):
        ann = [Annotation(0.0, 1.0, "A"), Annotation(1.0, 1.5, "B"), Annotation(2.0, 3.0, "A")]
        return RawRecording(np.arange(40, dtype=float), 10, ann)

    def test_keep_a(self, rec):
        out = extract_segments(rec, "A")
        assert len(out) == 2
        np.testing.assert_array_equal(out[0].samples, np.arange(10))
        np.testing.assert_array_equal(out[1].samples, np.arange(20, 30))

    def test_keep_b(self, rec):
        assert len(extract_segments(rec, "B")) == 1

    def test_keep_missing(self, rec):
        with pytest.raises(EmptyResultError):
            extract_segments(rec, "C")

    def test_overlap_rejected(self):
        with pytest.raises(ConfigError):
            RawRecording(np.zeros(40), 10, [Annotation(0, 2, "A"), Annotation(1, 3, "B")])

    def test_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            RawRecording(np.zeros(10), 10, [Annotation(0, 2, "A")])


class TestRecombine:
    def test_greedy_trace(self):
        out = recombine([_seg(1.2), _seg(0.9), _seg(0.5)], 2.0)
        assert len(out) == 1
        assert out[0].duration == pytest.approx(2.1)

    def test_single_exact(self):
        s = _seg(2.0)
        out = recombine([s], 2.0)
        assert len(out) == 1 and np.array_equal(out[0].samples, s.samples)

    def test_insufficient(self):
        assert recombine([_seg(0.5), _seg(0.5)], 2.0) == []

    def test_mixed_speakers(self):
        with pytest.raises(ConfigError):
            recombine([_seg(1, tag="A"), _seg(1, tag="B")], 1.0)

    @given(st.lists(st.integers(1, 40), min_size=1, max_size=20), st.integers(1, 50))
    def test_conservation(self, lens, target_n):
        segs = [_seg(n / 10) for n in lens]
        target = target_n / 10
        out = recombine(segs, target)
        total_in = sum(s.duration for s in segs)
        total_out = sum(c.duration for c in out)
        assert total_out <= total_in + 1e-9
        assert total_in - total_out < target + 1e-9 + max(s.duration for s in segs)
        assert all(c.duration >= target - 1e-9 for c in out)

    def test_remainder_below_target(self):
        segs = [_seg(0.3)] * 7
        out = recombine(segs, 1.0)
        assert 2.1 - sum(c.duration for c in out) < 1.0


class TestResample:
    def test_hand_case(self):
        np.testing.assert_array_equal(resample_to(np.array([0.0, 1.0]), 3), [0.0, 0.5, 1.0])

    def test_identity_length(self):
        x = np.array([3.0, -1.0, 2.0])
        out = resample_to(x, 3)
        assert np.array_equal(out, x) and out is not x

    @given(finite, st.integers(2, 30), st.integers(2, 300))
    def test_constant(self, c, n, L):
        assert np.all(resample_to(np.full(n, c), L) == c)

    @given(arrays(np.float64, st.integers(2, 60), elements=finite), st.integers(2, 200))
    def test_bounds_and_endpoints(self, x, L):
        y = resample_to(x, L)
        assert len(y) == L
        assert y.min() >= x.min() and y.max() <= x.max()
        assert y[0] == x[0] and y[-1] == x[-1]

    def test_short_input(self):
        with pytest.raises(ConfigError):
            resample_to(np.array([1.0]), 4)


class TestIO:
    def test_wav_roundtrip(self, tmp_path):
        x = np.sin(np.linspace(0, 20, 800)) * 0.9
        write_wav(tmp_path / "a.wav", x, 8000)
        y, sr = read_wav(tmp_path / "a.wav")
        assert sr == 8000
        np.testing.assert_allclose(y, x, atol=0.5 / 32768 + 1e-12)

    def test_raw_needs_rate(self, tmp_path):
        np.zeros(4, "<f4").tofile(tmp_path / "a.f32")
        with pytest.raises(ConfigError):
            read_audio(tmp_path / "a.f32")
        x, sr = read_audio(tmp_path / "a.f32", 100)
        assert sr == 100 and len(x) == 4

    def test_annotations_with_header(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("t0,t1,tag\n0,1.5,Participant\n2,3,Ellie\n")
        assert read_annotations(p) == [Annotation(0, 1.5, "Participant"), Annotation(2, 3, "Ellie")]

    def test_annotations_malformed(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("0,1\n")
        with pytest.raises(FormatError, match=":1"):
            read_annotations(p)


def test_full_chain():
    sr = 100
    x = np.concatenate([np.full(150, 0.5), np.full(100, 2.0), np.full(120, -1.0)])
    ann = [Annotation(0, 1.5, "P"), Annotation(1.5, 2.5, "I"), Annotation(2.5, 3.7, "P")]
    clips = preprocess_recording(RawRecording(x, sr, ann), "P", 2.0, 50)
    # 1.5 s + 1.2 s = one 2.7 s clip, normalized by the global peak 2
    assert len(clips) == 1
    assert clips[0].shape == (50,) and clips[0].dtype == np.float32
    assert clips[0][0] == pytest.approx(0.25) and clips[0][-1] == pytest.approx(-0.5)
