import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.io import wavfile

from textcue.audio import (AudioSignal, FrameSpec, MultiChannelError, UnsupportedEncodingError,
                           EmptySignalError, bartlett_cola_window, frame_count, frame_signal,
                           overlap_add, read_wav, rms, write_wav)


def test_signal_rejects_nan_and_bad_rate():
    with pytest.raises(ValueError):
        AudioSignal(np.array([0.0, np.nan]), 8000)
    with pytest.raises(ValueError):
        AudioSignal(np.zeros(4), 0)


def test_frame_spec_requires_even_length():
    with pytest.raises(ValueError):
        FrameSpec(3)
    assert FrameSpec(40).hop == 20


def test_silence_round_trip(tmp_path):
    sig = AudioSignal(np.zeros(16000), 16000)
    write_wav(sig, tmp_path / "s.wav")
    back = read_wav(tmp_path / "s.wav")
    assert len(back) == 16000 and back.sample_rate == 16000 and not back.samples.any()


def test_float_round_trip_is_bit_exact(tmp_path):
    x = np.random.default_rng(1).uniform(-1, 1, 1234).astype(np.float32).astype(np.float64)
    write_wav(AudioSignal(x, 8000), tmp_path / "f.wav")
    assert np.array_equal(read_wav(tmp_path / "f.wav").samples, x)


def test_pcm16_round_trip_within_one_lsb(tmp_path):
    for seed in range(5):
        x = np.random.default_rng(seed).uniform(-0.999, 0.999, 500)
        write_wav(AudioSignal(x, 8000), tmp_path / "p.wav", subtype="pcm16")
        assert np.max(np.abs(read_wav(tmp_path / "p.wav").samples - x)) <= 1 / 32768


def test_clipping_is_counted(tmp_path):
    n = write_wav(AudioSignal(np.array([0.0, 1.5, -0.2]), 8000), tmp_path / "c.wav")
    assert n == 1
    assert read_wav(tmp_path / "c.wav").samples[1] == 1.0


def test_empty_signal_file(tmp_path):
    write_wav(AudioSignal(np.zeros(0), 8000), tmp_path / "e.wav")
    assert len(read_wav(tmp_path / "e.wav")) == 0


def test_read_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_wav(tmp_path / "missing.wav")
    wavfile.write(tmp_path / "st.wav", 8000, np.zeros((10, 2), dtype=np.float32))
    with pytest.raises(MultiChannelError, match="multi-channel"):
        read_wav(tmp_path / "st.wav")
    wavfile.write(tmp_path / "i32.wav", 8000, np.zeros(10, dtype=np.int32))
    with pytest.raises(UnsupportedEncodingError):
        read_wav(tmp_path / "i32.wav")


def test_rms_cases():
    assert rms(AudioSignal(np.full(10, 0.5), 8000)) == pytest.approx(0.5)
    t = np.arange(8000) / 8000
    assert abs(rms(np.sin(2 * np.pi * 5 * t)) - 1 / np.sqrt(2)) < 1e-6
    assert rms(np.zeros(5)) == 0.0
    with pytest.raises(EmptySignalError):
        rms(np.zeros(0))


def test_frame_count_examples():
    spec = FrameSpec(40)
    assert frame_count(16000, spec) == 799
    assert frame_count(40, spec) == 1
    assert frame_count(60, spec) == 2


@given(st.integers(1, 3000), st.sampled_from([2, 4, 16, 40]))
def test_frame_count_monotone(n, L):
    spec = FrameSpec(L)
    assert frame_count(n + 1, spec) >= frame_count(n, spec)


def test_overlap_add_trivial_cases():
    spec = FrameSpec(8)
    f = np.random.default_rng(0).standard_normal((1, 8))
    assert np.array_equal(overlap_add(f, spec), f[0])
    assert not overlap_add(np.zeros((5, 8)), spec).any()
    assert len(overlap_add(np.zeros((5, 8)), spec)) == 4 * 4 + 8


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 400), st.sampled_from([4, 8, 40]), st.integers(0, 2 ** 31 - 1))
def test_cola_slice_and_overlap_add_round_trip(n, L, seed):
    spec = FrameSpec(L)
    x = np.random.default_rng(seed).standard_normal(n)
    # one hop of zeros on each side so every real sample sits under two frames
    padded = np.concatenate([np.zeros(spec.hop), x, np.zeros(spec.hop)])
    frames = frame_signal(padded, spec, bartlett_cola_window(L))
    y = overlap_add(frames, spec)[spec.hop: spec.hop + n]
    assert np.allclose(y, x, rtol=1e-6, atol=1e-6 * max(1.0, np.abs(x).max()))


def test_overlap_add_is_linear():
    spec = FrameSpec(16)
    r = np.random.default_rng(3)
    f1, f2 = r.standard_normal((2, 7, 16))
    a, b = 0.7, -2.3
    assert np.allclose(overlap_add(a * f1 + b * f2, spec),
                       a * overlap_add(f1, spec) + b * overlap_add(f2, spec), atol=1e-9)
