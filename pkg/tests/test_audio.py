import io
import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmrmos.audio import (
    AudioClip,
    SilentClipError,
    WavError,
    excerpt,
    load_audio,
    load_wav,
    model_windows,
    read_wav_bytes,
    resample,
    rms,
    rms_normalize,
    wav_bytes,
    window_starts,
    write_wav,
)


def stdlib_wav(frames: np.ndarray, width: int, rate: int = 16000) -> bytes:
    """Integer PCM written by the stdlib ``wave`` module (independent writer)."""
    frames = np.atleast_2d(frames.T).T
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(frames.shape[1])
        w.setsampwidth(width)
        w.setframerate(rate)
        if width == 1:
            raw = (frames + 128).astype(np.uint8).tobytes()
        elif width == 3:
            flat = frames.astype("<i4").reshape(-1)
            raw = b"".join(struct.pack("<i", int(v))[:3] for v in flat)
        else:
            raw = frames.astype(f"<i{width}").tobytes()
        w.writeframes(raw)
    return buf.getvalue()


def float_wav(samples: np.ndarray, rate: int = 16000, bits: int = 32) -> bytes:
    data = samples.astype(f"<f{bits // 8}").tobytes()
    fmt = struct.pack("<HHIIHH", 3, 1, rate, rate * bits // 8, bits // 8, bits)
    return (b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(data)) + b"WAVE"
            + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data)


def tone(freq, seconds=1.0, rate=16000, amp=0.5, phase=0.0):
    t = np.arange(int(round(seconds * rate))) / rate
    return (amp * np.sin(2 * np.pi * freq * t + phase)).astype(np.float32)


class TestWavRead:
    def test_16bit_scaling(self):
        clip = read_wav_bytes(stdlib_wav(np.array([0, 16384, -16384]), 2))
        np.testing.assert_array_equal(clip.samples, [0.0, 0.5, -0.5])
        assert clip.sample_rate == 16000

    def test_stereo_is_channel_mean(self):
        frames = np.stack([np.full(4, 32767), np.zeros(4)], axis=1)
        clip = read_wav_bytes(stdlib_wav(frames, 2))
        np.testing.assert_allclose(clip.samples, 32767 / 32768 / 2)

    @pytest.mark.parametrize("width,full", [(1, 128), (2, 32768), (3, 2 ** 23), (4, 2 ** 31)])
    def test_integer_widths(self, width, full):
        values = np.array([0, full // 2, -full // 2, -full])
        clip = read_wav_bytes(stdlib_wav(values, width))
        np.testing.assert_allclose(clip.samples, [0.0, 0.5, -0.5, -1.0], atol=1e-7)

    @pytest.mark.parametrize("bits", [32, 64])
    def test_float(self, bits):
        x = np.array([0.25, -0.75, 1.0], dtype=np.float64)
        np.testing.assert_allclose(read_wav_bytes(float_wav(x, bits=bits)).samples, x)

    def test_ten_bytes_is_truncated_header(self):
        with pytest.raises(WavError, match="truncated header"):
            read_wav_bytes(b"RIFF\x00\x00\x00\x00WA")

    def test_missing_fmt_names_field(self):
        blob = b"RIFF" + struct.pack("<I", 12) + b"WAVE" + b"data" + struct.pack("<I", 0)
        with pytest.raises(WavError, match="truncated header.*fmt"):
            read_wav_bytes(blob)

    def test_unsupported_encoding(self):
        blob = bytearray(stdlib_wav(np.zeros(3), 2))
        blob[20:22] = struct.pack("<H", 2)  # ADPCM
        with pytest.raises(WavError, match="unsupported encoding"):
            read_wav_bytes(bytes(blob))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.wav"):
            load_wav(tmp_path / "nope.wav")

    def test_file_error_names_path(self, tmp_path):
        path = tmp_path / "bad.wav"
        path.write_bytes(b"0123456789")
        with pytest.raises(WavError, match="bad.wav"):
            load_wav(path)

    def test_write_read_roundtrip(self, tmp_path):
        x = tone(440, 0.1)
        write_wav(tmp_path / "a.wav", AudioClip(x))
        back = load_wav(tmp_path / "a.wav")
        np.testing.assert_allclose(back.samples, x, atol=1 / 32767)
        # the stdlib reader agrees on the header
        with wave.open(str(tmp_path / "a.wav")) as w:
            assert (w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()) == (1, 2, 16000, len(x))

    def test_load_audio_resamples_on_ingest(self, tmp_path):
        path = tmp_path / "b.wav"
        path.write_bytes(float_wav(tone(100, 1.0, rate=8000), rate=8000))
        clip = load_audio(path)
        assert clip.sample_rate == 16000
        assert abs(len(clip) - 16000) <= 1


class TestResample:
    def test_same_rate_is_identity(self):
        x = np.random.default_rng(0).uniform(-1, 1, 1000).astype(np.float32)
        np.testing.assert_array_equal(resample(AudioClip(x), 16000).samples, x)

    def test_48k_sine_keeps_fft_peak(self):
        out = resample(AudioClip(tone(100, 1.0, rate=48000), 48000), 16000)
        assert abs(len(out) - 16000) <= 1
        spectrum = np.abs(np.fft.rfft(out.samples))
        assert np.argmax(spectrum) == 100  # 1 Hz bins over one second

    @pytest.mark.parametrize("n", [1, 2, 7, 100, 8001])
    def test_doubling_length(self, n):
        out = resample(AudioClip(np.full(n, 0.1, np.float32), 8000), 16000)
        assert abs(len(out) - 2 * n) <= 1

    @pytest.mark.parametrize("rate", [0, -16000])
    def test_bad_rate(self, rate):
        with pytest.raises(ValueError, match="target_rate"):
            resample(AudioClip(np.zeros(4)), rate)

    def test_matches_ideal_interpolation(self):
        # a band-limited sine sampled at 22050 Hz, checked against its analytic 16 kHz samples
        src = tone(1234.5, 0.5, rate=22050, phase=0.7)
        out = resample(AudioClip(src, 22050), 16000)
        ideal = tone(1234.5, len(out) / 16000, rate=16000, phase=0.7)[:len(out)]
        np.testing.assert_allclose(out.samples[200:-200], ideal[200:-200], atol=1e-4)

    @settings(max_examples=25, deadline=None)
    @given(freq=st.floats(20.0, 3900.0), phase=st.floats(0.0, 6.28), amp=st.floats(0.05, 0.9))
    def test_round_trip_through_double_rate(self, freq, phase, amp):
        x = tone(freq, 0.25, amp=amp, phase=phase)
        back = resample(resample(AudioClip(x), 32000), 16000).samples
        assert len(back) == len(x)
        assert np.max(np.abs(back - x)) < 1e-3


class TestExcerpt:
    def test_slice(self):
        x = np.arange(5 * 16000, dtype=np.float32) / 1e5
        np.testing.assert_array_equal(excerpt(AudioClip(x), 1.0, 3.0).samples, x[16000:64000])

    def test_tile_repeats_start(self):
        x = np.random.default_rng(1).uniform(-1, 1, 32000).astype(np.float32)
        out = excerpt(AudioClip(x), 0.0, 3.0, pad="tile").samples
        assert len(out) == 48000
        np.testing.assert_array_equal(out[32000:], x[:16000])

    def test_zero_pad(self):
        x = np.ones(32000, np.float32) * 0.3
        out = excerpt(AudioClip(x), 0.0, 3.0, pad="zero").samples
        np.testing.assert_array_equal(out[32000:], 0.0)

    def test_exact_length_idempotent(self):
        x = tone(300, 3.0)
        np.testing.assert_array_equal(excerpt(AudioClip(x), 0.0, 3.0).samples, x)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(1, 5000), start=st.floats(0, 0.5), dur=st.floats(0.001, 0.6),
           pad=st.sampled_from(["tile", "zero"]))
    def test_length_always_exact(self, n, start, dur, pad):
        out = excerpt(AudioClip(np.ones(n, np.float32)), start, dur, pad=pad)
        assert len(out) == int(round(dur * 16000))

    def test_bad_args(self):
        with pytest.raises(ValueError):
            excerpt(AudioClip(np.ones(10)), -1.0, 1.0)
        with pytest.raises(ValueError):
            excerpt(AudioClip(np.ones(10)), 0.0, 0.0)


class TestRmsNormalize:
    def test_already_at_target(self):
        x = np.full(1000, 0.5, np.float32)
        out = rms_normalize(AudioClip(x), 20 * np.log10(0.5))
        np.testing.assert_allclose(out.samples, 0.5, rtol=1e-6)
        assert not out.clamped

    def test_scales_up(self):
        out = rms_normalize(AudioClip(np.full(100, 0.25, np.float32)), 20 * np.log10(0.5))
        np.testing.assert_allclose(out.samples, 0.5, rtol=1e-6)

    def test_silent(self):
        with pytest.raises(SilentClipError, match="silent clip"):
            rms_normalize(AudioClip(np.zeros(100)))

    def test_overshoot_clamps_and_flags(self):
        x = np.zeros(1000, np.float32)
        x[0] = 1.0
        out = rms_normalize(AudioClip(x), -3.0)
        assert out.clamped
        assert np.max(np.abs(out.samples)) <= 1.0

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2 ** 16), target=st.floats(-40.0, -10.0))
    def test_hits_target_and_is_idempotent(self, seed, target):
        x = np.random.default_rng(seed).normal(0, 0.1, 2000).astype(np.float32)
        once = rms_normalize(AudioClip(x), target)
        if not once.clamped:
            assert rms(once.samples) == pytest.approx(10 ** (target / 20), rel=1e-6)
            twice = rms_normalize(once, target)
            np.testing.assert_allclose(twice.samples, once.samples, rtol=1e-6, atol=1e-9)


class TestWindows:
    def test_starts(self):
        assert window_starts(10, 4) == [0, 4, 8]
        assert window_starts(8, 4) == [0, 4]
        assert window_starts(1, 4) == [0]

    def test_model_windows_shape_and_level(self):
        x = tone(200, 7.0)
        w = model_windows(x, 48000)
        assert w.shape == (3, 48000)
        for row in w:
            assert rms(row) == pytest.approx(10 ** (-25 / 20), rel=1e-5)

    def test_empty(self):
        with pytest.raises(ValueError):
            model_windows(np.zeros(0), 100)
