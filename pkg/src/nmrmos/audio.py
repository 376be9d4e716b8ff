"""WAV I/O, resampling, excerpting and level normalization.

Everything here is a pure function of its inputs. Samples are held as float32
numpy arrays in [-1, 1].
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np
from scipy.signal import firwin, resample_poly

SAMPLE_RATE = 16000
EXCERPT_SECONDS = 3.0
TARGET_DBFS = -25.0

_FORMAT_PCM = 0x0001
_FORMAT_FLOAT = 0x0003
_FORMAT_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    """Malformed or unsupported WAV data."""


class SilentClipError(ValueError):
    """Raised when an operation needs a non-silent clip."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    clamped: bool = False

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration_seconds(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


# ---------------------------------------------------------------------------
# WAV


def _decode_pcm(data: bytes, bits: int, fmt: int) -> np.ndarray:
    if fmt == _FORMAT_FLOAT:
        if bits == 32:
            return np.frombuffer(data, dtype="<f4").astype(np.float64)
        if bits == 64:
            return np.frombuffer(data, dtype="<f8").copy()
        raise WavError(f"unsupported encoding: {bits}-bit float (bits_per_sample)")
    if bits == 8:
        return (np.frombuffer(data, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    if bits == 16:
        return np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    if bits == 24:
        raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        ints = np.where(ints & 0x800000, ints - (1 << 24), ints)
        return ints.astype(np.float64) / float(1 << 23)
    if bits == 32:
        return np.frombuffer(data, dtype="<i4").astype(np.float64) / float(1 << 31)
    raise WavError(f"unsupported encoding: {bits}-bit integer PCM (bits_per_sample)")


def read_wav_bytes(blob: bytes) -> AudioClip:
    if len(blob) < 12:
        raise WavError(f"truncated header: {len(blob)} bytes, RIFF header needs 12")
    riff, _, wave = struct.unpack("<4sI4s", blob[:12])
    if riff != b"RIFF" or wave != b"WAVE":
        raise WavError(f"not a RIFF/WAVE file: chunk id {riff!r}, form type {wave!r}")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(blob):
        cid, size = struct.unpack("<4sI", blob[pos:pos + 8])
        body = blob[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavError(f"truncated header: fmt chunk has {len(body)} bytes, needs 16")
            tag, channels, rate, _, align, bits = struct.unpack("<HHIIHH", body[:16])
            if tag == _FORMAT_EXTENSIBLE:
                if len(body) < 26:
                    raise WavError("truncated header: extensible fmt chunk missing sub-format")
                tag = struct.unpack("<H", body[24:26])[0]
            fmt = (tag, channels, rate, align, bits)
        elif cid == b"data":
            # a short final data chunk is tolerated; whole frames are kept below
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavError("truncated header: no fmt chunk")
    if data is None:
        raise WavError("truncated header: no data chunk")
    tag, channels, rate, align, bits = fmt
    if tag not in (_FORMAT_PCM, _FORMAT_FLOAT):
        raise WavError(f"unsupported encoding: format tag 0x{tag:04x} (audio_format)")
    if channels < 1:
        raise WavError(f"unsupported encoding: {channels} channels (num_channels)")
    if rate <= 0:
        raise WavError(f"unsupported encoding: sample rate {rate} (sample_rate)")
    frame = channels * bits // 8
    if frame <= 0:
        raise WavError(f"unsupported encoding: block size {frame} (bits_per_sample={bits})")
    usable = len(data) - len(data) % frame
    samples = _decode_pcm(data[:usable], bits, tag).reshape(-1, channels).mean(axis=1)
    return AudioClip(np.clip(samples, -1.0, 1.0), rate)


def load_wav(path: str | os.PathLike) -> AudioClip:
    """Read a PCM/float WAV file into a mono clip at its native rate."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such WAV file: {path}")
    try:
        return read_wav_bytes(path.read_bytes())
    except WavError as exc:
        raise WavError(f"{path}: {exc}") from None


def load_audio(path: str | os.PathLike, rate: int = SAMPLE_RATE) -> AudioClip:
    """Load and resample to ``rate`` (the canonical ingest path)."""
    return resample(load_wav(path), rate)


def wav_bytes(clip: AudioClip) -> bytes:
    """Mono 16-bit little-endian PCM encoding of ``clip``."""
    pcm = np.round(np.clip(clip.samples, -1.0, 1.0) * 32767.0).astype("<i2").tobytes()
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(pcm), b"WAVE", b"fmt ", 16,
                         _FORMAT_PCM, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16,
                         b"data", len(pcm))
    return header + pcm


def write_wav(path: str | os.PathLike, clip: AudioClip) -> None:
    Path(path).write_bytes(wav_bytes(clip))


# ---------------------------------------------------------------------------
# signal ops


def _ar_extend(x: np.ndarray, count: int, order: int = 32, fit_len: int = 2048) -> np.ndarray:
    """Continue ``x`` by ``count`` samples with a least-squares linear predictor.

    Falls back to odd reflection when the segment is too short to fit or the
    prediction diverges.
    """
    seg = x[-fit_len:]
    order = min(order, len(seg) // 4)
    peak = float(np.max(np.abs(seg))) if len(seg) else 0.0
    if order >= 2 and peak > 0:
        rows = np.lib.stride_tricks.sliding_window_view(seg, order + 1)
        a, *_ = np.linalg.lstsq(rows[:, :-1], rows[:, -1], rcond=None)
        buf = list(seg[-order:])
        for _ in range(count):
            buf.append(float(np.dot(a, buf[-order:])))
        ext = np.asarray(buf[order:])
        if np.all(np.isfinite(ext)) and np.max(np.abs(ext), initial=0.0) <= 2.0 * peak:
            return ext
    idx = np.minimum(np.arange(1, count + 1), len(x) - 1)
    return 2.0 * x[-1] - x[len(x) - 1 - idx]


def resample(clip: AudioClip, target_rate: int, zero_crossings: int = 32) -> AudioClip:
    """Band-limited rate conversion with a Kaiser-windowed sinc.

    The anti-aliasing filter spans ``2 * zero_crossings`` taps per polyphase
    branch, cutoff at 92% of the lower Nyquist rate. Both ends are extended
    by linear prediction before filtering, which keeps edge transients small.
    """
    if int(target_rate) <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    target_rate = int(target_rate)
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), target_rate)
    g = gcd(clip.sample_rate, target_rate)
    up, down = target_rate // g, clip.sample_rate // g
    m = max(up, down)
    taps = firwin(2 * zero_crossings * m + 1, 0.92 / m, window=("kaiser", 8.6))
    x = clip.samples.astype(np.float64)
    n_out = -(-len(x) * up // down)
    if len(x) < 2:
        out = resample_poly(x, up, down, window=taps)
        return AudioClip(np.clip(out[:n_out], -1.0, 1.0), target_rate)
    # padding in input samples, a multiple of ``down`` so the output offset is whole
    pad = -(-(zero_crossings * m // up + 1) // down) * down
    padded = np.concatenate([_ar_extend(x[::-1], pad)[::-1], x, _ar_extend(x, pad)])
    out = resample_poly(padded, up, down, window=taps)
    start = pad * up // down
    return AudioClip(np.clip(out[start:start + n_out], -1.0, 1.0), target_rate)


def excerpt(clip: AudioClip, start_s: float, dur_s: float, pad: str = "tile") -> AudioClip:
    """Exactly ``round(dur_s * rate)`` samples starting at ``start_s``.

    Shortfalls are filled by repeating the clip from its start (``tile``) or
    with silence (``zero``).
    """
    if start_s < 0:
        raise ValueError(f"start_s must be >= 0, got {start_s}")
    if dur_s <= 0:
        raise ValueError(f"dur_s must be > 0, got {dur_s}")
    if pad not in ("tile", "zero"):
        raise ValueError(f"pad must be 'tile' or 'zero', got {pad!r}")
    n = int(round(dur_s * clip.sample_rate))
    start = int(round(start_s * clip.sample_rate))
    return AudioClip(_fill(clip.samples, start, n, pad), clip.sample_rate)


def _fill(src: np.ndarray, start: int, n: int, pad: str) -> np.ndarray:
    head = src[start:start + n]
    if len(head) == n:
        return head.copy()
    out = np.zeros(n, dtype=np.float32)
    out[:len(head)] = head
    if pad == "tile" and len(src):
        pos = len(head)
        while pos < n:
            take = min(len(src), n - pos)
            out[pos:pos + take] = src[:take]
            pos += take
    return out


def rms(samples: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(samples, dtype=np.float64))))


def rms_normalize(clip: AudioClip, target_dbfs: float = TARGET_DBFS) -> AudioClip:
    """Scale to the target RMS level; clamp to [-1, 1] (setting ``clamped``) on overshoot."""
    level = rms(clip.samples)
    if level == 0.0:
        raise SilentClipError("silent clip: cannot normalize an all-zero signal")
    gain = 10.0 ** (target_dbfs / 20.0) / level
    scaled = clip.samples.astype(np.float64) * gain
    peak = float(np.max(np.abs(scaled)))
    clamped = peak > 1.0
    if clamped:
        scaled = np.clip(scaled, -1.0, 1.0)
    return AudioClip(scaled, clip.sample_rate, clamped=clamped)


def window_starts(n_samples: int, window: int) -> list[int]:
    """Starts of non-overlapping windows covering ``n_samples`` (at least one)."""
    count = max(1, -(-n_samples // window))
    return [k * window for k in range(count)]


def model_windows(samples: np.ndarray, window: int) -> np.ndarray:
    """Non-overlapping, tile-padded, RMS-normalized windows, shape [W, window]."""
    samples = np.asarray(samples, dtype=np.float32)
    if len(samples) == 0:
        raise ValueError("cannot window an empty clip")
    rows = [_fill(samples, s, window, "tile") for s in window_starts(len(samples), window)]
    return np.stack([normalize_excerpt(r) for r in rows])


def normalize_excerpt(samples: np.ndarray) -> np.ndarray:
    """Model-input convention: RMS at -25 dBFS. Silent input stays silent."""
    level = rms(samples)
    if level == 0.0:
        return np.zeros(len(samples), dtype=np.float32)
    return rms_normalize(AudioClip(samples), TARGET_DBFS).samples
