"""Synthetic rated corpus: speech-like clean clips, graded degradations, augmentations.

Stands in for a human-rated MOS dataset. Each degraded clip carries a
pseudo-MOS that depends only on its degradation level.
"""
from __future__ import annotations

import json
import os
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, fftconvolve, lfilter

from .audio import SAMPLE_RATE, TARGET_DBFS, AudioClip, SilentClipError, rms, rms_normalize, write_wav

KINDS = ("additive_noise", "lowpass", "clip", "reverb")
N_LEVELS = 10
AUGMENTATIONS = ("invert", "reverse", "time_stretch")
CLEAN_MOS = 5.0
CLEAN_SYSTEM = "clean"


def derive_rng(seed: int, key: str) -> np.random.Generator:
    """Generator keyed on (seed, key); independent of generation order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(key.encode())]))


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    level_index: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}; expected one of {KINDS}")
        if not 0 <= int(self.level_index) < N_LEVELS:
            raise ValueError(f"level_index must be in [0, {N_LEVELS - 1}], got {self.level_index}")


@dataclass
class RatedClip:
    clip: AudioClip | str
    mos: float
    system_id: str
    utterance_id: str
    split: str = "train"

    def __post_init__(self):
        if not 1.0 <= self.mos <= 5.0:
            raise ValueError(f"mos must lie in [1, 5], got {self.mos} for {self.utterance_id}")


# ---------------------------------------------------------------------------
# clean source


def synth_clean(seed: int, dur_s: float, rate: int = SAMPLE_RATE) -> AudioClip:
    """Voiced harmonic complex with syllabic modulation and a wandering formant.

    Unvoiced (high-passed noise) bursts fill the syllable gaps so that the
    signal has energy up to the Nyquist rate.
    """
    if dur_s <= 0:
        raise ValueError(f"dur_s must be > 0, got {dur_s}")
    rng = np.random.default_rng(seed)
    n = int(round(dur_s * rate))
    t = np.arange(n) / rate

    f0 = rng.uniform(90.0, 250.0)
    # slow intonation contour, +-8%
    contour = 1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.2, 0.7) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * contour) / rate
    voiced = np.zeros(n)
    for k in range(1, 9):
        voiced += np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k

    # syllabic amplitude modulation
    am_rate = rng.uniform(3.0, 6.0)
    am_phase = rng.uniform(0, 2 * np.pi)
    envelope = 0.5 * (1 - np.cos(2 * np.pi * am_rate * t + am_phase))
    voiced *= envelope ** 1.5

    # time-varying resonator, coefficients refreshed every block
    block = 256
    centre = 400.0 + 900.0 * (0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 6.3)))
    shaped = np.empty(n)
    zi = np.zeros(2)
    radius = 0.97
    for start in range(0, n, block):
        stop = min(n, start + block)
        theta = 2 * np.pi * centre[start] / rate
        a = [1.0, -2 * radius * np.cos(theta), radius * radius]
        b = [1.0 - radius]
        shaped[start:stop], zi = lfilter(b, a, voiced[start:stop], zi=zi)
    out = voiced + 4.0 * shaped

    # unvoiced bursts in the modulation troughs
    hb, ha = butter(2, 2500.0, btype="highpass", fs=rate)
    fric = lfilter(hb, ha, rng.standard_normal(n))
    gap = (1 - envelope) ** 4
    out += 0.25 * rms(out) / max(rms(fric * gap), 1e-12) * fric * gap

    return rms_normalize(AudioClip(out, rate), TARGET_DBFS)


# ---------------------------------------------------------------------------
# degradations


def snr_db(level_index: int) -> float:
    return 40.0 - 4.0 * level_index


def lowpass_cutoff(level_index: int) -> float:
    """Geometric ladder from 7600 Hz (level 0) to 800 Hz (level 9)."""
    return float(7600.0 * (800.0 / 7600.0) ** (level_index / (N_LEVELS - 1)))


def clip_threshold(level_index: int) -> float:
    """Fraction of the peak; geometric ladder from 1.0 to 0.1."""
    return float(0.1 ** (level_index / (N_LEVELS - 1)))


def reverb_rt60(level_index: int) -> float:
    return 1.2 * level_index / (N_LEVELS - 1)


def pseudo_mos(spec: DegradationSpec) -> float:
    return 5.0 - 4.0 * spec.level_index / (N_LEVELS - 1)


def degrade(clip: AudioClip, spec: DegradationSpec) -> AudioClip:
    x = clip.samples.astype(np.float64)
    if rms(x) == 0.0:
        raise SilentClipError("silent clip: nothing to degrade")
    rng = np.random.default_rng(spec.seed)
    rate = clip.sample_rate
    lvl = spec.level_index

    if spec.kind == "additive_noise":
        noise = rng.standard_normal(len(x))
        noise *= np.sqrt(np.mean(x * x) / np.mean(noise * noise) / 10.0 ** (snr_db(lvl) / 10.0))
        y = x + noise
    elif spec.kind == "lowpass":
        cutoff = min(lowpass_cutoff(lvl), 0.45 * rate)
        b, a = butter(2, cutoff, btype="lowpass", fs=rate)
        y = lfilter(b, a, x)
    elif spec.kind == "clip":
        limit = clip_threshold(lvl) * float(np.max(np.abs(x)))
        y = np.clip(x, -limit, limit)
    else:
        rt60 = reverb_rt60(lvl)
        if rt60 == 0.0:
            y = x.copy()
        else:
            length = int(rt60 * rate)
            n = np.arange(length)
            ir = 0.05 * rng.standard_normal(length) * np.exp(-6.908 * n / (rt60 * rate))
            ir[0] = 1.0
            y = fftconvolve(x, ir)[: len(x)]
    peak = float(np.max(np.abs(y)))
    if peak > 1.0:
        y = y / peak
    return AudioClip(y, rate)


# ---------------------------------------------------------------------------
# augmentations


def time_stretch(samples: np.ndarray, factor: float, frame: int = 512) -> np.ndarray:
    """Overlap-add time scaling with Hann windows at 50% overlap.

    Output length is ``round(factor * len(samples))``; pitch is unchanged to
    first order but phase is not realigned between frames.
    """
    x = np.asarray(samples, dtype=np.float64)
    n_out = max(1, int(round(factor * len(x))))
    hop_out = frame // 2
    hop_in = hop_out / factor
    window = np.hanning(frame + 1)[:-1]
    padded = np.concatenate([np.zeros(hop_out), x, np.zeros(frame)])
    n_frames = -(-(n_out + hop_out) // hop_out) + 1
    y = np.zeros(n_frames * hop_out + frame)
    wsum = np.zeros_like(y)
    for f in range(n_frames):
        src = int(round(f * hop_in))
        seg = padded[src:src + frame]
        if len(seg) < frame:
            seg = np.pad(seg, (0, frame - len(seg)))
        y[f * hop_out:f * hop_out + frame] += seg * window
        wsum[f * hop_out:f * hop_out + frame] += window
    y = np.where(wsum > 1e-3, y / np.maximum(wsum, 1e-3), 0.0)
    return y[hop_out:hop_out + n_out]


def augment(clip: AudioClip, kind: str, rng: np.random.Generator) -> AudioClip:
    if len(clip) == 0:
        raise ValueError("cannot augment an empty clip")
    if kind == "invert":
        return AudioClip(-clip.samples, clip.sample_rate)
    if kind == "reverse":
        return AudioClip(clip.samples[::-1].copy(), clip.sample_rate)
    if kind == "time_stretch":
        factor = float(rng.uniform(0.9, 1.1))
        return AudioClip(np.clip(time_stretch(clip.samples, factor), -1.0, 1.0), clip.sample_rate)
    raise ValueError(f"unknown augmentation {kind!r}; expected one of {AUGMENTATIONS}")


def augment_rated(item: RatedClip, kind: str, rng: np.random.Generator) -> RatedClip:
    """Augment the audio of a rated clip; the label is carried through."""
    if not isinstance(item.clip, AudioClip):
        raise TypeError("augment_rated needs an in-memory AudioClip")
    return RatedClip(augment(item.clip, kind, rng), item.mos, item.system_id, item.utterance_id, item.split)


# ---------------------------------------------------------------------------
# corpus


@dataclass
class CorpusConfig:
    out_dir: str = "corpus"
    seed: int = 0
    n_sources: int = 40
    kinds: tuple[str, ...] = KINDS
    levels: int = N_LEVELS
    per_cell: int = 1
    clip_seconds: float = 3.0
    train_fraction: float = 0.6
    dev_fraction: float = 0.15
    n_nmr: int = 100
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, values: dict) -> "CorpusConfig":
        cfg = cls()
        casts = {"out_dir": str, "seed": int, "n_sources": int, "levels": int, "per_cell": int,
                 "clip_seconds": float, "train_fraction": float, "dev_fraction": float, "n_nmr": int}
        for key, value in values.items():
            if key == "kinds":
                kinds = value if isinstance(value, (list, tuple)) else [k.strip() for k in str(value).split(",") if k.strip()]
                cfg.kinds = tuple(kinds)
            elif key in casts:
                setattr(cfg, key, casts[key](value))
            else:
                raise ValueError(f"unknown corpus config key {key!r}")
        return cfg

    def validate(self) -> None:
        if self.n_sources <= 0 or self.per_cell <= 0 or self.levels <= 0 or not self.kinds:
            raise ValueError("corpus counts must be positive (n_sources, per_cell, levels, kinds)")
        if self.levels > N_LEVELS:
            raise ValueError(f"levels must be <= {N_LEVELS}, got {self.levels}")
        for kind in self.kinds:
            if kind not in KINDS:
                raise ValueError(f"unknown degradation kind {kind!r}")
        if self.clip_seconds <= 0:
            raise ValueError("clip_seconds must be > 0")
        if not (0 < self.train_fraction and 0 <= self.dev_fraction and self.train_fraction + self.dev_fraction <= 1):
            raise ValueError("split fractions must satisfy 0 < train, 0 <= dev, train + dev <= 1")
        if self.n_nmr < 0:
            raise ValueError("n_nmr must be >= 0")


def source_splits(n_sources: int, seed: int, train_fraction: float, dev_fraction: float) -> list[str]:
    """Split label per source index; a source's clips all share its split."""
    order = derive_rng(seed, "splits").permutation(n_sources)
    n_train = max(1, int(round(train_fraction * n_sources)))
    n_dev = int(round(dev_fraction * n_sources))
    labels = [""] * n_sources
    for rank, src in enumerate(order):
        labels[src] = "train" if rank < n_train else "dev" if rank < n_train + n_dev else "test"
    return labels


def system_id(kind: str, level: int) -> str:
    return f"{kind}_L{level}"


def level_of(system: str) -> int | None:
    """Quality level encoded in a system id (``clean`` -> 0, unknown -> None)."""
    if system == CLEAN_SYSTEM:
        return 0
    head, _, tail = system.rpartition("_L")
    if head and tail.isdigit():
        return int(tail)
    return None


def clean_source(seed: int, index: int, dur_s: float) -> AudioClip:
    return synth_clean(int(derive_rng(seed, f"source{index}").integers(2**31)), dur_s)


def nmr_clip(seed: int, index: int, dur_s: float) -> AudioClip:
    return synth_clean(int(derive_rng(seed, f"nmr{index}").integers(2**31)), dur_s)


def gen_corpus(config: CorpusConfig) -> list[dict]:
    """Write WAVs plus ``manifest.jsonl`` (and ``nmr/`` clean references); return the records."""
    config.validate()
    out = Path(config.out_dir)
    try:
        (out / "clips").mkdir(parents=True, exist_ok=True)
        if config.n_nmr:
            (out / "nmr").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out}: {exc.strerror}") from None
    if not os.access(out, os.W_OK):
        raise PermissionError(f"corpus directory not writable: {out}")

    splits = source_splits(config.n_sources, config.seed, config.train_fraction, config.dev_fraction)
    records = []
    for src in range(config.n_sources):
        base = clean_source(config.seed, src, config.clip_seconds)
        utt = f"s{src:03d}_clean"
        write_wav(out / "clips" / f"{utt}.wav", base)
        records.append({"path": f"clips/{utt}.wav", "mos": CLEAN_MOS, "system_id": CLEAN_SYSTEM,
                        "utterance_id": utt, "split": splits[src]})
        for kind in config.kinds:
            for level in range(config.levels):
                for rep in range(config.per_cell):
                    utt = f"s{src:03d}_{kind}_L{level}" + (f"_r{rep}" if config.per_cell > 1 else "")
                    spec = DegradationSpec(kind, level, int(derive_rng(config.seed, utt).integers(2**31)))
                    write_wav(out / "clips" / f"{utt}.wav", degrade(base, spec))
                    records.append({"path": f"clips/{utt}.wav", "mos": round(pseudo_mos(spec), 6),
                                    "system_id": system_id(kind, level), "utterance_id": utt,
                                    "split": splits[src]})
    for i in range(config.n_nmr):
        write_wav(out / "nmr" / f"nmr{i:04d}.wav", nmr_clip(config.seed, i, config.clip_seconds))
    write_manifest(out / "manifest.jsonl", records)
    return records


def write_manifest(path: str | os.PathLike, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({k: rec[k] for k in ("path", "mos", "system_id", "utterance_id", "split")},
                                sort_keys=False) + "\n")


class ManifestError(ValueError):
    pass


def read_manifest(path: str | os.PathLike) -> list[dict]:
    """Parse a JSON-lines manifest; paths are resolved against its directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rec["mos"] = float(rec["mos"])
                for key in ("path", "system_id", "utterance_id"):
                    rec[key] = str(rec[key])
                rec.setdefault("split", "train")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}: line {lineno}: malformed manifest record ({exc})") from None
            if not 1.0 <= rec["mos"] <= 5.0:
                raise ManifestError(f"{path}: line {lineno}: mos {rec['mos']} outside [1, 5]")
            rec["abspath"] = str((path.parent / rec["path"]).resolve())
            records.append(rec)
    return records


def level_histogram(records: list[dict]) -> Counter:
    return Counter(level_of(r["system_id"]) for r in records if r["system_id"] != CLEAN_SYSTEM)
