"""MOS readout against clean non-matching references, and pairwise preference."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .audio import SAMPLE_RATE, AudioClip, model_windows, resample
from .model import QualityNet

MIN_TEST_SECONDS = 0.1
DEFAULT_NMR_COUNT = 100


@dataclass
class MosEstimate:
    mos: float
    per_nmr: list[float]
    mean_r: float
    std_r: float
    n: int
    utterance_id: str | None = field(default=None)

    def to_dict(self) -> dict:
        out = {"mos": self.mos, "mean_r": self.mean_r, "std_r": self.std_r, "n": self.n,
               "per_nmr": self.per_nmr}
        if self.utterance_id is not None:
            out = {"utterance_id": self.utterance_id, **out}
        return out


def mos_from_relative(mean_r: float) -> float:
    return float(min(5.0, max(1.0, 5.0 - mean_r)))


def _samples(clip) -> np.ndarray:
    if isinstance(clip, AudioClip):
        if clip.sample_rate != SAMPLE_RATE:
            clip = resample(clip, SAMPLE_RATE)
        return clip.samples
    return np.asarray(clip, dtype=np.float32).reshape(-1)


def project_windows(model: QualityNet, clip, batch: int = 16) -> np.ndarray:
    """Projected frames of each non-overlapping window: [W, T, embed_dim]."""
    windows = model_windows(_samples(clip), model.config.excerpt_samples)
    with nn.no_grad():
        parts = [model.project(windows[i:i + batch]).data for i in range(0, len(windows), batch)]
    return np.concatenate(parts)


class NMRBank:
    """Clean references projected once and reused across test clips."""

    def __init__(self, model: QualityNet, clips: Sequence, mos: Sequence[float] | None = None):
        if len(clips) == 0:
            raise ValueError("empty NMR set")
        self.model = model
        self.windows = [project_windows(model, c) for c in clips]
        self.mos = np.full(len(clips), 5.0) if mos is None else np.asarray(mos, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.windows)


def _pair_outputs(model: QualityNet, z_a: np.ndarray, z_b: np.ndarray, chunk: int = 32):
    """Heads over aligned projected windows, batched; returns (p_first, r) arrays."""
    p_out, r_out = [], []
    with nn.no_grad():
        for i in range(0, len(z_a), chunk):
            out = model.heads(nn.Tensor(z_a[i:i + chunk]), nn.Tensor(z_b[i:i + chunk]))
            p_out.append(out.p.data[:, 0].astype(np.float64))
            r_out.append(out.r.data.astype(np.float64))
    return np.concatenate(p_out), np.concatenate(r_out)


def relative_ratings(model: QualityNet, test_z: np.ndarray, bank: NMRBank, indices: Sequence[int],
                     with_preference: bool = False):
    """Per-NMR relative rating, averaged over test windows (window k pairs with NMR window k mod W)."""
    w_t = len(test_z)
    left, right = [], []
    for j in indices:
        ref = bank.windows[j]
        for k in range(w_t):
            left.append(test_z[k])
            right.append(ref[k % len(ref)])
    p, r = _pair_outputs(model, np.stack(left), np.stack(right))
    per_r = r.reshape(len(indices), w_t).mean(axis=1)
    if with_preference:
        return per_r, p.reshape(len(indices), w_t).mean(axis=1)
    return per_r


def predict_mos(model: QualityNet, test_clip, nmr_set, n: int | None = None, signed: bool = False,
                test_windows: np.ndarray | None = None, utterance_id: str | None = None) -> MosEstimate:
    """Absolute MOS as 5 - (mean relative rating over the first ``n`` NMRs), clamped to [1, 5].

    ``nmr_set`` is a list of clips or a prebuilt :class:`NMRBank`. With
    ``signed=True`` references need not be clean: each contributes
    ``mos_ref - r`` or ``mos_ref + r`` depending on which side the preference
    head picks.
    """
    bank = nmr_set if isinstance(nmr_set, NMRBank) else NMRBank(model, nmr_set) if len(nmr_set) else None
    if bank is None or len(bank) == 0:
        raise ValueError("empty NMR set")
    if n is None:
        n = min(DEFAULT_NMR_COUNT, len(bank))
    if n <= 0:
        raise ValueError(f"n must be >= 1, got {n}")
    if n > len(bank):
        raise ValueError(f"n={n} exceeds the {len(bank)} available NMRs")
    if test_windows is None:
        samples = _samples(test_clip)
        if len(samples) < MIN_TEST_SECONDS * SAMPLE_RATE:
            raise ValueError(f"test clip shorter than {MIN_TEST_SECONDS} s ({len(samples)} samples)")
        test_windows = project_windows(model, samples)
    indices = list(range(n))
    if signed:
        per_r, pref = relative_ratings(model, test_windows, bank, indices, with_preference=True)
        sign = np.where(pref > 0.5, 1.0, -1.0)
        estimates = bank.mos[:n] + sign * per_r
        mean_r = float(np.mean(per_r))
        mos = float(np.clip(np.mean(estimates), 1.0, 5.0))
    else:
        per_r = relative_ratings(model, test_windows, bank, indices)
        mean_r = float(np.mean(per_r))
        mos = mos_from_relative(mean_r)
    return MosEstimate(mos=mos, per_nmr=[float(v) for v in per_r], mean_r=mean_r,
                       std_r=float(np.std(per_r)), n=n, utterance_id=utterance_id)


def prefer(model: QualityNet, a, b) -> float:
    """Probability that ``a`` is cleaner than ``b``, symmetrized over both input orders.

    ``prefer(a, b) + prefer(b, a) == 1`` exactly and ``prefer(x, x) == 0.5``.
    """
    za, zb = project_windows(model, a), project_windows(model, b)
    count = max(len(za), len(zb))
    left = np.stack([za[k % len(za)] for k in range(count)])
    right = np.stack([zb[k % len(zb)] for k in range(count)])
    p_ab, _ = _pair_outputs(model, left, right)
    p_ba, _ = _pair_outputs(model, right, left)
    d = float(np.mean(p_ab - p_ba))
    # 1 - q is exact for q in [0.5, 1], which makes the two orders sum to 1
    if d >= 0:
        return 0.5 + d / 2.0
    return 1.0 - (0.5 + (-d) / 2.0)
