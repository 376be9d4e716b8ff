"""scikit-learn style wrapper around pair training and NMR-based MOS readout."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .audio import SAMPLE_RATE, AudioClip, model_windows
from .infer import MIN_TEST_SECONDS, NMRBank, predict_mos
from .metrics import spearman
from .model import ModelConfig, QualityNet
from .synth import CLEAN_MOS, CLEAN_SYSTEM, RatedClip
from .train import TrainConfig, train_model


def check_waveforms(X, name: str = "X") -> list[np.ndarray]:
    """Coerce ``X`` to a list of finite 1-D float32 waveforms at 16 kHz.

    Accepts a 2-D array (one clip per row), a sequence of 1-D arrays of any
    length, or :class:`AudioClip` objects (resampled if needed).
    """
    if isinstance(X, np.ndarray) and X.ndim == 2:
        rows = list(X)
    elif isinstance(X, np.ndarray) and X.ndim != 2:
        raise ValueError(f"{name} must be 2-D (clips x samples) or a sequence of 1-D clips, got ndim={X.ndim}")
    else:
        rows = list(X)
    if not rows:
        raise ValueError(f"{name} is empty")
    out = []
    for i, row in enumerate(rows):
        if isinstance(row, AudioClip):
            from .audio import resample
            row = resample(row, SAMPLE_RATE).samples if row.sample_rate != SAMPLE_RATE else row.samples
        arr = np.asarray(row, dtype=np.float32)
        if arr.ndim != 1:
            raise ValueError(f"{name}[{i}] must be 1-D, got shape {arr.shape}")
        if arr.size < MIN_TEST_SECONDS * SAMPLE_RATE:
            raise ValueError(f"{name}[{i}] is shorter than {MIN_TEST_SECONDS} s ({arr.size} samples)")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name}[{i}] contains non-finite samples")
        out.append(arr)
    return out


def check_mos(y, n: int) -> np.ndarray:
    scores = np.asarray(y, dtype=np.float64).reshape(-1)
    if scores.size != n:
        raise ValueError(f"got {n} clips but {scores.size} MOS labels")
    if not np.all(np.isfinite(scores)) or scores.min() < 1.0 or scores.max() > 5.0:
        raise ValueError("MOS labels must be finite and within [1, 5]")
    return scores


def _rated(waves: Sequence[np.ndarray], mos: Sequence[float], prefix: str) -> list[RatedClip]:
    return [RatedClip(AudioClip(w), float(m), CLEAN_SYSTEM if m == CLEAN_MOS else "labeled", f"{prefix}{i}")
            for i, (w, m) in enumerate(zip(waves, mos))]


class NMRMOSRegressor(BaseEstimator, RegressorMixin, TransformerMixin):
    """Learn relative quality from rated clips, predict absolute MOS against clean references.

    ``fit(X, y, clean=None)`` trains on ordered pairs drawn from ``X``
    (rated ``y``) and ``clean`` (assumed MOS 5; taken from the clips of
    ``X`` rated 5 when omitted). The first ``n_nmr`` clean clips become the
    references used by :meth:`predict`. :meth:`transform` returns the
    frame-averaged encoder embedding of each clip and :meth:`score` is the
    Spearman correlation of predictions with ``y``.
    """

    def __init__(self, epochs: int = 50, batch_size: int = 16, lr: float = 1e-3, clean_pair_fraction: float = 0.25,
                 lambda_q: float = 1.0, shard_size: int = 16, n_nmr: int = 10, init: str = "he",
                 random_state: int = 0, verbose: bool = False):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.clean_pair_fraction = clean_pair_fraction
        self.lambda_q = lambda_q
        self.shard_size = shard_size
        self.n_nmr = n_nmr
        self.init = init
        self.random_state = random_state
        self.verbose = verbose

    def _train_config(self) -> TrainConfig:
        seed = int(self.random_state)
        return TrainConfig(batch_size=self.batch_size, lr=self.lr, epochs=self.epochs,
                           clean_pair_fraction=self.clean_pair_fraction, lambda_q=self.lambda_q, seed=seed,
                           shard_size=self.shard_size, model=ModelConfig(init=self.init, seed=seed))

    def fit(self, X, y, clean=None, nmr=None):
        waves = check_waveforms(X)
        mos = check_mos(y, len(waves))
        clean_waves = check_waveforms(clean, "clean") if clean is not None else [w for w, m in zip(waves, mos)
                                                                                  if m == CLEAN_MOS]
        if not clean_waves and self.clean_pair_fraction > 0:
            raise ValueError("no clean clips: pass clean= or include clips rated 5")
        if self.n_nmr < 1:
            raise ValueError(f"n_nmr must be >= 1, got {self.n_nmr}")
        config = self._train_config()
        config.validate()
        model = QualityNet(config.model)
        d_lab = _rated(waves, mos, "x")
        d_clean = _rated(clean_waves, [CLEAN_MOS] * len(clean_waves), "c")

        def report(entry, _m):
            if self.verbose:
                print(entry.to_json(), flush=True)

        self.history_ = train_model(model, d_lab, d_clean, config, on_epoch=report)
        self.model_ = model
        refs = check_waveforms(nmr, "nmr") if nmr is not None else clean_waves
        if not refs:
            raise ValueError("no NMR references available for prediction")
        self.nmr_bank_ = NMRBank(model, refs[:self.n_nmr])
        self.n_params_ = model.n_params
        self.n_features_out_ = model.config.feature_dim
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        waves = check_waveforms(X)
        n = min(self.n_nmr, len(self.nmr_bank_))
        return np.array([predict_mos(self.model_, w, self.nmr_bank_, n=n).mos for w in waves])

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        size = self.model_.config.excerpt_samples
        return np.stack([self.model_.embed(model_windows(w, size)).mean(axis=0) for w in check_waveforms(X)])

    def score(self, X, y, sample_weight=None) -> float:
        if sample_weight is not None:
            raise ValueError("sample_weight is not supported")
        pred = self.predict(X)
        return spearman(pred, check_mos(y, len(pred)))
