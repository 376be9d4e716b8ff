"""Pair sampling, the two-task loss and the optimisation loop."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .audio import SAMPLE_RATE, AudioClip, load_audio, normalize_excerpt
from .checkpoint import save_checkpoint
from .infer import NMRBank, predict_mos, project_windows
from .metrics import mse, spearman
from .model import ModelConfig, PairOutput, QualityNet
from .synth import AUGMENTATIONS, CLEAN_MOS, CLEAN_SYSTEM, RatedClip, augment, read_manifest

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
PAIR_AUGMENTATIONS = ("none",) + AUGMENTATIONS


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainingPair:
    x_i: np.ndarray
    x_j: np.ndarray
    y: np.ndarray
    s: float
    source_ids: tuple[str, str]


@dataclass
class TrainConfig:
    lab_manifest: str | None = None
    clean_manifest: str | None = None
    batch_size: int = 64
    lr: float = 1e-4
    epochs: int = 50
    clean_pair_fraction: float = 0.25
    lambda_q: float = 1.0
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    shard_size: int = 16
    dev_nmr: int = 5
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lambda_q > 0:
            raise ValueError(f"lambda_q must be > 0, got {self.lambda_q}")
        if not 0.0 <= self.clean_pair_fraction <= 1.0:
            raise ValueError(f"clean_pair_fraction must be in [0, 1], got {self.clean_pair_fraction}")
        if self.epochs < 0 or self.shard_size < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, shard_size >= 1 and lr > 0")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model"] = self.model.to_dict()
        return out


def pair_labels(mos_i: float, mos_j: float) -> tuple[np.ndarray, float]:
    """One-hot preference ([1, 0] iff the first is strictly better) and |delta MOS|."""
    y = np.array([1.0, 0.0] if mos_i > mos_j else [0.0, 1.0])
    return y, abs(mos_i - mos_j)


def random_crop(samples: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(samples) <= n:
        reps = -(-n // max(1, len(samples)))
        return np.tile(samples, reps)[:n]
    start = int(rng.integers(0, len(samples) - n + 1))
    return samples[start:start + n]


def _draw(d_lab: Sequence[RatedClip], d_clean: Sequence[RatedClip], rng, clean_fraction: float) -> tuple[RatedClip, float]:
    if d_clean and rng.random() < clean_fraction:
        item = d_clean[int(rng.integers(len(d_clean)))]
        return item, CLEAN_MOS
    item = d_lab[int(rng.integers(len(d_lab)))]
    return item, item.mos


def _prepare(item: RatedClip, rng: np.random.Generator, n: int) -> np.ndarray:
    clip = item.clip
    kind = PAIR_AUGMENTATIONS[int(rng.integers(len(PAIR_AUGMENTATIONS)))]
    if kind != "none":
        clip = augment(clip, kind, rng)
    return normalize_excerpt(random_crop(clip.samples, n, rng))


def sample_pair(d_lab: Sequence[RatedClip], d_clean: Sequence[RatedClip], rng: np.random.Generator,
                clean_fraction: float = 0.25, excerpt_samples: int = 48000) -> TrainingPair:
    """Draw two rated clips, augment and crop each, and label the ordered pair.

    Labels come from the original ratings, so augmentation never changes them.
    """
    if not d_lab and not (d_clean and clean_fraction >= 1.0):
        raise ValueError("empty labeled dataset")
    if clean_fraction > 0 and not d_clean:
        raise ValueError("empty clean dataset")
    item_i, mos_i = _draw(d_lab, d_clean, rng, clean_fraction)
    item_j, mos_j = _draw(d_lab, d_clean, rng, clean_fraction)
    y, s = pair_labels(mos_i, mos_j)
    return TrainingPair(_prepare(item_i, rng, excerpt_samples), _prepare(item_j, rng, excerpt_samples), y, s,
                        (item_i.utterance_id, item_j.utterance_id))


def mtl_loss(out: PairOutput, y, s, lambda_q: float = 1.0, stats: dict | None = None) -> nn.Tensor:
    """Preference cross-entropy plus ``lambda_q`` times L1 on the relative rating, averaged over pairs.

    ``log(p)`` is clamped at 1e-12; the number of clamped entries is added to
    ``stats["clamped"]`` when ``stats`` is given.
    """
    y = np.atleast_2d(np.asarray(y, dtype=out.p.dtype))
    s = np.atleast_1d(np.asarray(s, dtype=out.r.dtype))
    if y.shape != out.p.shape or s.shape != out.r.shape:
        raise ValueError(f"label shapes {y.shape}/{s.shape} do not match outputs {out.p.shape}/{out.r.shape}")
    clamped = int(np.count_nonzero((out.p.data < LOG_CLAMP) & (y > 0)))
    if clamped:
        log.warning("log-clamp active on %d preference probabilities", clamped)
    if stats is not None:
        stats["clamped"] = stats.get("clamped", 0) + clamped
    pref = -(nn.log(out.p, floor=LOG_CLAMP) * y).sum(axis=-1)
    rel = nn.absolute(out.r - s)
    return (pref + rel * float(lambda_q)).mean()


# ---------------------------------------------------------------------------
# data


def load_rated(records: Sequence[dict], split: str | None = None) -> list[RatedClip]:
    out = []
    for rec in records:
        if split is not None and rec.get("split") != split:
            continue
        out.append(RatedClip(load_audio(rec["abspath"]), rec["mos"], rec["system_id"], rec["utterance_id"],
                             rec.get("split", "train")))
    return out


def split_datasets(records: Sequence[dict], split: str) -> tuple[list[RatedClip], list[RatedClip]]:
    """(labeled, clean) clips of one split; clean = system ``clean``."""
    chosen = [r for r in records if r.get("split") == split]
    lab = load_rated([r for r in chosen if r["system_id"] != CLEAN_SYSTEM])
    clean = load_rated([r for r in chosen if r["system_id"] == CLEAN_SYSTEM])
    return lab, clean


# ---------------------------------------------------------------------------
# loop


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    dev_spearman: float | None
    dev_mse: float | None

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def evaluate_dev(model: QualityNet, dev: Sequence[RatedClip], nmr: Sequence[AudioClip], n: int) -> tuple[float, float]:
    bank = NMRBank(model, nmr[:n])
    preds = [predict_mos(model, item.clip, bank, n=min(n, len(bank))).mos for item in dev]
    target = [item.mos for item in dev]
    try:
        rho = spearman(preds, target)
    except ValueError:
        rho = float("nan")
    return rho, mse(preds, target)


def train_model(model: QualityNet, d_lab: Sequence[RatedClip], d_clean: Sequence[RatedClip], config: TrainConfig,
                dev: Sequence[RatedClip] = (), dev_nmr: Sequence[AudioClip] = (),
                on_epoch: Callable[[EpochLog, QualityNet], None] | None = None) -> list[EpochLog]:
    """Optimise ``model`` in place; returns the per-epoch log.

    Each batch is split into shards of ``shard_size`` pairs whose gradients
    are summed in shard order before the single Adam step.
    """
    config.validate()
    if not d_lab:
        raise ValueError("empty labeled dataset")
    rng = np.random.default_rng(config.seed)
    params = list(model.params.values())
    opt = nn.Adam(params, lr=config.lr)
    n_samples = model.config.excerpt_samples
    history: list[EpochLog] = []
    pairs_per_epoch = len(d_lab)
    for epoch in range(1, config.epochs + 1):
        total, seen = 0.0, 0
        for start in range(0, pairs_per_epoch, config.batch_size):
            bsz = min(config.batch_size, pairs_per_epoch - start)
            pairs = [sample_pair(d_lab, d_clean, rng, config.clean_pair_fraction, n_samples) for _ in range(bsz)]
            opt.zero_grad()
            batch_loss = 0.0
            for s0 in range(0, bsz, config.shard_size):
                shard = pairs[s0:s0 + config.shard_size]
                out = model.pair_forward(np.stack([p.x_i for p in shard]), np.stack([p.x_j for p in shard]))
                loss = mtl_loss(out, np.stack([p.y for p in shard]), np.array([p.s for p in shard]), config.lambda_q)
                value = float(loss.data)
                if not math.isfinite(value):
                    ids = [p.source_ids for p in shard]
                    raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch starting at pair {start}: {ids}")
                (loss * (len(shard) / bsz)).backward()
                batch_loss += value * len(shard)
            opt.step()
            total += batch_loss
            seen += bsz
        dev_rho = dev_err = None
        if dev and dev_nmr:
            dev_rho, dev_err = evaluate_dev(model, dev, dev_nmr, config.dev_nmr)
        entry = EpochLog(epoch, total / seen, dev_rho, dev_err)
        history.append(entry)
        log.info("epoch %d train_loss %.5f dev_spearman %s dev_mse %s", epoch, entry.train_loss, dev_rho, dev_err)
        if on_epoch is not None:
            on_epoch(entry, model)
    return history


@dataclass
class TrainResult:
    model: QualityNet
    history: list[EpochLog]
    final_path: Path
    best_path: Path
    log_path: Path


def train(config: TrainConfig, nmr_clips: Sequence[AudioClip] | None = None,
          on_epoch: Callable[[EpochLog, QualityNet], None] | None = None) -> TrainResult:
    """Manifest-driven training with best-dev and final checkpoints plus a JSON-lines log."""
    config.validate()
    if not config.lab_manifest:
        raise ValueError("lab_manifest is required")
    lab_records = read_manifest(config.lab_manifest)
    clean_records = read_manifest(config.clean_manifest) if config.clean_manifest else lab_records
    d_lab = load_rated([r for r in lab_records if r.get("split") == "train" and r["system_id"] != CLEAN_SYSTEM])
    d_clean = load_rated([r for r in clean_records if r.get("split") == "train" and r["system_id"] == CLEAN_SYSTEM])
    dev = load_rated([r for r in lab_records if r.get("split") == "dev"])
    if nmr_clips is None:
        nmr_clips = [c.clip for c in load_rated([r for r in clean_records
                                                 if r.get("split") == "dev" and r["system_id"] == CLEAN_SYSTEM])]
    if not d_lab:
        raise ValueError(f"{config.lab_manifest}: no train-split labeled records")

    out_dir = Path(config.checkpoint_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create checkpoint directory {out_dir}: {exc.strerror}") from None
    log_path = out_dir / "train_log.jsonl"
    best_path, final_path = out_dir / "best.ckpt", out_dir / "final.ckpt"
    model = QualityNet(config.model)
    best = {"rho": -math.inf}
    # the output location is left out so runs into different directories stay byte-identical
    meta = {"train_config": {k: v for k, v in config.to_dict().items() if k != "checkpoint_dir"}}

    with open(log_path, "w", encoding="utf-8") as fh:
        def record(entry: EpochLog, m: QualityNet) -> None:
            fh.write(entry.to_json() + "\n")
            fh.flush()
            rho = entry.dev_spearman if entry.dev_spearman is not None and math.isfinite(entry.dev_spearman) else -math.inf
            if rho > best["rho"] or not best_path.exists():
                best["rho"] = rho
                save_checkpoint(best_path, m, {**meta, "epoch": entry.epoch, "dev_spearman": entry.dev_spearman})
            if on_epoch is not None:
                on_epoch(entry, m)

        history = train_model(model, d_lab, d_clean, config, dev=dev, dev_nmr=list(nmr_clips), on_epoch=record)
    save_checkpoint(final_path, model, {**meta, "epoch": config.epochs})
    return TrainResult(model, history, final_path, best_path, log_path)
