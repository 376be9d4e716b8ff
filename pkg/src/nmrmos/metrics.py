"""Evaluation: regression/correlation metrics, system-level aggregation,
quality-based retrieval precision and a 2-D PCA projection for plotting."""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np


class DegenerateInputError(ValueError):
    """Correlation of a constant series, or too few items."""


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred, dtype=np.float64).reshape(-1)
    b = np.asarray(target, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} predictions vs {b.size} targets")
    return a, b


def mse(pred, target) -> float:
    a, b = _pair(pred, target)
    if a.size == 0:
        raise DegenerateInputError("mse of empty input")
    return float(np.mean((a - b) ** 2))


def pearson(pred, target) -> float:
    a, b = _pair(pred, target)
    if a.size < 2:
        raise DegenerateInputError(f"correlation needs >= 2 items, got {a.size}")
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(np.dot(da, da)), np.sqrt(np.dot(db, db))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("correlation undefined for a constant input")
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    ranks = np.empty(x.size)
    # boundaries of runs of equal values
    edges = np.flatnonzero(np.diff(sorted_x)) + 1
    starts = np.concatenate([[0], edges])
    stops = np.concatenate([edges, [x.size]])
    for lo, hi in zip(starts, stops):
        ranks[order[lo:hi]] = 0.5 * (lo + 1 + hi)
    return ranks


def spearman(pred, target) -> float:
    a, b = _pair(pred, target)
    return pearson(average_ranks(a), average_ranks(b))


@dataclass
class EvalReport:
    level: str
    mse: float
    pearson: float
    spearman: float
    count: int
    pairs: list[tuple[float, float]] = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in asdict(self).items() if k != "pairs"})


def evaluate(pred: Sequence[float], target: Sequence[float], level: str = "utterance") -> EvalReport:
    a, b = _pair(pred, target)
    return EvalReport(level=level, mse=mse(a, b), pearson=pearson(a, b), spearman=spearman(a, b),
                      count=int(a.size), pairs=list(zip(a.tolist(), b.tolist())))


def aggregate_system(scores: Iterable[tuple[str, float]]) -> list[tuple[str, float]]:
    """Mean value per system id, ordered by system id."""
    sums: dict[str, list[float]] = defaultdict(list)
    for system, value in scores:
        sums[system].append(float(value))
    if not sums:
        raise ValueError("aggregate_system needs at least one score")
    return [(k, float(np.mean(v))) for k, v in sorted(sums.items())]


def evaluate_levels(system_ids: Sequence[str], pred: Sequence[float], target: Sequence[float]) -> dict[str, EvalReport]:
    """Utterance-level and system-level reports for the same predictions."""
    utt = evaluate(pred, target, "utterance")
    sys_pred = dict(aggregate_system(zip(system_ids, pred)))
    sys_true = dict(aggregate_system(zip(system_ids, target)))
    keys = sorted(sys_pred)
    system = evaluate([sys_pred[k] for k in keys], [sys_true[k] for k in keys], "system")
    return {"utterance": utt, "system": system}


# ---------------------------------------------------------------------------
# retrieval


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def retrieval_mp(embeddings, labels, k: int) -> float:
    """Mean over all queries of precision@k under cosine similarity.

    The query itself is excluded from its ranking; equal similarities are
    ordered by item index.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise ValueError(f"{x.shape[0] if x.ndim else 0} embeddings vs {y.size} labels")
    n = x.shape[0]
    if k < 1 or k >= n:
        raise ValueError(f"k must be in [1, {n - 1}] for {n} items, got {k}")
    unit = _unit_rows(x)
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    top = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    return float(np.mean(y[top] == y[:, None]))


# ---------------------------------------------------------------------------
# PCA


def _orthogonalize(v: np.ndarray, axes: list[np.ndarray]) -> np.ndarray:
    for _ in range(2):  # twice is enough in floating point
        for u in axes:
            v = v - (v @ u) * u
    return v


def _top_eigvec(cov: np.ndarray, axes: list[np.ndarray], rng: np.random.Generator, tol: float,
                max_iter: int) -> tuple[np.ndarray, float]:
    """Power iteration restricted to the orthogonal complement of ``axes``."""
    scale = max(float(np.abs(cov).max()), np.finfo(float).tiny)
    v = _orthogonalize(rng.standard_normal(cov.shape[0]), axes)
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = _orthogonalize(cov @ v, axes)
        norm = np.linalg.norm(w)
        if norm <= 1e-12 * scale:  # nothing left in the complement: any unit vector there will do
            return v, 0.0
        w /= norm
        if w @ v < 0:
            w = -w
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            break
    return v, float(v @ cov @ v)


def pca2(embeddings, tol: float = 1e-8, max_iter: int = 100_000, seed: int = 0) -> np.ndarray:
    """Project onto the top-2 principal axes, found by power iteration with deflation.

    Each axis is signed so its largest-magnitude loading is positive.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError(f"pca2 needs >= 3 vectors, got {x.shape[0] if x.ndim == 2 else 0}")
    if x.shape[1] < 2:
        raise ValueError("pca2 needs vectors of dimension >= 2")
    centred = x - x.mean(axis=0)
    cov = centred.T @ centred / (x.shape[0] - 1)
    rng = np.random.default_rng(seed)
    axes: list[np.ndarray] = []
    work = cov.copy()
    for _ in range(2):
        v, lam = _top_eigvec(work, axes, rng, tol, max_iter)
        v /= np.linalg.norm(v)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        axes.append(v)
        work = work - lam * np.outer(v, v)
    return centred @ np.stack(axes, axis=1)


def pca_components(embeddings, **kwargs) -> tuple[np.ndarray, np.ndarray]:
    """(projection, axes) where ``projection @ axes.T + mean`` reconstructs rank-2 data."""
    x = np.asarray(embeddings, dtype=np.float64)
    proj = pca2(x, **kwargs)
    centred = x - x.mean(axis=0)
    axes, *_ = np.linalg.lstsq(proj, centred, rcond=None)
    return proj, axes.T


def embeddings_csv(ids: Sequence[str], labels: Sequence, embeddings, coords) -> str:
    emb = np.asarray(embeddings, dtype=np.float64)
    xy = np.asarray(coords, dtype=np.float64)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["utterance_id", "label"] + [f"e{i}" for i in range(emb.shape[1])] + ["pc1", "pc2"])
    for uid, lab, row, pc in zip(ids, labels, emb, xy):
        writer.writerow([uid, lab] + [f"{v:.8g}" for v in row] + [f"{pc[0]:.8g}", f"{pc[1]:.8g}"])
    return buf.getvalue()


def scatter_csv(ids: Sequence[str], pred: Sequence[float], target: Sequence[float]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["utterance_id", "predicted", "target"])
    for uid, p, t in zip(ids, pred, target):
        writer.writerow([uid, f"{p:.8g}", f"{t:.8g}"])
    return buf.getvalue()
