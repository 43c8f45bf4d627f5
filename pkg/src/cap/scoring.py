"""Anomaly scoring, the no-adaptation baseline, and rank-based AUROC.

Scores are one minus the cosine between the adapted query and its normal
representation, so they live in [0, 2]. The baseline scores directly in
pretrained space against the mean of the top-K neighbor rows. AUROC uses
midrank tie handling, which makes it equal an exhaustive pairwise
comparison exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .bank import MIN_NORM, MemoryBank, top_k_neighbors
from .errors import DataError
from .model import ModelParams, forward
from .objective import batch_forward, row_cosine

log = logging.getLogger(__name__)

DEGENERATE_SCORE = 2.0


@dataclass(frozen=True)
class ScoreReport:
    """Per-sample scores plus optional labels, AUROC, and class statistics."""

    ids: tuple[Any, ...]
    scores: np.ndarray
    labels: np.ndarray | None = None
    auroc: float | None = None
    baseline_scores: np.ndarray | None = None
    baseline_auroc: float | None = None
    normal_mean: float | None = None
    normal_std: float | None = None
    anomaly_mean: float | None = None
    anomaly_std: float | None = None


def _score_from_pair(z_hat: np.ndarray, z_normal: np.ndarray) -> float:
    nu = float(np.linalg.norm(z_hat))
    nv = float(np.linalg.norm(z_normal))
    if nu <= MIN_NORM or nv <= MIN_NORM:
        log.warning("degenerate adapted norm, score forced to %s", DEGENERATE_SCORE)
        return DEGENERATE_SCORE
    return float(1.0 - row_cosine(z_hat[np.newaxis], z_normal[np.newaxis])[0])


def anomaly_score(model: ModelParams, bank: MemoryBank, query: np.ndarray, k: int) -> float:
    """Score one query: top-k neighbors (no exclusion), forward, 1 - cos."""
    neighbors = top_k_neighbors(bank, query, k)
    out = forward(model, np.asarray(query, dtype=np.float64), neighbors)
    return _score_from_pair(out.z_hat, out.z_normal)


def baseline_score_no_adaptation(bank: MemoryBank, query: np.ndarray, k: int) -> float:
    """Score in pretrained space: 1 - cos(z, mean of top-k neighbor rows)."""
    neighbors = top_k_neighbors(bank, query, k)
    mean_row = neighbors.matrix.mean(axis=0)
    q = np.asarray(query, dtype=np.float64)
    if np.linalg.norm(mean_row) <= MIN_NORM:
        log.warning("degenerate neighbor mean, score forced to %s", DEGENERATE_SCORE)
        return DEGENERATE_SCORE
    return float(1.0 - row_cosine(q[np.newaxis], mean_row[np.newaxis])[0])


def _batch_neighbor_rows(
    bank: MemoryBank, queries: np.ndarray, k: int, chunk: int = 512
) -> np.ndarray:
    """Top-k neighbor rows for each query, stacked (B, K, D)."""
    if k < 1 or k > bank.size:
        raise DataError(f"k={k} out of range for bank of {bank.size} rows")
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != bank.dim:
        raise DataError(f"queries shape {q.shape} does not match bank dim {bank.dim}")
    items = bank.items.astype(np.float64)
    unit_rows = items / bank.norms[:, None]
    gathered = np.empty((q.shape[0], k, bank.dim))
    for start in range(0, q.shape[0], chunk):
        block = q[start : start + chunk]
        norms = np.linalg.norm(block, axis=1, keepdims=True)
        norms = np.maximum(norms, MIN_NORM)
        sims = np.clip((block / norms) @ unit_rows.T, -1.0, 1.0)
        order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        gathered[start : start + chunk] = items[order]
    return gathered


def batch_scores(
    model: ModelParams, bank: MemoryBank, queries: np.ndarray, k: int
) -> np.ndarray:
    """Vectorized anomaly_score over many queries.

    Degenerate query or adapted norms get the forced score instead of an
    error so one bad row cannot abort a whole evaluation.
    """
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != model.dim:
        raise DataError(f"queries shape {q.shape} does not match model dim {model.dim}")
    if not np.isfinite(q).all():
        raise DataError("queries contain non-finite entries")
    q_norms = np.linalg.norm(q, axis=1)
    valid = q_norms > MIN_NORM
    scores = np.full(q.shape[0], DEGENERATE_SCORE)
    if valid.any():
        rows = _batch_neighbor_rows(bank, q[valid], k)
        z_hat, z_normal = batch_forward(model, q[valid], rows)
        ok = (np.linalg.norm(z_hat, axis=1) > MIN_NORM) & (
            np.linalg.norm(z_normal, axis=1) > MIN_NORM
        )
        inner = np.full(z_hat.shape[0], DEGENERATE_SCORE)
        inner[ok] = 1.0 - row_cosine(z_hat[ok], z_normal[ok])
        scores[valid] = inner
        if not ok.all():
            log.warning("%d degenerate adapted norms, scores forced", int((~ok).sum()))
    if not valid.all():
        log.warning("%d degenerate query norms, scores forced", int((~valid).sum()))
    return scores


def batch_baseline_scores(bank: MemoryBank, queries: np.ndarray, k: int) -> np.ndarray:
    """Vectorized baseline_score_no_adaptation over many queries."""
    q = np.asarray(queries, dtype=np.float64)
    q_norms = np.linalg.norm(q, axis=1)
    valid = q_norms > MIN_NORM
    scores = np.full(q.shape[0], DEGENERATE_SCORE)
    if valid.any():
        rows = _batch_neighbor_rows(bank, q[valid], k)
        means = rows.mean(axis=1)
        ok = np.linalg.norm(means, axis=1) > MIN_NORM
        inner = np.full(means.shape[0], DEGENERATE_SCORE)
        inner[ok] = 1.0 - row_cosine(q[valid][ok], means[ok])
        scores[valid] = inner
    return scores


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their group's average rank."""
    order = np.argsort(values, kind="stable")
    sorted_values = values[order]
    new_group = np.r_[True, sorted_values[1:] != sorted_values[:-1]]
    group_id = np.cumsum(new_group) - 1
    counts = np.bincount(group_id)
    ends = np.cumsum(counts)
    starts = ends - counts + 1
    # start+end is an integer sum, so the midrank is exactly representable
    mid = (starts + ends) / 2.0
    ranks = np.empty(values.shape[0])
    ranks[order] = mid[group_id]
    return ranks


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUROC with midrank ties; 1 = anomaly, higher = worse."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise DataError(f"scores shape {s.shape} does not match labels {y.shape}")
    if not np.isfinite(s).all():
        raise DataError("scores contain non-finite entries")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise DataError("auroc needs at least one sample of each class")
    ranks = _midranks(s)
    pos_rank_sum = float(np.sum(ranks[y == 1]))
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def evaluate(
    model: ModelParams,
    bank: MemoryBank,
    features: np.ndarray,
    k: int,
    labels: np.ndarray | None = None,
    ids: Sequence[Any] | None = None,
) -> ScoreReport:
    """Score a test set and compare adapted against the baseline.

    AUROC fields are filled only when labels with both classes are
    supplied; class means and stds likewise need labels.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise DataError(f"test set must be a non-empty matrix, got {features.shape}")
    if ids is None:
        id_tuple: tuple[Any, ...] = tuple(range(features.shape[0]))
    else:
        id_tuple = tuple(ids)
        if len(id_tuple) != features.shape[0]:
            raise DataError(f"got {len(id_tuple)} ids for {features.shape[0]} rows")
    scores = batch_scores(model, bank, features, k)
    baseline = batch_baseline_scores(bank, features, k)
    report = {
        "ids": id_tuple,
        "scores": scores,
        "labels": None,
        "auroc": None,
        "baseline_scores": baseline,
        "baseline_auroc": None,
        "normal_mean": None,
        "normal_std": None,
        "anomaly_mean": None,
        "anomaly_std": None,
    }
    if labels is not None:
        y = np.asarray(labels, dtype=np.int64)
        if y.shape != (features.shape[0],):
            raise DataError(f"labels shape {y.shape} does not match test set")
        report["labels"] = y
        normal = scores[y == 0]
        anomalous = scores[y == 1]
        if normal.size:
            report["normal_mean"] = float(normal.mean())
            report["normal_std"] = float(normal.std())
        if anomalous.size:
            report["anomaly_mean"] = float(anomalous.mean())
            report["anomaly_std"] = float(anomalous.std())
        if normal.size and anomalous.size:
            report["auroc"] = auroc(scores, y)
            report["baseline_auroc"] = auroc(baseline, y)
    return ScoreReport(**report)


def format_float(value: float) -> str:
    """Shortest representation that round-trips a float64."""
    return np.format_float_positional(value, unique=True, trim="0")


def report_to_csv(report: ScoreReport) -> str:
    """Per-sample table: id, score, and label when present."""
    lines = []
    if report.labels is None:
        lines.append("id,score")
        for sample_id, score in zip(report.ids, report.scores):
            lines.append(f"{sample_id},{format_float(float(score))}")
    else:
        lines.append("id,score,label")
        for sample_id, score, label in zip(report.ids, report.scores, report.labels):
            lines.append(f"{sample_id},{format_float(float(score))},{int(label)}")
    return "\n".join(lines) + "\n"


def report_summary(report: ScoreReport) -> str:
    """key=value summary block with AUROCs and per-class statistics."""
    pairs: list[tuple[str, Any]] = [("count", len(report.ids))]
    for name in (
        "auroc",
        "baseline_auroc",
        "normal_mean",
        "normal_std",
        "anomaly_mean",
        "anomaly_std",
    ):
        value = getattr(report, name)
        if value is not None:
            pairs.append((name, format_float(float(value))))
    return "\n".join(f"{name}={value}" for name, value in pairs) + "\n"
