"""Seeded synthetic feature clouds and independent brute-force oracles.

The generator produces desk-scale stand-ins for pretrained feature
distributions: a mixture of unit-covariance Gaussian modes, shifted into
the positive orthant (post-activation embeddings concentrate there,
which materially affects cosine k-NN behavior), with anomalies displaced
from the modes along random directions.

The oracles deliberately share no computation with the engine modules
they check: plain sorting for neighbor search, exhaustive pair counting
for AUROC.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .bank import MemoryBank, NeighborSet
from .errors import DataError

# Versioned standard suite: acceptance measurements reference these
# exact generator settings by name, with seeds 0 through 9.
STANDARD_SUITE = "synth-std-v1"
STANDARD_DIM = 64
STANDARD_N_TRAIN = 2000
STANDARD_N_TEST_NORMAL = 500
STANDARD_N_TEST_ANOMALY = 500
STANDARD_N_MODES = 3
STANDARD_ANOMALY_OFFSET = 6.0
STANDARD_MODE_RADIUS = 3.0
STANDARD_CENTER_SHIFT = 14.0
STANDARD_NORM_SPREAD = 0.2
STANDARD_SEEDS = tuple(range(10))


@dataclass(frozen=True)
class SyntheticInstance:
    """One generated train/test split plus the settings that produced it."""

    train_normals: np.ndarray  # (n_train, d) float64
    test_features: np.ndarray  # (n_test, d) float64
    test_labels: np.ndarray  # (n_test,) int64, 1 = anomaly
    params: dict[str, Any]


def gaussian_cluster_instance(
    d: int,
    n_train: int,
    n_test_normal: int,
    n_test_anomaly: int,
    n_modes: int,
    anomaly_offset: float,
    seed: int,
    mode_radius: float = STANDARD_MODE_RADIUS,
    center_shift: float = STANDARD_CENTER_SHIFT,
    mode_norm_spread: float = STANDARD_NORM_SPREAD,
) -> SyntheticInstance:
    """Mixture-of-Gaussians feature cloud with displaced anomalies.

    Mode centers sit at ``center_shift`` along the all-ones direction
    plus ``mode_radius`` along seeded random unit directions; samples add
    unit-covariance noise. Each anomaly displaces its mode center by
    ``anomaly_offset`` along its own random unit direction.

    ``mode_norm_spread`` scales the mode centers to different norms
    (factors from 1-spread to 1+spread). Pretrained feature clouds carry
    exactly this kind of per-cluster scale variation, and it is what
    makes adaptation profitable: cosine scores against a fixed bank are
    scale-sensitive, so a learned head can equalize the clusters.
    """
    if d < 2:
        raise DataError(f"d must be at least 2, got {d}")
    for name, value in (
        ("n_train", n_train),
        ("n_test_normal", n_test_normal),
        ("n_test_anomaly", n_test_anomaly),
        ("n_modes", n_modes),
    ):
        if value < 1:
            raise DataError(f"{name} must be at least 1, got {value}")
    if anomaly_offset < 0:
        raise DataError(f"anomaly_offset must be non-negative, got {anomaly_offset}")
    if not 0 <= mode_norm_spread < 1:
        raise DataError(f"mode_norm_spread must lie in [0, 1), got {mode_norm_spread}")

    rng = np.random.default_rng(seed)
    ones_dir = np.ones(d) / np.sqrt(d)
    mode_dirs = rng.normal(size=(n_modes, d))
    mode_dirs /= np.linalg.norm(mode_dirs, axis=1, keepdims=True)
    if n_modes > 1:
        scales = 1.0 + mode_norm_spread * np.linspace(-1.0, 1.0, n_modes)
    else:
        scales = np.ones(1)
    centers = scales[:, None] * (center_shift * ones_dir + mode_radius * mode_dirs)

    def draw_normals(count: int) -> np.ndarray:
        modes = rng.integers(0, n_modes, size=count)
        return centers[modes] + rng.standard_normal((count, d))

    train = draw_normals(n_train)
    test_normal = draw_normals(n_test_normal)
    anom_modes = rng.integers(0, n_modes, size=n_test_anomaly)
    directions = rng.normal(size=(n_test_anomaly, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    test_anomaly = (
        centers[anom_modes]
        + anomaly_offset * directions
        + rng.standard_normal((n_test_anomaly, d))
    )

    features = np.concatenate([test_normal, test_anomaly], axis=0)
    labels = np.concatenate(
        [np.zeros(n_test_normal, dtype=np.int64), np.ones(n_test_anomaly, dtype=np.int64)]
    )
    params = {
        "d": d,
        "n_train": n_train,
        "n_test_normal": n_test_normal,
        "n_test_anomaly": n_test_anomaly,
        "n_modes": n_modes,
        "anomaly_offset": anomaly_offset,
        "mode_radius": mode_radius,
        "center_shift": center_shift,
        "mode_norm_spread": mode_norm_spread,
        "seed": seed,
    }
    return SyntheticInstance(
        train_normals=train, test_features=features, test_labels=labels, params=params
    )


def standard_instance(seed: int) -> SyntheticInstance:
    """One seed of the versioned standard suite."""
    instance = gaussian_cluster_instance(
        d=STANDARD_DIM,
        n_train=STANDARD_N_TRAIN,
        n_test_normal=STANDARD_N_TEST_NORMAL,
        n_test_anomaly=STANDARD_N_TEST_ANOMALY,
        n_modes=STANDARD_N_MODES,
        anomaly_offset=STANDARD_ANOMALY_OFFSET,
        seed=seed,
        mode_radius=STANDARD_MODE_RADIUS,
        center_shift=STANDARD_CENTER_SHIFT,
        mode_norm_spread=STANDARD_NORM_SPREAD,
    )
    instance.params["suite"] = STANDARD_SUITE
    return instance


def knn_oracle(
    bank: MemoryBank, query: np.ndarray, k: int, exclude: int | None = None
) -> NeighborSet:
    """Neighbor search by full sort, independent of the bank's own path.

    Computes every similarity with scalar double-precision arithmetic
    and sorts all indices, breaking ties by lower index.
    """
    q = np.asarray(query, dtype=np.float64)
    q_norm = float(np.sqrt(np.sum(q * q)))
    rows = [np.asarray(bank.items[i], dtype=np.float64) for i in range(bank.size)]
    sims = []
    for i, row in enumerate(rows):
        if exclude is not None and i == exclude:
            continue
        row_norm = float(np.sqrt(np.sum(row * row)))
        value = float(np.dot(row, q)) / (row_norm * q_norm)
        value = min(1.0, max(-1.0, value))
        sims.append((i, value))
    sims.sort(key=lambda pair: (-pair[1], pair[0]))
    top = sims[:k]
    indices = np.array([i for i, _ in top], dtype=np.int64)
    similarities = np.array([v for _, v in top], dtype=np.float64)
    matrix = np.stack([rows[i] for i in indices])
    return NeighborSet(indices=indices, similarities=similarities, matrix=matrix)


def pairwise_auroc_oracle(scores: np.ndarray, labels: np.ndarray) -> float:
    """(wins + 0.5 * ties) / (P * N) over every anomaly/normal pair."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise DataError("need at least one sample of each class")
    wins = np.sum(pos[:, None] > neg[None, :])
    ties = np.sum(pos[:, None] == neg[None, :])
    return float((wins + 0.5 * ties) / (pos.size * neg.size))
