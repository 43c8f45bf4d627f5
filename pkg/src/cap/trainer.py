"""Seeded training loop: precomputed neighbors, Adam, per-epoch trace.

Neighbor addressing happens in the frozen pretrained space, so the
neighbor table is computed once before the first epoch and never
changes. Everything downstream of that is dense float64 math, which
keeps epochs fast and runs bit-reproducible for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .bank import MemoryBank, NeighborSet, top_k_neighbors
from .errors import ConfigError, NumericalError
from .model import (
    HEAD_VARIANTS,
    ModelParams,
    head_frobenius,
    init_model,
    param_items,
    project,
    with_params,
)
from .objective import GradientSet, batch_gradients
from .scoring import batch_scores

SPARSITY_THRESHOLD = 1e-4


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters for one training run.

    The bare defaults are tuned for the standard synthetic suite; the
    named presets carry the reference image-benchmark settings.
    """

    k: int = 16
    lam: float = 2.0
    learning_rate: float = 5e-3
    batch_size: int = 50
    epochs: int = 20
    seed: int = 0
    head_variant: str = "linear"
    attention_enabled: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    scale_euclidean: bool = False

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError(f"k must be at least 1, got {self.k}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.head_variant not in HEAD_VARIANTS:
            raise ConfigError(f"unknown head variant {self.head_variant!r}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")


PRESETS = {
    "cifar": TrainingConfig(k=32, lam=2.0, learning_rate=5e-4, batch_size=64),
    "mvtec": TrainingConfig(k=4, lam=0.1, learning_rate=1e-4, batch_size=16),
}


def preset(name: str) -> TrainingConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}, expected one of {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class TraceRecord:
    epoch: int
    l_s: float
    omega: float
    total: float
    head_frobenius: float
    holdout_normal_mean: float
    holdout_anomaly_mean: float


@dataclass(frozen=True)
class TrainingTrace:
    records: tuple[TraceRecord, ...]

    def to_csv(self) -> str:
        lines = ["epoch,l_s,omega,total,head_frobenius,holdout_normal_mean,holdout_anomaly_mean"]
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.l_s:.12g},{r.omega:.12g},{r.total:.12g},"
                f"{r.head_frobenius:.12g},{r.holdout_normal_mean:.12g},"
                f"{r.holdout_anomaly_mean:.12g}"
            )
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class NeighborTable:
    """Frozen per-sample neighbor addressing, self-exclusion applied."""

    indices: np.ndarray  # (N, K) int64
    similarities: np.ndarray  # (N, K) float64

    def neighbor_set(self, bank: MemoryBank, i: int) -> NeighborSet:
        idx = self.indices[i]
        return NeighborSet(
            indices=idx.copy(),
            similarities=self.similarities[i].copy(),
            matrix=bank.items[idx].astype(np.float64),
        )


def precompute_neighbors(bank: MemoryBank, k: int) -> NeighborTable:
    """Top-k table over the whole bank, each sample excluding itself."""
    if k > bank.size - 1:
        raise ConfigError(f"k={k} too large for bank of {bank.size} rows with self-exclusion")
    indices = np.empty((bank.size, k), dtype=np.int64)
    similarities = np.empty((bank.size, k))
    items = bank.items.astype(np.float64)
    for i in range(bank.size):
        found = top_k_neighbors(bank, items[i], k, exclude_index=i)
        indices[i] = found.indices
        similarities[i] = found.similarities
    return NeighborTable(indices=indices, similarities=similarities)


@dataclass(frozen=True)
class OptimizerState:
    step: int
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]


def init_optimizer(model: ModelParams) -> OptimizerState:
    zeros = {name: np.zeros_like(mat) for name, mat in param_items(model)}
    return OptimizerState(
        step=0,
        first_moment=zeros,
        second_moment={name: arr.copy() for name, arr in zeros.items()},
    )


def adam_step(
    state: OptimizerState,
    model: ModelParams,
    grads: GradientSet,
    config: TrainingConfig,
) -> tuple[OptimizerState, ModelParams]:
    """Bias-corrected Adam without weight decay."""
    t = state.step + 1
    new_first: dict[str, np.ndarray] = {}
    new_second: dict[str, np.ndarray] = {}
    new_params: dict[str, np.ndarray] = {}
    for name, param in param_items(model):
        g = grads[name]
        if g.shape != param.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match {name} {param.shape}")
        m = config.beta1 * state.first_moment[name] + (1 - config.beta1) * g
        v = config.beta2 * state.second_moment[name] + (1 - config.beta2) * g * g
        m_hat = m / (1 - config.beta1**t)
        v_hat = v / (1 - config.beta2**t)
        new_first[name] = m
        new_second[name] = v
        new_params[name] = param - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return (
        OptimizerState(step=t, first_moment=new_first, second_moment=new_second),
        with_params(model, new_params),
    )


def _holdout_means(
    model: ModelParams,
    bank: MemoryBank,
    holdout: tuple[np.ndarray, np.ndarray | None] | None,
    k: int,
) -> tuple[float, float]:
    if holdout is None:
        return float("nan"), float("nan")
    features, labels = holdout
    scores = batch_scores(model, bank, np.asarray(features, dtype=np.float64), k)
    if labels is None:
        return float(scores.mean()), float("nan")
    y = np.asarray(labels)
    normal = scores[y == 0]
    anomalous = scores[y == 1]
    normal_mean = float(normal.mean()) if normal.size else float("nan")
    anomaly_mean = float(anomalous.mean()) if anomalous.size else float("nan")
    return normal_mean, anomaly_mean


def train(
    bank: MemoryBank,
    config: TrainingConfig,
    holdout: tuple[np.ndarray, np.ndarray | None] | None = None,
) -> tuple[ModelParams, TrainingTrace]:
    """Run the full loop and return the model plus its per-epoch trace.

    The holdout set is scored at every epoch end with the current
    parameters; it never influences the updates.
    """
    config.validate()
    if bank.size <= config.k:
        raise ConfigError(f"bank of {bank.size} rows cannot serve k={config.k} with self-exclusion")
    model = init_model(
        bank.dim,
        variant=config.head_variant,
        attention_enabled=config.attention_enabled,
        seed=config.seed,
    )
    table = precompute_neighbors(bank, config.k)
    items = bank.items.astype(np.float64)
    state = init_optimizer(model)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    records: list[TraceRecord] = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(bank.size)
        sim_sum = 0.0
        con_sum = 0.0
        seen = 0
        for start in range(0, bank.size, config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            queries = items[batch_idx]
            neighbor_rows = items[table.indices[batch_idx]]
            try:
                loss, grads = batch_gradients(
                    model, queries, neighbor_rows, config.lam,
                    scale_euclidean=config.scale_euclidean,
                )
            except NumericalError as exc:
                raise NumericalError(
                    f"{exc} (epoch {epoch}, batch {start // config.batch_size})"
                ) from exc
            state, model = adam_step(state, model, grads, config)
            sim_sum += loss.similarity * batch_idx.size
            con_sum += loss.constraint * batch_idx.size
            seen += batch_idx.size
        normal_mean, anomaly_mean = _holdout_means(model, bank, holdout, config.k)
        l_s = sim_sum / seen
        omega = con_sum / seen
        records.append(
            TraceRecord(
                epoch=epoch,
                l_s=l_s,
                omega=omega,
                total=l_s + config.lam * omega,
                head_frobenius=head_frobenius(model.head),
                holdout_normal_mean=normal_mean,
                holdout_anomaly_mean=anomaly_mean,
            )
        )
    model = replace(
        model,
        metadata={
            "k": config.k,
            "lambda": config.lam,
            "learning_rate": config.learning_rate,
            "batch_size": config.batch_size,
            "epochs": config.epochs,
            "seed": config.seed,
            "head_variant": config.head_variant,
            "attention_enabled": config.attention_enabled,
        },
    )
    return model, TrainingTrace(records=tuple(records))


def collapse_diagnostics(
    model: ModelParams,
    bank: MemoryBank,
    holdout: tuple[np.ndarray, np.ndarray | None] | None = None,
    k: int | None = None,
) -> dict[str, float]:
    """Measurements that make a collapsed head visible.

    Reports the head Frobenius norm, the fraction of near-zero head
    entries, adapted-feature norm statistics over the bank, and holdout
    mean scores when a holdout set is given.
    """
    if k is None:
        k = int(model.metadata.get("k", 1))
    entries = np.concatenate([mat.ravel() for mat in model.head.matrices])
    adapted = project(model.head, bank.items.astype(np.float64))
    norms = np.linalg.norm(adapted, axis=1)
    normal_mean, anomaly_mean = _holdout_means(model, bank, holdout, k)
    return {
        "head_frobenius": head_frobenius(model.head),
        "head_sparsity": float(np.mean(np.abs(entries) < SPARSITY_THRESHOLD)),
        "adapted_norm_mean": float(norms.mean()),
        "adapted_norm_var": float(norms.var()),
        "holdout_normal_mean": normal_mean,
        "holdout_anomaly_mean": anomaly_mean,
    }
