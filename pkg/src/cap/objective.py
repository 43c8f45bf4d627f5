"""Loss terms and exact parameter gradients for the adaptation objective.

The objective is the mean similarity loss between each adapted query and
its attention-mixed normal representation, plus a weighted constraint
that pins the adapted space to the raw one (cosine plus squared
Euclidean distance). Gradients are hand-derived and verified elsewhere
against a central finite-difference oracle.

All computation runs in float64. Norm denominators are clamped at
``MIN_NORM`` so training proceeds even after the adapted space collapses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bank import MIN_NORM, NeighborSet
from .errors import DataError, NumericalError
from .model import ForwardOutput, ModelParams, param_items, with_params

FD_STEP = 1e-5


@dataclass(frozen=True)
class LossBreakdown:
    similarity: float
    constraint: float
    lam: float

    @property
    def total(self) -> float:
        return self.similarity + self.lam * self.constraint


@dataclass(frozen=True)
class GradientSet:
    """One gradient matrix per model parameter matrix, keyed like param_items."""

    by_name: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.by_name[name]

    def names(self) -> tuple[str, ...]:
        return tuple(self.by_name)


def row_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity with clamped denominators, in [-1, 1]."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    na = np.maximum(np.linalg.norm(a, axis=1), MIN_NORM)
    nb = np.maximum(np.linalg.norm(b, axis=1), MIN_NORM)
    sims = np.sum(a * b, axis=1) / (na * nb)
    return np.clip(sims, -1.0, 1.0)


def similarity_loss(outputs: Sequence[ForwardOutput]) -> float:
    """Mean of 1 - cos(adapted query, normal representation)."""
    if not outputs:
        raise DataError("similarity_loss needs at least one forward output")
    z_hat = np.stack([out.z_hat for out in outputs])
    z_normal = np.stack([out.z_normal for out in outputs])
    return float(np.mean(1.0 - row_cosine(z_hat, z_normal)))


def constraint_term(
    queries: np.ndarray, adapted: np.ndarray, scale_euclidean: bool = False
) -> float:
    """Mean of 1 - cos(z, z_hat) + ||z - z_hat||^2 over the batch.

    ``scale_euclidean`` divides the squared distance by D, useful when
    feature norms grow with dimension; off by default.
    """
    z = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    z_hat = np.atleast_2d(np.asarray(adapted, dtype=np.float64))
    if z.shape != z_hat.shape:
        raise DataError(f"shape mismatch {z.shape} vs {z_hat.shape}")
    scale = z.shape[1] if scale_euclidean else 1.0
    euclid = np.sum((z - z_hat) ** 2, axis=1) / scale
    return float(np.mean(1.0 - row_cosine(z, z_hat) + euclid))


def total_loss(similarity: float, constraint: float, lam: float) -> LossBreakdown:
    if lam < 0:
        raise DataError(f"constraint weight must be non-negative, got {lam}")
    return LossBreakdown(similarity=float(similarity), constraint=float(constraint), lam=float(lam))


def stack_batch(batch: Sequence[tuple[np.ndarray, NeighborSet]]) -> tuple[np.ndarray, np.ndarray]:
    """Stack (query, neighbors) pairs into (B, D) and (B, K, D) arrays."""
    if not batch:
        raise DataError("empty batch")
    queries = np.stack([np.asarray(z, dtype=np.float64) for z, _ in batch])
    ks = {ns.matrix.shape[0] for _, ns in batch}
    if len(ks) != 1:
        raise DataError(f"mixed neighbor counts in one batch: {sorted(ks)}")
    neighbor_rows = np.stack([ns.matrix for _, ns in batch]).astype(np.float64)
    return queries, neighbor_rows


class _Trace:
    """Intermediates of one batched forward pass, kept for the backward."""

    __slots__ = (
        "queries", "neighbor_rows", "rows", "pre", "hidden", "out",
        "z_hat", "m_hat", "attn", "att_q", "att_k", "z_normal", "mix",
    )

    def __init__(self) -> None:
        self.pre = None
        self.hidden = None
        self.attn = None
        self.att_q = None
        self.att_k = None


def _forward_trace(model: ModelParams, queries: np.ndarray, neighbor_rows: np.ndarray) -> _Trace:
    """Batched pipeline forward keeping everything the backward needs.

    The query and neighbor rows go through the shared head as one
    stacked (B + B*K, D) matrix.
    """
    t = _Trace()
    z = np.asarray(queries, dtype=np.float64)
    m = np.asarray(neighbor_rows, dtype=np.float64)
    if z.ndim != 2 or m.ndim != 3 or m.shape[0] != z.shape[0] or m.shape[2] != z.shape[1]:
        raise DataError(f"bad batch shapes: queries {z.shape}, neighbors {m.shape}")
    if z.shape[1] != model.dim:
        raise DataError(f"batch dim {z.shape[1]} does not match model dim {model.dim}")
    b, k, d = m.shape
    t.queries = z
    t.neighbor_rows = m
    t.rows = np.concatenate([z, m.reshape(b * k, d)], axis=0)

    head = model.head
    if head.variant == "linear":
        t.out = t.rows @ head.matrices[0].T
    elif head.variant == "linear-relu":
        t.pre = t.rows @ head.matrices[0].T
        t.out = np.maximum(t.pre, 0.0)
    else:  # linear-relu-linear
        t.pre = t.rows @ head.matrices[0].T
        t.hidden = np.maximum(t.pre, 0.0)
        t.out = t.hidden @ head.matrices[1].T
    t.z_hat = t.out[:b]
    t.m_hat = t.out[b:].reshape(b, k, d)

    if model.attention is not None:
        # Overflow lands in the finiteness check below; the warning is noise.
        with np.errstate(over="ignore", invalid="ignore"):
            t.att_q = t.m_hat @ model.attention.w_q
            t.att_k = t.m_hat @ model.attention.w_k
            logits = t.att_q @ np.swapaxes(t.att_k, -1, -2) / np.sqrt(d)
        if not np.isfinite(logits).all():
            raise NumericalError("non-finite attention logits")
        logits -= logits.max(axis=-1, keepdims=True)
        weights = np.exp(logits)
        t.attn = weights / weights.sum(axis=-1, keepdims=True)
        attended = t.attn @ t.m_hat
        t.mix = (1.0 + t.attn.sum(axis=1)) / k
    else:
        attended = np.broadcast_to(t.m_hat.mean(axis=1, keepdims=True), t.m_hat.shape)
        t.mix = np.full((b, k), 2.0 / k)
    t.z_normal = (t.m_hat + attended).mean(axis=1)
    return t


def batch_forward(
    model: ModelParams, queries: np.ndarray, neighbor_rows: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Adapted queries and normal representations for a stacked batch."""
    t = _forward_trace(model, queries, neighbor_rows)
    return t.z_hat, t.z_normal


def batch_loss(
    model: ModelParams,
    queries: np.ndarray,
    neighbor_rows: np.ndarray,
    lam: float,
    scale_euclidean: bool = False,
) -> LossBreakdown:
    """Forward-only loss evaluation on a stacked batch."""
    t = _forward_trace(model, queries, neighbor_rows)
    sim = float(np.mean(1.0 - row_cosine(t.z_hat, t.z_normal)))
    con = constraint_term(t.queries, t.z_hat, scale_euclidean=scale_euclidean)
    breakdown = total_loss(sim, con, lam)
    if not np.isfinite(breakdown.total):
        raise NumericalError("non-finite loss")
    return breakdown


def _cosine_pair_grads(
    u: np.ndarray, v: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """cos(u_b, v_b) per row and its gradients w.r.t. u and v.

    Rows whose true norm falls below the clamp contribute no gradient
    through their own norm (the denominator is constant there).
    """
    nu_raw = np.linalg.norm(u, axis=1, keepdims=True)
    nv_raw = np.linalg.norm(v, axis=1, keepdims=True)
    nu = np.maximum(nu_raw, MIN_NORM)
    nv = np.maximum(nv_raw, MIN_NORM)
    act_u = (nu_raw > MIN_NORM).astype(np.float64)
    act_v = (nv_raw > MIN_NORM).astype(np.float64)
    dot = np.sum(u * v, axis=1, keepdims=True)
    cos = dot / (nu * nv)
    du = v / (nu * nv) - cos * u / nu**2 * act_u
    dv = u / (nu * nv) - cos * v / nv**2 * act_v
    return cos[:, 0], du, dv


def batch_gradients(
    model: ModelParams,
    queries: np.ndarray,
    neighbor_rows: np.ndarray,
    lam: float,
    scale_euclidean: bool = False,
) -> tuple[LossBreakdown, GradientSet]:
    """Loss plus exact gradients for every parameter matrix.

    Backward order mirrors the forward: cosine terms, the mixing weights
    and attention (when enabled), then the shared head.
    """
    if lam < 0:
        raise DataError(f"constraint weight must be non-negative, got {lam}")
    t = _forward_trace(model, queries, neighbor_rows)
    b, k, d = t.neighbor_rows.shape
    scale = float(d) if scale_euclidean else 1.0

    # Loss pieces and gradients w.r.t. z_hat and z_normal. The constraint
    # cosine takes z_hat as its second argument.
    cos_sim, d_zhat_sim, d_zn = _cosine_pair_grads(t.z_hat, t.z_normal)
    cos_con, _, d_zhat_con = _cosine_pair_grads(t.queries, t.z_hat)
    diff = t.z_hat - t.queries
    sim = float(np.mean(1.0 - np.clip(cos_sim, -1.0, 1.0)))
    con = float(
        np.mean(1.0 - np.clip(cos_con, -1.0, 1.0) + np.sum(diff * diff, axis=1) / scale)
    )
    breakdown = total_loss(sim, con, lam)
    if not np.isfinite(breakdown.total):
        raise NumericalError("non-finite loss")

    d_zhat = (-d_zhat_sim + lam * (-d_zhat_con + 2.0 * diff / scale)) / b
    d_zn = -d_zn / b

    # Normal representation: direct mixing term, then through attention.
    d_m_hat = t.mix[:, :, None] * d_zn[:, None, :]
    grads: dict[str, np.ndarray] = {}
    if model.attention is not None:
        g_col = np.einsum("bcd,bd->bc", t.m_hat, d_zn) / k
        d_attn = np.broadcast_to(g_col[:, None, :], t.attn.shape)
        d_logits = t.attn * (d_attn - np.sum(d_attn * t.attn, axis=-1, keepdims=True))
        inv_sqrt_d = 1.0 / np.sqrt(d)
        d_q = d_logits @ t.att_k * inv_sqrt_d
        d_k = np.swapaxes(d_logits, -1, -2) @ t.att_q * inv_sqrt_d
        grads_wq = np.tensordot(t.m_hat, d_q, axes=([0, 1], [0, 1]))
        grads_wk = np.tensordot(t.m_hat, d_k, axes=([0, 1], [0, 1]))
        d_m_hat = d_m_hat + d_q @ model.attention.w_q.T + d_k @ model.attention.w_k.T

    # Shared head: stack query-row and neighbor-row gradients like the forward.
    d_out = np.concatenate([d_zhat, d_m_hat.reshape(b * k, d)], axis=0)
    head = model.head
    if head.variant == "linear":
        grads["head0"] = d_out.T @ t.rows
    elif head.variant == "linear-relu":
        d_pre = d_out * (t.pre > 0)
        grads["head0"] = d_pre.T @ t.rows
    else:
        grads["head1"] = d_out.T @ t.hidden
        d_hidden = d_out @ head.matrices[1]
        d_pre = d_hidden * (t.pre > 0)
        grads["head0"] = d_pre.T @ t.rows
    if model.attention is not None:
        grads["w_q"] = grads_wq
        grads["w_k"] = grads_wk

    ordered = {name: grads[name] for name, _ in param_items(model)}
    return breakdown, GradientSet(by_name=ordered)


def gradients(
    model: ModelParams,
    batch: Sequence[tuple[np.ndarray, NeighborSet]],
    lam: float,
    scale_euclidean: bool = False,
) -> tuple[LossBreakdown, GradientSet]:
    """batch_gradients over (query, NeighborSet) pairs."""
    queries, neighbor_rows = stack_batch(batch)
    return batch_gradients(model, queries, neighbor_rows, lam, scale_euclidean=scale_euclidean)


def finite_difference_oracle(
    model: ModelParams,
    queries: np.ndarray,
    neighbor_rows: np.ndarray,
    lam: float,
    step: float = FD_STEP,
    scale_euclidean: bool = False,
) -> GradientSet:
    """Central-difference gradient estimate, one entry at a time.

    Deliberately reuses nothing from the analytic backward: each entry
    is two full forward losses. Intended for small dimensions.
    """
    params = {name: mat.copy() for name, mat in param_items(model)}
    grads: dict[str, np.ndarray] = {}
    for name in params:
        flat = params[name].ravel()
        grad = np.zeros_like(flat)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + step
            plus = batch_loss(
                with_params(model, params), queries, neighbor_rows, lam,
                scale_euclidean=scale_euclidean,
            ).total
            flat[idx] = original - step
            minus = batch_loss(
                with_params(model, params), queries, neighbor_rows, lam,
                scale_euclidean=scale_euclidean,
            ).total
            flat[idx] = original
            grad[idx] = (plus - minus) / (2.0 * step)
        grads[name] = grad.reshape(params[name].shape)
    return GradientSet(by_name=grads)
