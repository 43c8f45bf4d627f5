"""Adaptive projection head and reformed self-attention.

The head maps raw features to an adapted space and is shared between the
query and its neighbors. Attention over the projected neighbor rows uses
query/key matrices only: there is no value matrix and no layer
normalization, so an identity-initialized model changes nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, BinaryIO

import numpy as np

from . import fileio
from .bank import MIN_NORM, NeighborSet
from .errors import DataError, FormatError, NumericalError

MODEL_MAGIC = b"CAPMODL1"
MODEL_VERSION = 1

HEAD_VARIANTS = ("linear", "linear-relu", "linear-relu-linear")
_VARIANT_CODES = {name: code for code, name in enumerate(HEAD_VARIANTS)}


@dataclass(frozen=True)
class HeadParams:
    """Projection head weights; one matrix per linear stage."""

    variant: str
    matrices: tuple[np.ndarray, ...]  # each (D, D) float64


@dataclass(frozen=True)
class AttentionParams:
    """Query and key matrices for the reformed attention block."""

    w_q: np.ndarray  # (D, D) float64
    w_k: np.ndarray  # (D, D) float64


@dataclass(frozen=True)
class ModelParams:
    head: HeadParams
    attention: AttentionParams | None
    dim: int
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def attention_enabled(self) -> bool:
        return self.attention is not None


@dataclass(frozen=True)
class ForwardOutput:
    """Every intermediate of a single-query forward pass."""

    z: np.ndarray  # (D,) raw query
    z_hat: np.ndarray  # (D,) adapted query
    m_hat: np.ndarray  # (K, D) adapted neighbors
    attention_matrix: np.ndarray  # (K, K) row-stochastic
    z_normal: np.ndarray  # (D,) attention-mixed normal representation
    mix_weights: np.ndarray  # (K,) weights with z_normal == mix_weights @ m_hat


def init_model(
    dim: int,
    variant: str = "linear",
    attention_enabled: bool = True,
    seed: int = 0,
) -> ModelParams:
    """Identity-initialized head plus seeded Gaussian attention matrices.

    With an identity head the adapted space equals the raw space, so the
    constraint term starts at exactly zero. Attention weights are drawn
    with standard deviation 1/sqrt(D).
    """
    if variant not in HEAD_VARIANTS:
        raise DataError(f"unknown head variant {variant!r}")
    if dim < 1:
        raise DataError(f"dim must be positive, got {dim}")
    stages = 2 if variant == "linear-relu-linear" else 1
    matrices = tuple(np.eye(dim, dtype=np.float64) for _ in range(stages))
    head = HeadParams(variant=variant, matrices=matrices)
    attention = None
    if attention_enabled:
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(dim)
        attention = AttentionParams(
            w_q=rng.normal(0.0, scale, size=(dim, dim)),
            w_k=rng.normal(0.0, scale, size=(dim, dim)),
        )
    return ModelParams(head=head, attention=attention, dim=dim)


def project(head: HeadParams, rows: np.ndarray) -> np.ndarray:
    """Apply the head to feature rows along the last axis."""
    x = np.asarray(rows, dtype=np.float64)
    expected = head.matrices[0].shape[1]
    if x.shape[-1] != expected:
        raise DataError(
            f"input dimension {x.shape[-1]} does not match head dimension {expected}"
        )
    if head.variant == "linear":
        return x @ head.matrices[0].T
    if head.variant == "linear-relu":
        return np.maximum(x @ head.matrices[0].T, 0.0)
    hidden = np.maximum(x @ head.matrices[0].T, 0.0)
    return hidden @ head.matrices[1].T


def reformed_attention(
    attention: AttentionParams, m_hat: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Row-softmax attention over projected neighbors, no value matrix.

    Returns the K x K attention matrix and the attended rows A @ m_hat.
    Works on a (K, D) matrix or a batch of them.
    """
    m = np.asarray(m_hat, dtype=np.float64)
    d = m.shape[-1]
    # Overflow lands in the finiteness check below; the warning is noise.
    with np.errstate(over="ignore", invalid="ignore"):
        q = m @ attention.w_q
        keys = m @ attention.w_k
        logits = q @ np.swapaxes(keys, -1, -2) / np.sqrt(d)
    finite = np.isfinite(logits)
    if not finite.all():
        where = np.argwhere(~finite)[0]
        raise NumericalError(f"non-finite attention logits at row {int(where[-2])}")
    logits = logits - logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    attn = weights / weights.sum(axis=-1, keepdims=True)
    return attn, attn @ m


def uniform_attention(k: int) -> np.ndarray:
    """The K x K matrix used when the attention block is disabled."""
    return np.full((k, k), 1.0 / k, dtype=np.float64)


def normal_representation(
    m_hat: np.ndarray, attention: AttentionParams | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Mean of adapted neighbors plus their attended mixture.

    Returns the normal representation and the mixing weights over the
    adapted rows; the weights always sum to 2 and each is at least 1/K.
    """
    m = np.asarray(m_hat, dtype=np.float64)
    k = m.shape[0]
    if attention is not None:
        attn, attended = reformed_attention(attention, m)
    else:
        attn = uniform_attention(k)
        attended = np.broadcast_to(m.mean(axis=0), m.shape)
    z_normal = (m + attended).mean(axis=0)
    mix_weights = (1.0 + attn.sum(axis=0)) / k
    return z_normal, mix_weights


def forward(model: ModelParams, z: np.ndarray, neighbors: NeighborSet) -> ForwardOutput:
    """Run one query and its neighbor set through the full pipeline."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.dim,):
        raise DataError(f"query shape {z.shape} does not match model dim {model.dim}")
    if neighbors.matrix.shape[1] != model.dim:
        raise DataError(
            f"neighbor dim {neighbors.matrix.shape[1]} does not match model dim {model.dim}"
        )
    z_hat = project(model.head, z[np.newaxis, :])[0]
    m_hat = project(model.head, neighbors.matrix)
    k = m_hat.shape[0]
    if model.attention is not None:
        attn, attended = reformed_attention(model.attention, m_hat)
    else:
        attn = uniform_attention(k)
        attended = np.broadcast_to(m_hat.mean(axis=0), m_hat.shape)
    z_normal = (m_hat + attended).mean(axis=0)
    mix_weights = (1.0 + attn.sum(axis=0)) / k
    return ForwardOutput(
        z=z,
        z_hat=z_hat,
        m_hat=m_hat,
        attention_matrix=attn,
        z_normal=z_normal,
        mix_weights=mix_weights,
    )


def head_frobenius(head: HeadParams) -> float:
    """Frobenius norm over all head matrices jointly."""
    total = 0.0
    for mat in head.matrices:
        total += float(np.sum(mat * mat))
    return float(np.sqrt(total))


def param_items(model: ModelParams) -> list[tuple[str, np.ndarray]]:
    """Named parameter matrices in a fixed order: head stages, then w_q, w_k."""
    items = [(f"head{i}", mat) for i, mat in enumerate(model.head.matrices)]
    if model.attention is not None:
        items.append(("w_q", model.attention.w_q))
        items.append(("w_k", model.attention.w_k))
    return items


def with_params(model: ModelParams, params: dict[str, np.ndarray]) -> ModelParams:
    """Rebuild a model from a name-to-matrix mapping (see param_items)."""
    matrices = tuple(
        params[f"head{i}"] for i in range(len(model.head.matrices))
    )
    head = HeadParams(variant=model.head.variant, matrices=matrices)
    attention = None
    if model.attention is not None:
        attention = AttentionParams(w_q=params["w_q"], w_k=params["w_k"])
    return replace(model, head=head, attention=attention)


def save_model(model: ModelParams, destination: str | Path | BinaryIO) -> None:
    """Write model weights as float32 in the versioned container format."""
    with fileio.open_binary(destination, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fileio.write_u32(fh, MODEL_VERSION)
        fileio.write_u8(fh, _VARIANT_CODES[model.head.variant])
        fileio.write_u8(fh, 1 if model.attention is not None else 0)
        fileio.write_u64(fh, model.dim)
        for _, mat in param_items(model):
            fileio.write_f32_array(fh, mat)
        fileio.write_metadata(fh, dict(model.metadata))


def load_model(source: str | Path | BinaryIO) -> ModelParams:
    """Read a model file, rejecting unknown versions and variant codes."""
    with fileio.open_binary(source, "rb") as fh:
        fileio.check_magic(fh, MODEL_MAGIC)
        fileio.check_version(fh, MODEL_VERSION)
        code = fileio.read_u8(fh, "head variant code")
        if code >= len(HEAD_VARIANTS):
            raise FormatError(f"unknown head variant code {code}")
        variant = HEAD_VARIANTS[code]
        attn_flag = fileio.read_u8(fh, "attention flag")
        if attn_flag not in (0, 1):
            raise FormatError(f"attention flag must be 0 or 1, got {attn_flag}")
        dim = fileio.read_u64(fh, "model dim")
        stages = 2 if variant == "linear-relu-linear" else 1
        matrices = tuple(
            fileio.read_f32_array(fh, (dim, dim), f"head matrix {i}").astype(np.float64)
            for i in range(stages)
        )
        attention = None
        if attn_flag:
            w_q = fileio.read_f32_array(fh, (dim, dim), "query matrix").astype(np.float64)
            w_k = fileio.read_f32_array(fh, (dim, dim), "key matrix").astype(np.float64)
            attention = AttentionParams(w_q=w_q, w_k=w_k)
        meta = fileio.read_metadata(fh)
        fileio.check_eof(fh)
    head = HeadParams(variant=variant, matrices=matrices)
    return ModelParams(head=head, attention=attention, dim=dim, metadata=meta)
