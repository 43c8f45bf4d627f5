"""Memory bank of stored normal features with exact top-K cosine addressing.

The bank is an immutable N x D matrix of feature vectors kept in float32,
the same precision as the on-disk format, so a save/load round trip is
bit-exact. Row norms are cached in float64 and every similarity is
computed in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Sequence

import numpy as np

from . import fileio
from .errors import DataError, FormatError

BANK_MAGIC = b"CAPBANK1"
BANK_VERSION = 1
DTYPE_FLOAT32 = 0

# Norm denominators below this are considered degenerate.
MIN_NORM = 1e-12


@dataclass(frozen=True)
class MemoryBank:
    """Stored normal features, their cached norms, and sample identifiers."""

    items: np.ndarray  # (N, D) float32, ingestion order preserved
    norms: np.ndarray  # (N,) float64
    ids: tuple[Any, ...]
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.items.shape[0]

    @property
    def dim(self) -> int:
        return self.items.shape[1]


@dataclass(frozen=True)
class NeighborSet:
    """Top-K addressing result for one query, most similar first."""

    indices: np.ndarray  # (K,) int64 bank row indices
    similarities: np.ndarray  # (K,) float64, non-increasing
    matrix: np.ndarray  # (K, D) float64 rows copied from the bank


def build_bank(
    features: np.ndarray,
    ids: Sequence[Any] | None = None,
    metadata: dict[str, Any] | None = None,
) -> MemoryBank:
    """Validate a feature matrix and freeze it into a bank.

    Rejects non-2D input, non-finite entries, rows with norm below
    ``MIN_NORM``, and duplicate or miscounted ids.
    """
    items = np.asarray(features)
    if items.ndim != 2:
        raise DataError(f"features must be a 2-D matrix, got shape {items.shape}")
    n, d = items.shape
    if n < 1 or d < 1:
        raise DataError(f"features must be non-empty, got shape {items.shape}")
    if not np.isfinite(items).all():
        bad = int(np.argwhere(~np.isfinite(items).all(axis=1))[0][0])
        raise DataError(f"non-finite feature entries in row {bad}")
    items = np.ascontiguousarray(items, dtype=np.float32)
    norms = np.linalg.norm(items.astype(np.float64), axis=1)
    small = np.flatnonzero(norms <= MIN_NORM)
    if small.size:
        raise DataError(f"near-zero feature vector at row {int(small[0])}")
    if ids is None:
        id_tuple = tuple(range(n))
    else:
        id_tuple = tuple(ids)
        if len(id_tuple) != n:
            raise DataError(f"got {len(id_tuple)} ids for {n} feature rows")
        if len(set(id_tuple)) != n:
            seen: set[Any] = set()
            for item in id_tuple:
                if item in seen:
                    raise DataError(f"duplicate id {item!r}")
                seen.add(item)
    return MemoryBank(
        items=items,
        norms=norms,
        ids=id_tuple,
        metadata=dict(metadata or {}),
    )


def save_bank(bank: MemoryBank, destination: str | Path | BinaryIO) -> None:
    """Write the bank in the versioned little-endian container format."""
    meta = dict(bank.metadata)
    meta["ids"] = list(bank.ids)
    with fileio.open_binary(destination, "wb") as fh:
        fh.write(BANK_MAGIC)
        fileio.write_u32(fh, BANK_VERSION)
        fileio.write_u8(fh, DTYPE_FLOAT32)
        fileio.write_u64(fh, bank.size)
        fileio.write_u64(fh, bank.dim)
        fileio.write_f32_array(fh, bank.items)
        fileio.write_metadata(fh, meta)


def load_bank(source: str | Path | BinaryIO) -> MemoryBank:
    """Read a bank file, rejecting unknown versions, dtypes, and truncation."""
    with fileio.open_binary(source, "rb") as fh:
        fileio.check_magic(fh, BANK_MAGIC)
        fileio.check_version(fh, BANK_VERSION)
        dtype_flag = fileio.read_u8(fh, "dtype flag")
        if dtype_flag != DTYPE_FLOAT32:
            raise FormatError(f"unknown dtype flag {dtype_flag}")
        n = fileio.read_u64(fh, "row count")
        d = fileio.read_u64(fh, "feature dim")
        items = fileio.read_f32_array(fh, (n, d), "feature payload")
        meta = fileio.read_metadata(fh)
        fileio.check_eof(fh)
    ids = meta.pop("ids", None)
    return build_bank(items, ids=ids, metadata=meta)


def save_labeled_features(
    features: np.ndarray,
    labels: np.ndarray,
    destination: str | Path | BinaryIO,
    ids: Sequence[Any] | None = None,
    metadata: dict[str, Any] | None = None,
) -> None:
    """Write a feature set plus 0/1 labels using the bank container.

    Labels ride in the metadata block so the payload layout stays
    identical to an unlabeled bank.
    """
    labels = np.asarray(labels)
    if labels.shape != (np.asarray(features).shape[0],):
        raise DataError(
            f"labels shape {labels.shape} does not match {len(features)} rows"
        )
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0 (normal) or 1 (anomalous)")
    meta = dict(metadata or {})
    meta["labels"] = [int(v) for v in labels]
    bank = build_bank(features, ids=ids, metadata=meta)
    save_bank(bank, destination)


def load_labeled_features(
    source: str | Path | BinaryIO,
) -> tuple[MemoryBank, np.ndarray | None]:
    """Read a feature set saved via the bank container.

    Returns the bank and the label vector, or ``None`` when the file
    carries no labels.
    """
    bank = load_bank(source)
    meta = dict(bank.metadata)
    raw = meta.pop("labels", None)
    if raw is None:
        return bank, None
    labels = np.asarray(raw, dtype=np.int64)
    if labels.shape != (bank.size,):
        raise FormatError(
            f"label metadata has {labels.size} entries for {bank.size} rows"
        )
    stripped = MemoryBank(
        items=bank.items, norms=bank.norms, ids=bank.ids, metadata=meta
    )
    return stripped, labels


def query_norm(query: np.ndarray) -> float:
    """Validated float64 norm of a query vector."""
    q = np.asarray(query, dtype=np.float64)
    norm = float(np.linalg.norm(q))
    if not np.isfinite(q).all():
        raise DataError("query vector has non-finite entries")
    if norm <= MIN_NORM:
        raise DataError("query vector has near-zero norm")
    return norm


def cosine_similarities(bank: MemoryBank, query: np.ndarray) -> np.ndarray:
    """Cosine similarity of the query against every bank row, in [-1, 1]."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (bank.dim,):
        raise DataError(f"query shape {q.shape} does not match bank dim {bank.dim}")
    norm = query_norm(q)
    sims = (bank.items.astype(np.float64) @ q) / (bank.norms * norm)
    return np.clip(sims, -1.0, 1.0)


def top_k_neighbors(
    bank: MemoryBank,
    query: np.ndarray,
    k: int,
    exclude_index: int | None = None,
) -> NeighborSet:
    """Exact top-K rows by cosine similarity, ties broken by lower index.

    ``exclude_index`` removes one bank row from consideration, which is
    how a stored sample avoids selecting itself during training.
    """
    limit = bank.size - (1 if exclude_index is not None else 0)
    if k < 1:
        raise DataError(f"k must be at least 1, got {k}")
    if k > limit:
        raise DataError(f"k={k} exceeds the {limit} addressable bank rows")
    if exclude_index is not None and not 0 <= exclude_index < bank.size:
        raise DataError(f"exclude_index {exclude_index} out of range")
    sims = cosine_similarities(bank, query)
    if exclude_index is not None:
        sims = sims.copy()
        sims[exclude_index] = -3.0  # below any real similarity, never selected
    # Stable sort on negated similarities: equal values keep ascending index.
    order = np.argsort(-sims, kind="stable")[:k]
    return NeighborSet(
        indices=order.astype(np.int64),
        similarities=sims[order],
        matrix=bank.items[order].astype(np.float64),
    )
