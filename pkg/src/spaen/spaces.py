"""Semantic-space utilities: unit-norm class embeddings and attribute-variance
profiles used to diagnose train/test semantic shift."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ClassEmbedding:
    """A class id with its (unit-norm) semantic embedding vector."""

    class_id: int
    vector: np.ndarray

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise ValueError("class embedding must be a 1-D vector")


@dataclass
class VarianceProfile:
    """Per-attribute population variances computed over a set of rows."""

    variances: np.ndarray
    source: str = ""

    def __post_init__(self) -> None:
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if self.variances.ndim != 1:
            raise ValueError("variance profile must be a 1-D vector")


def l2_normalize(vector: np.ndarray) -> np.ndarray:
    """Scale a vector to unit Euclidean norm.  Zero vectors are rejected."""
    vector = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        raise ValueError("cannot L2-normalize a zero vector")
    return vector / norm


def class_embeddings(
    class_attributes: np.ndarray, class_ids: list[int] | None = None
) -> list[ClassEmbedding]:
    """Unit-norm embeddings for the requested class ids (default: all rows)."""
    matrix = np.asarray(class_attributes, dtype=np.float64)
    if class_ids is None:
        class_ids = list(range(matrix.shape[0]))
    return [ClassEmbedding(c, l2_normalize(matrix[c])) for c in class_ids]


def attribute_variance(rows: np.ndarray, source: str = "") -> VarianceProfile:
    """Population variance of each attribute over a set of attribute rows.

    Requires at least two rows; a single row has no spread to measure.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise ValueError("attribute rows must form a 2-D matrix")
    if rows.shape[0] < 2:
        raise ValueError(f"variance needs >= 2 rows, got {rows.shape[0]}")
    return VarianceProfile(np.var(rows, axis=0, ddof=0), source=source)


def variance_cosine(a: VarianceProfile, b: VarianceProfile) -> float:
    """Cosine similarity between two variance profiles (both must be nonzero)."""
    va, vb = a.variances, b.variances
    if va.shape != vb.shape:
        raise ValueError(f"profile shapes differ: {va.shape} vs {vb.shape}")
    na, nb = float(np.linalg.norm(va)), float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cannot compare an all-zero variance profile")
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))
