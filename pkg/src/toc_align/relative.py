"""Angle-based relative representations against a shared anchor set."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFeatureError, ValidationError

MIN_NORM = 1e-12


def anchor_fingerprint(anchor_features) -> str:
    """Hash of the anchor feature matrix (shape and float64 bytes)."""
    a = np.ascontiguousarray(anchor_features, dtype=np.float64)
    h = hashlib.sha256(repr(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class RelativeRepresentation:
    values: np.ndarray
    anchor_fingerprint: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or np.any(np.abs(v) > 1.0):
            raise ValidationError("relative representation must be a vector with entries in [-1, 1]")
        object.__setattr__(self, "values", v)

    @property
    def n_tau(self) -> int:
        return len(self.values)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValidationError(f"vectors differ in length: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= MIN_NORM or nb <= MIN_NORM:
        raise DegenerateFeatureError("cosine similarity of a zero-norm feature is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def unit_columns(features, what="feature"):
    """Divide every column by its l2 norm; also return the norms."""
    features = np.asarray(features, dtype=float)
    norms = np.linalg.norm(features, axis=0)
    bad = np.flatnonzero(norms <= MIN_NORM)
    if bad.size:
        raise DegenerateFeatureError(f"{what} column {bad[0]} has zero norm", index=int(bad[0]))
    return features / norms, norms


def encode_batch_relative(features, anchor_features) -> np.ndarray:
    """Cosine similarity of every feature column with every anchor column.

    Returns an ``n_tau x n`` matrix; row ``j`` holds similarities with anchor ``j``.
    """
    features = np.asarray(features, dtype=float)
    anchor_features = np.asarray(anchor_features, dtype=float)
    if features.ndim != 2 or anchor_features.ndim != 2 or features.shape[0] != anchor_features.shape[0]:
        raise ValidationError(
            f"features {features.shape} and anchors {anchor_features.shape} must share the row dimension"
        )
    a_hat, _ = unit_columns(anchor_features, "anchor")
    z_hat, _ = unit_columns(features)
    return np.clip(a_hat.T @ z_hat, -1.0, 1.0)


def relative_representation(z, anchor_features) -> RelativeRepresentation:
    z = np.asarray(z, dtype=float).reshape(-1, 1)
    values = encode_batch_relative(z, anchor_features)[:, 0]
    return RelativeRepresentation(values, anchor_fingerprint(anchor_features))
