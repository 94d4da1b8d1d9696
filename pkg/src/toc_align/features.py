"""Synthetic tasks and feature spaces related by known linear transforms.

Feature matrices follow one layout everywhere in the package: shape ``(d, n)``,
one sample per column.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import ValidationError

TRANSFORM_KINDS = ("general-invertible", "orthogonal", "orthogonal-scaled")
ANCHOR_STRATEGIES = ("uniform-random", "class-stratified")


@dataclass(frozen=True)
class TaskSpec:
    num_classes: int
    latent_dim: int
    samples_per_class: int
    cluster_separation: float
    seed: int = 0
    test_fraction: float = 0.25

    def __post_init__(self):
        problems = []
        if int(self.num_classes) < 2:
            problems.append(f"num_classes must be >= 2, got {self.num_classes}")
        if int(self.latent_dim) < 1:
            problems.append(f"latent_dim must be >= 1, got {self.latent_dim}")
        if int(self.samples_per_class) < 1:
            problems.append(f"samples_per_class must be >= 1, got {self.samples_per_class}")
        if not self.cluster_separation > 0:
            problems.append(f"cluster_separation must be > 0, got {self.cluster_separation}")
        if not 0 <= self.test_fraction < 1:
            problems.append(f"test_fraction must lie in [0, 1), got {self.test_fraction}")
        if not 0 <= int(self.seed) < 2**64:
            problems.append(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if problems:
            raise ValidationError("; ".join(problems))


@dataclass
class Dataset:
    """Labelled samples; ``split`` tags each column as ``train`` or ``test``.

    Training columns are the ones eligible to serve as anchors.
    """

    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    num_classes: int
    seed: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype="<U5")
        if self.features.ndim != 2:
            raise ValidationError("features must be a (d, n) matrix")
        n = self.features.shape[1]
        if self.labels.shape != (n,) or self.split.shape != (n,):
            raise ValidationError(
                f"label/split count must equal column count {n}, "
                f"got {self.labels.shape} and {self.split.shape}"
            )
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")

    @property
    def d(self) -> int:
        return self.features.shape[0]

    @property
    def n(self) -> int:
        return self.features.shape[1]

    def subset(self, tag: str) -> "Dataset":
        keep = self.split == tag
        return Dataset(self.features[:, keep], self.labels[keep], self.split[keep],
                       self.num_classes, self.seed)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "n": self.n,
            "features": self.features.ravel(order="C").tolist(),
            "labels": self.labels.tolist(),
            "split": self.split.tolist(),
            "num_classes": self.num_classes,
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Dataset":
        feats = np.asarray(payload["features"], dtype=float).reshape(payload["d"], payload["n"])
        return cls(feats, payload["labels"], payload["split"], payload["num_classes"],
                   payload.get("seed", 0))


@dataclass(frozen=True)
class GroundTruthTransform:
    matrix: np.ndarray
    kind: str
    condition_number: float

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError(f"transform must be square, got shape {m.shape}")
        if self.kind not in TRANSFORM_KINDS:
            raise ValidationError(f"unknown transform kind {self.kind!r}")
        s = np.linalg.svd(m, compute_uv=False)
        if s[-1] <= 1e-8 * s[0]:
            raise ValidationError("transform is not full rank")
        if self.kind != "general-invertible":
            scale = s[0] if self.kind == "orthogonal-scaled" else 1.0
            q = m / scale
            if np.max(np.abs(q.T @ q - np.eye(len(q)))) > 1e-10:
                raise ValidationError(f"{self.kind} transform is not orthogonal (up to scale)")
        object.__setattr__(self, "matrix", m)

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    def inverse_apply(self, features: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self.matrix, features)


@dataclass
class AnchorSet:
    indices: np.ndarray
    samples: np.ndarray
    strategy: str
    seed: int
    features: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 1 or len(self.indices) < 1:
            raise ValidationError("an anchor set needs at least one index")
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValidationError("anchor indices must be unique")
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.shape[1] != len(self.indices):
            raise ValidationError("anchor samples must have one column per index")

    @property
    def n_tau(self) -> int:
        return len(self.indices)

    def with_features(self, system_id: str, feats: np.ndarray) -> "AnchorSet":
        feats = np.asarray(feats, dtype=float)
        if feats.ndim != 2 or feats.shape[1] != self.n_tau:
            raise ValidationError(
                f"system {system_id!r} anchor features need {self.n_tau} columns, got {feats.shape}"
            )
        self.features[system_id] = feats
        return self

    def to_dict(self) -> dict:
        return {
            "anchor_indices": self.indices.tolist(),
            "strategy": self.strategy,
            "seed": int(self.seed),
            "d": self.samples.shape[0],
            "n": self.n_tau,
            "samples": self.samples.ravel(order="C").tolist(),
            "features": {
                k: {"d": v.shape[0], "n": v.shape[1], "features": v.ravel(order="C").tolist()}
                for k, v in self.features.items()
            },
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "AnchorSet":
        samples = np.asarray(payload["samples"], dtype=float).reshape(payload["d"], payload["n"])
        feats = {
            k: np.asarray(v["features"], dtype=float).reshape(v["d"], v["n"])
            for k, v in payload.get("features", {}).items()
        }
        return cls(payload["anchor_indices"], samples, payload["strategy"], payload["seed"], feats)


def _power_normalize(x):
    return x / math.sqrt(np.mean(x**2))


def generate_task(spec: TaskSpec) -> Dataset:
    """Sample ``C`` isotropic Gaussian clusters with means on a sphere.

    The sphere radius is ``cluster_separation`` in units of the within-class
    standard deviation; the returned features are rescaled by one scalar so
    that the mean squared entry is 1.
    """
    rng = np.random.default_rng(spec.seed)
    C, d, per = spec.num_classes, spec.latent_dim, spec.samples_per_class
    means = rng.standard_normal((d, C))
    means *= spec.cluster_separation / np.linalg.norm(means, axis=0, keepdims=True)
    labels = np.repeat(np.arange(C), per)
    feats = means[:, labels] + rng.standard_normal((d, C * per))
    order = rng.permutation(C * per)
    feats, labels = feats[:, order], labels[order]
    n_test = int(round(spec.test_fraction * C * per))
    split = np.array(["train"] * (C * per - n_test) + ["test"] * n_test)
    return Dataset(_power_normalize(feats), labels, split, C, spec.seed)


def make_ground_truth_transform(d: int, kind: str = "general-invertible",
                                max_condition: float = 10.0, seed: int = 0) -> GroundTruthTransform:
    if d < 1:
        raise ValidationError(f"d must be >= 1, got {d}")
    if not max_condition >= 1:
        raise ValidationError(f"max_condition must be >= 1, got {max_condition}")
    if kind not in TRANSFORM_KINDS:
        raise ValidationError(f"kind must be one of {TRANSFORM_KINDS}, got {kind!r}")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((d, d))
    if kind == "general-invertible":
        g /= math.sqrt(d)
        u, s, vt = np.linalg.svd(g)
        if s[0] / s[-1] > max_condition:
            # lift the small singular values; the 1e-12 margin absorbs rounding in the recomputed cond
            s = np.maximum(s, s[0] / max_condition * (1 + 1e-12))
            g = (u * s) @ vt
        s = np.linalg.svd(g, compute_uv=False)
        return GroundTruthTransform(g, kind, float(s[0] / s[-1]))
    q, r = np.linalg.qr(g)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    if kind == "orthogonal-scaled":
        q = q * math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    return GroundTruthTransform(q, kind, 1.0)


def derive_system_features(base: np.ndarray, t: GroundTruthTransform) -> np.ndarray:
    base = np.asarray(base, dtype=float)
    if base.ndim != 2 or base.shape[0] != t.d:
        raise ValidationError(f"transform is {t.d}x{t.d} but features have shape {base.shape}")
    return t.matrix @ base


def select_anchors(dataset: Dataset, n_tau: int, strategy: str = "class-stratified",
                   seed: int = 0, pool: Optional[str] = None) -> AnchorSet:
    """Pick ``n_tau`` distinct anchor columns from ``dataset``.

    ``pool`` restricts candidates to one split tag (e.g. ``"train"``); indices
    always refer to columns of the full dataset.
    """
    if strategy not in ANCHOR_STRATEGIES:
        raise ValidationError(f"strategy must be one of {ANCHOR_STRATEGIES}, got {strategy!r}")
    candidates = np.arange(dataset.n) if pool is None else np.flatnonzero(dataset.split == pool)
    if not 1 <= n_tau <= len(candidates):
        raise ValidationError(f"n_tau={n_tau} outside [1, {len(candidates)}] available samples")
    rng = np.random.default_rng([int(dataset.seed), int(seed)])
    if strategy == "uniform-random":
        idx = rng.permutation(candidates)[:n_tau]
    else:
        C = dataset.num_classes
        per = math.ceil(n_tau / C)
        draws = []
        for c in range(C):
            members = candidates[dataset.labels[candidates] == c]
            draws.append(rng.permutation(members)[:per])
        # interleave classes so truncation trims evenly
        rounds = [d[i] for i in range(per) for d in draws if i < len(d)]
        idx = np.array(rounds[:n_tau], dtype=np.int64)
        if len(idx) < n_tau:
            rest = np.setdiff1d(candidates, idx)
            idx = np.concatenate([idx, rng.permutation(rest)[: n_tau - len(idx)]])
    return AnchorSet(idx, dataset.features[:, idx], strategy, seed)
