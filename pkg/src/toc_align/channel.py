"""AWGN link model.

Power convention: transmitted symbols have unit average power, so
``SNR = 1 / sigma**2`` and ``sigma = 10 ** (-snr_db / 20)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ValidationError

POWER_CONVENTION = "unit-average-per-symbol"


def snr_to_sigma(snr_db: float) -> float:
    if not math.isfinite(snr_db):
        raise ValidationError(f"snr_db must be finite, got {snr_db}")
    return math.sqrt(10.0 ** (-snr_db / 10.0))


def sigma_to_snr(sigma: float) -> float:
    if sigma < 0:
        raise ValidationError(f"sigma must be >= 0, got {sigma}")
    return math.inf if sigma == 0 else -20.0 * math.log10(sigma)


@dataclass(frozen=True)
class ChannelSpec:
    """Noise level of the link; give exactly one of ``snr_db`` or ``sigma``."""

    snr_db: Optional[float] = None
    sigma: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if (self.snr_db is None) == (self.sigma is None):
            raise ValidationError("exactly one of snr_db and sigma must be given")
        if self.sigma is not None:
            if not self.sigma >= 0:
                raise ValidationError(f"sigma must be >= 0, got {self.sigma}")
            object.__setattr__(self, "snr_db", sigma_to_snr(self.sigma))
        else:
            object.__setattr__(self, "sigma", snr_to_sigma(self.snr_db))

    @classmethod
    def noiseless(cls, seed: int = 0) -> "ChannelSpec":
        return cls(sigma=0.0, seed=seed)

    def to_dict(self) -> dict:
        return {
            "snr_db": None if math.isinf(self.snr_db) else self.snr_db,
            "sigma": self.sigma,
            "seed": int(self.seed),
            "power_convention": POWER_CONVENTION,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ChannelSpec":
        seed = payload.get("seed", 0)
        if payload.get("snr_db") is not None:
            return cls(snr_db=float(payload["snr_db"]), seed=seed)
        return cls(sigma=float(payload["sigma"]), seed=seed)


def normalize_power(features: np.ndarray) -> Tuple[np.ndarray, float]:
    """Scale by one scalar so the mean squared entry is 1.

    Returns ``(normalized, scale)`` with ``features == normalized * scale``.
    """
    features = np.asarray(features, dtype=float)
    scale = math.sqrt(np.mean(features**2)) if features.size else 0.0
    if scale == 0.0:
        raise ValidationError("cannot power-normalize an all-zero feature matrix")
    return features / scale, scale


def noise_rng(spec: ChannelSpec, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(spec.seed), int(stream)])


def transmit(features: np.ndarray, spec: ChannelSpec, stream: int = 0) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise to every entry.

    ``stream`` selects an independent noise realization for the same seed.
    """
    features = np.asarray(features, dtype=float)
    if not np.all(np.isfinite(features)):
        raise ValidationError("features must be finite")
    if spec.sigma == 0:
        return features.copy()
    return features + spec.sigma * noise_rng(spec, stream).standard_normal(features.shape)
