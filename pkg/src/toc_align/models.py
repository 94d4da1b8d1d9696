"""Encoder/decoder pairs, their training loops and the cross-model pipeline."""
from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import estimators
from .channel import ChannelSpec, normalize_power, transmit
from .errors import ValidationError
from .estimators import AlignmentMap, check_divergence
from .features import AnchorSet, Dataset
from .nn import MLP, Adam, cross_entropy, log_softmax
from .relative import anchor_fingerprint, unit_columns

log = logging.getLogger(__name__)

MODES = ("plain", "relative")


class DegenerateFeatureWarning(UserWarning):
    pass


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 3e-3
    noise_samples: int = 1
    channel: Optional[ChannelSpec] = field(default_factory=lambda: ChannelSpec(snr_db=18.0))
    seed: int = 0

    def __post_init__(self):
        problems = [
            f"{name} must be positive, got {value}"
            for name, value in (("epochs", self.epochs), ("batch_size", self.batch_size),
                                ("learning_rate", self.learning_rate),
                                ("noise_samples", self.noise_samples))
            if not value > 0
        ]
        if problems:
            raise ValidationError("; ".join(problems))


@dataclass
class TocSystem:
    id: str
    encoder: MLP
    decoder: MLP
    mode: str = "plain"
    anchor_inputs: Optional[np.ndarray] = None
    training_log: List[float] = field(default_factory=list)
    _anchor_cache: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "relative":
            if self.anchor_inputs is None:
                raise ValidationError("relative systems need anchor inputs")
            self.anchor_inputs = np.asarray(self.anchor_inputs, dtype=float)
            expected = self.anchor_inputs.shape[1]
        else:
            expected = self.encoder.n_out
        if self.decoder.n_in != expected:
            raise ValidationError(
                f"{self.mode} system decoder must take {expected} inputs, takes {self.decoder.n_in}"
            )

    @property
    def d(self) -> int:
        return self.encoder.n_out

    @property
    def n_out(self) -> int:
        """Rows of the transmitted feature matrix."""
        return self.decoder.n_in

    @property
    def num_classes(self) -> int:
        return self.decoder.n_out

    @property
    def anchor_fingerprint(self) -> Optional[str]:
        return None if self.anchor_inputs is None else anchor_fingerprint(self.anchor_inputs)

    def params(self):
        return self.encoder.params() + self.decoder.params()

    def grads(self):
        return self.encoder.grads() + self.decoder.grads()

    def cache_anchor_features(self):
        """Freeze the anchor features of the current encoder for repeated encoding."""
        self._anchor_cache = self.encoder.forward(self.anchor_inputs)
        return self._anchor_cache

    def clear_anchor_cache(self):
        self._anchor_cache = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "mode": self.mode,
            "encoder": self.encoder.to_dict(),
            "decoder": self.decoder.to_dict(),
            "anchor_fingerprint": self.anchor_fingerprint,
            "anchor_inputs": None if self.anchor_inputs is None else {
                "d": self.anchor_inputs.shape[0], "n": self.anchor_inputs.shape[1],
                "features": self.anchor_inputs.ravel(order="C").tolist()},
            "training_log": list(self.training_log),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TocSystem":
        anchors = payload.get("anchor_inputs")
        if anchors is not None:
            anchors = np.asarray(anchors["features"], dtype=float).reshape(anchors["d"], anchors["n"])
        system = cls(payload["id"], MLP.from_dict(payload["encoder"]), MLP.from_dict(payload["decoder"]),
                     payload["mode"], anchors, list(payload.get("training_log", [])))
        if payload.get("anchor_fingerprint") != system.anchor_fingerprint:
            raise ValidationError("checkpoint anchor fingerprint does not match its anchor inputs")
        return system


def build_system(system_id: str, input_dim: int, num_classes: int, d: int = 16, mode: str = "plain",
                 encoder_hidden: int = 64, decoder_hidden: int = 64,
                 anchors: Optional[AnchorSet] = None, seed: int = 0) -> TocSystem:
    """Randomly initialised system: encoder input->hidden->d, decoder rows->hidden->C."""
    rng = np.random.default_rng(seed)
    encoder = MLP.build([input_dim, encoder_hidden, d], rng)
    anchor_inputs = None
    rows = d
    if mode == "relative":
        if anchors is None:
            raise ValidationError("relative systems need an anchor set")
        anchor_inputs = anchors.samples
        rows = anchors.n_tau
    decoder = MLP.build([rows, decoder_hidden, num_classes], rng)
    return TocSystem(system_id, encoder, decoder, mode, anchor_inputs)


def encode(system: TocSystem, inputs) -> np.ndarray:
    """Features sent by the device, before power normalization.

    Plain systems emit ``d`` rows; relative systems emit one cosine per anchor.
    """
    inputs = np.asarray(inputs, dtype=float)
    z = system.encoder.forward(inputs)
    if not np.any(z):
        warnings.warn(f"system {system.id!r} produced all-zero features", DegenerateFeatureWarning)
    if system.mode == "plain":
        return z
    anchors = system._anchor_cache
    if anchors is None:
        anchors = system.encoder.forward(system.anchor_inputs)
    a_hat, _ = unit_columns(anchors, "anchor")
    z_hat, _ = unit_columns(z)
    return np.clip(a_hat.T @ z_hat, -1.0, 1.0)


def decode(system: TocSystem, features_rx) -> Tuple[np.ndarray, np.ndarray]:
    """Predicted labels and the full ``C x n`` log-probability table.

    Ties between equal logits resolve to the lowest class index.
    """
    logits = system.decoder.forward(features_rx)
    return np.argmax(logits, axis=0), log_softmax(logits)


def loss_and_grads(system: TocSystem, inputs, labels, noise) -> float:
    """Cross-entropy through encoder, power normalization, channel and decoder.

    ``noise`` has shape ``(L, rows, batch)`` and is added to the normalized
    features as a constant. Gradients are left on the layers (``system.grads()``).
    """
    n = inputs.shape[1]
    if system.mode == "plain":
        z = system.encoder.forward(inputs)
        feats = z
    else:
        out = system.encoder.forward(np.hstack([inputs, system.anchor_inputs]))
        z, a = out[:, :n], out[:, n:]
        z_hat, z_norm = unit_columns(z)
        a_hat, a_norm = unit_columns(a, "anchor")
        feats = a_hat.T @ z_hat
    scale = np.sqrt(np.mean(feats**2))
    u = feats / scale
    L = noise.shape[0]
    received = np.hstack([u + noise[l] for l in range(L)])
    loss, g_logits = cross_entropy(system.decoder.forward(received), np.tile(labels, L))
    g_received = system.decoder.backward(g_logits)
    g_u = g_received.reshape(u.shape[0], L, n).sum(axis=1)
    g_feats = (g_u - u * np.mean(g_u * u)) / scale
    if system.mode == "plain":
        system.encoder.backward(g_feats)
        return loss
    g_zhat = a_hat @ g_feats
    g_ahat = z_hat @ g_feats.T
    g_z = (g_zhat - z_hat * np.sum(z_hat * g_zhat, axis=0)) / z_norm
    g_a = (g_ahat - a_hat * np.sum(a_hat * g_ahat, axis=0)) / a_norm
    system.encoder.backward(np.hstack([g_z, g_a]))
    return loss


def _train(system: TocSystem, dataset: Dataset, cfg: TrainConfig) -> TocSystem:
    system = copy.deepcopy(system)
    system.clear_anchor_cache()
    train = dataset.subset("train") if np.any(dataset.split == "train") else dataset
    x, y = train.features, train.labels
    n = x.shape[1]
    if x.shape[0] != system.encoder.n_in:
        raise ValidationError(f"encoder takes {system.encoder.n_in} inputs, dataset has {x.shape[0]}")
    shuffle_rng = np.random.default_rng([int(cfg.seed), 0])
    opt = Adam(system.params(), cfg.learning_rate)
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            shape = (cfg.noise_samples, system.n_out, len(idx))
            if cfg.channel is None:
                noise = np.zeros(shape)
            else:
                noise = transmit(np.zeros(shape), cfg.channel, stream=(int(cfg.seed) << 32) + step)
            total += loss_and_grads(system, x[:, idx], y[idx], noise) * len(idx)
            opt.step(system.grads())
            step += 1
        system.training_log.append(total / n)
        check_divergence(system.training_log, f"system {system.id}")
        log.debug("system %s epoch %d loss %.4f", system.id, epoch, system.training_log[-1])
    return system


def train_baseline(system: TocSystem, dataset: Dataset, cfg: TrainConfig = TrainConfig()) -> TocSystem:
    """End-to-end training of a plain system on Monte Carlo cross-entropy."""
    if system.mode != "plain":
        raise ValidationError("train_baseline needs a plain system; use train_on_device_aligned")
    return _train(system, dataset, cfg)


def train_on_device_aligned(system: TocSystem, dataset: Dataset, anchors: AnchorSet,
                            cfg: TrainConfig = TrainConfig()) -> TocSystem:
    """Train a relative system; anchor features are re-encoded at every step."""
    if system.mode != "relative":
        raise ValidationError("on-device alignment training needs a relative system")
    if system.anchor_fingerprint != anchor_fingerprint(anchors.samples):
        raise ValidationError("system was built for a different anchor set")
    return _train(system, dataset, cfg)


def _check_compatible(encoder_system, decoder_system, alignment):
    if encoder_system.mode != decoder_system.mode:
        raise ValidationError(
            f"mode mismatch: encoder is {encoder_system.mode}, decoder is {decoder_system.mode}")
    if encoder_system.mode == "relative":
        if alignment is not None:
            raise ValidationError("relative systems are aligned on device; pass alignment=None")
        if encoder_system.anchor_fingerprint != decoder_system.anchor_fingerprint:
            raise ValidationError("anchor-set mismatch between encoder and decoder systems")
        return
    if alignment is None:
        if encoder_system.n_out != decoder_system.n_out:
            raise ValidationError("feature dimensions differ; an alignment map is required")
    elif alignment.d_in != encoder_system.n_out or alignment.d_out != decoder_system.n_out:
        raise ValidationError(
            f"alignment maps {alignment.d_in}->{alignment.d_out}, systems need "
            f"{encoder_system.n_out}->{decoder_system.n_out}")


def received_features(encoder_system, decoder_system, alignment, channel, inputs, stream=0):
    """Encode, normalize, transmit and (optionally) align a batch of inputs."""
    _check_compatible(encoder_system, decoder_system, alignment)
    tx, _ = normalize_power(encode(encoder_system, inputs))
    rx = transmit(tx, channel, stream)
    return rx if alignment is None else estimators.apply(alignment, rx)


def cross_model_infer(encoder_system: TocSystem, decoder_system: TocSystem,
                      alignment: Optional[AlignmentMap], channel: ChannelSpec, inputs,
                      stream: int = 0) -> np.ndarray:
    """Inference phase of server-based alignment (or plain/relative stitching)."""
    rx = received_features(encoder_system, decoder_system, alignment, channel, inputs, stream)
    return decode(decoder_system, rx)[0]


def server_alignment(encoder_system: TocSystem, decoder_system: TocSystem, anchor_inputs,
                     channel: ChannelSpec, estimator: str = "ls", clean_anchors: bool = False,
                     **kwargs) -> AlignmentMap:
    """Alignment phase: both systems' anchor features cross the channel, the server fits a map.

    ``clean_anchors`` fits against the device's noiseless anchor features
    instead of the received ones (test mode).
    """
    if encoder_system.mode != "plain" or decoder_system.mode != "plain":
        raise ValidationError("server-based alignment applies to plain systems")
    z1, _ = normalize_power(encode(encoder_system, anchor_inputs))
    z2, _ = normalize_power(encode(decoder_system, anchor_inputs))
    z1_rx = z1 if clean_anchors else transmit(z1, channel, stream=1)
    z2_rx = transmit(z2, channel, stream=2)
    return estimators.estimate(estimator, z1_rx, z2_rx, channel.sigma, **kwargs)


def lower_bound_estimate(encoder_system: TocSystem, decoder_system: TocSystem,
                         alignment: Optional[AlignmentMap], dataset: Dataset, channel: ChannelSpec,
                         num_noise_draws: int = 10) -> Tuple[float, float]:
    """Monte Carlo mean of ``log p(y | received)`` and its standard error over noise draws."""
    if num_noise_draws < 1:
        raise ValidationError("num_noise_draws must be >= 1")
    _check_compatible(encoder_system, decoder_system, alignment)
    tx, _ = normalize_power(encode(encoder_system, dataset.features))
    cols = np.arange(dataset.n)
    per_draw = []
    for k in range(num_noise_draws):
        rx = transmit(tx, channel, stream=k)
        if alignment is not None:
            rx = estimators.apply(alignment, rx)
        per_draw.append(decode(decoder_system, rx)[1][dataset.labels, cols].mean())
    per_draw = np.array(per_draw)
    stderr = per_draw.std(ddof=1) / np.sqrt(len(per_draw)) if len(per_draw) > 1 else float("nan")
    return float(per_draw.mean()), float(stderr)
