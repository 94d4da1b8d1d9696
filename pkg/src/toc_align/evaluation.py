"""Metrics, the noise-gap bound checker, the MMSE stationarity check and runtime benchmarks."""
from __future__ import annotations

import math
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Optional

import numpy as np
import scipy.linalg

from . import estimators
from .channel import ChannelSpec, POWER_CONVENTION, normalize_power, snr_to_sigma, transmit
from .errors import ValidationError
from .estimators import AlignmentMap
from .features import Dataset, GroundTruthTransform
from .models import TocSystem, decode, encode
from .nn import MLP, induced_inf_norm, log_softmax

MIN_REPETITIONS = 100
SCHEMA_VERSION = 1


def top1_accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise ValidationError("predictions and labels must be non-empty and equally shaped")
    return float(np.mean(predictions == labels))


@dataclass(frozen=True)
class AlignmentErrorReport:
    frobenius: float
    inf_norm: float


def alignment_error(alignment: AlignmentMap, truth: GroundTruthTransform) -> AlignmentErrorReport:
    if alignment.matrix is None:
        raise ValidationError("alignment error needs a linear map")
    diff = alignment.matrix - truth.matrix
    return AlignmentErrorReport(float(np.linalg.norm(diff)), induced_inf_norm(diff))


@dataclass(frozen=True)
class LipschitzEstimate:
    analytic: float
    empirical: float


def _network(decoder):
    return decoder.decoder if isinstance(decoder, TocSystem) else decoder


def estimate_lipschitz(decoder, probe_count: int = 1000, domain_radius: float = 3.0,
                       log_probs: bool = False, seed: int = 0) -> LipschitzEstimate:
    """Lipschitz constant of a decoder in the infinity-norm.

    ``analytic`` is the product of the layers' induced infinity-norms (tanh is
    1-Lipschitz); it is a certified upper bound. ``empirical`` is the largest
    difference quotient over random close pairs in the box of half-width
    ``domain_radius``. With ``log_probs`` the map includes log-softmax, whose
    infinity-norm Lipschitz constant is at most 2.
    """
    net: MLP = _network(decoder)
    analytic = math.prod(induced_inf_norm(layer.weight) for layer in net.dense)
    if log_probs:
        analytic *= 2.0
    rng = np.random.default_rng(seed)
    z = rng.uniform(-domain_radius, domain_radius, (net.n_in, probe_count))
    step = 1e-4 * domain_radius
    delta = rng.uniform(-step, step, z.shape)
    f = (lambda v: log_softmax(net.forward(v))) if log_probs else net.forward
    num = np.abs(f(z + delta) - f(z)).max(axis=0)
    den = np.abs(delta).max(axis=0)
    return LipschitzEstimate(float(analytic), float(np.max(num / den)))


def clip_spectral_norm(decoder, max_norm: float = 1.0) -> MLP:
    """Copy of ``decoder`` with every layer's spectral norm scaled down to at most ``max_norm``."""
    net = _network(decoder).copy()
    for layer in net.dense:
        s = np.linalg.norm(layer.weight, 2)
        if s > max_norm:
            layer.weight *= max_norm / s
    return net


@dataclass
class BoundReport:
    measured_gap: float
    gap_stderr: float
    rho: float
    rho_empirical: float
    rhs: float
    rhs_without_rho: float
    slack: float
    slack_without_rho: float
    sigma: float
    d: int
    m_minus_i_inf: float
    config: Dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.rhs >= 0:
            raise ValidationError(f"bound right-hand side must be >= 0, got {self.rhs}")

    def to_dict(self) -> dict:
        return asdict(self)


def gaussian_max_factor(d: int) -> float:
    return math.sqrt(2.0 * math.log(d))


def check_prop1_bound(encoder1: TocSystem, decoder2, truth: GroundTruthTransform, channel: ChannelSpec,
                      dataset: Dataset, draws: int = 20) -> BoundReport:
    """Gap between aligning with the true map and native transmission, against its bound.

    System 2's features are ``M z1`` exactly. The matched side decodes
    ``M z1 + eps``, the aligned side ``M (z1 + eps)``, with common noise draws.
    """
    net: MLP = _network(decoder2)
    d = truth.d
    if encoder1.n_out != d or net.n_in != d:
        raise ValidationError("encoder, decoder and transform must share the feature dimension")
    z1, _ = normalize_power(encode(encoder1, dataset.features))
    z2 = truth.matrix @ z1
    cols = np.arange(dataset.n)
    diffs, cross, matched = [], [], []
    for k in range(draws):
        z1_rx = transmit(z1, channel, stream=k)
        z2_rx = z2 + (z1_rx - z1)
        lp_cross = log_softmax(net.forward(truth.matrix @ z1_rx))[dataset.labels, cols].mean()
        lp_match = log_softmax(net.forward(z2_rx))[dataset.labels, cols].mean()
        cross.append(lp_cross)
        matched.append(lp_match)
        diffs.append(lp_cross - lp_match)
    diffs = np.array(diffs)
    gap = abs(float(np.mean(cross) - np.mean(matched)))
    stderr = float(diffs.std(ddof=1) / math.sqrt(draws)) if draws > 1 else float("nan")
    lip = estimate_lipschitz(net, log_probs=True)
    m_inf = induced_inf_norm(truth.matrix - np.eye(d))
    base = channel.sigma * gaussian_max_factor(d) * m_inf
    rhs = lip.analytic * base
    return BoundReport(
        measured_gap=gap, gap_stderr=stderr, rho=lip.analytic, rho_empirical=lip.empirical,
        rhs=rhs, rhs_without_rho=base, slack=rhs - gap, slack_without_rho=base - gap,
        sigma=channel.sigma, d=d, m_minus_i_inf=m_inf,
        config={"draws": draws, "n": dataset.n, "transform_kind": truth.kind,
                "channel": channel.to_dict()},
    )


def mmse_expansion(a, anchors_rx, coefficient: float) -> float:
    """Quadratic MSE expansion of the linear MMSE derivation with ``R_M = I``.

    ``d - 2 tr(X A) + tr(A^T (X^T X + 2 c I) A)`` where ``c`` is the noise
    coefficient carried by each of the two noise terms.
    """
    x = anchors_rx
    k_a = x.T @ (x @ a) + 2.0 * coefficient * a
    return float(x.shape[0] - 2.0 * np.trace(x @ a) + np.sum(a * k_a))


def mmse_expansion_gradient(a, anchors_rx, coefficient: float) -> np.ndarray:
    x = anchors_rx
    return -2.0 * x.T + 2.0 * (x.T @ (x @ a) + 2.0 * coefficient * a)


def numerical_gradient(f: Callable[[np.ndarray], float], a, step: float = 1e-3) -> np.ndarray:
    grad = np.zeros_like(a)
    probe = a.copy()
    for idx in np.ndindex(a.shape):
        orig = probe[idx]
        probe[idx] = orig + step
        hi = f(probe)
        probe[idx] = orig - step
        lo = f(probe)
        probe[idx] = orig
        grad[idx] = (hi - lo) / (2 * step)
    return grad


def mmse_optimal_a(anchors_rx, sigma: float) -> np.ndarray:
    """``A* = (X^T X + 2 n_tau sigma^2 I)^-1 X^T`` (``n_tau x d``)."""
    x = anchors_rx
    n = x.shape[1]
    k = x.T @ x + 2.0 * n * sigma**2 * np.eye(n)
    return scipy.linalg.solve(k, x.T, assume_a="pos")


def ls_analogue_a(anchors_rx) -> np.ndarray:
    """``X^T (X X^T)^-1``, the coefficient matrix that reproduces least squares."""
    x = anchors_rx
    return scipy.linalg.solve(x @ x.T, x, assume_a="pos").T


def mmse_expansion_monte_carlo(a, anchors_rx, sigma: float, trials: int = 2000, seed: int = 0):
    """Sample ``||M - (M (X - U) + U) A||_F^2`` with ``M_ij ~ N(0, 1/d)`` and ``U_ij ~ N(0, sigma^2)``.

    Returns the mean and its standard error.
    """
    x = anchors_rx
    d, n = x.shape
    rng = np.random.default_rng(seed)
    out = np.empty(trials)
    for t in range(trials):
        m = rng.standard_normal((d, d)) / math.sqrt(d)
        u = sigma * rng.standard_normal((d, n))
        out[t] = np.sum((m - (m @ (x - u) + u) @ a) ** 2)
    return float(out.mean()), float(out.std(ddof=1) / math.sqrt(trials))


@dataclass
class StationarityReport:
    relative_grad_norm: float
    symbolic_relative_grad_norm: float
    grad_norm_at_optimum: float
    grad_norm_at_zero: float
    mse_at_optimum: float
    mse_at_ls_analogue: float
    expansion_coefficient: float
    residual_constant: float
    sigma: float
    n_tau: int

    def to_dict(self) -> dict:
        return asdict(self)


def mmse_stationarity_check(anchors_rx, sigma: float, n_tau: Optional[int] = None,
                            coefficient: Optional[float] = None, step: float = 1e-3) -> StationarityReport:
    """Gradient of the MSE expansion at ``A*`` relative to its gradient at ``A = 0``.

    ``coefficient`` defaults to ``n_tau sigma^2`` (the expansion as derived);
    pass ``d sigma^2`` to evaluate the variant implied by ``E[U^T U] = d sigma^2 I``.
    ``residual_constant`` is the regularizer the expansion implies minus the
    ``2 n_tau sigma^2`` used by ``A*``; nonzero means ``A*`` is not stationary.
    """
    x = np.asarray(anchors_rx, dtype=float)
    d, n = x.shape
    if n_tau is not None and n_tau != n:
        raise ValidationError(f"n_tau={n_tau} does not match {n} anchor columns")
    c = n * sigma**2 if coefficient is None else coefficient
    a_opt = mmse_optimal_a(x, sigma)
    f = lambda a: mmse_expansion(a, x, c)
    g_opt = numerical_gradient(f, a_opt, step)
    g_zero = numerical_gradient(f, np.zeros_like(a_opt), step)
    sym_opt = mmse_expansion_gradient(a_opt, x, c)
    sym_zero = mmse_expansion_gradient(np.zeros_like(a_opt), x, c)
    return StationarityReport(
        relative_grad_norm=float(np.linalg.norm(g_opt) / np.linalg.norm(g_zero)),
        symbolic_relative_grad_norm=float(np.linalg.norm(sym_opt) / np.linalg.norm(sym_zero)),
        grad_norm_at_optimum=float(np.linalg.norm(g_opt)),
        grad_norm_at_zero=float(np.linalg.norm(g_zero)),
        mse_at_optimum=f(a_opt),
        mse_at_ls_analogue=f(ls_analogue_a(x)),
        expansion_coefficient=float(c),
        residual_constant=float(2.0 * c - 2.0 * n * sigma**2),
        sigma=float(sigma),
        n_tau=n,
    )


@dataclass
class RuntimeRecord:
    operation: str
    d: int
    n_tau: int
    median_ms: float
    p95_ms: float
    repetitions: int
    environment: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.repetitions < MIN_REPETITIONS:
            raise ValidationError(f"runtime records need >= {MIN_REPETITIONS} repetitions")

    def to_dict(self) -> dict:
        return asdict(self)


def environment_fingerprint() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "machine": platform.machine(),
        "processor": platform.processor(),
        "system": platform.system(),
        "cpu_count": os.cpu_count(),
        "power_convention": POWER_CONVENTION,
    }


def _benchmark_inputs(d, n_tau, snr_db, seed):
    rng = np.random.default_rng(seed)
    sigma = snr_to_sigma(snr_db)
    x = rng.standard_normal((d, n_tau))
    m = rng.standard_normal((d, d)) / math.sqrt(d)
    return x + sigma * rng.standard_normal(x.shape), m @ x + sigma * rng.standard_normal(x.shape), sigma


BENCH_OPERATIONS = ("ls", "mmse", "gd", "ft", "on-device")


def benchmark_runtime(operation: str, d: int = 16, n_tau: int = 100, repetitions: int = MIN_REPETITIONS,
                      warmup: int = 5, snr_db: float = 6.0, seed: int = 0,
                      estimator_kwargs: Optional[dict] = None) -> RuntimeRecord:
    """Wall-clock statistics of one server-side alignment estimate.

    ``on-device`` alignment runs nothing on the server, so its record is zero.
    """
    if repetitions < MIN_REPETITIONS:
        raise ValidationError(f"repetitions must be >= {MIN_REPETITIONS}, got {repetitions}")
    if operation not in BENCH_OPERATIONS:
        raise ValidationError(f"operation must be one of {BENCH_OPERATIONS}, got {operation!r}")
    env = environment_fingerprint()
    if operation == "on-device":
        return RuntimeRecord(operation, d, n_tau, 0.0, 0.0, repetitions, env)
    x, y, sigma = _benchmark_inputs(d, n_tau, snr_db, seed)
    kwargs = estimator_kwargs or {}
    run = lambda: estimators.estimate(operation, x, y, sigma, **kwargs)
    for _ in range(warmup):
        run()
    times = np.empty(repetitions)
    for i in range(repetitions):
        start = time.perf_counter()
        run()
        times[i] = time.perf_counter() - start
    return RuntimeRecord(operation, d, n_tau, float(np.median(times) * 1e3),
                         float(np.percentile(times, 95) * 1e3), repetitions, env)
