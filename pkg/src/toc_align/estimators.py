"""Server-side estimation of the linear map between two feature spaces.

Every estimator takes the transmitting system's anchor features ``X`` and the
reference system's anchor features ``Y`` (both ``d x n_tau``, columns paired
index by index) and returns an :class:`AlignmentMap` ``T`` with ``T(X) ~ Y``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import DivergenceError, SingularityError, ValidationError
from .nn import MLP

ESTIMATORS = ("ls", "mmse", "gd-linear", "ft-nonlinear")
CONDITION_GUARD = 1e-10
DIVERGENCE_PATIENCE = 10


@dataclass
class AlignmentMap:
    estimator: str
    matrix: Optional[np.ndarray]
    sigma_used: float
    n_tau_used: int
    fit_residual: float
    network: Optional[MLP] = None
    loss_trace: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.estimator not in ESTIMATORS and self.estimator != "identity":
            raise ValidationError(f"unknown estimator {self.estimator!r}")
        if self.estimator == "ft-nonlinear":
            if self.network is None or self.matrix is not None:
                raise ValidationError("ft-nonlinear maps store a network and no matrix")
        else:
            self.matrix = np.asarray(self.matrix, dtype=float)
            if not np.all(np.isfinite(self.matrix)):
                raise ValidationError("alignment matrix has non-finite entries")

    @classmethod
    def identity(cls, d: int) -> "AlignmentMap":
        return cls("identity", np.eye(d), 0.0, 0, 0.0)

    @property
    def d_in(self) -> int:
        return self.network.n_in if self.matrix is None else self.matrix.shape[1]

    @property
    def d_out(self) -> int:
        return self.network.n_out if self.matrix is None else self.matrix.shape[0]

    def to_dict(self) -> dict:
        out = {
            "estimator": self.estimator,
            "d": self.d_out,
            "sigma_used": self.sigma_used,
            "n_tau_used": self.n_tau_used,
            "fit_residual": self.fit_residual,
        }
        if self.matrix is not None:
            out["matrix"] = self.matrix.ravel(order="C").tolist()
        else:
            out["network"] = self.network.to_dict()
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "AlignmentMap":
        d = payload["d"]
        matrix = network = None
        if "matrix" in payload:
            matrix = np.asarray(payload["matrix"], dtype=float).reshape(d, -1)
        else:
            network = MLP.from_dict(payload["network"])
        return cls(payload["estimator"], matrix, payload["sigma_used"], payload["n_tau_used"],
                   payload["fit_residual"], network)


@dataclass
class GdConfig:
    learning_rate: float = 0.2
    epochs: int = 500
    init: str = "identity"
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if int(self.epochs) < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.init not in ("zeros", "identity", "gaussian"):
            raise ValidationError(f"init must be zeros, identity or gaussian, got {self.init!r}")


def _check_pair(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValidationError(f"anchor matrices must pair column by column, got {x.shape} and {y.shape}")
    return x, y


def residual(matrix, x, y) -> float:
    """Mean over anchors of the squared l2 residual ``||y_j - M x_j||^2``."""
    r = y - matrix @ x
    return float(np.sum(r * r) / x.shape[1])


def _guarded_solve(gram, rhs, what):
    """Solve ``gram @ out = rhs`` for symmetric PSD ``gram`` via Cholesky."""
    eig = np.linalg.eigvalsh(gram)
    top = max(abs(eig[-1]), np.finfo(float).tiny)
    cond = np.inf if eig[0] <= 0 else eig[-1] / eig[0]
    if eig[0] <= CONDITION_GUARD * top:
        raise SingularityError(
            f"{what} is singular to working precision (condition number {cond:.3g}, "
            f"guard {1 / CONDITION_GUARD:.0e})",
            condition_number=cond,
        )
    return scipy.linalg.cho_solve(scipy.linalg.cho_factor(gram, check_finite=False), rhs,
                                  check_finite=False)


def estimate_ls(anchors_tx, anchors_ref) -> AlignmentMap:
    """Least squares map ``Y X^T (X X^T)^-1`` from the normal equations."""
    x, y = _check_pair(anchors_tx, anchors_ref)
    d, n = x.shape
    if n < d:
        raise SingularityError(f"least squares needs n_tau >= d, got n_tau={n} < d={d}")
    m = _guarded_solve(x @ x.T, x @ y.T, "anchor Gram matrix X X^T").T
    return AlignmentMap("ls", m, float("nan"), n, residual(m, x, y))


def estimate_mmse(anchors_tx_rx, anchors_ref_rx, sigma: float, n_tau: Optional[int] = None) -> AlignmentMap:
    """Linear MMSE map under an i.i.d. zero-mean prior with ``E[M^T M] = I``.

    Evaluates ``Y (X^T X + 2 n_tau sigma^2 I)^-1 X^T`` through the equivalent
    ``d x d`` system ``Y X^T (X X^T + 2 n_tau sigma^2 I)^-1``.
    """
    x, y = _check_pair(anchors_tx_rx, anchors_ref_rx)
    if not sigma >= 0:
        raise ValidationError(f"sigma must be >= 0, got {sigma}")
    n = x.shape[1]
    if n_tau is None:
        n_tau = n
    elif n_tau != n:
        raise ValidationError(f"n_tau={n_tau} does not match {n} anchor columns")
    gram = x @ x.T
    gram[np.diag_indices_from(gram)] += 2.0 * n_tau * sigma**2
    try:
        m = _guarded_solve(gram, x @ y.T, "regularized Gram matrix").T
    except SingularityError as exc:
        raise SingularityError(f"{exc}; with sigma=0 use estimate_ls on full-rank anchors",
                               exc.condition_number) from None
    return AlignmentMap("mmse", m, float(sigma), n, residual(m, x, y))


def linear_loss_and_grad(matrix, x, y):
    """Loss ``(1/n) sum_j ||y_j - M x_j||^2`` and its gradient in ``M``."""
    n = x.shape[1]
    r = y - matrix @ x
    return float(np.sum(r * r) / n), (-2.0 / n) * (r @ x.T)


def stable_learning_rate(x) -> float:
    """Largest step for which full-batch descent on the linear loss is monotone."""
    n = x.shape[1]
    return float(1.0 / np.linalg.eigvalsh((2.0 / n) * (x @ x.T))[-1])


def check_divergence(trace, what):
    if len(trace) > DIVERGENCE_PATIENCE and all(
        trace[-i] > trace[-i - 1] for i in range(1, DIVERGENCE_PATIENCE + 1)
    ):
        raise DivergenceError(
            f"{what} loss increased for {DIVERGENCE_PATIENCE} consecutive epochs "
            f"(from {trace[-DIVERGENCE_PATIENCE - 1]:.4g} to {trace[-1]:.4g}); lower the learning rate",
            trace,
        )
    if not np.isfinite(trace[-1]):
        raise DivergenceError(f"{what} loss became non-finite", trace)


def estimate_gd(anchors_tx_rx, anchors_ref_rx, cfg: GdConfig = GdConfig(), sigma: float = float("nan")) -> AlignmentMap:
    """Full-batch gradient descent on the mean squared anchor residual."""
    x, y = _check_pair(anchors_tx_rx, anchors_ref_rx)
    d_in, d_out = x.shape[0], y.shape[0]
    if cfg.init == "zeros":
        m = np.zeros((d_out, d_in))
    elif cfg.init == "identity":
        m = np.eye(d_out, d_in)
    else:
        m = np.random.default_rng(cfg.seed).standard_normal((d_out, d_in)) / np.sqrt(d_in)
    trace = []
    for _ in range(cfg.epochs):
        loss, grad = linear_loss_and_grad(m, x, y)
        trace.append(loss)
        check_divergence(trace, "gd-linear")
        m = m - cfg.learning_rate * grad
    return AlignmentMap("gd-linear", m, sigma, x.shape[1], residual(m, x, y), loss_trace=trace)


def ft_loss_and_grads(net: MLP, x, y):
    """Mean squared residual of a network map and the gradients of its parameters."""
    n = x.shape[1]
    r = net.forward(x) - y
    net.backward((2.0 / n) * r)
    return float(np.sum(r * r) / n), net.grads()


def estimate_ft(anchors_tx_rx, anchors_ref_rx, hidden_width: int = 16,
                cfg: GdConfig = GdConfig(epochs=2000), sigma: float = float("nan")) -> AlignmentMap:
    """Fine-tuning baseline: affine -> tanh -> affine fitted by full-batch L-BFGS.

    ``cfg.epochs`` caps the L-BFGS iterations and ``cfg.seed`` fixes the
    initial weights; the line search chooses step sizes, so
    ``cfg.learning_rate`` is not used.
    """
    x, y = _check_pair(anchors_tx_rx, anchors_ref_rx)
    if hidden_width < 1:
        raise ValidationError(f"hidden_width must be >= 1, got {hidden_width}")
    net = MLP.build([x.shape[0], hidden_width, y.shape[0]], np.random.default_rng(cfg.seed))
    trace = []

    def objective(theta):
        net.set_flat(theta)
        loss, grads = ft_loss_and_grads(net, x, y)
        return loss, np.concatenate([g.ravel() for g in grads])

    def record(theta):
        trace.append(objective(theta)[0])
        check_divergence(trace, "ft-nonlinear")

    result = scipy.optimize.minimize(objective, net.get_flat(), jac=True, method="L-BFGS-B", callback=record,
                                     options={"maxiter": int(cfg.epochs), "gtol": 1e-10, "ftol": 1e-15})
    net.set_flat(result.x)
    fit = float(np.sum((net.forward(x) - y) ** 2) / x.shape[1])
    return AlignmentMap("ft-nonlinear", None, sigma, x.shape[1], fit, network=net, loss_trace=trace)


def apply(alignment: AlignmentMap, features_rx) -> np.ndarray:
    features_rx = np.asarray(features_rx, dtype=float)
    if features_rx.ndim != 2 or features_rx.shape[0] != alignment.d_in:
        raise ValidationError(
            f"alignment expects {alignment.d_in}-dimensional features, got shape {features_rx.shape}"
        )
    if alignment.matrix is not None:
        return alignment.matrix @ features_rx
    return alignment.network.forward(features_rx)


def estimate(kind: str, anchors_tx_rx, anchors_ref_rx, sigma: float, **kwargs) -> AlignmentMap:
    """Dispatch by estimator name (``ls``, ``mmse``, ``gd``/``gd-linear``, ``ft``/``ft-nonlinear``)."""
    if kind == "ls":
        out = estimate_ls(anchors_tx_rx, anchors_ref_rx)
        out.sigma_used = float(sigma)
        return out
    if kind == "mmse":
        return estimate_mmse(anchors_tx_rx, anchors_ref_rx, sigma)
    if kind in ("gd", "gd-linear"):
        return estimate_gd(anchors_tx_rx, anchors_ref_rx, kwargs.get("cfg", GdConfig()), sigma)
    if kind in ("ft", "ft-nonlinear"):
        cfg = kwargs.get("cfg", GdConfig(epochs=2000))
        return estimate_ft(anchors_tx_rx, anchors_ref_rx, kwargs.get("hidden_width", 16), cfg, sigma)
    raise ValidationError(f"unknown estimator {kind!r}")
