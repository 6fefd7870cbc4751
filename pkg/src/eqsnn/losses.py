"""Loss functions for quantile regression and spike-based classification.

All losses take and return autodiff tensors (plain arrays are wrapped), so
they can sit at the root of a backward pass. Reductions are left to the
caller except for the `mean_*` conveniences.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError

HUBER = "huber"
ASYMMETRIC_HUBER = "asymmetric-huber"
PINBALL = "pinball"

DELTA_FLOOR = 1e-6


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_level(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"quantile level must lie in (0,1), got {alpha}")
    return alpha


def pinball_loss(y, q_hat, alpha: float) -> Tensor:
    """max(α·r, (α−1)·r) with r = y − q̂, elementwise."""
    alpha = _check_level(alpha)
    r = _as_tensor(y) - _as_tensor(q_hat)
    return ad.maximum(r * alpha, r * (alpha - 1.0))


def huber_quantile_loss(y, q_hat, alpha: float, delta: float,
                        mode: str = HUBER) -> Tensor:
    """Quadratic inside |r| ≤ δ, linear outside, elementwise.

    `huber` is the symmetric form ½r² / δ|r|−½δ². `asymmetric-huber`
    additionally tilts by α on positive residuals and (1−α) on negative
    ones, which is what makes distinct quantile heads identifiable.
    """
    alpha = _check_level(alpha)
    delta = float(delta)
    if delta <= 0.0:
        raise ConfigError(f"huber delta must be positive, got {delta}")
    if mode not in (HUBER, ASYMMETRIC_HUBER):
        raise ConfigError(f"unknown huber mode {mode!r}")
    r = _as_tensor(y) - _as_tensor(q_hat)
    a = ad.absolute(r)
    quad = ad.square(r) * 0.5
    lin = a * delta - 0.5 * delta * delta
    base = ad.where(a.data <= delta, quad, lin)
    if mode == HUBER:
        return base
    tilt = np.where(r.data > 0.0, alpha, 1.0 - alpha)
    return base * tilt


def select_delta(residuals) -> float:
    """Interquartile range of the residual sample, floored at 1e-6.

    Uses the linear-interpolation empirical quantile estimator.
    """
    r = np.asarray(residuals, dtype=np.float64).ravel()
    if r.size < 4:
        raise ConfigError(f"need at least 4 residuals to set delta, got {r.size}")
    q25, q75 = np.quantile(r, [0.25, 0.75], method="linear")
    return max(float(q75 - q25), DELTA_FLOOR)


def quantile_training_loss(y, q_hat, alpha: float, *, loss: str,
                           delta: float | None = None) -> Tensor:
    """Dispatch on loss name; huber modes derive δ from caller."""
    if loss == PINBALL:
        return pinball_loss(y, q_hat, alpha)
    if loss in (HUBER, ASYMMETRIC_HUBER):
        if delta is None:
            raise ConfigError("huber losses need a delta")
        return huber_quantile_loss(y, q_hat, alpha, delta, mode=loss)
    raise ConfigError(f"unknown quantile loss {loss!r}")


def mse_loss(y, y_hat) -> Tensor:
    return ad.tmean(ad.square(_as_tensor(y) - _as_tensor(y_hat)))


def bce_with_logits(logits, targets) -> Tensor:
    """Binary cross-entropy from raw scores, elementwise.

    Stable form max(z,0) − z·t + log(1 + exp(−|z|)); never exponentiates
    a positive argument.
    """
    z = _as_tensor(logits)
    t = _as_tensor(targets)
    zero = Tensor(np.zeros_like(z.data))
    # operand order matters: maximum sends tie gradients to its first
    # argument, and these orderings make the composite derivative equal
    # sigmoid(z) - t everywhere, including at z = 0 exactly
    return ad.maximum(zero, z) - z * t + \
        ad.log(ad.exp(-ad.maximum(-z, z)) + 1.0)


def mean_pinball(y, q_hat, alpha: float) -> Tensor:
    return ad.tmean(pinball_loss(y, q_hat, alpha))


def mean_bce_with_logits(logits, targets) -> Tensor:
    return ad.tmean(bce_with_logits(logits, targets))
