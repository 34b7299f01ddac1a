"""Spectral conditioning penalty, its closed-form gradient, and the
associated condition-number bound and gradient-flow stability check.

For a coefficient block ``S`` with at least as many rows as columns the
penalty is the Frobenius distance of the Gram matrix from the closest
isotropic one::

    R(S) = || S^T S - alpha^2 I ||_F,    alpha^2 = ||S||_F^2 / k

with ``k`` the number of columns.  R vanishes exactly when all singular
values coincide, and ``R^2 / k`` equals the population variance of the
squared singular values, which makes R unitarily invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg

# Below this value R is treated as at its non-differentiable minimum and
# the (sub)gradient is taken to be zero, which keeps optimizers stationary
# at perfectly conditioned points.
GRADIENT_FLOOR = 1e-12

SQRT2 = math.sqrt(2.0)


class DivergenceError(RuntimeError):
    """A numerical iteration produced a non-finite state."""

    def __init__(self, message: str, *, time: float | None = None, step: int | None = None):
        super().__init__(message)
        self.time = time
        self.step = step


@dataclass
class RegularizerEval:
    """Penalty value, the isotropic level ``alpha^2``, and optionally the
    gradient (absent below the singularity floor)."""

    value: float
    alpha_sq: float
    gradient: np.ndarray | None = None


@dataclass
class FlowTrace:
    """Recorded explicit-Euler trajectory of the regularized flow
    ``dS/dt + beta * grad R(S) + S = M`` together with both sides of the
    long-time stability inequality at every recorded time."""

    times: np.ndarray
    states: list[np.ndarray]
    lhs: np.ndarray
    rhs: np.ndarray

    @property
    def max_violation(self) -> float:
        return float(np.max(self.lhs - self.rhs))


def _deviation(s: np.ndarray) -> tuple[np.ndarray, float]:
    k = s.shape[1]
    gram = s.T @ s
    alpha_sq = float(np.trace(gram)) / k
    dev = gram - alpha_sq * np.eye(k)
    return dev, alpha_sq


def reg_value(s) -> RegularizerEval:
    """Evaluate the penalty; no SVD is required."""
    s = linalg._as_matrix(s, "coefficient matrix")
    dev, alpha_sq = _deviation(s)
    return RegularizerEval(value=float(np.linalg.norm(dev)), alpha_sq=alpha_sq)


def reg_gradient(s, floor: float = GRADIENT_FLOOR) -> np.ndarray:
    """Closed-form gradient ``2 S (S^T S - alpha^2 I) / R(S)``.

    Returns the zero matrix when ``R(S) < floor``; everywhere else the
    result matches central finite differences of :func:`reg_value`.
    """
    s = linalg._as_matrix(s, "coefficient matrix")
    dev, _ = _deviation(s)
    value = float(np.linalg.norm(dev))
    if value < floor:
        return np.zeros_like(s)
    return 2.0 * (s @ dev) / value


def reg_eval(s, floor: float = GRADIENT_FLOOR) -> RegularizerEval:
    """Value, alpha^2, and gradient in one pass."""
    s = linalg._as_matrix(s, "coefficient matrix")
    dev, alpha_sq = _deviation(s)
    value = float(np.linalg.norm(dev))
    gradient = None if value < floor else 2.0 * (s @ dev) / value
    return RegularizerEval(value=value, alpha_sq=alpha_sq, gradient=gradient)


def kappa_bound(s) -> float:
    """Upper bound ``exp(R(S) / (sqrt(2) * sigma_min(S)^2))`` on the
    condition number of ``S``.  Rejects singular input, for which the
    bound is vacuous."""
    s = linalg._as_matrix(s, "coefficient matrix")
    if s.shape[0] < s.shape[1]:
        raise ValueError("bound is defined for square or tall matrices; transpose the input")
    smallest = float(linalg.svd(s).singular_values[-1])
    if smallest <= 0.0:
        raise ValueError("condition bound undefined for singular input")
    value = reg_value(s).value
    with np.errstate(over="ignore"):
        return float(np.exp(value / (SQRT2 * smallest**2)))


def stability_flow(s0, m, beta: float, t_end: float, dt: float) -> FlowTrace:
    """Integrate ``dS/dt = M - S - beta * grad R(S)`` with explicit Euler
    and record, at every step, both sides of the long-time stability
    inequality

        1/2 ||S(t)-M||^2 + 2 beta \\int_0^t e^(tau-t) R(S(tau)) dtau
            <= 1/2 e^(-t) ||S(0)-M||^2 + 2 (1-e^(-t)) beta (1+2 beta) ||M||^2

    with the integral accumulated by trapezoidal quadrature on the step
    grid.  Any non-finite state aborts with the failing time attached.
    """
    s = linalg._as_matrix(s0, "initial state").copy()
    m = linalg._as_matrix(m, "target")
    if m.shape != s.shape:
        raise ValueError(f"target shape {m.shape} does not match state shape {s.shape}")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if dt <= 0 or t_end < dt:
        raise ValueError("need dt > 0 and t_end >= dt")

    n_steps = int(round(t_end / dt))
    m_norm_sq = float(np.linalg.norm(m) ** 2)
    init_gap_sq = float(np.linalg.norm(s - m) ** 2)

    times = np.empty(n_steps + 1)
    lhs = np.empty(n_steps + 1)
    rhs = np.empty(n_steps + 1)
    states = [s.copy()]

    reg_prev = reg_value(s).value
    weighted_integral = 0.0  # \int_0^t e^tau R(S(tau)) dtau
    times[0] = 0.0
    lhs[0] = 0.5 * init_gap_sq
    rhs[0] = 0.5 * init_gap_sq

    for step in range(1, n_steps + 1):
        s = s + dt * (m - s - beta * reg_gradient(s))
        t = step * dt
        if not np.all(np.isfinite(s)):
            raise DivergenceError(f"flow state became non-finite at t = {t:.6g}", time=t, step=step)
        reg_cur = reg_value(s).value
        weighted_integral += 0.5 * dt * (math.exp(t - dt) * reg_prev + math.exp(t) * reg_cur)
        reg_prev = reg_cur

        times[step] = t
        states.append(s.copy())
        lhs[step] = 0.5 * float(np.linalg.norm(s - m) ** 2) + 2.0 * beta * math.exp(-t) * weighted_integral
        rhs[step] = 0.5 * math.exp(-t) * init_gap_sq + 2.0 * (1.0 - math.exp(-t)) * beta * (1.0 + 2.0 * beta) * m_norm_sq

    return FlowTrace(times=times, states=states, lhs=lhs, rhs=rhs)


def conv_reg_value(core) -> RegularizerEval:
    """Penalty for an order-4 convolution core, evaluated on the transpose
    of its output-mode unfolding so the Gram matrix is r_O x r_O.

    Requires ``r_O <= r_I * S_W * S_H`` (otherwise the unfolding is wide
    and its Gram spectrum carries structural zeros)."""
    mat = _conv_reg_matrix(core)
    return reg_value(mat)


def conv_reg_gradient(core, floor: float = GRADIENT_FLOOR) -> np.ndarray:
    """Gradient of :func:`conv_reg_value` with respect to the core,
    refolded to the core's shape."""
    core = np.asarray(core, dtype=float)
    mat = _conv_reg_matrix(core)
    grad_mat = reg_gradient(mat, floor)
    return linalg.refold_output_mode(grad_mat.T, core.shape)


def _conv_reg_matrix(core) -> np.ndarray:
    core = np.asarray(core, dtype=float)
    if core.ndim != 4:
        raise ValueError(f"expected an order-4 core, got shape {core.shape}")
    r_o = core.shape[0]
    rest = core.shape[1] * core.shape[2] * core.shape[3]
    if r_o > rest:
        raise ValueError(
            f"output rank {r_o} exceeds flattened input size {rest}; "
            "the regularized unfolding must be tall"
        )
    return linalg.unfold_output_mode(core).T
