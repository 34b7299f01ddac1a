"""Dense linear algebra kernels shared by every other module.

Every matrix in this project is small (coefficient blocks are r x r or
2r x 2r with r below a few hundred; bases are n x 2r with n desk-scale),
so the kernels favour determinism and accuracy over asymptotic speed:

* ``orth``    -- Householder QR with explicit handling of rank-deficient
                 columns, so the output always has the requested width.
* ``svd``     -- one-sided Jacobi, fully deterministic for a given input.
* ``truncate_by_threshold`` -- tail-energy rank selection.
* ``condition_number``      -- sigma_max / sigma_min with an infinity
                 sentinel once the ratio exceeds ``KAPPA_SENTINEL_RATIO``.
* ``unfold_output_mode`` / ``refold_output_mode`` -- the fixed
                 matricisation used for order-4 convolution kernels.

All functions are pure; none mutates its arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Relative column-norm threshold below which a column counts as dependent
# on the columns before it and gets replaced during orthonormalization.
DEFICIENCY_REL_TOL = 1e-12

# sigma_min / sigma_max ratios beyond this produce the +inf sentinel.
KAPPA_SENTINEL_RATIO = 1e14

# Fixed seed for the deterministic completion vectors injected when an
# input to ``orth`` (or a zero singular direction) is rank deficient.
_COMPLETION_SEED = 0x51D5

_JACOBI_TOL = 1e-15
_JACOBI_MAX_SWEEPS = 100


@dataclass
class SvdResult:
    """Thin SVD ``A = left @ diag(singular_values) @ right.T``.

    ``left`` and ``right`` have orthonormal columns; ``singular_values``
    is non-negative and sorted in non-increasing order.
    """

    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray

    @property
    def rank_bound(self) -> int:
        return self.singular_values.size

    def reconstruct(self) -> np.ndarray:
        return (self.left * self.singular_values) @ self.right.T


def _as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name} must be 2-D with positive dimensions, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _completion_vector(dim: int, attempt: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(_COMPLETION_SEED + attempt))
    return rng.standard_normal(dim)


def orth(a) -> np.ndarray:
    """Orthonormal basis with exactly as many columns as ``a``.

    Householder QR, with signs fixed so an already-orthonormal input is
    returned unchanged.  Columns that are (numerically) dependent on the
    ones before them are replaced by deterministic pseudo-random vectors
    re-orthogonalized against the accumulated basis, so the span of the
    result always contains the span of ``a`` and the width never shrinks.
    """
    a = _as_matrix(a)
    n, k = a.shape
    if n < k:
        raise ValueError(f"cannot orthonormalize {n}x{k}: need at least as many rows as columns")

    col_scale = np.linalg.norm(a, axis=0)
    r = a.copy()
    reflectors: list[tuple[np.ndarray, float]] = []  # (v, beta) acting on rows j:
    signs = np.ones(k)
    fill_attempt = 0

    for j in range(k):
        x = r[j:, j]
        if np.linalg.norm(x) <= DEFICIENCY_REL_TOL * col_scale[j]:
            # Dependent (or zero) column: inject a deterministic fresh
            # direction, expressed in the current reflected coordinates.
            while True:
                w = _completion_vector(n, fill_attempt)
                fill_attempt += 1
                for i, (v, beta) in enumerate(reflectors):
                    w[i:] -= (beta * (v @ w[i:])) * v
                if np.linalg.norm(w[j:]) > 1e-8 * np.linalg.norm(w):
                    break
            r[:, j] = w
            x = r[j:, j]

        # Householder vector mapping x onto -sign(x0)*|x| e1.
        alpha = -math.copysign(np.linalg.norm(x), x[0] if x[0] != 0 else 1.0)
        v = x.copy()
        v[0] -= alpha
        vsq = v @ v
        beta = 0.0 if vsq == 0.0 else 2.0 / vsq
        r[j:, j:] -= np.outer(beta * v, v @ r[j:, j:])
        reflectors.append((v, beta))
        signs[j] = -1.0 if r[j, j] < 0 else 1.0

    q = np.zeros((n, k))
    q[np.arange(k), np.arange(k)] = 1.0
    for j in range(k - 1, -1, -1):
        v, beta = reflectors[j]
        q[j:, :] -= np.outer(beta * v, v @ q[j:, :])
    return q * signs


def _tournament_rounds(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Round-robin schedule covering every column pair once per sweep in
    groups of disjoint pairs, so each group can rotate simultaneously."""
    m = n + (n & 1)  # pad with a bye when n is odd
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p = []
        q = []
        for i in range(m // 2):
            lo, hi = players[i], players[m - 1 - i]
            if lo > hi:
                lo, hi = hi, lo
            if hi < n:
                p.append(lo)
                q.append(hi)
        rounds.append((np.array(p, dtype=int), np.array(q, dtype=int)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def svd(a) -> SvdResult:
    """Deterministic thin SVD via one-sided Jacobi rotations.

    Columns of a working copy are rotated until pairwise orthogonal; the
    singular values are then the column norms.  Rotations within a
    tournament round touch disjoint column pairs and commute, so each
    round is applied in one vectorized shot.  Zero singular directions
    get deterministic orthonormal completion columns on the left so the
    factor always satisfies ``left.T @ left = I``.
    """
    a = _as_matrix(a)
    m, n = a.shape
    if m < n:
        flipped = svd(a.T)
        return SvdResult(flipped.right, flipped.singular_values, flipped.left)

    work = a.copy()
    v = np.eye(n)
    rounds = _tournament_rounds(n)
    for _ in range(_JACOBI_MAX_SWEEPS):
        rotated = False
        for p, q in rounds:
            if p.size == 0:
                continue
            cols_p = work[:, p]
            cols_q = work[:, q]
            app = np.einsum("ij,ij->j", cols_p, cols_p)
            aqq = np.einsum("ij,ij->j", cols_q, cols_q)
            apq = np.einsum("ij,ij->j", cols_p, cols_q)
            scale = app * aqq
            active = (scale > 0.0) & (np.abs(apq) > _JACOBI_TOL * np.sqrt(scale))
            if not np.any(active):
                continue
            rotated = True
            pa, qa = p[active], q[active]
            apq_a = apq[active]
            theta = (aqq[active] - app[active]) / (2.0 * apq_a)
            t = np.sign(theta) / (np.abs(theta) + np.hypot(1.0, theta))
            t = np.where(theta == 0.0, 1.0, t)  # sign(0) = 0 would stall the pair
            c = 1.0 / np.hypot(1.0, t)
            s = c * t
            wp = work[:, pa]
            wq = work[:, qa]
            work[:, pa] = c * wp - s * wq
            work[:, qa] = s * wp + c * wq
            vp = v[:, pa]
            vq = v[:, qa]
            v[:, pa] = c * vp - s * vq
            v[:, qa] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise RuntimeError("Jacobi SVD did not converge")

    norms = np.linalg.norm(work, axis=0)
    order = np.argsort(-norms, kind="stable")
    sv = norms[order]
    right = v[:, order]
    left = np.zeros((m, n))
    fill_attempt = 0
    for i, col in enumerate(order):
        if sv[i] > 0.0:
            left[:, i] = work[:, col] / sv[i]
        else:
            while True:
                w = _completion_vector(m, fill_attempt)
                fill_attempt += 1
                w -= left @ (left.T @ w)
                w -= left @ (left.T @ w)
                norm_w = np.linalg.norm(w)
                if norm_w > 1e-8:
                    left[:, i] = w / norm_w
                    break
    return SvdResult(left, sv, right)


def truncate_by_threshold(sv: SvdResult, threshold: float, r_min: int) -> tuple[int, SvdResult]:
    """Smallest rank whose discarded-tail 2-norm falls below ``threshold``.

    The selected rank is clamped from below by ``r_min`` (itself capped by
    the number of available singular values, so degenerate spectra never
    over-ask).  Returns the rank together with the leading factors.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    values = sv.singular_values
    k = values.size
    tail_sq = np.concatenate([np.cumsum(values[::-1] ** 2)[::-1], [0.0]])
    r1 = k
    for rank in range(k + 1):
        if math.sqrt(tail_sq[rank]) < threshold:
            r1 = rank
            break
    r1 = max(r1, min(r_min, k))
    truncated = SvdResult(sv.left[:, :r1].copy(), values[:r1].copy(), sv.right[:, :r1].copy())
    return r1, truncated


def condition_number(a) -> float:
    """sigma_max / sigma_min over the nonzero singular values.

    Returns ``inf`` once the ratio would exceed ``KAPPA_SENTINEL_RATIO``;
    rejects the zero matrix, whose conditioning is undefined.
    """
    a = _as_matrix(a)
    values = svd(a).singular_values
    nonzero = values[values > 0.0]
    if nonzero.size == 0:
        raise ValueError("condition number of the zero matrix is undefined")
    smax = float(nonzero[0])
    smin = float(nonzero[-1])
    if smin < smax / KAPPA_SENTINEL_RATIO:
        return math.inf
    return smax / smin


def _as_tensor4(c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if c.ndim != 4:
        raise ValueError(f"expected an order-4 tensor, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("tensor contains non-finite entries")
    return c


def unfold_output_mode(c) -> np.ndarray:
    """Matricise ``c`` with shape (N_O, N_I, S_W, S_H) on the first mode.

    Row ``o`` is the flattening of ``c[o]`` with the input-channel index
    slowest, then the window width index, then the window height index
    (plain C-order), so ``refold_output_mode`` is its exact inverse.
    """
    c = _as_tensor4(c)
    return c.reshape(c.shape[0], -1).copy()


def refold_output_mode(mat, dims: tuple[int, int, int, int]) -> np.ndarray:
    mat = _as_matrix(mat, "unfolded tensor")
    n_o, n_i, s_w, s_h = dims
    if mat.shape != (n_o, n_i * s_w * s_h):
        raise ValueError(f"cannot refold shape {mat.shape} into dims {dims}")
    return mat.reshape(dims).copy()


def unfold_input_mode(c) -> np.ndarray:
    """Matricise on the second (input-channel) mode; same C-order rule."""
    c = _as_tensor4(c)
    return np.transpose(c, (1, 0, 2, 3)).reshape(c.shape[1], -1).copy()
