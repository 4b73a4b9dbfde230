"""Online history compression onto scaled Legendre coefficients.

Each scalar sample stream is summarized by an order-N coefficient vector
updated in O(N^2) per sample; the coefficients are the (approximate)
projection of the full history onto Legendre polynomials rescaled to the
elapsed window under the uniform measure.  Velocity trajectories are encoded
cell-by-cell and component-by-component, giving 2N feature channels per cell
regardless of history length.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

__all__ = [
    "HippoMatrices",
    "HippoState",
    "hippo_matrices",
    "hippo_update",
    "encode_series",
    "encode_trajectory",
    "reconstruct",
    "projection_fit",
    "DEFAULT_ORDER",
    "DEFAULT_HYPER",
]

DEFAULT_ORDER = 8
# Discretization knobs of the lineage implementation; carried in metadata
# for provenance, not consumed by the explicit recurrence below.
DEFAULT_HYPER = (-0.5, 1.0, 1.0)


@dataclass(frozen=True)
class HippoMatrices:
    """Transition matrix and input vector of the scaled-Legendre recurrence."""

    order: int
    a: np.ndarray  # (N, N), lower triangular
    b: np.ndarray  # (N,)


def hippo_matrices(order: int) -> HippoMatrices:
    """Closed-form matrices: a[n,k] = sqrt((2n+1)(2k+1)) below the diagonal,
    n+1 on it, 0 above; b[n] = sqrt(2n+1)."""
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    n = np.arange(order)
    root = np.sqrt(2.0 * n + 1.0)
    a = root[:, None] * root[None, :]
    a = np.tril(a, -1) + np.diag(n + 1.0)
    return HippoMatrices(order, a, root.copy())


@dataclass
class HippoState:
    """Per-stream coefficients plus the number of samples absorbed."""

    coeffs: jnp.ndarray  # (..., N)
    step_count: int = 0
    hyper: tuple[float, float, float] = field(default=DEFAULT_HYPER)


@jax.jit
def _update_kernel(coeffs, a_t, b, k, sample):
    """One recurrence application; k is the traced pre-update sample count.

    For k >= 1: c <- c - (c A^T)/k + (b u)/k.  The k = 0 branch seeds the
    coefficients with b*u, the projection of a one-sample constant history.
    """
    kk = jnp.maximum(k, 1.0)
    upd = coeffs - (coeffs @ a_t) / kk + (b * sample[..., None]) / kk
    return jnp.where(k == 0, b * sample[..., None], upd)


def hippo_update(state: HippoState, sample, mats: HippoMatrices) -> HippoState:
    """Absorb one scalar sample per stream; broadcasts over leading dims."""
    sample = jnp.asarray(sample, dtype=state.coeffs.dtype)
    a_t = jnp.asarray(mats.a.T, dtype=state.coeffs.dtype)
    b = jnp.asarray(mats.b, dtype=state.coeffs.dtype)
    k = jnp.asarray(float(state.step_count), dtype=state.coeffs.dtype)
    coeffs = _update_kernel(state.coeffs, a_t, b, k, sample)
    return HippoState(coeffs, state.step_count + 1, state.hyper)


def encode_series(samples, order: int) -> HippoState:
    """Encode a leading-time-axis array of samples, one recurrence per step."""
    samples = jnp.asarray(samples)
    if samples.ndim < 1 or samples.shape[0] < 1:
        raise ValueError("need at least one sample along the leading axis")
    mats = hippo_matrices(order)
    state = HippoState(jnp.zeros(samples.shape[1:] + (order,), dtype=samples.dtype))
    for t in range(samples.shape[0]):
        state = hippo_update(state, samples[t], mats)
    return state


def encode_trajectory(frames, order: int) -> jnp.ndarray:
    """Encode a velocity window (T, ny, nx, 2) into (ny, nx, 2N) features.

    Every cell and component is an independent stream.  Channel layout:
    x-component coefficients 0..N-1 first, then the y-component block.
    """
    frames = jnp.asarray(frames)
    if frames.ndim != 4 or frames.shape[-1] != 2:
        raise ValueError(f"expected (T, ny, nx, 2) window, got {frames.shape}")
    state = encode_series(frames, order)  # (ny, nx, 2, N)
    c = state.coeffs
    return c.transpose(0, 1, 2, 3).reshape(c.shape[0], c.shape[1], 2 * order)


def _basis_matrix(order: int, s: np.ndarray) -> np.ndarray:
    """Rows: normalized Legendre polynomials sqrt(2n+1) P_n at points s."""
    rows = []
    for n in range(order):
        coef = np.zeros(n + 1)
        coef[n] = 1.0
        rows.append(np.sqrt(2.0 * n + 1.0) * np.polynomial.legendre.legval(s, coef))
    return np.stack(rows, axis=-1)  # (len(s), N)


def reconstruct(state: HippoState, n_points: int) -> np.ndarray:
    """Evaluate the coefficient expansion on uniform samples of the window.

    Validation helper: the window [0, t] is mapped to [-1, 1] and the
    absorbed history's approximation is returned at n_points equispaced
    locations (endpoints included).
    """
    if state.step_count < 1:
        raise ValueError("state has absorbed no samples")
    order = state.coeffs.shape[-1]
    s = np.linspace(-1.0, 1.0, n_points)
    basis = _basis_matrix(order, s)  # (P, N)
    return np.asarray(state.coeffs) @ basis.T


def projection_fit(samples: np.ndarray, order: int) -> np.ndarray:
    """Dense least-squares oracle: fit the scaled basis to the full history.

    After m samples the recurrence's window is m steps long, so sample k is
    placed at the left-rule grid point s = 2k/m - 1 of the final window.
    The fit is ordinary least squares, i.e. the projection under the uniform
    measure restricted to the sample grid.
    """
    m = len(samples)
    s = 2.0 * np.arange(m) / m - 1.0
    basis = _basis_matrix(order, s)
    coef, *_ = np.linalg.lstsq(basis, np.asarray(samples), rcond=None)
    return coef
