"""Evaluation metrics: field correlation, high-correlation duration, spectra.

Correlations compare the curl of predicted and reference velocities (both
sampled at cell corners by the same operator, so the choice cancels between
the two sides); the headline number is the time until the correlation first
drops below a threshold, linearly interpolated between saved frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "pearson_correlation",
    "CorrelationSeries",
    "correlation_series",
    "ks_correlation_series",
    "DurationResult",
    "high_corr_duration",
    "duration_from_series",
    "SpectrumSeries",
    "energy_spectrum",
    "spectrum_time_average",
]


def pearson_correlation(a, b) -> float:
    """Centered, normalized covariance over all cells; errors on zero variance."""
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    da = a - a.mean()
    db = b - b.mean()
    na = np.linalg.norm(da)
    nb = np.linalg.norm(db)
    if na == 0.0 or nb == 0.0:
        raise ValueError("correlation undefined for a zero-variance field")
    return float(np.dot(da, db) / (na * nb))


def _vorticity_np(u_x, u_y, dx: float, dy: float) -> np.ndarray:
    u_x = np.asarray(u_x, np.float64)
    u_y = np.asarray(u_y, np.float64)
    dudy = (np.roll(u_x, -1, axis=0) - u_x) / dy
    dvdx = (np.roll(u_y, -1, axis=1) - u_y) / dx
    return dvdx - dudy


@dataclass
class CorrelationSeries:
    times: np.ndarray
    rho: np.ndarray


def _check_alignment(pred, ref):
    if pred.dim != ref.dim:
        raise ValueError("trajectories have different dimensionality")
    n = min(pred.n_frames, ref.n_frames)
    tp, tr = pred.times[:n], ref.times[:n]
    if not np.allclose(tp, tr, rtol=0, atol=1e-9 + 1e-9 * np.abs(tr).max()):
        raise ValueError("trajectory frame times are not aligned")
    return n


def correlation_series(pred, ref) -> CorrelationSeries:
    """Per-frame vorticity correlation of two aligned 2-D trajectories.

    Non-finite prediction frames yield rho = nan from their first occurrence.
    """
    n = _check_alignment(pred, ref)
    gp, gr = pred.grid(), ref.grid()
    if gp.shape != gr.shape:
        raise ValueError("trajectories live on different grids")
    rho = np.empty(n)
    dead = False
    for k in range(n):
        if dead or not (np.isfinite(pred.u_x[k]).all() and np.isfinite(pred.u_y[k]).all()):
            rho[k] = np.nan
            dead = True
            continue
        wp = _vorticity_np(pred.u_x[k], pred.u_y[k], gp.dx, gp.dy)
        wr = _vorticity_np(ref.u_x[k], ref.u_y[k], gr.dx, gr.dy)
        rho[k] = pearson_correlation(wp, wr)
    return CorrelationSeries(np.array(pred.times[:n]), rho)


def ks_correlation_series(pred, ref) -> CorrelationSeries:
    """Per-frame correlation of the 1-D solution values themselves."""
    n = _check_alignment(pred, ref)
    rho = np.empty(n)
    dead = False
    for k in range(n):
        if dead or not np.isfinite(pred.u_x[k]).all():
            rho[k] = np.nan
            dead = True
            continue
        rho[k] = pearson_correlation(pred.u_x[k], ref.u_x[k])
    return CorrelationSeries(np.array(pred.times[:n]), rho)


@dataclass
class DurationResult:
    duration: float
    censored: bool
    threshold: float


def duration_from_series(series: CorrelationSeries, threshold: float = 0.8) -> DurationResult:
    """Time from the first frame until rho first drops below the threshold.

    The crossing is linearly interpolated between frames; a non-finite rho
    counts as a drop at that frame's time.  If the series never drops, the
    full span is returned with the censored flag set.
    """
    times, rho = series.times, series.rho
    t0 = times[0]
    for k in range(len(rho)):
        if not np.isfinite(rho[k]):
            return DurationResult(float(times[k] - t0), False, threshold)
        if rho[k] < threshold:
            if k == 0:
                return DurationResult(0.0, False, threshold)
            frac = (rho[k - 1] - threshold) / (rho[k - 1] - rho[k])
            t_cross = times[k - 1] + frac * (times[k] - times[k - 1])
            return DurationResult(float(t_cross - t0), False, threshold)
    return DurationResult(float(times[-1] - t0), True, threshold)


def high_corr_duration(pred, ref, threshold: float = 0.8) -> DurationResult:
    """Duration of high vorticity correlation of a prediction vs a reference."""
    series = correlation_series(pred, ref) if pred.dim == 2 else ks_correlation_series(pred, ref)
    return duration_from_series(series, threshold)


# ---------------------------------------------------------------------------
# Energy spectra.


@dataclass
class SpectrumSeries:
    k: np.ndarray  # integer shell indices
    e: np.ndarray  # shell-summed energy


def energy_spectrum(v) -> SpectrumSeries:
    """Radially binned kinetic-energy spectrum of one velocity field.

    Components are averaged face-to-center first so they are collocated; the
    transform is normalized so that sum_k E(k) equals the mean kinetic-energy
    density 0.5*mean(|u|^2) of the centered field (discrete Parseval).
    """
    g = v.grid
    ux = np.asarray(v.u_x, np.float64)
    uy = np.asarray(v.u_y, np.float64)
    ux_c = 0.5 * (ux + np.roll(ux, 1, axis=1))
    uy_c = 0.5 * (uy + np.roll(uy, 1, axis=0))
    fx = np.fft.fft2(ux_c) / (g.nx * g.ny)
    fy = np.fft.fft2(uy_c) / (g.nx * g.ny)
    energy = 0.5 * (np.abs(fx) ** 2 + np.abs(fy) ** 2)
    kx = np.fft.fftfreq(g.nx) * g.nx
    ky = np.fft.fftfreq(g.ny) * g.ny
    kmag = np.sqrt(kx[None, :] ** 2 + ky[:, None] ** 2)
    shells = np.rint(kmag).astype(int)
    n_shells = shells.max() + 1
    e = np.bincount(shells.ravel(), weights=energy.ravel(), minlength=n_shells)
    return SpectrumSeries(np.arange(n_shells), e)


def spectrum_time_average(traj, t_start: float, t_end: float) -> SpectrumSeries:
    """Mean spectrum over saved frames with t_start <= t <= t_end."""
    times = traj.times
    mask = (times >= t_start) & (times <= t_end)
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        raise ValueError(f"no frames in [{t_start}, {t_end}]")
    acc = None
    for k in idx:
        s = energy_spectrum(traj.field(k))
        acc = s.e if acc is None else acc + s.e
    return SpectrumSeries(s.k, acc / idx.size)
