"""1-D chaotic equation in conservation form on a periodic line.

The flux J = v^2/2 + dv/dx + d3v/dx3 is assembled at faces: the nonlinear
part from a face-interpolated advected value times the two-point-mean
advecting value (mirroring the 2-D convective flux), the derivatives from
compact central face stencils.  The explicit conservative update
v <- v - dt * (J_{k+1/2} - J_{k-1/2}) / h preserves the domain mean exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from . import network, stencils

__all__ = [
    "KsConfig",
    "KS_DT_32",
    "KS_DT_64",
    "KS_DEFAULT_DOMAIN",
    "ks_default_dt",
    "ks_initial_condition",
    "ks_flux",
    "ks_step",
    "ks_simulate",
    "ks_downsample",
    "ks_rollout",
    "ks_loss_terms",
    "make_ks_eval_stepper",
]

KS_DEFAULT_DOMAIN = 20.0 * np.pi
# Reference steps for the 32- and 64-cell grids on the default domain.
KS_DT_32 = 1.9635e-2
KS_DT_64 = 9.81748e-3
# Explicit stability margin for the fourth-derivative flux (bound dt <= h^4/8).
_HYPERDIFFUSION_SAFETY = 0.7


def ks_default_dt(n: int, domain: float = KS_DEFAULT_DOMAIN) -> float:
    """Reference time step: tabulated for the 32/64 grids, stability-bounded
    sub-multiple of h/100 otherwise."""
    if domain == KS_DEFAULT_DOMAIN:
        if n == 32:
            return KS_DT_32
        if n == 64:
            return KS_DT_64
    h = domain / n
    return min(h / 100.0, _HYPERDIFFUSION_SAFETY * h**4 / 8.0)


@dataclass(frozen=True)
class KsConfig:
    """Grid and scheme for one 1-D run."""

    n: int
    domain: float = KS_DEFAULT_DOMAIN
    dt: float = 0.0  # 0 means ks_default_dt(n, domain)
    scheme: str = "vanleer"

    def __post_init__(self):
        if self.n < 8:
            raise ValueError(f"need at least 8 cells, got {self.n}")
        if self.domain <= 0:
            raise ValueError("domain must be positive")
        if self.scheme not in ("vanleer", "learned", "linear", "upwind", "weno5"):
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def h(self) -> float:
        return self.domain / self.n

    @property
    def step_dt(self) -> float:
        return self.dt if self.dt > 0 else ks_default_dt(self.n, self.domain)

    def cell_centers(self) -> np.ndarray:
        return (np.arange(self.n) + 0.5) * self.h


def ks_initial_condition(cfg: KsConfig, seed: int) -> np.ndarray:
    """Ten random sine modes: amplitudes U[-0.5, 0.5], phases U[-pi, pi],
    integer wavenumbers from {1, 2, 3}; sampled at cell centers."""
    rng = np.random.default_rng(seed)
    amps = rng.uniform(-0.5, 0.5, 10)
    phases = rng.uniform(-np.pi, np.pi, 10)
    ells = rng.integers(1, 4, 10)
    x = cfg.cell_centers()
    v0 = np.zeros(cfg.n)
    for a, p, l in zip(amps, phases, ells):
        v0 += a * np.sin(2.0 * np.pi * l * x / cfg.domain + p)
    return v0


def _nonlinear_face(v, cfg: KsConfig, coeffs=None):
    advecting = stencils.linear_interp(v)
    if cfg.scheme == "learned":
        if coeffs is None:
            raise ValueError("learned scheme needs a coefficient map")
        advected = network.ks_interpolate_with_coeffs(v, coeffs)
    else:
        advected = stencils.SCHEMES[cfg.scheme](v, advecting)
    return 0.5 * advected * advecting


def ks_flux(v, cfg: KsConfig, coeffs=None):
    """Face flux at k+1/2: half the advected-times-advecting product plus the
    first- and third-derivative central face stencils."""
    h = cfg.h
    j1 = (jnp.roll(v, -1) - v) / h
    j3 = (-jnp.roll(v, 1) + 3.0 * v - 3.0 * jnp.roll(v, -1) + jnp.roll(v, -2)) / h**3
    return _nonlinear_face(v, cfg, coeffs) + j1 + j3


def ks_step(v, cfg: KsConfig, coeffs=None):
    """Conservative explicit update by the signed face-flux difference."""
    j = ks_flux(v, cfg, coeffs)
    return v - cfg.step_dt * (j - jnp.roll(j, 1)) / cfg.h


def ks_simulate(v0, cfg: KsConfig, n_steps: int, save_every: int = 1, t0: float = 0.0):
    """Chunked rollout recording every ``save_every``-th state (initial
    included); aborts with the step index on non-finite values."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if save_every < 1 or n_steps % save_every:
        raise ValueError("save_every must divide n_steps")

    @jax.jit
    def advance(v):
        return jax.lax.fori_loop(0, save_every, lambda _, u: ks_step(u, cfg), v)

    from .fvm2d import SolverDivergedError

    frames = [np.asarray(v0)]
    if not np.isfinite(frames[0]).all():
        raise SolverDivergedError(0)
    v = jnp.asarray(v0)
    for chunk in range(n_steps // save_every):
        v = advance(v)
        arr = np.asarray(v)
        if not np.isfinite(arr).all():
            raise SolverDivergedError((chunk + 1) * save_every)
        frames.append(arr)
    times = t0 + cfg.step_dt * save_every * np.arange(len(frames))
    return times, np.stack(frames)


def ks_downsample(v, factor: int):
    """Cell-average coarsening: mean over blocks of ``factor`` cells."""
    v = np.asarray(v)
    if v.shape[-1] % factor:
        raise ValueError(f"factor {factor} does not divide {v.shape[-1]} cells")
    return v.reshape(v.shape[:-1] + (v.shape[-1] // factor, factor)).mean(axis=-1)


# ---------------------------------------------------------------------------
# Learned rollout: mirrors the 2-D one with frames carrying a trailing
# singleton component axis so the feature plumbing is shared.


def _with_component(frames):
    frames = jnp.asarray(frames)
    return frames[..., None] if frames.ndim == 2 else frames


def ks_rollout(params, tcfg, kcfg: KsConfig, init_frames, n_steps: int, _counter=None):
    """Generate n_steps of the 1-D equation with learned interpolation
    (or learned correction for LC mode).  ``init_frames`` is (T, n)."""
    from . import training

    arch = training.make_arch(tcfg)
    frames = _with_component(init_frames)
    v = frames[-1, :, 0]
    state = training.init_feature_state(tcfg, frames)
    learned_cfg = KsConfig(kcfg.n, kcfg.domain, kcfg.dt, "learned")
    classic_cfg = KsConfig(kcfg.n, kcfg.domain, kcfg.dt, tcfg.lc_scheme)
    outs = []
    bundle_out = None
    for s in range(n_steps):
        k = s % tcfg.bundle
        if k == 0:
            if _counter is not None:
                _counter["invocations"] += 1
            raw = network.forward(params, arch, training.features_from_state(tcfg, state))
            if tcfg.mode == "LC":
                bundle_out = raw.reshape(raw.shape[0], tcfg.bundle, 1)
            else:
                bundle_out = network.coefficient_maps(raw, arch)  # (n, K, 1, 6)
        if tcfg.mode == "LC":
            v = ks_step(v, classic_cfg) + bundle_out[:, k, 0]
        else:
            v = ks_step(v, learned_cfg, coeffs=bundle_out[:, k, 0, :])
        state = training.advance_feature_state(tcfg, state, v[:, None])
        outs.append(v)
    return jnp.stack(outs)


def ks_loss_terms(params, window, tcfg, kcfg: KsConfig):
    """Per-unroll-step MSE for one (T+N, n) window."""
    window = jnp.asarray(window)
    t = tcfg.effective_window
    preds = ks_rollout(params, tcfg, kcfg, window[:t], tcfg.unroll)
    targets = window[t : t + tcfg.unroll]
    return jnp.mean((preds - targets) ** 2, axis=1)


def make_ks_eval_stepper(tcfg, kcfg: KsConfig):
    """(init_fn, group_fn) advancing one bundle of learned 1-D steps per call."""
    from . import training

    arch = training.make_arch(tcfg)
    learned_cfg = KsConfig(kcfg.n, kcfg.domain, kcfg.dt, "learned")
    classic_cfg = KsConfig(kcfg.n, kcfg.domain, kcfg.dt, tcfg.lc_scheme)

    def init_fn(init_frames):
        frames = _with_component(init_frames)
        return frames[-1, :, 0], training.init_feature_state(tcfg, frames)

    @jax.jit
    def group_fn(params, v, state):
        from . import training as tr

        raw = network.forward(params, arch, tr.features_from_state(tcfg, state))
        if tcfg.mode == "LC":
            bundle_out = raw.reshape(raw.shape[0], tcfg.bundle, 1)
        else:
            bundle_out = network.coefficient_maps(raw, arch)
        frames = []
        for k in range(tcfg.bundle):
            if tcfg.mode == "LC":
                v = ks_step(v, classic_cfg) + bundle_out[:, k, 0]
            else:
                v = ks_step(v, learned_cfg, coeffs=bundle_out[:, k, 0, :])
            state = tr.advance_feature_state(tcfg, state, v[:, None])
            frames.append(v)
        return v, state, jnp.stack(frames)

    return init_fn, group_fn
