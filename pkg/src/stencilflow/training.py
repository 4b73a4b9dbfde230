"""Unrolled training of the coefficient network through the solver.

Four solver modes share one rollout:

* ``LI``   — coefficients from the latest state only (raw window of 1);
* ``TSM-raw``  — coefficients from a fixed sliding window of raw states;
* ``TSM-hippo`` — coefficients from the Legendre summary of the whole
  history, extended by one recurrence step per generated state;
* ``LC``   — a classic step followed by an additive learned velocity
  correction (re-projected), same plumbing otherwise.

The loss is the mean over unroll steps of the velocity MSE against ground
truth; gradients are exact reverse-mode derivatives through convection,
diffusion, forcing, the FFT projection, the constraint map and the network.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np

from . import hippo, network
from .fvm2d import FlowConfig, make_classic_provider, pressure_project, step
from .grid import VelocityField

__all__ = [
    "TrainConfig",
    "LossReport",
    "MODES",
    "make_arch",
    "rollout",
    "unrolled_loss",
    "loss_and_grad",
    "adam_init",
    "adam_update",
    "cosine_lr",
    "fit",
    "make_eval_stepper",
]

MODES = ("LI", "TSM-raw", "TSM-hippo", "LC")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and feature-window settings for one training run."""

    mode: str = "TSM-hippo"
    unroll: int = 32
    bundle: int = 1
    window: int = 32
    hippo_order: int = hippo.DEFAULT_ORDER
    layers: int = 6
    channels: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 8
    steps: int = 2000
    seed: int = 0
    clip_norm: float = 0.0  # 0 disables clipping
    dtype: str = "float64"
    lc_scheme: str = "vanleer"
    equation: str = "ns2d"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.unroll < 1 or self.window < 1:
            raise ValueError("unroll and window must be >= 1")
        if self.unroll % self.bundle:
            raise ValueError(f"bundle {self.bundle} does not divide unroll {self.unroll}")
        if self.equation not in ("ns2d", "ks"):
            raise ValueError(f"unknown equation {self.equation!r}")

    @property
    def effective_window(self) -> int:
        return 1 if self.mode in ("LI", "LC") else self.window

    @property
    def feature_mode(self) -> str:
        return "hippo" if self.mode == "TSM-hippo" else "raw"

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class LossReport:
    """Mean unrolled MSE plus its per-step breakdown."""

    loss: float
    per_step: np.ndarray


def make_arch(cfg: TrainConfig) -> network.NetArch:
    ndim = 2 if cfg.equation == "ns2d" else 1
    comps = 2 if ndim == 2 else 1
    if cfg.feature_mode == "hippo":
        in_ch = comps * cfg.hippo_order
    else:
        in_ch = comps * cfg.effective_window
    return network.NetArch(
        in_channels=in_ch,
        layers=cfg.layers,
        channels=cfg.channels,
        bundle=cfg.bundle,
        ndim=ndim,
        out_kind="correction" if cfg.mode == "LC" else "coeffs",
    )


# ---------------------------------------------------------------------------
# Feature state carried along a rollout: either the raw sliding window
# (T, ny, nx, 2) or the pair (legendre coeffs (ny, nx, 2, N), sample count).


def init_feature_state(cfg: TrainConfig, init_frames):
    frames = jnp.asarray(init_frames)
    if cfg.feature_mode == "raw":
        return frames[-cfg.effective_window :]
    mats = hippo.hippo_matrices(cfg.hippo_order)
    a_t = jnp.asarray(mats.a.T, frames.dtype)
    b = jnp.asarray(mats.b, frames.dtype)
    coeffs = jnp.zeros(frames.shape[1:] + (cfg.hippo_order,), frames.dtype)
    count = jnp.asarray(0.0, frames.dtype)
    for t in range(frames.shape[0]):
        coeffs = hippo._update_kernel(coeffs, a_t, b, count, frames[t])
        count = count + 1.0
    return (coeffs, count)


def advance_feature_state(cfg: TrainConfig, state, new_frame):
    if cfg.feature_mode == "raw":
        return jnp.concatenate([state[1:], new_frame[None]], axis=0)
    coeffs, count = state
    mats = hippo.hippo_matrices(cfg.hippo_order)
    a_t = jnp.asarray(mats.a.T, coeffs.dtype)
    b = jnp.asarray(mats.b, coeffs.dtype)
    return (hippo._update_kernel(coeffs, a_t, b, count, new_frame), count + 1.0)


def features_from_state(cfg: TrainConfig, state):
    if cfg.feature_mode == "raw":
        w = state  # (T, ..., comps): time-major, component-minor channels
        moved = jnp.moveaxis(w, 0, -2)
        return moved.reshape(moved.shape[:-2] + (moved.shape[-2] * moved.shape[-1],))
    coeffs, _ = state  # (..., comps, N): component-major channel blocks
    return coeffs.reshape(coeffs.shape[:-2] + (coeffs.shape[-2] * coeffs.shape[-1],))


# ---------------------------------------------------------------------------
# Rollout and loss (2-D).  The 1-D analogue lives in ks1d and is selected by
# cfg.equation inside fit().


def _frame(v: VelocityField):
    return jnp.stack([v.u_x, v.u_y], axis=-1)


def rollout(params, cfg: TrainConfig, flow: FlowConfig, init_frames, n_steps: int, _counter=None):
    """Generate ``n_steps`` states from the last frame of ``init_frames``.

    ``init_frames`` is (T, ny, nx, 2); the network is re-invoked every
    ``cfg.bundle`` steps and its bundle is consumed step by step.  Returns
    the stacked predictions (n_steps, ny, nx, 2).
    """
    arch = make_arch(cfg)
    init_frames = jnp.asarray(init_frames)
    v = VelocityField(flow.grid, init_frames[-1, ..., 0], init_frames[-1, ..., 1])
    state = init_feature_state(cfg, init_frames)
    classic = make_classic_provider(cfg.lc_scheme) if cfg.mode == "LC" else None
    outs = []
    bundle_out = None
    for s in range(n_steps):
        k = s % cfg.bundle
        if k == 0:
            if _counter is not None:
                _counter["invocations"] += 1
            raw = network.forward(params, arch, features_from_state(cfg, state))
            if cfg.mode == "LC":
                bundle_out = raw.reshape(raw.shape[:2] + (cfg.bundle, 2))
            else:
                bundle_out = network.coefficient_maps(raw, arch)
        if cfg.mode == "LC":
            v = step(v, flow, classic)
            corr = bundle_out[:, :, k]
            v = pressure_project(
                VelocityField(flow.grid, v.u_x + corr[..., 0], v.u_y + corr[..., 1])
            )
        else:
            maps = bundle_out[:, :, k]
            v = step(v, flow, lambda u: network.learned_interpolations(u, maps))
        new = _frame(v)
        state = advance_feature_state(cfg, state, new)
        outs.append(new)
    return jnp.stack(outs)


def _loss_terms(params, window, cfg: TrainConfig, flow: FlowConfig):
    window = jnp.asarray(window)
    t = cfg.effective_window
    preds = rollout(params, cfg, flow, window[:t], cfg.unroll)
    targets = window[t : t + cfg.unroll]
    return jnp.mean((preds - targets) ** 2, axis=(1, 2, 3))


def unrolled_loss(params, window, cfg: TrainConfig, flow: FlowConfig) -> LossReport:
    """Mean velocity MSE over the unroll horizon for one window.

    ``window`` holds ``effective_window`` initial frames followed by
    ``unroll`` target frames.
    """
    per_step = _loss_terms(params, window, cfg, flow)
    if not bool(jnp.all(jnp.isfinite(per_step))):
        bad = int(np.argmax(~np.isfinite(np.asarray(per_step))))
        raise FloatingPointError(f"non-finite rollout loss at unroll step {bad}")
    return LossReport(float(per_step.mean()), np.asarray(per_step))


def _scalar_loss(params, windows, cfg: TrainConfig, flow: FlowConfig):
    batch_terms = jax.vmap(lambda w: _loss_terms(params, w, cfg, flow))(windows)
    return batch_terms.mean()


def loss_and_grad(params, windows, cfg: TrainConfig, flow: FlowConfig):
    """Batch loss and its exact reverse-mode parameter gradient."""
    return jax.value_and_grad(_scalar_loss)(params, windows, cfg, flow)


# ---------------------------------------------------------------------------
# Optimizer: adaptive moments with bias correction.


def adam_init(params):
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return {"m": zeros, "v": jax.tree_util.tree_map(jnp.zeros_like, params), "t": 0}


def adam_update(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=0.0):
    t = state["t"] + 1
    if clip_norm and clip_norm > 0:
        gnorm = jnp.sqrt(
            sum(jnp.sum(g**2) for g in jax.tree_util.tree_leaves(grads))
        )
        scale = jnp.minimum(1.0, clip_norm / (gnorm + 1e-12))
        grads = jax.tree_util.tree_map(lambda g: g * scale, grads)
    m = jax.tree_util.tree_map(lambda a, g: beta1 * a + (1 - beta1) * g, state["m"], grads)
    v = jax.tree_util.tree_map(lambda a, g: beta2 * a + (1 - beta2) * g * g, state["v"], grads)
    mhat_scale = 1.0 / (1.0 - beta1**t)
    vhat_scale = 1.0 / (1.0 - beta2**t)
    new_params = jax.tree_util.tree_map(
        lambda p, mm, vv: p - lr * (mm * mhat_scale) / (jnp.sqrt(vv * vhat_scale) + eps),
        params,
        m,
        v,
    )
    return new_params, {"m": m, "v": v, "t": t}


def cosine_lr(base_lr: float, step_index: int, total_steps: int) -> float:
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * step_index / max(total_steps, 1)))


# ---------------------------------------------------------------------------
# Fit loop.


def _traj_frames(traj) -> int:
    return traj.n_frames if hasattr(traj, "n_frames") else traj.shape[0]


def _traj_window(traj, off: int, span: int, dtype) -> np.ndarray:
    if hasattr(traj, "window"):
        return traj.window(off, span, dtype)
    return np.asarray(traj[off : off + span], dtype=dtype)


def _sample_windows(frames_list, cfg: TrainConfig, rng):
    span = cfg.effective_window + cfg.unroll
    batch = []
    for _ in range(cfg.batch):
        ti = int(rng.integers(len(frames_list)))
        n = _traj_frames(frames_list[ti])
        if n < span:
            raise ValueError(f"trajectory with {n} frames too short for window {span}")
        off = int(rng.integers(n - span + 1))
        batch.append(_traj_window(frames_list[ti], off, span, cfg.np_dtype))
    return jnp.asarray(np.stack(batch))


def fit(
    frames_list,
    cfg: TrainConfig,
    flow: FlowConfig | None,
    out_dir,
    ks_config=None,
    log_every: int = 10,
    checkpoint_every: int = 500,
):
    """Train the coefficient network on trajectory windows.

    ``frames_list`` holds per-trajectory frame arrays: (n_frames, ny, nx, 2)
    for the 2-D equation or (n_frames, n) for the 1-D one.  Windows are
    sampled uniformly with a generator seeded by ``cfg.seed``, so the final
    checkpoint is a pure function of (data, config, seed).  Returns the
    final checkpoint path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arch = make_arch(cfg)
    params = init_params_for(cfg)
    opt = adam_init(params)
    rng = np.random.default_rng(cfg.seed)

    if cfg.equation == "ks":
        from . import ks1d

        if ks_config is None:
            raise ValueError("ks runs need ks_config")
        value_grad = jax.jit(
            lambda p, w: jax.value_and_grad(
                lambda q: jax.vmap(lambda win: ks1d.ks_loss_terms(q, win, cfg, ks_config))(w).mean()
            )(p)
        )
    else:
        if flow is None:
            raise ValueError("ns2d runs need a FlowConfig")
        value_grad = jax.jit(lambda p, w: loss_and_grad(p, w, cfg, flow))

    @jax.jit
    def opt_step(p, g, o, lr):
        return adam_update(p, g, o, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip_norm)

    log_path = out_dir / "training_log.csv"
    t_start = time.perf_counter()
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "wall_time_s"])
        for it in range(cfg.steps):
            windows = _sample_windows(frames_list, cfg, rng)
            loss, grads = value_grad(params, windows)
            lr = cosine_lr(cfg.lr, it, cfg.steps)
            params, opt = opt_step(params, grads, opt, lr)
            if it % log_every == 0 or it == cfg.steps - 1:
                writer.writerow([it, float(loss), round(time.perf_counter() - t_start, 3)])
                fh.flush()
            if checkpoint_every and (it + 1) % checkpoint_every == 0 and it + 1 < cfg.steps:
                _save(out_dir / f"checkpoint_{it + 1:06d}.ckpt", params, cfg, arch)
    final = _save(out_dir / "checkpoint_final.ckpt", params, cfg, arch)
    return final


def init_params_for(cfg: TrainConfig):
    params = network.init_params(make_arch(cfg), cfg.seed)
    if cfg.dtype == "float32":
        params = jax.tree_util.tree_map(lambda p: p.astype(jnp.float32), params)
    return params


def _save(path, params, cfg: TrainConfig, arch):
    return network.save_checkpoint(
        path,
        params,
        arch,
        feature_mode=cfg.feature_mode,
        hippo_order=cfg.hippo_order if cfg.feature_mode == "hippo" else None,
        extra={"train_config": asdict(cfg)},
    )


# ---------------------------------------------------------------------------
# Long inference rollouts (evaluation): one jitted group of ``bundle`` steps,
# reused across the whole trajectory.


def make_eval_stepper(cfg: TrainConfig, flow: FlowConfig):
    """Returns (init_fn, group_fn): group_fn advances one bundle per call.

    group_fn(params, v, state) -> (v', state', frames (bundle, ny, nx, 2)).
    """
    arch = make_arch(cfg)
    classic = make_classic_provider(cfg.lc_scheme) if cfg.mode == "LC" else None

    def init_fn(init_frames):
        frames = jnp.asarray(init_frames)
        v = VelocityField(flow.grid, frames[-1, ..., 0], frames[-1, ..., 1])
        return v, init_feature_state(cfg, frames)

    @jax.jit
    def group_fn(params, v, state):
        raw = network.forward(params, arch, features_from_state(cfg, state))
        if cfg.mode == "LC":
            bundle_out = raw.reshape(raw.shape[:2] + (cfg.bundle, 2))
        else:
            bundle_out = network.coefficient_maps(raw, arch)
        frames = []
        for k in range(cfg.bundle):
            if cfg.mode == "LC":
                v = step(v, flow, classic)
                corr = bundle_out[:, :, k]
                v = pressure_project(
                    VelocityField(flow.grid, v.u_x + corr[..., 0], v.u_y + corr[..., 1])
                )
            else:
                maps = bundle_out[:, :, k]
                v = step(v, flow, lambda u: network.learned_interpolations(u, maps))
            new = _frame(v)
            state = advance_feature_state(cfg, state, new)
            frames.append(new)
        return v, state, jnp.stack(frames)

    return init_fn, group_fn
