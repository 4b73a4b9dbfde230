"""Rollout, evaluation and comparison workflows shared by the CLI and tests.

A "method" is either a classic scheme at the coarse resolution or a trained
checkpoint; every method is rolled out from the same starting frame of a
reference trajectory and scored by the duration of high vorticity
correlation against that reference.  Stages cache their outputs on disk, so
re-running a finished experiment only re-reads results.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import jax.numpy as jnp
import numpy as np

from . import datagen, fvm2d, ks1d, metrics, network, training
from .grid import VelocityField

__all__ = [
    "MethodSpec",
    "rollout_prediction",
    "evaluate_prediction",
    "run_compare",
    "write_correlation_csv",
    "write_spectrum_csv",
]


@dataclass(frozen=True)
class MethodSpec:
    """One comparison entry: a classic scheme or a checkpoint path."""

    name: str
    kind: str  # 'classic' | 'learned'
    scheme: str = "vanleer"
    checkpoint: str = ""
    type_label: str = "Physics"  # Physics | LI | TSM | LC | ML


def _train_config_from_checkpoint(header) -> training.TrainConfig:
    cfg = dict(header["extra"]["train_config"])
    return training.TrainConfig(**cfg)


def _predicted_meta(ref: datagen.Trajectory, start: int, label: str) -> dict:
    meta = dict(ref.meta)
    meta["t0"] = float(ref.times[start])
    meta["method"] = label
    return meta


def rollout_prediction(
    ref: datagen.Trajectory,
    method: MethodSpec,
    start_frame: int,
    n_steps: int | None = None,
    dtype: str = "float32",
) -> tuple[datagen.Trajectory, float]:
    """Roll a method from a reference frame; returns (prediction, s/step).

    The prediction's frame k is the state at ref time start_frame + k.  A
    diverged rollout is truncated and terminated with one all-NaN frame so
    correlation-based durations register the blow-up time.
    """
    if n_steps is None:
        n_steps = ref.n_frames - 1 - start_frame
    if n_steps < 1:
        raise ValueError("nothing to roll out")
    jdtype = jnp.float64 if dtype == "float64" else jnp.float32

    if ref.dim == 2:
        frames, per_step = _rollout_2d(ref, method, start_frame, n_steps, jdtype)
    else:
        frames, per_step = _rollout_ks(ref, method, start_frame, n_steps, jdtype)

    meta = _predicted_meta(ref, start_frame, method.name)
    if ref.dim == 2:
        u_x = np.stack([f[..., 0] for f in frames])
        u_y = np.stack([f[..., 1] for f in frames])
        traj = datagen.Trajectory(meta, u_x.astype(np.float32), u_y.astype(np.float32))
    else:
        traj = datagen.Trajectory(meta, np.stack(frames).astype(np.float32))
    return traj, per_step


def _flow_config(ref: datagen.Trajectory, dt: float) -> fvm2d.FlowConfig:
    return fvm2d.FlowConfig(
        ref.grid(),
        viscosity=ref.meta["viscosity"],
        dt=dt,
        forcing=ref.meta["forcing"],
    )


def _rollout_2d(ref, method, start, n_steps, jdtype):
    dt = ref.meta["dt_save"]
    flow = _flow_config(ref, dt)
    start_field = ref.field(start, jdtype)
    if method.kind == "classic":
        t0 = time.perf_counter()
        try:
            res = fvm2d.simulate(
                start_field, flow, fvm2d.make_classic_provider(method.scheme), n_steps
            )
            frames = [np.stack([res.u_x[k], res.u_y[k]], -1) for k in range(1, len(res.times))]
        except fvm2d.SolverDivergedError as err:
            res_frames = err.step_index - 1
            res = fvm2d.simulate(start_field, flow, fvm2d.make_classic_provider(method.scheme), max(res_frames, 1)) if res_frames >= 1 else None
            frames = (
                [np.stack([res.u_x[k], res.u_y[k]], -1) for k in range(1, len(res.times))]
                if res is not None
                else []
            )
            frames.append(np.full(ref.u_x.shape[1:] + (2,), np.nan, np.float32))
        elapsed = time.perf_counter() - t0
        full = [np.stack([np.asarray(start_field.u_x), np.asarray(start_field.u_y)], -1)] + frames
        return full, elapsed / n_steps

    params, arch, header = network.load_checkpoint(method.checkpoint)
    tcfg = _train_config_from_checkpoint(header)
    if tcfg.dtype != ("float64" if jdtype == jnp.float64 else "float32"):
        params = [
            {"w": p["w"].astype(jdtype), "b": p["b"].astype(jdtype)} for p in params
        ]
    t_need = tcfg.effective_window
    if start + 1 < t_need:
        raise ValueError(f"start frame {start} gives fewer than window {t_need} frames")
    window = ref.frames_array(np.float64 if jdtype == jnp.float64 else np.float32)[
        start + 1 - t_need : start + 1
    ]
    init_fn, group_fn = training.make_eval_stepper(tcfg, flow)
    v, state = init_fn(jnp.asarray(window, jdtype))
    frames = [np.asarray(jnp.stack([v.u_x, v.u_y], -1))]
    groups = -(-n_steps // tcfg.bundle)
    produced = 0
    t0 = time.perf_counter()
    for _ in range(groups):
        v, state, out = group_fn(params, v, state)
        arr = np.asarray(out)
        if not np.isfinite(arr).all():
            good = arr[: max(0, int(np.argmax(~np.isfinite(arr).reshape(arr.shape[0], -1).all(axis=1))))]
            for f in arr:
                if np.isfinite(f).all():
                    frames.append(f)
                    produced += 1
                else:
                    break
            frames.append(np.full(arr.shape[1:], np.nan, np.float32))
            produced += 1
            break
        for f in arr:
            if produced < n_steps:
                frames.append(f)
                produced += 1
    elapsed = time.perf_counter() - t0
    return frames[: n_steps + 1], elapsed / max(produced, 1)


def _rollout_ks(ref, method, start, n_steps, jdtype):
    dt = ref.meta["dt_save"]
    n = ref.meta["n"]
    kcfg = ks1d.KsConfig(n, ref.meta["domain"], dt=dt, scheme=method.scheme if method.kind == "classic" else "learned")
    if method.kind == "classic":
        v0 = np.asarray(ref.u_x[start], np.float64 if jdtype == jnp.float64 else np.float32)
        t0 = time.perf_counter()
        try:
            _, frames = ks1d.ks_simulate(v0, kcfg, n_steps)
            frames = list(frames)
        except fvm2d.SolverDivergedError:
            frames = [v0, np.full(n, np.nan, np.float32)]
        elapsed = time.perf_counter() - t0
        return frames, elapsed / n_steps

    params, arch, header = network.load_checkpoint(method.checkpoint)
    tcfg = _train_config_from_checkpoint(header)
    t_need = tcfg.effective_window
    window = np.asarray(ref.u_x[start + 1 - t_need : start + 1], np.float64 if jdtype == jnp.float64 else np.float32)
    init_fn, group_fn = ks1d.make_ks_eval_stepper(tcfg, kcfg)
    v, state = init_fn(jnp.asarray(window, jdtype))
    frames = [np.asarray(v)]
    produced = 0
    t0 = time.perf_counter()
    for _ in range(-(-n_steps // tcfg.bundle)):
        v, state, out = group_fn(params, v, state)
        arr = np.asarray(out)
        if not np.isfinite(arr).all():
            for f in arr:
                if np.isfinite(f).all():
                    frames.append(f)
                    produced += 1
                else:
                    break
            frames.append(np.full(n, np.nan, np.float32))
            produced += 1
            break
        for f in arr:
            if produced < n_steps:
                frames.append(f)
                produced += 1
    elapsed = time.perf_counter() - t0
    return frames[: n_steps + 1], elapsed / max(produced, 1)


def _aligned_reference(ref: datagen.Trajectory, start: int) -> datagen.Trajectory:
    meta = dict(ref.meta)
    meta["t0"] = float(ref.times[start])
    if ref.dim == 1:
        return datagen.Trajectory(meta, ref.u_x[start:])
    return datagen.Trajectory(meta, ref.u_x[start:], ref.u_y[start:])


def evaluate_prediction(
    pred: datagen.Trajectory,
    ref: datagen.Trajectory,
    start_frame: int = 0,
    threshold: float = 0.8,
):
    """Correlation series and duration of a prediction vs its reference."""
    ref_win = _aligned_reference(ref, start_frame)
    if pred.dim == 2:
        series = metrics.correlation_series(pred, ref_win)
    else:
        series = metrics.ks_correlation_series(pred, ref_win)
    duration = metrics.duration_from_series(series, threshold)
    return series, duration


def write_correlation_csv(path, series: metrics.CorrelationSeries):
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("time,rho\n")
        for t, r in zip(series.times, series.rho):
            fh.write(f"{t:.9g},{r:.9g}\n")
    return path


def write_spectrum_csv(path, spectrum: metrics.SpectrumSeries):
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("k,E_k,E_k_times_k5\n")
        for k, e in zip(spectrum.k, spectrum.e):
            fh.write(f"{k},{e:.9g},{e * float(k) ** 5:.9g}\n")
    return path


def run_compare(
    dataset_dir,
    methods: list[MethodSpec],
    out_dir,
    start_frame: int = 31,
    threshold: float = 0.8,
    dtype: str = "float32",
    max_eval: int | None = None,
):
    """Roll every method on every eval trajectory and tabulate durations.

    Writes durations.csv (method, trajectory, duration, censored, latency),
    summary.csv (one row per method: median/mean duration, latency), and
    per-pair correlation CSVs.  Returns the summary rows.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    refs, _ = datagen.load_dataset(dataset_dir, role="eval")
    if max_eval:
        refs = refs[:max_eval]
    if not refs:
        raise ValueError(f"no eval trajectories in {dataset_dir}")
    rows = []
    for method in methods:
        for ti, ref in enumerate(refs):
            pred, per_step = rollout_prediction(ref, method, start_frame, dtype=dtype)
            series, dur = evaluate_prediction(pred, ref, start_frame, threshold)
            write_correlation_csv(out_dir / f"rho_{method.name}_{ti:03d}.csv", series)
            rows.append(
                {
                    "method": method.name,
                    "type": method.type_label,
                    "trajectory": ti,
                    "duration": dur.duration,
                    "censored": dur.censored,
                    "latency_s_per_step": per_step,
                }
            )
    with open(out_dir / "durations.csv", "w") as fh:
        fh.write("method,type,trajectory,duration,censored,latency_s_per_step\n")
        for r in rows:
            fh.write(
                f"{r['method']},{r['type']},{r['trajectory']},{r['duration']:.9g},"
                f"{int(r['censored'])},{r['latency_s_per_step']:.9g}\n"
            )
    summary = []
    for method in methods:
        durs = [r["duration"] for r in rows if r["method"] == method.name]
        lats = [r["latency_s_per_step"] for r in rows if r["method"] == method.name]
        cens = sum(r["censored"] for r in rows if r["method"] == method.name)
        summary.append(
            {
                "method": method.name,
                "type": method.type_label,
                "median_duration": float(np.median(durs)),
                "mean_duration": float(np.mean(durs)),
                "censored": cens,
                "latency_s_per_step": float(np.median(lats)),
            }
        )
    with open(out_dir / "summary.csv", "w") as fh:
        fh.write("method,type,median_duration,mean_duration,censored,latency_s_per_step\n")
        for s in summary:
            fh.write(
                f"{s['method']},{s['type']},{s['median_duration']:.9g},"
                f"{s['mean_duration']:.9g},{s['censored']},{s['latency_s_per_step']:.9g}\n"
            )
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


# ---------------------------------------------------------------------------
# Desk-scale end-to-end experiment with per-stage disk caching.


def _stage_done(marker: Path) -> bool:
    return marker.exists()


def desk_e2e(root, smoke: bool = False, fresh: bool = False) -> dict:
    """Generate data, train the two learned solvers, and score everything.

    Stages cache under ``root``; a finished stage is skipped on re-run.
    ``smoke`` shrinks every knob to make the full path run in minutes (used
    by tests of the plumbing, not of the accuracy targets).
    Returns the summary dict (also written to ``root/e2e_summary.json``).
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if fresh:
        for p in root.glob("**/*"):
            if p.is_file():
                p.unlink()

    if smoke:
        spec = datagen.DatasetSpec(
            fine_n=64, coarse_n=16, trajectories=2, eval_trajectories=2,
            duration=1.0, warmup=1.0, seed=7,
        )
        train_kw = dict(unroll=4, window=8, hippo_order=4, layers=2, channels=16,
                        batch=2, steps=20, dtype="float32")
        start_frame = 7
    else:
        spec = datagen.DatasetSpec(
            fine_n=256, coarse_n=64, trajectories=16, eval_trajectories=8,
            duration=30.0, warmup=40.0, seed=7,
        )
        train_kw = dict(unroll=8, window=32, hippo_order=8, layers=4, channels=64,
                        batch=8, steps=2000, dtype="float32")
        start_frame = 31

    data_dir = root / "dataset"
    if not _stage_done(data_dir / "manifest.json"):
        datagen.generate_dataset(spec, data_dir, scheme="vanleer")

    train_trajs, _ = datagen.load_dataset(data_dir, role="train")
    flow = fvm2d.FlowConfig(
        spec.coarse_grid(), viscosity=spec.viscosity, dt=spec.save_dt, forcing=spec.forcing
    )

    checkpoints = {}
    for name, mode, bundle in (("TSM", "TSM-hippo", 4), ("LI", "LI", 1)):
        ck = root / f"train_{name.lower()}" / "checkpoint_final.ckpt"
        if not _stage_done(ck):
            cfg = training.TrainConfig(mode=mode, bundle=bundle, seed=7, **train_kw)
            training.fit(train_trajs, cfg, flow, ck.parent)
        checkpoints[name] = ck

    methods = [
        MethodSpec(f"DNS-{spec.coarse_n}", "classic", scheme="vanleer", type_label="Physics"),
        MethodSpec("LI", "learned", checkpoint=str(checkpoints["LI"]), type_label="LI"),
        MethodSpec("TSM", "learned", checkpoint=str(checkpoints["TSM"]), type_label="TSM"),
    ]
    eval_dir = root / "eval"
    if not _stage_done(eval_dir / "summary.json"):
        run_compare(data_dir, methods, eval_dir, start_frame=start_frame, dtype="float32")
    summary_rows = json.loads((eval_dir / "summary.json").read_text())

    by_name = {r["method"]: r for r in summary_rows}
    dns = by_name[f"DNS-{spec.coarse_n}"]["median_duration"]
    li = by_name["LI"]["median_duration"]
    tsm = by_name["TSM"]["median_duration"]
    result = {
        "dns_median": dns,
        "li_median": li,
        "tsm_median": tsm,
        "li_over_dns": li / dns if dns else float("inf"),
        "tsm_over_dns": tsm / dns if dns else float("inf"),
        "tsm_over_li": tsm / li if li else float("inf"),
        "rows": summary_rows,
    }
    (root / "e2e_summary.json").write_text(json.dumps(result, indent=2))
    return result


def ks_hierarchy(root, n_refs: int = 3, record: float = 60.0, warmup: float = 80.0) -> dict:
    """Fine-reference hierarchy for the 1-D equation, cached under ``root``.

    Runs DNS-1024 references, coarsens them to 64 and 32, rolls classic
    solvers at those resolutions from the reference start state, and returns
    the per-resolution median high-correlation durations.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    out_file = root / "ks_hierarchy.json"
    if out_file.exists():
        return json.loads(out_file.read_text())

    fine_n = 1024
    durations = {32: [], 64: []}
    for r in range(n_refs):
        ref_paths = {m: root / f"ref_{r}_{m}.traj" for m in (32, 64)}
        if not all(p.exists() for p in ref_paths.values()):
            save_dt = ks1d.ks_default_dt(64)
            inner = int(np.ceil(save_dt / ks1d.ks_default_dt(fine_n)))
            fine_cfg = ks1d.KsConfig(fine_n, dt=save_dt / inner)
            v = ks1d.ks_initial_condition(fine_cfg, seed=1000 + r)
            warm_steps = int(round(warmup / save_dt)) * inner
            _, warm = ks1d.ks_simulate(v, fine_cfg, warm_steps, save_every=warm_steps)
            v = warm[-1]
            n_saves = int(round(record / save_dt))
            _, frames = ks1d.ks_simulate(v, fine_cfg, n_saves * inner, save_every=inner)
            for m in (32, 64):
                coarse = ks1d.ks_downsample(frames, fine_n // m)
                meta = {"dim": 1, "equation": "ks", "n": m, "domain": fine_cfg.domain,
                        "dt_save": save_dt, "t0": 0.0, "seed": 1000 + r}
                datagen.save_trajectory(
                    datagen.Trajectory(meta, coarse.astype(np.float32)), ref_paths[m]
                )
        for m in (32, 64):
            ref = datagen.load_trajectory(ref_paths[m])
            # the 32-grid solver saves every other 64-grid frame
            stride = 2 if m == 32 else 1
            meta = dict(ref.meta)
            meta["dt_save"] = ref.meta["dt_save"] * stride
            thin = datagen.Trajectory(meta, ref.u_x[::stride])
            method = MethodSpec(f"DNS-{m}", "classic", scheme="vanleer")
            pred, _ = rollout_prediction(thin, method, 0, dtype="float64")
            _, dur = evaluate_prediction(pred, thin, 0)
            durations[m].append(dur.duration)
    result = {
        "median_32": float(np.median(durations[32])),
        "median_64": float(np.median(durations[64])),
        "durations": {str(k): v for k, v in durations.items()},
    }
    out_file.write_text(json.dumps(result, indent=2))
    return result
