"""Reference-solution generation and the trajectory container format.

A dataset is produced by simulating on a fine grid (after a discarded
warmup), face-average downsampling every saved state to the coarse grid, and
streaming the frames to one container file per trajectory plus a JSON
manifest.  Containers are little-endian, seekable and language-neutral:

    magic "SFTRAJ01" | uint32 header length | UTF-8 JSON header |
    n_frames records of [u_x block (+ u_y block)] float32 C-order, each
    followed by the uint32 CRC-32 of the record payload.

Divergence-freeness of every frame is checked in double precision before the
float32 cast; a frame failing the bound is re-projected and flagged in the
manifest.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import jax.numpy as jnp
import numpy as np

from . import fvm2d, ks1d
from .grid import Grid, VelocityField, cfl_timestep, downsample_velocity, make_grid
from .grid import DEFAULT_CFL_SAFETY, DEFAULT_MAX_SPEED

__all__ = [
    "DatasetSpec",
    "Trajectory",
    "PRESETS",
    "preset_spec",
    "random_divfree_field",
    "save_trajectory",
    "load_trajectory",
    "generate_dataset",
    "relative_divergence",
    "FRAME_DIV_TOL",
]

_MAGIC = b"SFTRAJ01"
FORMAT_VERSION = 1
# Frame divergence bound (relative, checked at float64 before serialized).
FRAME_DIV_TOL = 1e-8


@dataclass(frozen=True)
class DatasetSpec:
    """Generation recipe; the saved interval equals the coarse-grid step."""

    equation: str = "ns2d"
    fine_n: int = 256
    coarse_n: int = 64
    domain: float = 2.0 * np.pi
    viscosity: float = 1e-3
    forcing: str = "kolmogorov"
    trajectories: int = 16
    eval_trajectories: int = 8
    duration: float = 30.0
    warmup: float = 40.0
    seed: int = 0
    max_speed: float = DEFAULT_MAX_SPEED
    cfl_safety: float = DEFAULT_CFL_SAFETY
    peak_wavenumber: int = 4
    dtype: str = "float64"

    def __post_init__(self):
        if self.fine_n % self.coarse_n:
            raise ValueError(
                f"fine grid {self.fine_n} is not a multiple of coarse {self.coarse_n}"
            )
        if self.equation not in ("ns2d", "ks"):
            raise ValueError(f"unknown equation {self.equation!r}")

    # --- 2-D helpers -------------------------------------------------------
    def fine_grid(self) -> Grid:
        return make_grid(self.fine_n, self.fine_n, self.domain, self.domain)

    def coarse_grid(self) -> Grid:
        return make_grid(self.coarse_n, self.coarse_n, self.domain, self.domain)

    @property
    def factor(self) -> int:
        return self.fine_n // self.coarse_n

    @property
    def save_dt(self) -> float:
        if self.equation == "ks":
            return ks1d.ks_default_dt(self.coarse_n, self.domain)
        return cfl_timestep(self.coarse_grid(), self.max_speed, self.cfl_safety)

    @property
    def fine_dt(self) -> float:
        # dt scales linearly with dx, so the coarse step is exactly
        # `factor` fine steps for the 2-D equation.
        if self.equation == "ks":
            raw = ks1d.ks_default_dt(self.fine_n, self.domain)
            return self.save_dt / int(np.ceil(self.save_dt / raw))
        return self.save_dt / self.factor

    @property
    def steps_per_save(self) -> int:
        return int(round(self.save_dt / self.fine_dt))

    @property
    def frames_per_trajectory(self) -> int:
        return int(round(self.duration / self.save_dt)) + 1


PRESETS = {
    "kolmogorov-re1000": {},
    "decaying-re1000": {"forcing": "none", "warmup": 2.0},
    "kolmogorov-re4000": {"viscosity": 2.5e-4},
    "kolmogorov-2x": {"domain": 4.0 * np.pi},
    "ks": {"equation": "ks", "fine_n": 1024, "coarse_n": 64, "domain": ks1d.KS_DEFAULT_DOMAIN,
           "duration": 200.0, "warmup": 80.0},
}


def preset_spec(name: str, **overrides) -> DatasetSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return DatasetSpec(**kw)


# ---------------------------------------------------------------------------
# Random initial conditions.


def random_divfree_field(
    grid: Grid,
    seed: int,
    peak_wavenumber: int = 4,
    max_speed: float = DEFAULT_MAX_SPEED,
) -> VelocityField:
    """Band-filtered Gaussian field, projected divergence-free and rescaled.

    White noise per component is shaped in Fourier space by a Gaussian ring
    around the peak wavenumber, projected with the exact discrete projection,
    then rescaled so the max component magnitude equals ``max_speed``.
    """
    if peak_wavenumber < 1:
        raise ValueError("peak_wavenumber must be >= 1")
    rng = np.random.default_rng(seed)
    kx = np.fft.fftfreq(grid.nx) * grid.nx
    ky = np.fft.fftfreq(grid.ny) * grid.ny
    kmag = np.sqrt(kx[None, :] ** 2 + ky[:, None] ** 2)
    ring = np.exp(-0.5 * ((kmag - peak_wavenumber) / max(peak_wavenumber / 4.0, 1.0)) ** 2)
    ring[0, 0] = 0.0

    def shaped():
        white = rng.standard_normal(grid.shape)
        return np.real(np.fft.ifft2(np.fft.fft2(white) * ring))

    v = fvm2d.pressure_project(
        VelocityField(grid, jnp.asarray(shaped()), jnp.asarray(shaped()))
    )
    speed = max(v.max_speed(), 1e-300)
    scale = max_speed / speed
    return VelocityField(grid, v.u_x * scale, v.u_y * scale)


# ---------------------------------------------------------------------------
# Trajectory container.


@dataclass
class Trajectory:
    """In-memory (or memmapped) view of one container."""

    meta: dict
    u_x: np.ndarray  # (T, ny, nx) or (T, n)
    u_y: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.meta["dim"]

    @property
    def n_frames(self) -> int:
        return self.u_x.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.meta["t0"] + self.meta["dt_save"] * np.arange(self.n_frames)

    def grid(self) -> Grid:
        m = self.meta
        return make_grid(m["nx"], m["ny"], m["domain_x"], m["domain_y"])

    def field(self, k: int, dtype=jnp.float64) -> VelocityField:
        return VelocityField(
            self.grid(),
            jnp.asarray(self.u_x[k], dtype),
            jnp.asarray(self.u_y[k], dtype),
        )

    def frames_array(self, dtype=np.float64) -> np.ndarray:
        """Stacked (T, ny, nx, 2) array (2-D) or (T, n) array (1-D)."""
        if self.dim == 1:
            return np.asarray(self.u_x, dtype)
        return np.stack(
            [np.asarray(self.u_x, dtype), np.asarray(self.u_y, dtype)], axis=-1
        )

    def window(self, offset: int, span: int, dtype=np.float32) -> np.ndarray:
        """Contiguous frame slice, stacked like frames_array; memmap-friendly."""
        if self.dim == 1:
            return np.asarray(self.u_x[offset : offset + span], dtype)
        return np.stack(
            [
                np.asarray(self.u_x[offset : offset + span], dtype),
                np.asarray(self.u_y[offset : offset + span], dtype),
            ],
            axis=-1,
        )


def _frame_nbytes(meta) -> int:
    if meta["dim"] == 1:
        return 4 * meta["n"]
    return 2 * 4 * meta["nx"] * meta["ny"]


def save_trajectory(traj: Trajectory, path) -> Path:
    path = Path(path)
    meta = dict(traj.meta)
    meta["format_version"] = FORMAT_VERSION
    meta["n_frames"] = traj.n_frames
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        for k in range(traj.n_frames):
            payload = np.ascontiguousarray(traj.u_x[k], dtype="<f4").tobytes()
            if traj.dim == 2:
                payload += np.ascontiguousarray(traj.u_y[k], dtype="<f4").tobytes()
            fh.write(payload)
            fh.write(np.uint32(zlib.crc32(payload)).tobytes())
    return path


def load_trajectory(path, verify: bool = True, memmap: bool = False) -> Trajectory:
    """Read a container; CRC failures and truncation raise ValueError."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a trajectory container (bad magic)")
        (hlen,) = np.frombuffer(fh.read(4), "<u4")
        meta = json.loads(fh.read(int(hlen)).decode("utf-8"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(
                f"{path}: unsupported format version {meta.get('format_version')}"
            )
        n_frames = meta["n_frames"]
        if n_frames < 1:
            raise ValueError(f"{path}: container holds no frames")
        offset = 12 + int(hlen)
    if meta["dim"] == 1:
        rec = np.dtype([("u_x", "<f4", (meta["n"],)), ("crc", "<u4")])
    else:
        shape = (meta["ny"], meta["nx"])
        rec = np.dtype([("u_x", "<f4", shape), ("u_y", "<f4", shape), ("crc", "<u4")])
    expected = offset + rec.itemsize * n_frames
    actual = path.stat().st_size
    if actual != expected:
        raise ValueError(f"{path}: truncated container ({actual} bytes, expected {expected})")
    records = np.memmap(path, dtype=rec, mode="r", offset=offset, shape=(n_frames,))
    if verify:
        frame_bytes = _frame_nbytes(meta)
        raw = np.memmap(path, dtype=np.uint8, mode="r", offset=offset)
        stride = rec.itemsize
        for k in range(n_frames):
            payload = raw[k * stride : k * stride + frame_bytes]
            if zlib.crc32(payload.tobytes()) != int(records["crc"][k]):
                raise ValueError(f"{path}: CRC mismatch in frame {k}")
    u_x = records["u_x"]
    u_y = records["u_y"] if meta["dim"] == 2 else None
    if not memmap:
        u_x = np.array(u_x)
        u_y = np.array(u_y) if u_y is not None else None
    return Trajectory(meta, u_x, u_y)


# ---------------------------------------------------------------------------
# Generation.


def relative_divergence(v: VelocityField) -> float:
    """max |div| scaled by min(dx,dy)/rms(u): dimensionless residual."""
    g = v.grid
    div = float(jnp.abs(fvm2d.divergence(v).values).max())
    rms = float(jnp.sqrt(jnp.mean(v.u_x**2 + v.u_y**2)))
    return div * min(g.dx, g.dy) / max(rms, 1e-300)


def _base_meta(spec: DatasetSpec, seed: int, t0: float) -> dict:
    meta = {
        "dim": 1 if spec.equation == "ks" else 2,
        "equation": spec.equation,
        "dt_save": spec.save_dt,
        "t0": t0,
        "seed": seed,
        "spec": asdict(spec),
    }
    if spec.equation == "ks":
        meta.update({"n": spec.coarse_n, "domain": spec.domain})
    else:
        meta.update(
            {
                "nx": spec.coarse_n,
                "ny": spec.coarse_n,
                "domain_x": spec.domain,
                "domain_y": spec.domain,
                "viscosity": spec.viscosity,
                "forcing": spec.forcing,
            }
        )
    return meta


def _generate_one_2d(spec: DatasetSpec, seed: int, scheme: str) -> tuple[Trajectory, bool]:
    fine = spec.fine_grid()
    dtype = jnp.float64 if spec.dtype == "float64" else jnp.float32
    v = random_divfree_field(fine, seed, spec.peak_wavenumber, spec.max_speed).astype(dtype)
    cfg = fvm2d.FlowConfig(
        fine, viscosity=spec.viscosity, dt=spec.fine_dt, forcing=spec.forcing
    )
    provider = fvm2d.make_classic_provider(scheme)
    warm_steps = int(round(spec.warmup / spec.fine_dt))
    if warm_steps:
        warm = fvm2d.simulate(v, cfg, provider, warm_steps, save_every=warm_steps)
        v = warm.field(fine, 1).astype(dtype)
    n_steps = (spec.frames_per_trajectory - 1) * spec.steps_per_save
    res = fvm2d.simulate(v, cfg, provider, n_steps, save_every=spec.steps_per_save)
    coarse_x, coarse_y = [], []
    reprojected = False
    for k in range(len(res.times)):
        cv = downsample_velocity(res.field(fine, k), spec.factor)
        if relative_divergence(cv) > FRAME_DIV_TOL:
            cv = fvm2d.pressure_project(cv)
            reprojected = True
        coarse_x.append(np.asarray(cv.u_x, np.float32))
        coarse_y.append(np.asarray(cv.u_y, np.float32))
    meta = _base_meta(spec, seed, t0=0.0)
    meta["scheme"] = scheme
    return Trajectory(meta, np.stack(coarse_x), np.stack(coarse_y)), reprojected


def _generate_one_ks(spec: DatasetSpec, seed: int, scheme: str) -> tuple[Trajectory, bool]:
    fine_cfg = ks1d.KsConfig(spec.fine_n, spec.domain, dt=spec.fine_dt, scheme=scheme)
    v = ks1d.ks_initial_condition(fine_cfg, seed)
    warm_steps = int(round(spec.warmup / spec.fine_dt))
    if warm_steps:
        _, frames = ks1d.ks_simulate(v, fine_cfg, warm_steps, save_every=warm_steps)
        v = frames[-1]
    n_steps = (spec.frames_per_trajectory - 1) * spec.steps_per_save
    _, frames = ks1d.ks_simulate(v, fine_cfg, n_steps, save_every=spec.steps_per_save)
    coarse = ks1d.ks_downsample(frames, spec.fine_n // spec.coarse_n)
    meta = _base_meta(spec, seed, t0=0.0)
    meta["scheme"] = scheme
    return Trajectory(meta, coarse.astype(np.float32)), False


def generate_dataset(spec: DatasetSpec, out_dir, scheme: str = "vanleer") -> Path:
    """Generate all trajectories and write containers plus ``manifest.json``.

    Trajectory i uses seed spec.seed*100000 + i.  A trajectory whose solver
    blows up is recorded as aborted in the manifest and skipped; generation
    continues.  Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    reproj_flags = []
    total = spec.trajectories + spec.eval_trajectories
    for i in range(total):
        role = "train" if i < spec.trajectories else "eval"
        idx = i if role == "train" else i - spec.trajectories
        name = f"{role}_{idx:03d}.traj"
        seed = spec.seed * 100000 + i
        try:
            if spec.equation == "ks":
                traj, reproj = _generate_one_ks(spec, seed, scheme)
            else:
                traj, reproj = _generate_one_2d(spec, seed, scheme)
        except fvm2d.SolverDivergedError as err:
            entries.append(
                {"file": name, "role": role, "seed": seed, "aborted": True,
                 "error": str(err)}
            )
            continue
        save_trajectory(traj, out_dir / name)
        reproj_flags.append(reproj)
        entries.append(
            {"file": name, "role": role, "seed": seed, "aborted": False,
             "n_frames": traj.n_frames, "reprojected": reproj}
        )
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": asdict(spec),
        "scheme": scheme,
        "save_dt": spec.save_dt,
        "fine_dt": spec.fine_dt,
        "trajectories": entries,
        "any_reprojected": bool(any(reproj_flags)),
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def load_dataset(dataset_dir, role: str = "train", memmap: bool = True, verify: bool = True):
    """Load all non-aborted containers with the given role, in manifest order."""
    dataset_dir = Path(dataset_dir)
    manifest = json.loads((dataset_dir / "manifest.json").read_text())
    out = []
    for entry in manifest["trajectories"]:
        if entry["role"] != role or entry.get("aborted"):
            continue
        out.append(load_trajectory(dataset_dir / entry["file"], verify=verify, memmap=memmap))
    return out, manifest
