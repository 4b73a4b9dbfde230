"""Convolutional coefficient network and coefficient-driven interpolation.

The network maps per-cell feature channels (raw velocity history or its
Legendre summary) through a stack of periodically padded convolutions to one
bundle of stencil-weight maps per future step.  Raw outputs are lifted onto
the constraint manifold "weights sum to one" by adding them to a fixed base
pattern (the two-point mean) and solving for one designated weight, so any
parameter setting interpolates constants exactly and a zero-initialized
final layer reproduces the plain two-point mean.

Checkpoint format (documented in docs/FORMATS.md): magic ``SFNET001``,
little-endian uint32 header length, UTF-8 JSON header, then all parameters
flattened C-order as little-endian float32, kernel then bias per layer.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, asdict
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np

from .fvm2d import TARGETS
from .grid import VelocityField

__all__ = [
    "NetArch",
    "init_params",
    "count_params",
    "forward",
    "coefficient_maps",
    "interpolate_with_coeffs",
    "learned_interpolations",
    "ks_interpolate_with_coeffs",
    "save_checkpoint",
    "load_checkpoint",
    "FOOTPRINT_OFFSETS_2D",
    "KS_FOOTPRINT_OFFSETS",
]

# 4x4 footprint around the target face: index shifts relative to the anchor
# source point, slot s = 4*(dj+2) + (di+2).  The anchor (slot 10) is the
# source point half a cell beyond the target along the interpolation axis,
# so slots 9/10 (x-axis targets) or 6/10 (y-axis targets) straddle the face.
FOOTPRINT_OFFSETS_2D = tuple(
    (dj, di) for dj in (-2, -1, 0, 1) for di in (-2, -1, 0, 1)
)
_DETERMINED_SLOT_2D = FOOTPRINT_OFFSETS_2D.index((0, 0))  # = 10

# 6-point periodic footprint for the 1-D equation: cells k-2..k+3 around
# face k+1/2; slots 2 and 3 straddle the face, slot 2 is determined.
KS_FOOTPRINT_OFFSETS = (-2, -1, 0, 1, 2, 3)
_KS_DETERMINED_SLOT = KS_FOOTPRINT_OFFSETS.index(0)  # = 2


def _base_pattern_2d(target_index: int) -> np.ndarray:
    base = np.zeros(16)
    axis = TARGETS[target_index].axis
    partner = (0, -1) if axis == 1 else (-1, 0)
    base[FOOTPRINT_OFFSETS_2D.index(partner)] = 0.5
    base[_DETERMINED_SLOT_2D] = 0.5
    return base


def _ks_base_pattern() -> np.ndarray:
    base = np.zeros(6)
    base[KS_FOOTPRINT_OFFSETS.index(0)] = 0.5
    base[KS_FOOTPRINT_OFFSETS.index(1)] = 0.5
    return base


@dataclass(frozen=True)
class NetArch:
    """Shape of the coefficient network.

    ``out_kind`` selects stencil-weight heads (``coeffs``) or additive
    velocity-correction heads (``correction``); ``bundle`` is the number of
    future steps produced by one forward pass.
    """

    in_channels: int
    layers: int = 6
    channels: int = 256
    kernel: int = 3
    bundle: int = 1
    ndim: int = 2
    out_kind: str = "coeffs"

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.ndim not in (1, 2):
            raise ValueError("ndim must be 1 or 2")
        if self.out_kind not in ("coeffs", "correction"):
            raise ValueError(f"unknown out_kind {self.out_kind!r}")
        if self.bundle < 1:
            raise ValueError("bundle must be >= 1")

    @property
    def n_targets(self) -> int:
        return 8 if self.ndim == 2 else 1

    @property
    def footprint(self) -> int:
        return 16 if self.ndim == 2 else 6

    @property
    def out_channels(self) -> int:
        if self.out_kind == "coeffs":
            return self.n_targets * (self.footprint - 1) * self.bundle
        return (2 if self.ndim == 2 else 1) * self.bundle


def init_params(arch: NetArch, seed: int):
    """Fan-in-scaled uniform kernels, zero biases, zero final layer.

    Zeroing the last layer makes the untrained network emit the base
    two-point-mean coefficients everywhere.
    """
    key = jax.random.PRNGKey(seed)
    params = []
    c_in = arch.in_channels
    k = arch.kernel
    for layer in range(arch.layers):
        c_out = arch.out_channels if layer == arch.layers - 1 else arch.channels
        shape = (k,) * arch.ndim + (c_in, c_out)
        if layer == arch.layers - 1:
            w = jnp.zeros(shape)
        else:
            key, sub = jax.random.split(key)
            limit = float(np.sqrt(1.0 / (k**arch.ndim * c_in)))
            w = jax.random.uniform(sub, shape, minval=-limit, maxval=limit)
        params.append({"w": w, "b": jnp.zeros(c_out)})
        c_in = c_out
    return params


def count_params(params) -> int:
    return sum(int(np.prod(p["w"].shape)) + int(np.prod(p["b"].shape)) for p in params)


def _conv(x, w, ndim):
    pad = (w.shape[0] - 1) // 2
    if ndim == 2:
        x = jnp.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="wrap")
        dn = ("NHWC", "HWIO", "NHWC")
        strides = (1, 1)
    else:
        x = jnp.pad(x, ((0, 0), (pad, pad), (0, 0)), mode="wrap")
        dn = ("NWC", "WIO", "NWC")
        strides = (1,)
    return jax.lax.conv_general_dilated(x, w, strides, "VALID", dimension_numbers=dn)


def forward(params, arch: NetArch, features):
    """Raw network output with trailing channel axis, spatial shape preserved."""
    x = jnp.asarray(features)[None]
    if x.shape[-1] != arch.in_channels:
        raise ValueError(f"expected {arch.in_channels} feature channels, got {x.shape[-1]}")
    for layer, p in enumerate(params):
        x = _conv(x, p["w"].astype(x.dtype), arch.ndim) + p["b"].astype(x.dtype)
        if layer < len(params) - 1:
            x = jax.nn.relu(x)
    return x[0]


def coefficient_maps(raw, arch: NetArch):
    """Lift raw outputs to constrained stencil weights.

    Input trailing channels are reshaped to (bundle, n_targets, footprint-1);
    output has trailing shape (bundle, n_targets, footprint) with each weight
    vector summing to one: the free slots receive base + raw and the
    designated slot receives base - sum(raw).
    """
    spatial = raw.shape[:-1]
    nt, fp = arch.n_targets, arch.footprint
    raw = raw.reshape(spatial + (arch.bundle, nt, fp - 1))
    if arch.ndim == 2:
        det = _DETERMINED_SLOT_2D
        base = np.stack([_base_pattern_2d(t) for t in range(nt)])  # (8, 16)
    else:
        det = _KS_DETERMINED_SLOT
        base = _ks_base_pattern()[None]  # (1, 6)
    base = jnp.asarray(base, dtype=raw.dtype)
    free = base[:, [s for s in range(fp) if s != det]] + raw
    determined = base[:, det] - raw.sum(axis=-1)
    weights = jnp.concatenate(
        [free[..., :det], determined[..., None], free[..., det:]], axis=-1
    )
    return weights


def _shifted_stack_2d(src, target_index: int):
    aj, ai = TARGETS[target_index].anchor
    return jnp.stack(
        [jnp.roll(src, (-(aj + dj), -(ai + di)), axis=(0, 1)) for dj, di in FOOTPRINT_OFFSETS_2D]
    )


def interpolate_with_coeffs(v: VelocityField, coeffs, target_index: int):
    """Weighted 4x4 periodic neighborhood sum for one interpolation target.

    ``coeffs`` has shape (ny, nx, 16); the result lives on the target's face
    set in the same indexing as the classic provider's output.
    """
    src = v.u_x if TARGETS[target_index].source == "x" else v.u_y
    stack = _shifted_stack_2d(src, target_index)
    return jnp.einsum("syx,yxs->yx", stack, coeffs)


def learned_interpolations(v: VelocityField, maps):
    """All eight face maps from one bundle step's weights (ny, nx, 8, 16)."""
    return tuple(interpolate_with_coeffs(v, maps[:, :, t, :], t) for t in range(8))


def ks_interpolate_with_coeffs(values, coeffs):
    """1-D learned face value: weighted 6-point periodic neighborhood.

    ``values`` is (n,), ``coeffs`` (n, 6); face k sits between cells k, k+1.
    """
    stack = jnp.stack([jnp.roll(values, -d) for d in KS_FOOTPRINT_OFFSETS])
    return jnp.einsum("sn,ns->n", stack, coeffs)


_CHECKPOINT_MAGIC = b"SFNET001"


def save_checkpoint(path, params, arch: NetArch, feature_mode: str, hippo_order: int | None, extra: dict | None = None):
    """Write header + float32 parameter payload; returns the path."""
    path = Path(path)
    header = {
        "format_version": 1,
        "arch": asdict(arch),
        "feature_mode": feature_mode,
        "bundle": arch.bundle,
        "hippo_order": hippo_order,
        "param_shapes": [[list(p["w"].shape), list(p["b"].shape)] for p in params],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.asarray(part, dtype="<f4").tobytes()
        for p in params
        for part in (p["w"], p["b"])
    )
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        fh.write(np.uint32(zlib.crc32(payload)).tobytes())
        fh.write(payload)
    return path


def load_checkpoint(path):
    """Read a checkpoint; returns (params, arch, header dict)."""
    raw = Path(path).read_bytes()
    if raw[:8] != _CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    n = int(np.frombuffer(raw[8:12], "<u4")[0])
    header = json.loads(raw[12 : 12 + n].decode("utf-8"))
    crc = int(np.frombuffer(raw[12 + n : 16 + n], "<u4")[0])
    payload = raw[16 + n :]
    if zlib.crc32(payload) != crc:
        raise ValueError(f"{path}: parameter payload checksum mismatch")
    arch = NetArch(**header["arch"])
    params = []
    offset = 0
    flat = np.frombuffer(payload, "<f4")
    for w_shape, b_shape in header["param_shapes"]:
        w_n = int(np.prod(w_shape))
        b_n = int(np.prod(b_shape))
        w = jnp.asarray(flat[offset : offset + w_n].reshape(w_shape))
        offset += w_n
        b = jnp.asarray(flat[offset : offset + b_n].reshape(b_shape))
        offset += b_n
        params.append({"w": w, "b": b})
    if offset != flat.size:
        raise ValueError(f"{path}: trailing bytes in parameter payload")
    return params, arch, header
