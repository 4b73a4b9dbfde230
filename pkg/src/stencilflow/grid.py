"""Staggered periodic grid, velocity containers, coarsening and CFL step.

Layout conventions (fixed once, used by every module and by the on-disk
format):

* arrays have shape ``(ny, nx)``; index ``[j, i]`` is row ``j`` (y) and
  column ``i`` (x), so C-order serialization is x-fastest;
* cell ``(j, i)`` covers ``[i*dx, (i+1)*dx] x [j*dy, (j+1)*dy]``;
* ``u_x[j, i]`` lives on the right x-face of the cell, at
  ``((i+1)*dx, (j+0.5)*dy)``;
* ``u_y[j, i]`` lives on the top y-face, at ``((i+0.5)*dx, (j+1)*dy)``;
* corner ``[j, i]`` means the point ``((i+1)*dx, (j+1)*dy)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

__all__ = [
    "Grid",
    "VelocityField",
    "ScalarField",
    "make_grid",
    "vorticity",
    "downsample_velocity",
    "cfl_timestep",
    "DEFAULT_MAX_SPEED",
    "DEFAULT_CFL_SAFETY",
]

# Default CFL calibration: safety * min(dx, dy) / max_speed on a 64x64 grid
# over a 2*pi square gives dt = pi/448 ~= 7.0125e-3, the step used by the
# reference turbulence configuration.
DEFAULT_MAX_SPEED = 7.0
DEFAULT_CFL_SAFETY = 0.5


@dataclass(frozen=True)
class Grid:
    """Uniform periodic rectangular grid of nx-by-ny cells."""

    nx: int
    ny: int
    domain_x: float
    domain_y: float

    @property
    def dx(self) -> float:
        return self.domain_x / self.nx

    @property
    def dy(self) -> float:
        return self.domain_y / self.ny

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape (ny, nx) used by every field on this grid."""
        return (self.ny, self.nx)

    def cell_center_coords(self):
        """Meshgrid (x, y) of cell centers, each shaped (ny, nx)."""
        x = (np.arange(self.nx) + 0.5) * self.dx
        y = (np.arange(self.ny) + 0.5) * self.dy
        return np.meshgrid(x, y)

    def x_face_coords(self):
        """Meshgrid (x, y) of u_x sample points."""
        x = (np.arange(self.nx) + 1.0) * self.dx
        y = (np.arange(self.ny) + 0.5) * self.dy
        return np.meshgrid(x, y)

    def y_face_coords(self):
        """Meshgrid (x, y) of u_y sample points."""
        x = (np.arange(self.nx) + 0.5) * self.dx
        y = (np.arange(self.ny) + 1.0) * self.dy
        return np.meshgrid(x, y)

    def corner_coords(self):
        """Meshgrid (x, y) of cell corners (vorticity sample points)."""
        x = (np.arange(self.nx) + 1.0) * self.dx
        y = (np.arange(self.ny) + 1.0) * self.dy
        return np.meshgrid(x, y)


def make_grid(nx: int, ny: int, domain_x: float, domain_y: float) -> Grid:
    """Build a grid, rejecting degenerate sizes.

    Cell counts below 4 leave no room for the interpolation footprints, so
    they are rejected outright.
    """
    if nx < 4 or ny < 4:
        raise ValueError(f"grid needs at least 4 cells per axis, got {nx}x{ny}")
    if domain_x <= 0 or domain_y <= 0:
        raise ValueError(f"domain extents must be positive, got {domain_x}, {domain_y}")
    return Grid(int(nx), int(ny), float(domain_x), float(domain_y))


@jax.tree_util.register_pytree_node_class
@dataclass
class VelocityField:
    """Staggered velocity: u_x on x-faces, u_y on y-faces, both (ny, nx)."""

    grid: Grid
    u_x: jnp.ndarray
    u_y: jnp.ndarray

    def __post_init__(self):
        if self.u_x.shape != self.grid.shape or self.u_y.shape != self.grid.shape:
            raise ValueError(
                f"component shapes {self.u_x.shape}, {self.u_y.shape} do not match "
                f"grid {self.grid.shape}"
            )

    def tree_flatten(self):
        return (self.u_x, self.u_y), self.grid

    @classmethod
    def tree_unflatten(cls, grid, children):
        obj = object.__new__(cls)
        obj.grid = grid
        obj.u_x, obj.u_y = children
        return obj

    def astype(self, dtype) -> "VelocityField":
        return VelocityField(self.grid, self.u_x.astype(dtype), self.u_y.astype(dtype))

    def max_speed(self) -> float:
        return float(jnp.maximum(jnp.max(jnp.abs(self.u_x)), jnp.max(jnp.abs(self.u_y))))


@jax.tree_util.register_pytree_node_class
@dataclass
class ScalarField:
    """Scalar values on a grid; the sample position (centers/corners) is contextual."""

    grid: Grid
    values: jnp.ndarray

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ValueError(f"shape {self.values.shape} does not match grid {self.grid.shape}")

    def tree_flatten(self):
        return (self.values,), self.grid

    @classmethod
    def tree_unflatten(cls, grid, children):
        obj = object.__new__(cls)
        obj.grid = grid
        (obj.values,) = children
        return obj


def vorticity(v: VelocityField) -> ScalarField:
    """Curl dx(u_y) - dy(u_x) by compact central differences at cell corners.

    Corner [j, i] is ((i+1)*dx, (j+1)*dy); both one-sided differences below
    are centered there, so the result is second-order accurate.
    """
    g = v.grid
    dudy = (jnp.roll(v.u_x, -1, axis=0) - v.u_x) / g.dy
    dvdx = (jnp.roll(v.u_y, -1, axis=1) - v.u_y) / g.dx
    return ScalarField(g, dvdx - dudy)


def downsample_velocity(v: VelocityField, factor: int) -> VelocityField:
    """Face-averaged coarsening by an integer factor.

    Each coarse face value is the mean of the ``factor`` fine face values
    that tile the coarse face segment, so the flux through every coarse face
    equals the aggregated fine flux and discrete divergence-freeness is
    preserved exactly.
    """
    g = v.grid
    if factor < 1 or g.nx % factor or g.ny % factor:
        raise ValueError(f"factor {factor} does not divide grid {g.nx}x{g.ny}")
    if factor == 1:
        return v
    coarse = Grid(g.nx // factor, g.ny // factor, g.domain_x, g.domain_y)
    # u_x: keep every factor-th x-face line, average along y across the segment.
    ux = v.u_x[:, factor - 1 :: factor]
    ux = ux.reshape(coarse.ny, factor, coarse.nx).mean(axis=1)
    # u_y: keep every factor-th y-face line, average along x.
    uy = v.u_y[factor - 1 :: factor, :]
    uy = uy.reshape(coarse.ny, coarse.nx, factor).mean(axis=2)
    return VelocityField(coarse, ux, uy)


def cfl_timestep(
    grid: Grid,
    max_speed: float = DEFAULT_MAX_SPEED,
    safety: float = DEFAULT_CFL_SAFETY,
) -> float:
    """Advective stability step: safety * min(dx, dy) / max_speed."""
    if max_speed <= 0:
        raise ValueError(f"max_speed must be positive, got {max_speed}")
    if not 0 < safety <= 1:
        raise ValueError(f"safety must lie in (0, 1], got {safety}")
    return safety * min(grid.dx, grid.dy) / max_speed
