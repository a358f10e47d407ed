"""Occupancy voxelization and BEV feature grids with cross-channel alignment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, Transform, compose, invert, transform_xy

# BEV feature layout per cell
BEV_MAX_OCC = 0   # max point count over the vertical column
BEV_Z_FRACTION = 1  # fraction of vertical cells occupied
BEV_MAX_HEIGHT = 2  # highest per-voxel mean height in the column


@dataclass(frozen=True)
class VoxelConfig:
    # default z origin sits above the ground plane so ground returns never
    # enter the grid; objects of interest all rise past it
    origin: tuple[float, float, float] = (-20.0, -20.0, 0.15)
    voxel_size: float = 0.25
    nx: int = 160
    ny: int = 160
    nz: int = 12

    def __post_init__(self) -> None:
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")

    @property
    def z_span(self) -> float:
        return self.nz * self.voxel_size


@dataclass
class VoxelGrid:
    """Sparse occupancy statistics: one row per non-empty cell."""

    cfg: VoxelConfig
    coords: np.ndarray  # (M, 3) int64 cell indices
    counts: np.ndarray  # (M,) points per cell
    mean_z: np.ndarray  # (M,) mean point height per cell
    mean_intensity: np.ndarray  # (M,)

    @property
    def centers(self) -> np.ndarray:
        return np.asarray(self.cfg.origin) + (self.coords + 0.5) * self.cfg.voxel_size


def voxelize(pc: PointCloud, cfg: VoxelConfig) -> VoxelGrid:
    """Deterministic binning; points outside the configured extent are dropped."""
    if len(pc) == 0:
        empty = np.empty((0,))
        return VoxelGrid(cfg, np.empty((0, 3), dtype=np.int64), empty, empty.copy(), empty.copy())
    idx = np.floor((pc.xyz - np.asarray(cfg.origin)) / cfg.voxel_size).astype(np.int64)
    inside = (
        (idx[:, 0] >= 0) & (idx[:, 0] < cfg.nx)
        & (idx[:, 1] >= 0) & (idx[:, 1] < cfg.ny)
        & (idx[:, 2] >= 0) & (idx[:, 2] < cfg.nz)
    )
    idx = idx[inside]
    if not len(idx):
        empty = np.empty((0,))
        return VoxelGrid(cfg, np.empty((0, 3), dtype=np.int64), empty, empty.copy(), empty.copy())
    z = pc.xyz[inside, 2]
    inten = pc.intensity[inside]
    linear = (idx[:, 0] * cfg.ny + idx[:, 1]) * cfg.nz + idx[:, 2]
    uniq, inverse, counts = np.unique(linear, return_inverse=True, return_counts=True)
    coords = np.stack(
        [uniq // (cfg.ny * cfg.nz), (uniq // cfg.nz) % cfg.ny, uniq % cfg.nz], axis=1
    )
    counts = counts.astype(np.float64)
    mean_z = np.bincount(inverse, weights=z, minlength=len(uniq)) / counts
    mean_int = np.bincount(inverse, weights=inten, minlength=len(uniq)) / counts
    return VoxelGrid(cfg, coords, counts, mean_z, mean_int)


@dataclass
class BevGrid:
    """Dense 2D feature grid derived from a voxel grid by vertical compression."""

    origin_xy: tuple[float, float]
    voxel_size: float
    z_span: float
    features: np.ndarray  # (nx, ny, 3)
    z_origin: float = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.features.shape[0], self.features.shape[1]

    def cell_centers(self) -> np.ndarray:
        """(nx*ny, 2) planar centers in row-major cell order."""
        nx, ny = self.shape
        xs = self.origin_xy[0] + (np.arange(nx) + 0.5) * self.voxel_size
        ys = self.origin_xy[1] + (np.arange(ny) + 0.5) * self.voxel_size
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def interpolate(self, xy: np.ndarray) -> np.ndarray:
        """Bilinear feature lookup at planar points, zero outside the extent."""
        return BilinearPlan(self.origin_xy, self.voxel_size, self.shape, xy).apply(self.features)


class BilinearPlan:
    """Precomputed corner indices and weights for bilinear lookups.

    The sample locations depend only on grid geometry and the query points, so
    fixed channel transforms can reuse one plan across scenes; only the four
    gathers and the weighted sum remain per call.
    """

    def __init__(self, origin_xy, voxel_size: float, shape: tuple[int, int], xy: np.ndarray):
        nx, ny = shape
        u = (xy[:, 0] - origin_xy[0]) / voxel_size - 0.5
        v = (xy[:, 1] - origin_xy[1]) / voxel_size - 0.5
        i0 = np.floor(u).astype(np.int64)
        j0 = np.floor(v).astype(np.int64)
        fu = u - i0
        fv = v - j0
        # clip into a zero-padded frame: every out-of-range corner lands on a
        # zero pad cell, which implements the zero-outside-extent contract
        ii0 = np.clip(i0 + 1, 0, nx + 1)
        ii1 = np.clip(i0 + 2, 0, nx + 1)
        jj0 = np.clip(j0 + 1, 0, ny + 1)
        jj1 = np.clip(j0 + 2, 0, ny + 1)
        w00 = (1 - fu) * (1 - fv)
        w01 = (1 - fu) * fv
        w10 = fu * (1 - fv)
        w11 = fu * fv
        self.shape = shape
        self.flat00 = ii0 * (ny + 2) + jj0
        self.flat01 = ii0 * (ny + 2) + jj1
        self.flat10 = ii1 * (ny + 2) + jj0
        self.flat11 = ii1 * (ny + 2) + jj1
        self.weights = (w00[:, None], w01[:, None], w10[:, None], w11[:, None])

    def apply(self, features: np.ndarray) -> np.ndarray:
        nx, ny = self.shape
        padded = np.zeros((nx + 2, ny + 2, features.shape[2]))
        padded[1 : nx + 1, 1 : ny + 1] = features
        flat = padded.reshape(-1, features.shape[2])
        w00, w01, w10, w11 = self.weights
        return (
            w00 * flat[self.flat00]
            + w01 * flat[self.flat01]
            + w10 * flat[self.flat10]
            + w11 * flat[self.flat11]
        )


def bev_from_voxels(grid: VoxelGrid) -> BevGrid:
    cfg = grid.cfg
    n = cfg.nx * cfg.ny
    col = grid.coords[:, 0] * cfg.ny + grid.coords[:, 1] if len(grid.coords) else np.empty((0,), int)
    occ = np.zeros(n)
    frac = np.zeros(n)
    top = np.full(n, -np.inf)
    if len(col):
        np.maximum.at(occ, col, grid.counts)
        np.add.at(frac, col, 1.0 / cfg.nz)
        np.maximum.at(top, col, grid.mean_z)
    top[~np.isfinite(top)] = 0.0
    features = np.stack([occ, frac, top], axis=1).reshape(cfg.nx, cfg.ny, 3)
    return BevGrid(
        (cfg.origin[0], cfg.origin[1]), cfg.voxel_size, cfg.z_span, features, cfg.origin[2]
    )


# plans keyed by (rel transform, grid geometry); weak policies reuse the same
# few mappings for every scene
_PLAN_CACHE: dict[tuple, BilinearPlan] = {}
_PLAN_CACHE_MAX = 64


def _plan_for(rel: Transform, grid: BevGrid, base: BevGrid) -> BilinearPlan:
    key = (
        rel.flip_y, rel.theta, rel.s,
        base.origin_xy, base.voxel_size, base.shape,
        grid.origin_xy, grid.voxel_size, grid.shape,
    )
    plan = _PLAN_CACHE.get(key)
    if plan is None:
        plan = BilinearPlan(
            grid.origin_xy, grid.voxel_size, grid.shape, transform_xy(rel, base.cell_centers())
        )
        if len(_PLAN_CACHE) >= _PLAN_CACHE_MAX:
            _PLAN_CACHE.clear()
        _PLAN_CACHE[key] = plan
    return plan


def bev_align(grids: list[BevGrid], transforms: list[Transform]) -> BevGrid:
    """Fuse per-channel BEV grids into channel-1 space.

    Grid points are the channel-1 cell centers; each is mapped through
    T_i o T_1^{-1} into channel i, features are bilinearly interpolated there
    (zero outside the channel extent), and the fusion is the component-wise
    maximum over channels. Identity mappings skip interpolation so a single
    channel, or all-identity transforms, reproduce inputs exactly.
    """
    if len(grids) != len(transforms) or not grids:
        raise ValueError("need one transform per grid")
    base = grids[0]
    t1_inv = invert(transforms[0])
    fused: np.ndarray | None = None
    for i, (grid, t) in enumerate(zip(grids, transforms)):
        rel = Transform.identity() if i == 0 else compose(t, t1_inv)
        if rel.is_identity and grid.shape == base.shape:
            vals = grid.features.reshape(-1, grid.features.shape[2])
        else:
            vals = _plan_for(rel, grid, base).apply(grid.features)
        fused = vals.copy() if fused is None else np.maximum(fused, vals)
    nx, ny = base.shape
    return BevGrid(
        base.origin_xy, base.voxel_size, base.z_span, fused.reshape(nx, ny, -1), base.z_origin
    )
