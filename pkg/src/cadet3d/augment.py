"""Channel augmentation: fixed (weak) transform sets, random (strong) sets,
pseudo-target transformation, and a grid-patch shuffle augmentation.

The patch shuffle is a simplified stand-in for the shuffle augmentation used
by hierarchical-supervision pipelines, NOT a reimplementation of it; it can be
disabled via configuration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Scene
from .geometry import Box3D, PointCloud, Transform, apply_box, apply_points


@dataclass(frozen=True)
class StrongRanges:
    """Sampling ranges for one randomly drawn channel transform."""

    rot_min: float = -math.pi / 4
    rot_max: float = math.pi / 4
    scale_min: float = 0.95
    scale_max: float = 1.05
    flip_prob: float = 0.5


@dataclass(frozen=True)
class ChannelPolicy:
    n_channels: int
    mode: str  # "weak" | "strong"
    weak_transforms: tuple[Transform, ...] = ()
    strong_ranges: StrongRanges | None = None

    def __post_init__(self) -> None:
        if self.n_channels < 1:
            raise ValueError("n_channels must be >= 1")
        if self.mode not in ("weak", "strong"):
            raise ValueError(f"unknown policy mode {self.mode!r}")
        if self.mode == "weak":
            if len(self.weak_transforms) != self.n_channels:
                raise ValueError("weak policy needs one transform per channel")
            if not self.weak_transforms[0].is_identity:
                raise ValueError("weak channel 1 must be the identity")
        elif self.strong_ranges is None:
            raise ValueError("strong policy needs sampling ranges")


def weak_default_policy(
    n_channels: int = 3,
    rot: float = math.radians(22.5),
    scale_low: float = 0.98,
    scale_high: float = 1.02,
) -> ChannelPolicy:
    """Identity channel plus two mirrored, counter-rotated, re-scaled channels."""
    if n_channels == 1:
        transforms: tuple[Transform, ...] = (Transform.identity(),)
    elif n_channels == 3:
        transforms = (
            Transform.identity(),
            Transform(flip_y=True, theta=-rot, s=scale_low),
            Transform(flip_y=True, theta=rot, s=scale_high),
        )
    else:
        raise ValueError("weak default policy is defined for 1 or 3 channels")
    return ChannelPolicy(n_channels=n_channels, mode="weak", weak_transforms=transforms)


def strong_default_policy(n_channels: int = 3, ranges: StrongRanges | None = None) -> ChannelPolicy:
    return ChannelPolicy(
        n_channels=n_channels, mode="strong", strong_ranges=ranges or StrongRanges()
    )


@dataclass
class ChannelSet:
    """Transformed copies of one cloud plus the transform that produced each."""

    clouds: list[PointCloud]
    transforms: list[Transform]

    def __post_init__(self) -> None:
        if len(self.clouds) != len(self.transforms):
            raise ValueError("clouds and transforms lengths differ")


def weak_channels(pc: PointCloud, policy: ChannelPolicy) -> ChannelSet:
    if policy.mode != "weak":
        raise ValueError("weak_channels requires a weak policy")
    return ChannelSet(
        clouds=[apply_points(t, pc) for t in policy.weak_transforms],
        transforms=list(policy.weak_transforms),
    )


def strong_channels(pc: PointCloud, policy: ChannelPolicy, rng_seed) -> ChannelSet:
    """Independently drawn flip/rotation/scale per channel from a seeded stream.

    Draw order per channel is flip, rotation, scale; the same seed reproduces
    the same channel set bit for bit.
    """
    if policy.mode != "strong":
        raise ValueError("strong_channels requires a strong policy")
    rng = np.random.default_rng(rng_seed)
    rg = policy.strong_ranges
    transforms = []
    for _ in range(policy.n_channels):
        flip = bool(rng.random() < rg.flip_prob)
        theta = float(rng.uniform(rg.rot_min, rg.rot_max))
        s = float(rng.uniform(rg.scale_min, rg.scale_max))
        transforms.append(Transform(flip_y=flip, theta=theta, s=s))
    return ChannelSet(
        clouds=[apply_points(t, pc) for t in transforms],
        transforms=transforms,
    )


def transform_pseudo_targets(boxes: list[Box3D], cs: ChannelSet) -> list[list[Box3D]]:
    """Per-channel supervision targets: each box mapped into each channel frame."""
    return [[apply_box(t, b) for b in boxes] for t in cs.transforms]


def shuffle_augment(scene: Scene, grid_cells: int, rng_seed) -> Scene:
    """Permute equal-occupancy BEV patches of the scene footprint.

    The footprint AABB of the points is split into ``grid_cells`` x
    ``grid_cells`` patches. A patch may move only when every box touching it
    lies entirely inside it and it holds at most one box; movable patches are
    permuted among patches of equal box count, carrying their points and
    contained boxes along. Box order is preserved.
    """
    if grid_cells < 1:
        raise ValueError("grid_cells must be >= 1")
    pts = scene.cloud
    if grid_cells == 1 or len(pts) == 0:
        return Scene(scene.id, pts.copy(), list(scene.gt_boxes), list(scene.gt_classes))
    g = grid_cells
    xmin, ymin = pts.xyz[:, 0].min(), pts.xyz[:, 1].min()
    xmax, ymax = pts.xyz[:, 0].max(), pts.xyz[:, 1].max()
    cw, ch = (xmax - xmin) / g, (ymax - ymin) / g
    if cw < 1e-9 or ch < 1e-9:
        return Scene(scene.id, pts.copy(), list(scene.gt_boxes), list(scene.gt_classes))

    def cell_of(x, y):
        return (
            int(np.clip(math.floor((x - xmin) / cw), 0, g - 1)),
            int(np.clip(math.floor((y - ymin) / ch), 0, g - 1)),
        )

    occupancy = np.zeros((g, g), dtype=int)
    blocked = np.zeros((g, g), dtype=bool)
    box_patch: list[tuple[int, int] | None] = []  # patch fully containing the box, if any
    for box in scene.gt_boxes:
        corners = box.corners_bev()
        i0, j0 = cell_of(corners[:, 0].min(), corners[:, 1].min())
        i1, j1 = cell_of(corners[:, 0].max(), corners[:, 1].max())
        occupancy[i0 : i1 + 1, j0 : j1 + 1] += 1
        if (i0, j0) == (i1, j1):
            box_patch.append((i0, j0))
        else:
            box_patch.append(None)
            blocked[i0 : i1 + 1, j0 : j1 + 1] = True
    blocked |= occupancy >= 2

    rng = np.random.default_rng(rng_seed)
    dest = {(i, j): (i, j) for i in range(g) for j in range(g)}
    for occ_level in (0, 1):
        group = [
            (i, j)
            for i in range(g)
            for j in range(g)
            if not blocked[i, j] and occupancy[i, j] == occ_level
        ]
        perm = rng.permutation(len(group))
        for src_idx, dst_idx in enumerate(perm):
            dest[group[src_idx]] = group[dst_idx]

    xyz = pts.xyz.copy()
    ix = np.clip(np.floor((xyz[:, 0] - xmin) / cw).astype(int), 0, g - 1)
    iy = np.clip(np.floor((xyz[:, 1] - ymin) / ch).astype(int), 0, g - 1)
    dx = np.zeros((g, g))
    dy = np.zeros((g, g))
    for (i, j), (ti, tj) in dest.items():
        dx[i, j] = (ti - i) * cw
        dy[i, j] = (tj - j) * ch
    xyz[:, 0] += dx[ix, iy]
    xyz[:, 1] += dy[ix, iy]

    new_boxes = []
    for box, patch in zip(scene.gt_boxes, box_patch):
        if patch is None or dest[patch] == patch:
            new_boxes.append(box)
        else:
            ti, tj = dest[patch]
            i, j = patch
            new_boxes.append(
                Box3D(box.cx + (ti - i) * cw, box.cy + (tj - j) * ch, box.cz,
                      box.w, box.h, box.l, box.r)
            )
    return Scene(scene.id, PointCloud(xyz, pts.intensity.copy()), new_boxes, list(scene.gt_classes))
