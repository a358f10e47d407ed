"""Lightweight multi-channel detector.

Structure: per-channel occupancy voxel grids, aligned/max-pooled BEV fusion,
a geometric proposer (connected components + PCA box fit) with a learned
linear classifier, per-channel RoI pooling feeding linear objectness and
residual-regression heads, and back-transformed averaging into detections.
The learned region-proposal stage of full-scale detectors is deliberately
replaced by the geometric proposer so every head stays a linear map over a
fixed 12-component feature vector.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import ChannelPolicy, ChannelSet, strong_channels, weak_channels
from .geometry import (
    Box3D,
    PointCloud,
    Transform,
    apply_box,
    average_boxes,
    compose,
    decode_residual,
    encode_residual,
    invert,
    iou_3d,
    nms,
    points_in_box,
    wrap_angle,
)
from .voxels import (
    BEV_MAX_HEIGHT,
    BEV_MAX_OCC,
    BevGrid,
    VoxelConfig,
    VoxelGrid,
    bev_align,
    bev_from_voxels,
    voxelize,
)

N_FEATURES = 12
BOX_DIM = 7

# feature vector layout (index: meaning)
#  0 log1p(point count)        6 z extent
#  1 BEV fill ratio            7 mean intensity
#  2 mean height               8 center distance / 100 m
#  3 height std                9 footprint aspect ratio (min/max)
#  4 PCA major extent         10 point density (points per occupied voxel)
#  5 PCA minor extent         11 bias, always 1


# Box-term loss weight; keeps the quadratic regression objective inside the
# stable step-size region for the shared learning rate.
REG_LOSS_WEIGHT = 0.2

# Fixed per-slot scale applied to features before every linear head (a
# preconditioner: heads learn W over phi/scale). Values are round numbers near
# each slot's typical spread so that SGD sees comparably sized coordinates.
FEATURE_SCALE = np.array([4.0, 0.5, 1.0, 0.3, 2.0, 1.0, 1.5, 0.5, 0.1, 0.5, 2.0, 1.0])


class NonFiniteLossError(RuntimeError):
    """A training step produced a non-finite loss; no update was applied."""


class ParamsFormatError(ValueError):
    """Parameter file exists but is incompatible (magic/version/shape)."""


@dataclass(frozen=True)
class DetectorConfig:
    voxel: VoxelConfig = VoxelConfig()
    num_classes: int = 3
    min_occ: float = 1.0
    min_cells: int = 3
    padding: float = 0.1
    roi_enlarge: float = 1.2
    proposal_nms_iou: float = 0.5
    final_nms_iou: float = 0.1
    match_iou: float = 0.3
    learning_rate: float = 0.1
    background_weight: float = 0.3


@dataclass
class DetectorParams:
    """Linear head weights; teacher and student share these shapes."""

    w_cls: np.ndarray  # (C+1, F) proposal classifier, row 0 = background
    w_obj: np.ndarray  # (C, F) per-class objectness
    w_reg: np.ndarray  # (C, 7, F) per-class residual regressor
    lr: float

    @staticmethod
    def zeros(num_classes: int = 3, lr: float = 0.1) -> "DetectorParams":
        return DetectorParams(
            w_cls=np.zeros((num_classes + 1, N_FEATURES)),
            w_obj=np.zeros((num_classes, N_FEATURES)),
            w_reg=np.zeros((num_classes, BOX_DIM, N_FEATURES)),
            lr=lr,
        )

    @property
    def num_classes(self) -> int:
        return self.w_obj.shape[0]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.w_cls, self.w_obj, self.w_reg)

    def copy(self) -> "DetectorParams":
        return DetectorParams(self.w_cls.copy(), self.w_obj.copy(), self.w_reg.copy(), self.lr)

    def same_shapes(self, other: "DetectorParams") -> bool:
        return all(a.shape == b.shape for a, b in zip(self.arrays(), other.arrays()))


@dataclass
class Proposal:
    box: Box3D
    class_scores: np.ndarray  # (C+1,), sums to 1
    feature: np.ndarray  # (F,) classifier input, kept for training parity

    @property
    def foreground_score(self) -> float:
        return float(self.class_scores[1:].max())

    @property
    def predicted_class(self) -> int:
        """Most likely foreground class id (1-based)."""
        return int(self.class_scores[1:].argmax()) + 1


@dataclass
class Detection:
    box: Box3D
    per_channel_boxes: list[Box3D]
    class_scores: np.ndarray
    objectness: float

    def __post_init__(self) -> None:
        agg = average_boxes(self.per_channel_boxes)
        if not np.allclose(agg.as_array(), self.box.as_array(), atol=1e-9):
            raise ValueError("detection box must be the average of its channel boxes")
        mean_obj = self.objectness
        if not 0.0 <= mean_obj <= 1.0:
            raise ValueError("objectness must lie in [0, 1]")

    @property
    def p_hat(self) -> float:
        return float(self.class_scores[1:].max())

    @property
    def predicted_class(self) -> int:
        return int(self.class_scores[1:].argmax()) + 1

    @property
    def confidence(self) -> float:
        return self.p_hat * self.objectness


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _pca_axes(xy: np.ndarray, weights: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(major, minor) unit axes of a planar point set."""
    if weights is None:
        weights = np.ones(len(xy))
    total = weights.sum()
    mu = (weights @ xy) / total
    centered = xy - mu
    cov = (centered * weights[:, None]).T @ centered / total
    _, vecs = np.linalg.eigh(cov)  # ascending eigenvalues
    return vecs[:, 1], vecs[:, 0]


def _component_feature(
    cell_xy: np.ndarray, feats: np.ndarray, box: Box3D, proj_major: np.ndarray,
    proj_minor: np.ndarray, voxel: float
) -> np.ndarray:
    """Classifier feature for a BEV component. Intensity is not represented in
    BEV features, so that slot is zero at proposal time."""
    count = float(feats[:, BEV_MAX_OCC].sum())
    n_cells = len(cell_xy)
    phi = np.zeros(N_FEATURES)
    phi[0] = math.log1p(count)
    phi[1] = min(1.0, n_cells * voxel * voxel / (box.w * box.l))
    phi[2] = float(feats[:, BEV_MAX_HEIGHT].mean())
    phi[3] = float(feats[:, BEV_MAX_HEIGHT].std())
    phi[4] = float(np.ptp(proj_major)) + voxel
    phi[5] = float(np.ptp(proj_minor)) + voxel
    phi[6] = box.h
    phi[8] = math.hypot(box.cx, box.cy) / 100.0
    phi[9] = min(box.w, box.l) / max(box.w, box.l)
    phi[10] = count / n_cells
    phi[11] = 1.0
    return phi


def _connected_components(occ: np.ndarray) -> list[np.ndarray]:
    """8-connected components of a boolean grid, in row-major seed order."""
    nx, ny = occ.shape
    seen = np.zeros_like(occ, dtype=bool)
    comps = []
    cells = np.argwhere(occ)
    occ_set = set(map(tuple, cells))
    for i, j in cells:
        if seen[i, j]:
            continue
        stack = [(int(i), int(j))]
        seen[i, j] = True
        comp = []
        while stack:
            ci, cj = stack.pop()
            comp.append((ci, cj))
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    ni, nj = ci + di, cj + dj
                    if (ni, nj) in occ_set and not seen[ni, nj]:
                        seen[ni, nj] = True
                        stack.append((ni, nj))
        comps.append(np.array(sorted(comp)))
    return comps


def propose(fused: BevGrid, params: DetectorParams, cfg: DetectorConfig) -> list[Proposal]:
    """Geometric proposals from the fused BEV grid.

    Connected occupied components are fitted with an oriented box (PCA yaw,
    projection extents plus padding, column statistics for the vertical span)
    and scored by the linear proposal classifier; small components are dropped
    and the survivors pass greedy NMS.
    """
    occ = fused.features[:, :, BEV_MAX_OCC] >= cfg.min_occ
    voxel = fused.voxel_size
    raw: list[Proposal] = []
    for comp in _connected_components(occ):
        if len(comp) < cfg.min_cells:
            continue
        xy = np.asarray(fused.origin_xy) + (comp + 0.5) * voxel
        feats = fused.features[comp[:, 0], comp[:, 1]]
        major, minor = _pca_axes(xy)
        mu = xy.mean(axis=0)
        pu = (xy - mu) @ major
        pv = (xy - mu) @ minor
        length = float(np.ptp(pu)) + voxel + cfg.padding
        width = float(np.ptp(pv)) + voxel + cfg.padding
        # vertical span measured from the grid floor: columns sample objects
        # too sparsely for the occupied-fraction estimate to be reliable
        z_top = float(feats[:, BEV_MAX_HEIGHT].max())
        h = max(z_top + 0.5 * voxel - fused.z_origin, voxel)
        box = Box3D(float(mu[0]), float(mu[1]), fused.z_origin + 0.5 * h, width, h, length,
                    math.atan2(major[1], major[0]))
        phi = _component_feature(xy, feats, box, pu, pv, voxel)
        scores = softmax(params.w_cls @ (phi / FEATURE_SCALE))
        raw.append(Proposal(box=box, class_scores=scores, feature=phi))
    keep = nms([(p.box, p.foreground_score) for p in raw], cfg.proposal_nms_iou)
    return [raw[i] for i in keep]


def roi_features(proposal: Box3D, grid: VoxelGrid, t: Transform,
                 cfg: DetectorConfig) -> np.ndarray:
    """Pool voxel statistics inside the (enlarged) proposal mapped into the
    channel frame by ``t``. An empty RoI yields the zero feature with bias 1."""
    box = proposal if t.is_identity else apply_box(t, proposal)
    enlarged = Box3D(box.cx, box.cy, box.cz, box.w * cfg.roi_enlarge,
                     box.h * cfg.roi_enlarge, box.l * cfg.roi_enlarge, box.r)
    phi = np.zeros(N_FEATURES)
    phi[11] = 1.0
    if not len(grid.coords):
        return phi
    centers = grid.centers
    mask = points_in_box(enlarged, centers, strict=False)
    if not mask.any():
        return phi
    counts = grid.counts[mask]
    zs = centers[mask, 2]
    npts = float(counts.sum())
    n_cells = int(mask.sum())
    n_cols = len(np.unique(grid.coords[mask][:, 0] * grid.cfg.ny + grid.coords[mask][:, 1]))
    cell_z = grid.mean_z[mask]
    mean_h = float(counts @ cell_z) / npts
    var_h = float(counts @ (cell_z - mean_h) ** 2) / npts
    xy = centers[mask, :2]
    major, minor = _pca_axes(xy, counts)
    mu = (counts @ xy) / npts
    voxel = grid.cfg.voxel_size
    phi[0] = math.log1p(npts)
    phi[1] = min(1.0, n_cols * voxel * voxel / (enlarged.w * enlarged.l))
    phi[2] = mean_h
    phi[3] = math.sqrt(var_h)
    phi[4] = float(np.ptp((xy - mu) @ major)) + voxel
    phi[5] = float(np.ptp((xy - mu) @ minor)) + voxel
    phi[6] = float(np.ptp(zs)) + voxel
    phi[7] = float(counts @ grid.mean_intensity[mask]) / npts
    phi[8] = math.hypot(box.cx, box.cy) / 100.0
    phi[9] = min(box.w, box.l) / max(box.w, box.l)
    phi[10] = npts / n_cells
    return phi


def align_yaw_to_anchor(target: Box3D, anchor: Box3D) -> Box3D:
    """Equivalent box whose yaw residual against the anchor lies in (-pi/2, pi/2].

    A footprint is invariant under a half-turn of its heading, so regression
    targets can always use the flip closest to the anchor; this keeps yaw
    residuals unimodal."""
    d = wrap_angle(target.r - anchor.r)
    if d > math.pi / 2:
        r = target.r - math.pi
    elif d <= -math.pi / 2:
        r = target.r + math.pi
    else:
        return target
    return Box3D(target.cx, target.cy, target.cz, target.w, target.h, target.l, r)


def _relative_transforms(transforms: list[Transform]) -> list[Transform]:
    """T_i o T_1^{-1} per channel; channel 1 is the exact identity."""
    t1_inv = invert(transforms[0])
    return [
        Transform.identity() if i == 0 else compose(t, t1_inv)
        for i, t in enumerate(transforms)
    ]


def refine(
    proposals: list[Proposal],
    grids: list[VoxelGrid],
    transforms: list[Transform],
    params: DetectorParams,
    cfg: DetectorConfig,
) -> list[Detection]:
    """Per-channel RoI refinement and back-transformed averaging.

    Proposals live in the channel-1 frame; refined boxes come back to the
    canonical (untransformed) frame through each channel's inverse transform.
    """
    rels = _relative_transforms(transforms)
    inv_backs = [invert(t) for t in transforms]
    dets = []
    for prop in proposals:
        k = prop.predicted_class - 1
        channel_boxes = []
        obj_scores = []
        for rel, grid, back in zip(rels, grids, inv_backs):
            phi = roi_features(prop.box, grid, rel, cfg) / FEATURE_SCALE
            anchor = prop.box if rel.is_identity else apply_box(rel, prop.box)
            decoded = decode_residual(params.w_reg[k] @ phi, anchor)
            channel_boxes.append(apply_box(back, decoded))
            obj_scores.append(sigmoid(float(params.w_obj[k] @ phi)))
        dets.append(
            Detection(
                box=average_boxes(channel_boxes),
                per_channel_boxes=channel_boxes,
                class_scores=prop.class_scores.copy(),
                objectness=float(np.mean(obj_scores)),
            )
        )
    return dets


def _channel_pipeline(
    pc: PointCloud,
    policy: ChannelPolicy,
    params: DetectorParams,
    cfg: DetectorConfig,
    rng_seed=None,
) -> tuple[ChannelSet, list[VoxelGrid], list[Proposal]]:
    if policy.mode == "weak":
        cs = weak_channels(pc, policy)
    else:
        if rng_seed is None:
            raise ValueError("strong policy requires an rng seed")
        cs = strong_channels(pc, policy, rng_seed)
    grids = [voxelize(cloud, cfg.voxel) for cloud in cs.clouds]
    fused = bev_align([bev_from_voxels(g) for g in grids], cs.transforms)
    return cs, grids, propose(fused, params, cfg)


def detect(
    pc: PointCloud,
    policy: ChannelPolicy,
    params: DetectorParams,
    cfg: DetectorConfig,
    rng_seed=None,
) -> list[Detection]:
    """Full inference pass; detections are canonical-frame and NMS-deduplicated."""
    cs, grids, proposals = _channel_pipeline(pc, policy, params, cfg, rng_seed)
    dets = refine(proposals, grids, cs.transforms, params, cfg)
    keep = nms([(d.box, d.confidence) for d in dets], cfg.final_nms_iou)
    return [dets[i] for i in keep]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainExample:
    """One RoI with per-channel pooled features and (optionally) box targets.

    ``anchors``/``targets`` are channel-frame boxes; ``targets`` is None for
    background RoIs. ``cls_feature`` is the proposal-classifier input.
    """

    cls_feature: np.ndarray
    channel_features: list[np.ndarray]
    anchors: list[Box3D]
    targets: list[Box3D] | None
    target_class: int  # 0 = background
    weight: float


@dataclass
class TrainLosses:
    cls: float
    reg: float
    obj: float

    @property
    def total(self) -> float:
        return self.cls + self.reg + self.obj


def _smooth_l1(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(value, derivative) elementwise."""
    ax = np.abs(x)
    small = ax < 1.0
    val = np.where(small, 0.5 * x * x, ax - 0.5)
    grad = np.where(small, x, np.sign(x))
    return val, grad


def loss_and_grads(
    params: DetectorParams, batch: list[TrainExample]
) -> tuple[TrainLosses, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Weighted losses and analytic gradients.

    Classification runs on every RoI and is averaged over the batch; the box
    terms exist only where a target box exists and are averaged over those
    RoIs. Objectness regresses toward the 3D IoU of the currently decoded box
    with its target; that target is treated as a constant within the step, so
    the objectness gradient flows only through the objectness head.
    """
    g_cls = np.zeros_like(params.w_cls)
    g_obj = np.zeros_like(params.w_obj)
    g_reg = np.zeros_like(params.w_reg)
    l_cls = l_reg = l_obj = 0.0
    n = max(len(batch), 1)
    n_fg = max(sum(1 for ex in batch if ex.target_class > 0), 1)
    for ex in batch:
        w = ex.weight
        phi_c = ex.cls_feature / FEATURE_SCALE
        probs = softmax(params.w_cls @ phi_c)
        l_cls += -w * math.log(max(float(probs[ex.target_class]), 1e-300)) / n
        dlogits = probs.copy()
        dlogits[ex.target_class] -= 1.0
        g_cls += (w / n) * np.outer(dlogits, phi_c)
        if ex.target_class > 0:
            k = ex.target_class - 1
            n_ch = max(len(ex.channel_features), 1)
            scale = w / (n_fg * n_ch)
            for phi_raw, anchor, target in zip(ex.channel_features, ex.anchors, ex.targets):
                phi = phi_raw / FEATURE_SCALE
                res_pred = params.w_reg[k] @ phi
                diff = res_pred - encode_residual(target, anchor)
                val, dval = _smooth_l1(diff)
                l_reg += scale * REG_LOSS_WEIGHT * float(val.sum())
                g_reg[k] += scale * REG_LOSS_WEIGHT * np.outer(dval, phi)
                iou_target = iou_3d(decode_residual(res_pred, anchor), target)
                o = sigmoid(float(params.w_obj[k] @ phi))
                l_obj += scale * (o - iou_target) ** 2
                g_obj[k] += scale * 2.0 * (o - iou_target) * o * (1.0 - o) * phi
    return TrainLosses(cls=l_cls, reg=l_reg, obj=l_obj), (g_cls, g_obj, g_reg)


def train_step(params: DetectorParams, batch: list[TrainExample]) -> TrainLosses:
    """One SGD step over the batch; mutates ``params`` in place.

    A non-finite total loss raises :class:`NonFiniteLossError` before any
    update is applied.
    """
    losses, (g_cls, g_obj, g_reg) = loss_and_grads(params, batch)
    if not math.isfinite(losses.total):
        raise NonFiniteLossError(f"non-finite loss: cls={losses.cls} reg={losses.reg} obj={losses.obj}")
    params.w_cls -= params.lr * g_cls
    params.w_obj -= params.lr * g_obj
    params.w_reg -= params.lr * g_reg
    return losses


def build_training_examples(
    pc: PointCloud,
    target_boxes: list[Box3D],
    target_classes: list[int],
    target_weights: list[float],
    policy: ChannelPolicy,
    params: DetectorParams,
    cfg: DetectorConfig,
    rng_seed=None,
    background_weight: float = 1.0,
) -> list[TrainExample]:
    """Run the channel pipeline and match proposals to canonical-frame targets.

    Proposals matched by 3D IoU inherit the target's class, box, and weight;
    the rest become background RoIs with ``background_weight``. Channel-frame
    box targets are produced by pushing the matched target through each
    channel transform.
    """
    cs, grids, proposals = _channel_pipeline(pc, policy, params, cfg, rng_seed)
    rels = _relative_transforms(cs.transforms)
    t1_inv = invert(cs.transforms[0])
    examples = []
    for prop in proposals:
        canonical = prop.box if t1_inv.is_identity else apply_box(t1_inv, prop.box)
        best_iou, best_idx = 0.0, -1
        for idx, tgt in enumerate(target_boxes):
            iou = iou_3d(canonical, tgt)
            if iou > best_iou:
                best_iou, best_idx = iou, idx
        phis = [roi_features(prop.box, grid, rel, cfg) for grid, rel in zip(grids, rels)]
        anchors = [prop.box if rel.is_identity else apply_box(rel, prop.box) for rel in rels]
        if best_idx >= 0 and best_iou >= cfg.match_iou:
            channel_targets = [
                align_yaw_to_anchor(apply_box(t, target_boxes[best_idx]), anchor)
                for t, anchor in zip(cs.transforms, anchors)
            ]
            examples.append(
                TrainExample(
                    cls_feature=prop.feature,
                    channel_features=phis,
                    anchors=anchors,
                    targets=channel_targets,
                    target_class=target_classes[best_idx],
                    weight=float(target_weights[best_idx]),
                )
            )
        else:
            examples.append(
                TrainExample(
                    cls_feature=prop.feature,
                    channel_features=phis,
                    anchors=anchors,
                    targets=None,
                    target_class=0,
                    weight=background_weight,
                )
            )
    return examples


# ---------------------------------------------------------------------------
# parameter file format: 16-byte header (8-byte magic, u32 version, u32
# reserved), dimension table (u32 num_classes, u32 feat_dim, u32 box_dim,
# u32 reserved), then little-endian float64: lr, w_cls, w_obj, w_reg.
# ---------------------------------------------------------------------------

PARAMS_MAGIC = b"CADET3DP"
PARAMS_VERSION = 1


def save_params(params: DetectorParams, path) -> None:
    c = params.num_classes
    head = PARAMS_MAGIC + struct.pack("<II", PARAMS_VERSION, 0)
    dims = struct.pack("<IIII", c, N_FEATURES, BOX_DIM, 0)
    body = np.concatenate(
        [np.array([params.lr]), params.w_cls.ravel(), params.w_obj.ravel(), params.w_reg.ravel()]
    ).astype("<f8").tobytes()
    Path(path).write_bytes(head + dims + body)


def load_params(path) -> DetectorParams:
    raw = Path(path).read_bytes()
    if len(raw) < 32:
        raise ParamsFormatError(f"{path}: file too short for header")
    if raw[:8] != PARAMS_MAGIC:
        raise ParamsFormatError(f"{path}: bad magic {raw[:8]!r}")
    version, _ = struct.unpack("<II", raw[8:16])
    if version != PARAMS_VERSION:
        raise ParamsFormatError(f"{path}: unsupported version {version}")
    c, f, b, _ = struct.unpack("<IIII", raw[16:32])
    if f != N_FEATURES or b != BOX_DIM:
        raise ParamsFormatError(f"{path}: dimension table mismatch (F={f}, box={b})")
    n_vals = 1 + (c + 1) * f + c * f + c * b * f
    body = np.frombuffer(raw[32:], dtype="<f8")
    if len(body) != n_vals:
        raise ParamsFormatError(f"{path}: expected {n_vals} values, found {len(body)}")
    lr = float(body[0])
    off = 1
    w_cls = body[off : off + (c + 1) * f].reshape(c + 1, f).copy()
    off += (c + 1) * f
    w_obj = body[off : off + c * f].reshape(c, f).copy()
    off += c * f
    w_reg = body[off:].reshape(c, b, f).copy()
    return DetectorParams(w_cls=w_cls, w_obj=w_obj, w_reg=w_reg, lr=lr)
