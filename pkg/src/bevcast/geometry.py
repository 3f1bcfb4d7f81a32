"""Camera geometry: frustums, depth-weighted lifting, BEV pooling, warping.

Coordinate conventions used throughout the package:

* camera frame: x right, y down, z forward (pixels u along x, v along y);
* ego frame: x forward, y left, z up, origin on the ground plane;
* BEV raster: row r covers decreasing forward distance (row 0 is farthest
  ahead), column c covers decreasing lateral y (column 0 is leftmost).
  A metric point lands in cell ``r = floor((x_max - x)/res)``,
  ``c = floor((y_max - y)/res)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from bevcast import tensor as T
from bevcast.tensor import Tensor

_ORTHO_TOL = 1e-9


class SE3Transform:
    """Rigid transform: rotation matrix plus translation, meters."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation, validate: bool = True):
        r = np.asarray(rotation, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if validate:
            drift = max(
                float(np.abs(r.T @ r - np.eye(3)).max()),
                abs(float(np.linalg.det(r)) - 1.0),
            )
            if drift > _ORTHO_TOL:
                r = _reorthonormalize(r)
        self.rotation = r
        self.translation = t

    @staticmethod
    def identity() -> "SE3Transform":
        return SE3Transform(np.eye(3), np.zeros(3), validate=False)

    @staticmethod
    def from_matrix(m) -> "SE3Transform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {m.shape}")
        return SE3Transform(m[:3, :3], m[:3, 3])

    @staticmethod
    def from_yaw_translation(yaw: float, tx: float = 0.0, ty: float = 0.0,
                             tz: float = 0.0) -> "SE3Transform":
        c, s = np.cos(yaw), np.sin(yaw)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return SE3Transform(r, (tx, ty, tz), validate=False)

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "SE3Transform") -> "SE3Transform":
        """self ∘ other: apply ``other`` first, then ``self``."""
        r = self.rotation @ other.rotation
        t = self.rotation @ other.translation + self.translation
        return SE3Transform(_maybe_reortho(r), t, validate=False)

    def __matmul__(self, other):
        return self.compose(other)

    def inverse(self) -> "SE3Transform":
        rt = self.rotation.T
        return SE3Transform(rt, -rt @ self.translation, validate=False)

    def apply(self, points) -> np.ndarray:
        """Transform an array of points with trailing dim 3."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def planar(self) -> tuple[float, float, float]:
        """(yaw, tx, ty): the SE(2) shadow of this transform."""
        return self.yaw(), float(self.translation[0]), float(self.translation[1])

    def __repr__(self):
        y, tx, ty = self.planar()
        return f"SE3Transform(yaw={y:.4f}, t=({tx:.3f}, {ty:.3f}, {self.translation[2]:.3f}))"


def _reorthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def _maybe_reortho(r: np.ndarray) -> np.ndarray:
    if abs(float(np.abs(r.T @ r - np.eye(3)).max())) > _ORTHO_TOL:
        return _reorthonormalize(r)
    return r


def compose_egomotion(motions) -> SE3Transform:
    """Fold step motions, newest on the left: [m0, m1, m2] -> m2·m1·m0."""
    motions = list(motions)
    if not motions:
        raise ValueError("compose_egomotion requires a non-empty list")
    total = motions[0]
    for m in motions[1:]:
        total = m.compose(total)
    return SE3Transform(_maybe_reortho(total.rotation), total.translation, validate=False)


def present_from_past(step_motions) -> SE3Transform:
    """Transform taking coordinates in a past ego frame to the present frame.

    ``step_motions`` are the per-step ego motions a_i (frame i to i+1,
    chronological, with ``pose(i+1) = pose(i)·a_i``). Points satisfy
    ``p_present = (a_i · ... · a_{t-1})^{-1} p_past``.
    """
    chron = compose_egomotion(list(reversed(list(step_motions))))
    return chron.inverse()


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")


@dataclass(frozen=True)
class DepthSpec:
    d_min: float
    d_max: float
    d_size: float

    def __post_init__(self):
        if not (self.d_min < self.d_max and self.d_size > 0):
            raise ValueError("need d_min < d_max and d_size > 0")
        n = (self.d_max - self.d_min) / self.d_size
        if abs(n - round(n)) > 1e-9 or round(n) < 1:
            raise ValueError(f"depth range must hold an integral slice count, got {n}")

    @property
    def num_slices(self) -> int:
        return int(round((self.d_max - self.d_min) / self.d_size))

    def slice_depths(self) -> np.ndarray:
        return self.d_min + self.d_size * np.arange(self.num_slices)


@dataclass(frozen=True)
class BevSpec:
    x_extent: float
    y_extent: float
    resolution: float

    def __post_init__(self):
        for extent in (self.x_extent, self.y_extent):
            n = extent / self.resolution
            if abs(n - round(n)) > 1e-9 or round(n) < 1:
                raise ValueError("extent must be an integral number of cells")

    @property
    def height(self) -> int:
        return int(round(self.x_extent / self.resolution))

    @property
    def width(self) -> int:
        return int(round(self.y_extent / self.resolution))

    def cells_of_points(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(rows, cols, in_bounds) for metric points with trailing dim >= 2."""
        x = xy[..., 0]
        y = xy[..., 1]
        r = np.floor((self.x_extent / 2 - x) / self.resolution).astype(np.int64)
        c = np.floor((self.y_extent / 2 - y) / self.resolution).astype(np.int64)
        ok = (r >= 0) & (r < self.height) & (c >= 0) & (c < self.width)
        return r, c, ok

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Metric (x, y) of every cell center, each shaped [H, W]."""
        xs = self.x_extent / 2 - (np.arange(self.height) + 0.5) * self.resolution
        ys = self.y_extent / 2 - (np.arange(self.width) + 0.5) * self.resolution
        return np.broadcast_to(xs[:, None], (self.height, self.width)).copy(), \
            np.broadcast_to(ys[None, :], (self.height, self.width)).copy()

    def metric_to_pixel(self, xy: np.ndarray) -> np.ndarray:
        """Continuous raster coords (col_x, row_y) of metric points."""
        row = (self.x_extent / 2 - xy[..., 0]) / self.resolution - 0.5
        col = (self.y_extent / 2 - xy[..., 1]) / self.resolution - 0.5
        return np.stack([col, row], axis=-1)


class BevGrid:
    """A metric raster of per-cell feature vectors around the ego."""

    __slots__ = ("spec", "values", "dropped_points")

    def __init__(self, spec: BevSpec, values: Tensor, dropped_points: int = 0):
        if values.ndim != 3 or values.shape[1:] != (spec.height, spec.width):
            raise ValueError(
                f"grid values {values.shape} do not match spec {spec.height}x{spec.width}")
        self.spec = spec
        self.values = values
        self.dropped_points = dropped_points


@dataclass
class FrustumGrid:
    """Camera-frame 3D points for every (depth slice, feature row, column)."""

    points: np.ndarray  # [D, He, We, 3]
    depth_spec: DepthSpec = field(repr=False, default=None)

    def __post_init__(self):
        if self.points.ndim != 4 or self.points.shape[-1] != 3:
            raise ValueError(f"frustum points must be [D,He,We,3], got {self.points.shape}")

    @property
    def shape(self):
        return self.points.shape[:3]


def create_frustum(intrinsics: CameraIntrinsics, feature_stride: int,
                   depth_spec: DepthSpec) -> FrustumGrid:
    """Back-project every feature cell along equally spaced depth slices."""
    if intrinsics.width % feature_stride or intrinsics.height % feature_stride:
        raise ValueError(
            f"image {intrinsics.width}x{intrinsics.height} not divisible by stride {feature_stride}")
    we = intrinsics.width // feature_stride
    he = intrinsics.height // feature_stride
    u_px = (np.arange(we) + 0.5) * feature_stride - 0.5
    v_px = (np.arange(he) + 0.5) * feature_stride - 0.5
    depths = depth_spec.slice_depths()
    d = depths[:, None, None]
    x = (u_px[None, None, :] - intrinsics.cx) * d / intrinsics.fx
    y = (v_px[None, :, None] - intrinsics.cy) * d / intrinsics.fy
    z = np.broadcast_to(d, (depth_spec.num_slices, he, we))
    points = np.stack(np.broadcast_arrays(x, y, z), axis=-1).astype(np.float64)
    return FrustumGrid(points, depth_spec)


def lift_features(features: Tensor, depth_logits: Tensor, mode: str = "learned") -> Tensor:
    """Outer product of per-pixel features with a depth distribution.

    ``learned`` softmaxes the logits over the depth axis; ``uniform`` spreads
    mass equally over all slices and ignores the logits' values.
    """
    if features.ndim != 3 or depth_logits.ndim != 3:
        raise ValueError("lift_features expects [C,He,We] features and [D,He,We] logits")
    if features.shape[1:] != depth_logits.shape[1:]:
        raise ValueError(
            f"spatial dims disagree: {features.shape[1:]} vs {depth_logits.shape[1:]}")
    d = depth_logits.shape[0]
    if mode == "learned":
        probs = T.softmax(depth_logits, axis=0)
    elif mode == "uniform":
        probs = Tensor(np.full(depth_logits.shape, 1.0 / d))
    else:
        raise ValueError(f"unknown lift mode {mode!r}")
    f = features.reshape((features.shape[0], 1) + features.shape[1:])
    p = probs.reshape((1,) + probs.shape)
    return f * p


def splat_to_bev(lifted: Tensor, frustum: FrustumGrid, cam_to_ego: SE3Transform,
                 spec: BevSpec, z_range: tuple[float, float] = (-2.0, 4.0)) -> BevGrid:
    """Pool lifted camera features into BEV columns by nearest-cell binning.

    Cell assignment is constant w.r.t. the features, so gradients flow to
    feature values only. Out-of-range points are dropped and tallied on the
    returned grid.
    """
    c, d, he, we = lifted.shape
    if frustum.shape != (d, he, we):
        raise ValueError(f"frustum {frustum.shape} does not match lifted {(d, he, we)}")
    pts = cam_to_ego.apply(frustum.points.reshape(-1, 3))
    rows, cols, ok = spec.cells_of_points(pts)
    ok &= (pts[:, 2] >= z_range[0]) & (pts[:, 2] <= z_range[1])
    cells = rows[ok] * spec.width + cols[ok]
    values = lifted.reshape((c, d * he * we))[:, np.nonzero(ok)[0]]
    flat = T.scatter_columns(values, cells, spec.height * spec.width)
    grid = flat.reshape((c, spec.height, spec.width))
    return BevGrid(spec, grid, dropped_points=int((~ok).sum()))


def splat_cameras(lifted_list, frustums, cams_to_ego, spec: BevSpec,
                  z_range=(-2.0, 4.0)) -> BevGrid:
    """Sum splats of several cameras, accumulating in camera order."""
    if not lifted_list:
        raise ValueError("no cameras to splat")
    total = None
    dropped = 0
    for lifted, frustum, ext in zip(lifted_list, frustums, cams_to_ego):
        g = splat_to_bev(lifted, frustum, ext, spec, z_range)
        dropped += g.dropped_points
        total = g.values if total is None else total + g.values
    return BevGrid(spec, total, dropped_points=dropped)


def warp_bev(grid: BevGrid, motion: SE3Transform) -> BevGrid:
    """Resample a BEV raster under a planar rigid motion.

    The SE(3) motion is projected to SE(2) (yaw plus x/y translation); each
    output cell reads the input at the motion-inverse image of its center,
    bilinearly, zero outside.
    """
    spec = grid.spec
    coords = warp_coordinates(spec, motion)
    values = grid.values.reshape((1,) + grid.values.shape)
    warped = T.grid_sample_bilinear(values, Tensor(coords[None]))
    return BevGrid(spec, warped.reshape(grid.values.shape))


def warp_coordinates(spec: BevSpec, motion: SE3Transform) -> np.ndarray:
    """Sampling grid [H,W,2] realizing warp_bev's contract for grid_sample."""
    yaw, tx, ty = motion.planar()
    cos_y, sin_y = np.cos(yaw), np.sin(yaw)
    inv_r = np.array([[cos_y, sin_y], [-sin_y, cos_y]])
    xs, ys = spec.cell_centers()
    pts = np.stack([xs, ys], axis=-1)
    src = (pts - np.array([tx, ty])) @ inv_r.T
    return spec.metric_to_pixel(src)


# -- rig description ----------------------------------------------------------


@dataclass
class CameraRig:
    """Named cameras with intrinsics and camera-to-ego extrinsics."""

    names: list
    intrinsics: list
    extrinsics: list  # SE3Transform, camera frame -> ego frame

    def __len__(self):
        return len(self.names)

    def to_json_dict(self) -> dict:
        cams = []
        for name, intr, ext in zip(self.names, self.intrinsics, self.extrinsics):
            cams.append({
                "name": name,
                "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
                "width": intr.width, "height": intr.height,
                "cam_to_ego": ext.to_matrix().tolist(),
            })
        return {"version": 1, "cameras": cams}

    @staticmethod
    def from_json_dict(obj: dict) -> "CameraRig":
        if obj.get("version") != 1:
            raise ValueError(f"unsupported rig version {obj.get('version')!r}")
        names, intrs, exts = [], [], []
        for cam in obj["cameras"]:
            names.append(cam["name"])
            intrs.append(CameraIntrinsics(cam["fx"], cam["fy"], cam["cx"], cam["cy"],
                                          cam["width"], cam["height"]))
            exts.append(SE3Transform.from_matrix(np.array(cam["cam_to_ego"])))
        return CameraRig(names, intrs, exts)

    def save(self, path) -> None:
        with open(path, "w") as fp:
            json.dump(self.to_json_dict(), fp, indent=1, sort_keys=True)

    @staticmethod
    def load(path) -> "CameraRig":
        with open(path) as fp:
            return CameraRig.from_json_dict(json.load(fp))
