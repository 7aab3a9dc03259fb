"""Rotated-box geometry: 7-DoF boxes, rigid poses, residual codecs, BEV/3D IoU.

Conventions used throughout the package:

* headings are counter-clockwise radians about +z, zero along +x, wrapped
  to [-pi, pi)
* a "box array" is a float64 ndarray of shape (N, 7) with columns
  (cx, cy, cz, length, width, height, heading)
* BEV corners are ordered counter-clockwise starting at (+l/2, +w/2) in
  the box frame, so polygon clipping is deterministic
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

BOX_FIELDS = ("cx", "cy", "cz", "length", "width", "height", "heading")

# Corner order in the box frame, CCW from (+l/2, +w/2).
_CORNER_SIGNS = np.array(
    [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]], dtype=np.float64
)


def wrap_angle(theta):
    """Wrap an angle (scalar or array) into [-pi, pi).

    Raises ValueError on non-finite input.
    """
    arr = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("angle must be finite")
    wrapped = np.mod(arr + np.pi, TWO_PI) - np.pi
    if np.isscalar(theta) or arr.ndim == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Box7:
    """A 7-DoF oriented 3D box: center, size, heading.

    Sizes must be strictly positive; the heading is wrapped into
    [-pi, pi) on construction.
    """

    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    heading: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.cz, self.length, self.width, self.height, self.heading)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("box parameters must be finite")
        if self.length <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("box sizes must be strictly positive")
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.cx, self.cy, self.cz, self.length, self.width, self.height, self.heading],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, arr) -> "Box7":
        arr = np.asarray(arr, dtype=np.float64).reshape(7)
        return cls(*(float(v) for v in arr))


@dataclass(frozen=True)
class ResidualVec:
    """Normalized differences between a box and a reference box."""

    dx: float
    dy: float
    dz: float
    dl: float
    dw: float
    dh: float
    dtheta: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.dx, self.dy, self.dz, self.dl, self.dw, self.dh, self.dtheta],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, arr) -> "ResidualVec":
        arr = np.asarray(arr, dtype=np.float64).reshape(7)
        return cls(*(float(v) for v in arr))


class Pose:
    """Rigid transform world<-ego stored as a 4x4 homogeneous matrix.

    The rotation block must be a proper rotation (orthonormal, det +1)
    within 1e-9 and the last row must be (0, 0, 0, 1).
    """

    __slots__ = ("matrix",)

    def __init__(self, matrix):
        m = np.array(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("pose matrix must be 4x4")
        if not np.all(np.isfinite(m)):
            raise ValueError("pose matrix must be finite")
        r = m[:3, :3]
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-9:
            raise ValueError("pose rotation block is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("pose rotation block must be a proper rotation")
        if np.max(np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > 0.0:
            raise ValueError("pose last row must be (0, 0, 0, 1)")
        m.setflags(write=False)
        self.matrix = m

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(4))

    @classmethod
    def from_xyz_yaw(cls, x: float, y: float, z: float, yaw: float) -> "Pose":
        c, s = math.cos(yaw), math.sin(yaw)
        m = np.array(
            [[c, -s, 0.0, x], [s, c, 0.0, y], [0.0, 0.0, 1.0, z], [0.0, 0.0, 0.0, 1.0]]
        )
        return cls(m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @property
    def yaw(self) -> float:
        return math.atan2(self.matrix[1, 0], self.matrix[0, 0])

    def inverse(self) -> "Pose":
        r = self.rotation.T
        t = -r @ self.translation
        m = np.eye(4)
        m[:3, :3] = r
        m[:3, 3] = t
        return Pose(m)

    def compose(self, other: "Pose") -> "Pose":
        """Return self @ other (apply `other` first)."""
        return Pose(self.matrix @ other.matrix)

    def transform_points(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts @ self.rotation.T + self.translation

    def __eq__(self, other):
        return isinstance(other, Pose) and np.array_equal(self.matrix, other.matrix)

    def __repr__(self):
        t = self.translation
        return f"Pose(xyz=({t[0]:.3f}, {t[1]:.3f}, {t[2]:.3f}), yaw={self.yaw:.4f})"


def boxes_as_array(boxes) -> np.ndarray:
    """Coerce a Box7 list / Box7 / ndarray into an (N, 7) float64 array."""
    if isinstance(boxes, Box7):
        return boxes.as_array()[None, :]
    if isinstance(boxes, np.ndarray):
        arr = np.asarray(boxes, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != 7:
            raise ValueError("box array must have shape (N, 7)")
        return arr
    return np.stack([b.as_array() for b in boxes]) if boxes else np.zeros((0, 7))


def _check_positive_sizes(arr: np.ndarray):
    if arr.shape[0] and np.any(arr[:, 3:6] <= 0):
        raise ValueError("box sizes must be strictly positive")


def encode_residuals(gt: Box7, ref: Box7) -> ResidualVec:
    """Encode `gt` relative to `ref`.

    Centers are normalized by the reference BEV diagonal (x, y) and the
    reference height (z); sizes are log ratios; the heading is the
    wrapped difference.
    """
    res = encode_residual_array(gt.as_array()[None], ref.as_array()[None])
    return ResidualVec.from_array(res[0])


def decode_residuals(res: ResidualVec, ref: Box7) -> Box7:
    """Exact inverse of :func:`encode_residuals`."""
    box = decode_residual_array(res.as_array()[None], ref.as_array()[None])
    return Box7.from_array(box[0])


def encode_residual_array(gt: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Vectorized residual encoding for broadcastable (..., 7) box arrays."""
    gt = np.asarray(gt, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if np.any(ref[..., 3:6] <= 0):
        raise ValueError("reference box sizes must be strictly positive")
    if np.any(gt[..., 3:6] <= 0):
        raise ValueError("box sizes must be strictly positive")
    diag = np.hypot(ref[..., 3], ref[..., 4])
    out = np.empty(np.broadcast_shapes(gt.shape, ref.shape), dtype=np.float64)
    out[..., 0] = (gt[..., 0] - ref[..., 0]) / diag
    out[..., 1] = (gt[..., 1] - ref[..., 1]) / diag
    out[..., 2] = (gt[..., 2] - ref[..., 2]) / ref[..., 5]
    out[..., 3:6] = np.log(gt[..., 3:6] / ref[..., 3:6])
    out[..., 6] = wrap_angle(gt[..., 6] - ref[..., 6])
    return out


def decode_residual_array(res: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Vectorized inverse of :func:`encode_residual_array`."""
    res = np.asarray(res, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if np.any(ref[..., 3:6] <= 0):
        raise ValueError("reference box sizes must be strictly positive")
    diag = np.hypot(ref[..., 3], ref[..., 4])
    out = np.empty(np.broadcast_shapes(res.shape, ref.shape), dtype=np.float64)
    out[..., 0] = ref[..., 0] + res[..., 0] * diag
    out[..., 1] = ref[..., 1] + res[..., 1] * diag
    out[..., 2] = ref[..., 2] + res[..., 2] * ref[..., 5]
    out[..., 3:6] = ref[..., 3:6] * np.exp(res[..., 3:6])
    out[..., 6] = wrap_angle(res[..., 6] + ref[..., 6])
    return out


def box_corners_bev(boxes) -> np.ndarray:
    """BEV corners of shape (N, 4, 2), CCW starting at (+l/2, +w/2)."""
    arr = boxes_as_array(boxes)
    half = arr[:, None, 3:5] * 0.5 * _CORNER_SIGNS[None, :, :]
    c, s = np.cos(arr[:, 6]), np.sin(arr[:, 6])
    x = half[:, :, 0] * c[:, None] - half[:, :, 1] * s[:, None] + arr[:, None, 0]
    y = half[:, :, 0] * s[:, None] + half[:, :, 1] * c[:, None] + arr[:, None, 1]
    return np.stack([x, y], axis=-1)


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a CCW polygon given as (K, 2) vertices."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Clip polygon `subject` by convex CCW polygon `clip`.

    Sequential half-plane cutting in double precision, no epsilon
    snapping; points exactly on an edge are kept.
    """
    output = subject
    n_clip = len(clip)
    for k in range(n_clip):
        if len(output) < 3:
            return np.zeros((0, 2))
        p = clip[k]
        q = clip[(k + 1) % n_clip]
        ex, ey = q[0] - p[0], q[1] - p[1]
        # signed distance (scaled); >= 0 means inside for a CCW clip polygon
        side = ex * (output[:, 1] - p[1]) - ey * (output[:, 0] - p[0])
        nxt = []
        m = len(output)
        for i in range(m):
            j = (i + 1) % m
            if side[i] >= 0.0:
                nxt.append(output[i])
            if (side[i] > 0.0 > side[j]) or (side[j] > 0.0 > side[i]):
                t = side[i] / (side[i] - side[j])
                nxt.append(output[i] + t * (output[j] - output[i]))
        output = np.asarray(nxt) if nxt else np.zeros((0, 2))
    return output


def _bev_intersection_area(a: np.ndarray, b: np.ndarray) -> float:
    ca = box_corners_bev(a)[0]
    cb = box_corners_bev(b)[0]
    return polygon_area(clip_convex(ca, cb))


def _canonical_pair(a: np.ndarray, b: np.ndarray):
    """Order two 7-vectors deterministically so IoU is exactly symmetric."""
    for va, vb in zip(a, b):
        if va < vb:
            return a, b
        if va > vb:
            return b, a
    return a, b


def iou_bev(a, b) -> float:
    """Intersection-over-union of the rotated BEV footprints of two boxes."""
    aa = boxes_as_array(a)[0]
    bb = boxes_as_array(b)[0]
    _check_positive_sizes(aa[None])
    _check_positive_sizes(bb[None])
    first, second = _canonical_pair(aa, bb)
    inter = _bev_intersection_area(first, second)
    area1 = first[3] * first[4]
    area2 = second[3] * second[4]
    union = area1 + area2 - inter
    return min(max(inter / union, 0.0), 1.0)


def _z_overlap(a: np.ndarray, b: np.ndarray) -> float:
    top = min(a[2] + 0.5 * a[5], b[2] + 0.5 * b[5])
    bot = max(a[2] - 0.5 * a[5], b[2] - 0.5 * b[5])
    return max(0.0, top - bot)


def iou_3d(a, b) -> float:
    """Volumetric IoU: BEV intersection area times z-overlap, over union."""
    aa = boxes_as_array(a)[0]
    bb = boxes_as_array(b)[0]
    _check_positive_sizes(aa[None])
    _check_positive_sizes(bb[None])
    first, second = _canonical_pair(aa, bb)
    oz = _z_overlap(first, second)
    if oz == 0.0:
        return 0.0
    inter = _bev_intersection_area(first, second) * oz
    vol1 = first[3] * first[4] * first[5]
    vol2 = second[3] * second[4] * second[5]
    union = vol1 + vol2 - inter
    return min(max(inter / union, 0.0), 1.0)


def iou_matrix(a, b, mode: str = "3d") -> np.ndarray:
    """Pairwise IoU between box arrays `a` (G, 7) and `b` (N, 7).

    Distant pairs are skipped via a circumscribed-circle test; `mode`
    selects "bev" or "3d" overlap.
    """
    if mode not in ("bev", "3d"):
        raise ValueError(f"unknown IoU mode {mode!r}")
    fn = iou_bev if mode == "bev" else iou_3d
    aa = boxes_as_array(a)
    bb = boxes_as_array(b)
    out = np.zeros((aa.shape[0], bb.shape[0]), dtype=np.float64)
    if out.size == 0:
        return out
    ra = 0.5 * np.hypot(aa[:, 3], aa[:, 4])
    rb = 0.5 * np.hypot(bb[:, 3], bb[:, 4])
    d2 = (aa[:, None, 0] - bb[None, :, 0]) ** 2 + (aa[:, None, 1] - bb[None, :, 1]) ** 2
    near = d2 <= (ra[:, None] + rb[None, :]) ** 2
    for i, j in zip(*np.nonzero(near)):
        out[i, j] = fn(aa[i], bb[j])
    return out


def transform_box_array(boxes, src: Pose, dst: Pose) -> np.ndarray:
    """Re-express boxes given in `src` ego coordinates in `dst` ego coordinates."""
    arr = boxes_as_array(boxes).copy()
    rel = dst.inverse().compose(src)
    if arr.shape[0] == 0:
        return arr
    arr[:, 0:3] = rel.transform_points(arr[:, 0:3])
    arr[:, 6] = wrap_angle(arr[:, 6] + rel.yaw)
    return arr


def transform_boxes(boxes, src: Pose, dst: Pose):
    """Box7-list variant of :func:`transform_box_array` (sizes unchanged)."""
    arr = transform_box_array(boxes, src, dst)
    return [Box7.from_array(row) for row in arr]


def transform_velocities(vel_xy, src: Pose, dst: Pose) -> np.ndarray:
    """Rotate (N, 2) planar velocity vectors from `src` into `dst` coordinates."""
    v = np.asarray(vel_xy, dtype=np.float64).reshape(-1, 2)
    rel = dst.inverse().compose(src)
    yaw = rel.yaw
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s], [s, c]])
    return v @ rot.T
