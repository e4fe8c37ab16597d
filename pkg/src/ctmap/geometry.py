"""Rigid-body poses, triangle meshes, and the pinhole camera model.

Quaternions are stored as (w, x, y, z) unit vectors. Poses map points from
the local (mesh/camera) frame into the world frame: p_world = R p + t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_QUAT_TOL = 1e-9


class ObjParseError(ValueError):
    """Malformed Wavefront-OBJ input; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z)
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("zero-norm quaternion")
    return q / n


def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis / n])


def quat_from_rotvec(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        # first-order expansion keeps sampling smooth near zero
        q = np.concatenate([[1.0], 0.5 * v])
        return quat_normalize(q)
    return quat_from_axis_angle(v, angle)


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    w = min(1.0, max(-1.0, q[0]))
    angle = 2.0 * math.acos(w)
    s = math.sqrt(max(0.0, 1.0 - w * w))
    if s < 1e-12:
        return 2.0 * q[1:4]
    return q[1:4] / s * angle


def quat_angle(q1: np.ndarray, q2: np.ndarray) -> float:
    """Absolute rotation angle between two unit quaternions, in radians."""
    d = abs(float(np.dot(q1, q2)))
    return 2.0 * math.acos(min(1.0, d))


def quat_slerp(q1: np.ndarray, q2: np.ndarray, alpha: float) -> np.ndarray:
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    dot = float(np.dot(q1, q2))
    if dot < 0.0:
        q2 = -q2
        dot = -dot
    if dot > 1.0 - 1e-10:
        return quat_normalize(q1 + alpha * (q2 - q1))
    theta = math.acos(min(1.0, dot))
    s = math.sin(theta)
    return (math.sin((1 - alpha) * theta) * q1 + math.sin(alpha * theta) * q2) / s


def random_quaternion(rng: np.random.Generator) -> np.ndarray:
    """Uniform sample over SO(3) (Shoemake's subgroup algorithm)."""
    u1, u2, u3 = rng.random(3)
    a = math.sqrt(1.0 - u1)
    b = math.sqrt(u1)
    return np.array(
        [
            a * math.sin(2 * math.pi * u2),
            a * math.cos(2 * math.pi * u2),
            b * math.sin(2 * math.pi * u3),
            b * math.cos(2 * math.pi * u3),
        ]
    )


# ---------------------------------------------------------------------------
# core types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose6D:
    """Rigid transform: p_world = R(quaternion) p + translation."""

    translation: np.ndarray
    quaternion: np.ndarray  # (w, x, y, z), unit norm

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3)
        q = np.asarray(self.quaternion, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {n} too far from 1")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "quaternion", q / n)

    @staticmethod
    def identity() -> "Pose6D":
        return Pose6D(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def from_rt(rotation: np.ndarray, translation: np.ndarray) -> "Pose6D":
        """Build from a 3x3 rotation matrix and a translation vector."""
        r = np.asarray(rotation, dtype=float)
        tr = np.trace(r)
        if tr > 0:
            s = math.sqrt(tr + 1.0) * 2
            q = np.array(
                [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
            )
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            q = np.array(
                [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
            )
        elif r[1, 1] > r[2, 2]:
            s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            q = np.array(
                [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
            )
        else:
            s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            q = np.array(
                [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
            )
        return Pose6D(np.asarray(translation, dtype=float), quat_normalize(q))

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quaternion)

    def compose(self, other: "Pose6D") -> "Pose6D":
        """self o other: apply `other` first, then `self`."""
        r = self.rotation_matrix
        t = r @ other.translation + self.translation
        q = quat_normalize(quat_multiply(self.quaternion, other.quaternion))
        return Pose6D(t, q)

    def inverse(self) -> "Pose6D":
        qi = quat_conjugate(self.quaternion)
        ti = -(quat_to_matrix(qi) @ self.translation)
        return Pose6D(ti, qi)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array or a single 3-vector into the parent frame."""
        p = np.asarray(points, dtype=float)
        single = p.ndim == 1
        p = np.atleast_2d(p)
        out = p @ self.rotation_matrix.T + self.translation
        return out[0] if single else out


def pose_error(a: Pose6D, b: Pose6D) -> tuple[float, float]:
    """(translation distance m, rotation angle rad) between two poses."""
    dt = float(np.linalg.norm(a.translation - b.translation))
    dr = quat_angle(a.quaternion, b.quaternion)
    return dt, dr


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        mn = np.asarray(self.min, dtype=float).reshape(3)
        mx = np.asarray(self.max, dtype=float).reshape(3)
        if np.any(mn > mx + 1e-12):
            raise ValueError("AABB min exceeds max")
        object.__setattr__(self, "min", mn)
        object.__setattr__(self, "max", mx)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def size(self) -> np.ndarray:
        return self.max - self.min

    def corners(self) -> np.ndarray:
        mn, mx = self.min, self.max
        return np.array(
            [[x, y, z] for x in (mn[0], mx[0]) for y in (mn[1], mx[1]) for z in (mn[2], mx[2])]
        )

    def overlap_depth(self, other: "Aabb") -> float:
        """Smallest-axis penetration depth (m); 0 when the boxes do not overlap."""
        lo = np.maximum(self.min, other.min)
        hi = np.minimum(self.max, other.max)
        ext = hi - lo
        if np.any(ext <= 0):
            return 0.0
        return float(np.min(ext))

    def xy_overlaps(self, other: "Aabb") -> bool:
        return bool(
            self.min[0] < other.max[0]
            and other.min[0] < self.max[0]
            and self.min[1] < other.max[1]
            and other.min[1] < self.max[1]
        )


@dataclass(frozen=True)
class TriMesh:
    """Triangle soup: (N, 3) float vertices and (M, 3) int vertex indices."""

    vertices: np.ndarray
    triangles: np.ndarray
    degenerate_bbox: bool = field(default=False, compare=False)

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=float).reshape(-1, 3))
        t = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3))
        if t.shape[0] < 1:
            raise ValueError("mesh has no triangles")
        if t.min() < 0 or t.max() >= v.shape[0]:
            raise ValueError("triangle index out of range")
        ext = v.max(axis=0) - v.min(axis=0)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "degenerate_bbox", bool(np.any(ext <= 1e-12)))

    def aabb(self) -> Aabb:
        return Aabb(self.vertices.min(axis=0), self.vertices.max(axis=0))


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("require 0 < near < far")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")


@dataclass(frozen=True)
class SupportRegion:
    """Horizontal rectangle atop an object where another object may rest."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z: float


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def parse_obj(text: str) -> TriMesh:
    """Parse the v/f subset of Wavefront OBJ; polygons are fan-triangulated.

    Raises ObjParseError with a 1-based line number on malformed numeric
    fields or out-of-range indices, and ValueError when no faces are present.
    """
    vertices: list[list[float]] = []
    triangles: list[tuple[int, int, int]] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        toks = raw.split()
        if not toks:
            continue
        if toks[0] == "v":
            if len(toks) < 4:
                raise ObjParseError(line_no, "vertex needs 3 coordinates")
            try:
                vertices.append([float(toks[1]), float(toks[2]), float(toks[3])])
            except ValueError:
                raise ObjParseError(line_no, f"bad vertex coordinate in {raw!r}") from None
        elif toks[0] == "f":
            if len(toks) < 4:
                raise ObjParseError(line_no, "face needs at least 3 indices")
            idx = []
            for tok in toks[1:]:
                head = tok.split("/")[0]
                try:
                    i = int(head)
                except ValueError:
                    raise ObjParseError(line_no, f"bad face index {tok!r}") from None
                if i < 1 or i > len(vertices):
                    raise ObjParseError(line_no, f"face index {i} out of range")
                idx.append(i - 1)
            for k in range(1, len(idx) - 1):
                triangles.append((idx[0], idx[k], idx[k + 1]))
        # all other prefixes (vn, vt, o, g, usemtl, comments, ...) ignored
    if not triangles:
        raise ValueError("OBJ defines zero faces")
    return TriMesh(np.array(vertices), np.array(triangles))


def load_obj(path) -> TriMesh:
    with open(path, "r", encoding="utf-8") as f:
        return parse_obj(f.read())


def serialize_obj(mesh: TriMesh) -> str:
    lines = [f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}" for v in mesh.vertices]
    lines += [f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}" for t in mesh.triangles]
    return "\n".join(lines) + "\n"


def transform(mesh: TriMesh, pose: Pose6D) -> TriMesh:
    """Pose a mesh: every vertex mapped to R v + t, triangle list unchanged."""
    return TriMesh(pose.apply(mesh.vertices), mesh.triangles)


def posed_aabb(mesh: TriMesh, pose: Pose6D) -> Aabb:
    v = pose.apply(mesh.vertices)
    return Aabb(v.min(axis=0), v.max(axis=0))


def project_point(camera: CameraModel, p_cam: np.ndarray):
    """Pinhole projection of a camera-frame point; None when z < near."""
    x, y, z = p_cam
    if z < camera.near:
        return None
    return (camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy)


def project_points(camera: CameraModel, pts_cam: np.ndarray):
    """Vectorized projection: returns (N, 2) pixels and an in-front mask (z >= near)."""
    pts = np.asarray(pts_cam, dtype=float).reshape(-1, 3)
    z = pts[:, 2]
    valid = z >= camera.near
    zs = np.where(valid, z, 1.0)
    u = camera.fx * pts[:, 0] / zs + camera.cx
    v = camera.fy * pts[:, 1] / zs + camera.cy
    return np.stack([u, v], axis=1), valid


def back_project(camera: CameraModel, u: float, v: float, depth: float) -> np.ndarray:
    """Invert the pinhole model: pixel plus depth to a camera-frame 3D point."""
    return np.array(
        [(u - camera.cx) / camera.fx * depth, (v - camera.cy) / camera.fy * depth, depth]
    )


def support_region(mesh: TriMesh, pose: Pose6D) -> SupportRegion:
    """Top face of the posed mesh's AABB: the area it can physically support."""
    box = posed_aabb(mesh, pose)
    return SupportRegion(
        x_min=float(box.min[0]),
        x_max=float(box.max[0]),
        y_min=float(box.min[1]),
        y_max=float(box.max[1]),
        z=float(box.max[2]),
    )


def sample_support_placement(
    region: SupportRegion, mesh: TriMesh, rng: np.random.Generator
) -> Pose6D:
    """Place `mesh` upright on a support region: uniform x-y center, uniform yaw,
    AABB bottom resting at the support height."""
    yaw = rng.uniform(0.0, 2.0 * math.pi)
    cx = rng.uniform(region.x_min, region.x_max)
    cy = rng.uniform(region.y_min, region.y_max)
    q = quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), yaw)
    rotated = mesh.vertices @ quat_to_matrix(q).T
    mn = rotated.min(axis=0)
    mx = rotated.max(axis=0)
    center_xy = 0.5 * (mn[:2] + mx[:2])
    t = np.array([cx - center_xy[0], cy - center_xy[1], region.z - mn[2]])
    return Pose6D(t, q)
