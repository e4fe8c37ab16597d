"""Software depth rendering and the visibility/similarity primitives.

The rasterizer is a z-buffer over screen-space barycentric coordinates with
perspective-correct depth, sampled at pixel centers. Invalid (no-hit) pixels
hold 0.0; valid depths lie in [near, far].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import Aabb, CameraModel, Pose6D, TriMesh, posed_aabb, project_points

INVALID_DEPTH = 0.0


@dataclass(frozen=True)
class DepthImage:
    width: int
    height: int
    depth: np.ndarray  # (height, width) float64, 0.0 where no hit

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=float)
        if d.shape != (self.height, self.width):
            raise ValueError(f"depth shape {d.shape} != ({self.height}, {self.width})")
        object.__setattr__(self, "depth", d)

    def valid_mask(self) -> np.ndarray:
        return self.depth > 0.0


@dataclass(frozen=True)
class BBox2D:
    """Axis-aligned pixel box, clipped to the image bounds on construction."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @staticmethod
    def clipped(x_min, y_min, x_max, y_max, width, height) -> "BBox2D | None":
        x0 = max(0.0, min(float(x_min), float(x_max)))
        y0 = max(0.0, min(float(y_min), float(y_max)))
        x1 = min(float(width), max(float(x_min), float(x_max)))
        y1 = min(float(height), max(float(y_min), float(y_max)))
        if x1 <= x0 or y1 <= y0:
            return None
        return BBox2D(x0, y0, x1, y1)

    @property
    def area(self) -> float:
        return max(0.0, self.x_max - self.x_min) * max(0.0, self.y_max - self.y_min)

    def pixel_window(self) -> tuple[int, int, int, int]:
        """(x0, y0, x1, y1) integer bounds of pixels whose centers fall inside;
        x1/y1 exclusive."""
        x0 = int(math.ceil(self.x_min - 0.5))
        y0 = int(math.ceil(self.y_min - 0.5))
        x1 = int(math.floor(self.x_max - 0.5)) + 1
        y1 = int(math.floor(self.y_max - 0.5)) + 1
        return max(0, x0), max(0, y0), max(x0, x1), max(y0, y1)

    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)


@njit(cache=True)
def _raster_core(us, vs, zs, tris, x0, y0, far, zbuf):
    """Z-buffer rasterization of screen-space triangles into a window buffer.

    us, vs: per-vertex pixel coordinates; zs: per-vertex camera depth (all
    >= near, near-plane clipping happens upstream). zbuf is (h, w) initialized
    to +inf; pixel (px, py) samples at (x0 + px + 0.5, y0 + py + 0.5).
    """
    h, w = zbuf.shape
    for ti in range(tris.shape[0]):
        i0, i1, i2 = tris[ti, 0], tris[ti, 1], tris[ti, 2]
        ax, ay, az = us[i0], vs[i0], zs[i0]
        bx, by, bz = us[i1], vs[i1], zs[i1]
        cx, cy, cz = us[i2], vs[i2], zs[i2]

        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area < 0.0:
            bx, cx = cx, bx
            by, cy = cy, by
            bz, cz = cz, bz
            area = -area
        if area < 1e-12:
            continue

        lo_x = min(ax, min(bx, cx)) - x0 - 0.5
        hi_x = max(ax, max(bx, cx)) - x0 - 0.5
        lo_y = min(ay, min(by, cy)) - y0 - 0.5
        hi_y = max(ay, max(by, cy)) - y0 - 0.5
        px0 = max(0, int(math.ceil(lo_x)))
        px1 = min(w - 1, int(math.floor(hi_x)))
        py0 = max(0, int(math.ceil(lo_y)))
        py1 = min(h - 1, int(math.floor(hi_y)))
        if px1 < px0 or py1 < py0:
            continue

        ia, ib, ic = 1.0 / az, 1.0 / bz, 1.0 / cz
        eps = -1e-9 * area
        for py in range(py0, py1 + 1):
            sy = y0 + py + 0.5
            for px in range(px0, px1 + 1):
                sx = x0 + px + 0.5
                w0 = (bx - sx) * (cy - sy) - (by - sy) * (cx - sx)
                w1 = (cx - sx) * (ay - sy) - (cy - sy) * (ax - sx)
                w2 = (ax - sx) * (by - sy) - (ay - sy) * (bx - sx)
                if w0 < eps or w1 < eps or w2 < eps:
                    continue
                l0 = w0 / area
                l1 = w1 / area
                l2 = w2 / area
                inv_z = l0 * ia + l1 * ib + l2 * ic
                z = 1.0 / inv_z
                if z <= far and z < zbuf[py, px]:
                    zbuf[py, px] = z


def _clip_near(tri_cam: np.ndarray, near: float) -> list[np.ndarray]:
    """Sutherland-Hodgman clip of one camera-frame triangle against z = near.

    Returns 0..2 triangles as (3, 3) arrays. Only called for triangles that
    straddle the near plane, which is rare in practice.
    """
    out: list[np.ndarray] = []
    poly = [tri_cam[0], tri_cam[1], tri_cam[2]]
    clipped: list[np.ndarray] = []
    for i in range(len(poly)):
        a = poly[i]
        b = poly[(i + 1) % len(poly)]
        a_in = a[2] >= near
        b_in = b[2] >= near
        if a_in:
            clipped.append(a)
        if a_in != b_in:
            t = (near - a[2]) / (b[2] - a[2])
            clipped.append(a + t * (b - a))
    for k in range(1, len(clipped) - 1):
        out.append(np.stack([clipped[0], clipped[k], clipped[k + 1]]))
    return out


def _render_window(
    items: list[tuple[TriMesh, Pose6D]],
    camera: CameraModel,
    camera_pose: Pose6D,
    x0: int,
    y0: int,
    w: int,
    h: int,
) -> np.ndarray:
    """Depth buffer for a pixel window; 0.0 marks no-hit pixels."""
    zbuf = np.full((h, w), np.inf)
    if w <= 0 or h <= 0:
        return np.zeros((h, w))
    world_to_cam = camera_pose.inverse()
    for mesh, pose in items:
        cam_pts = world_to_cam.apply(pose.apply(mesh.vertices))
        z = cam_pts[:, 2]
        tris = mesh.triangles
        behind = z < camera.near
        if behind.all():
            continue
        if behind.any():
            tri_behind = behind[tris].any(axis=1)
            safe = tris[~tri_behind]
            extra = []
            for tri in tris[tri_behind]:
                if behind[tri].all():
                    continue
                extra.extend(_clip_near(cam_pts[tri], camera.near))
            if extra:
                base = cam_pts.shape[0]
                cam_pts = np.concatenate([cam_pts] + [e for e in extra])
                new_tris = base + 3 * np.arange(len(extra))[:, None] + np.arange(3)[None, :]
                tris = np.concatenate([safe, new_tris]) if safe.size else new_tris
            else:
                tris = safe
            if tris.shape[0] == 0:
                continue
            z = cam_pts[:, 2]
        zs = np.maximum(z, camera.near)  # clipped verts sit exactly on near
        us = camera.fx * cam_pts[:, 0] / zs + camera.cx
        vs = camera.fy * cam_pts[:, 1] / zs + camera.cy
        _raster_core(
            np.ascontiguousarray(us),
            np.ascontiguousarray(vs),
            np.ascontiguousarray(zs),
            np.ascontiguousarray(tris, dtype=np.int64),
            float(x0),
            float(y0),
            camera.far,
            zbuf,
        )
    zbuf[~np.isfinite(zbuf)] = INVALID_DEPTH
    return zbuf


def render_depth(
    items: list[tuple[TriMesh, Pose6D]], camera: CameraModel, camera_pose: Pose6D
) -> DepthImage:
    """Render posed meshes to a full-frame depth image (nearest surface wins)."""
    buf = _render_window(items, camera, camera_pose, 0, 0, camera.width, camera.height)
    return DepthImage(camera.width, camera.height, buf)


def project_bbox(
    mesh: TriMesh, pose: Pose6D, camera: CameraModel, camera_pose: Pose6D
) -> BBox2D | None:
    """Minimum enclosing image box of the projected vertices, or None when
    out of view (all vertices behind the camera, or the clipped box is empty)."""
    cam_pts = camera_pose.inverse().apply(pose.apply(mesh.vertices))
    px, valid = project_points(camera, cam_pts)
    if not valid.any():
        return None
    px = px[valid]
    return BBox2D.clipped(
        px[:, 0].min(), px[:, 1].min(), px[:, 0].max(), px[:, 1].max(), camera.width, camera.height
    )


def in_frustum(aabb: Aabb, camera: CameraModel, camera_pose: Pose6D) -> bool:
    """True when at least one AABB corner projects inside the image with
    near <= z <= far."""
    corners = camera_pose.inverse().apply(aabb.corners())
    px, valid = project_points(camera, corners)
    z = corners[:, 2]
    ok = (
        valid
        & (z <= camera.far)
        & (px[:, 0] >= 0)
        & (px[:, 0] < camera.width)
        & (px[:, 1] >= 0)
        & (px[:, 1] < camera.height)
    )
    return bool(ok.any())


def visibility(
    mesh: TriMesh,
    pose: Pose6D,
    full_scene: list[tuple[TriMesh, Pose6D]],
    camera: CameraModel,
    camera_pose: Pose6D,
    depth_tolerance: float = 0.01,
    scene_depth: DepthImage | None = None,
) -> tuple[bool, float]:
    """(in_frustum, visible_fraction) of one object inside a full scene.

    visible_fraction counts object-only pixels whose full-scene depth agrees
    within depth_tolerance, over all object-only covered pixels. A pre-rendered
    scene_depth may be supplied to avoid re-rendering the scene.
    """
    frustum = in_frustum(posed_aabb(mesh, pose), camera, camera_pose)
    box = project_bbox(mesh, pose, camera, camera_pose)
    if box is None:
        return frustum, 0.0
    x0, y0, x1, y1 = box.pixel_window()
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        return frustum, 0.0
    obj = _render_window([(mesh, pose)], camera, camera_pose, x0, y0, w, h)
    if scene_depth is None:
        scene = _render_window(full_scene, camera, camera_pose, x0, y0, w, h)
    else:
        scene = scene_depth.depth[y0:y1, x0:x1]
    covered = obj > 0.0
    n_cov = int(covered.sum())
    if n_cov == 0:
        return frustum, 0.0
    vis = covered & (scene > 0.0) & (np.abs(obj - scene) <= depth_tolerance)
    return frustum, float(vis.sum()) / n_cov


def depth_similarity(
    mesh: TriMesh,
    pose: Pose6D,
    camera: CameraModel,
    camera_pose: Pose6D,
    observed: DepthImage,
    roi: BBox2D,
    lam: float,
    d_max: float = 1.0,
    min_valid_fraction: float = 0.05,
) -> float:
    """exp(-lam * d): d is the mean squared depth difference (m^2) over roi
    pixels valid in both the rendered hypothesis and the observed image.

    Falls back to the d_max penalty when fewer than min_valid_fraction of the
    roi's pixels are jointly valid.
    """
    x0, y0, x1, y1 = roi.pixel_window()
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        return math.exp(-lam * d_max)
    rendered = _render_window([(mesh, pose)], camera, camera_pose, x0, y0, w, h)
    obs = observed.depth[y0:y1, x0:x1]
    joint = (rendered > 0.0) & (obs > 0.0)
    n_joint = int(joint.sum())
    if n_joint < min_valid_fraction * w * h or n_joint == 0:
        d = d_max
    else:
        diff = rendered[joint] - obs[joint]
        d = float(np.mean(diff * diff))
    return math.exp(-lam * d)


# ---------------------------------------------------------------------------
# float raster file format (for golden tests and depth dumps)
# ---------------------------------------------------------------------------

_RASTER_MAGIC = b"PFD1"


def save_depth_raster(path, image: DepthImage) -> None:
    """Write a 32-bit float raster: b"PFD1\\n<w> <h>\\n" + row-major LE floats."""
    data = image.depth.astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(_RASTER_MAGIC + b"\n")
        f.write(f"{image.width} {image.height}\n".encode("ascii"))
        f.write(data)


def load_depth_raster(path) -> DepthImage:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != _RASTER_MAGIC:
            raise ValueError(f"bad raster magic {magic!r}")
        w, h = (int(tok) for tok in f.readline().split())
        data = np.frombuffer(f.read(4 * w * h), dtype="<f4").astype(float)
    return DepthImage(w, h, data.reshape(h, w))
