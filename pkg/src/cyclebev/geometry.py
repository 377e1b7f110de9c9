"""Pinhole camera geometry.

World frame is right-handed with z up, the ego vehicle at the origin and the
ground on z = 0.  Camera frames follow the usual x-right, y-down, z-forward
convention, so that a world point ``x`` maps to pixel coordinates through

    depth * (u, v, 1) = K @ R @ (x - T)

with ``R`` rotating world vectors into the camera frame and ``T`` the camera
centre in world coordinates.  Everything here runs in float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ORTHO_TOL = 1e-9
PARALLEL_TOL = 1e-12


@dataclass
class CameraModel:
    K: np.ndarray
    R: np.ndarray
    T: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3)
        self.height = int(self.height)
        self.width = int(self.width)
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > ORTHO_TOL:
            raise ValueError("R is not orthonormal")
        if np.any(np.tril(self.K, -1) != 0) or self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("K must be upper-triangular with positive focal lengths")
        if self.height <= 0 or self.width <= 0:
            raise ValueError("image size must be positive")

    def to_dict(self) -> dict:
        return {
            "K": [float(x) for x in self.K.ravel()],
            "R": [float(x) for x in self.R.ravel()],
            "T": [float(x) for x in self.T],
            "H_I": self.height,
            "W_I": self.width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(K=d["K"], R=d["R"], T=d["T"], height=d["H_I"], width=d["W_I"])


@dataclass
class CameraRig:
    cameras: list[CameraModel] = field(default_factory=list)

    def __post_init__(self):
        if len(self.cameras) < 1:
            raise ValueError("a rig needs at least one camera")

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, i):
        return self.cameras[i]

    @property
    def image_size(self) -> tuple[int, int]:
        sizes = {(c.height, c.width) for c in self.cameras}
        if len(sizes) != 1:
            raise ValueError("cameras in the rig have different image sizes")
        return sizes.pop()

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(K, R, T)`` stacked over cameras, shapes (N,3,3), (N,3,3), (N,3)."""
        return (
            np.stack([c.K for c in self.cameras]),
            np.stack([c.R for c in self.cameras]),
            np.stack([c.T for c in self.cameras]),
        )

    def to_json(self) -> str:
        return json.dumps({"cameras": [c.to_dict() for c in self.cameras]})

    @classmethod
    def from_json(cls, text: str) -> "CameraRig":
        doc = json.loads(text)
        return cls([CameraModel.from_dict(c) for c in doc["cameras"]])

    def __eq__(self, other):
        if not isinstance(other, CameraRig) or len(self) != len(other):
            return False
        return all(
            np.array_equal(a.K, b.K)
            and np.array_equal(a.R, b.R)
            and np.array_equal(a.T, b.T)
            and a.height == b.height
            and a.width == b.width
            for a, b in zip(self.cameras, other.cameras)
        )


@dataclass(frozen=True)
class GridSpec:
    """BEV grid: ``nx`` x ``ny`` cells covering ``extent_x`` x ``extent_y`` metres.

    Row index i runs along world x, column index j along world y, ego at the
    grid centre.
    """

    nx: int = 100
    ny: int = 100
    extent_x: float = 50.0
    extent_y: float = 50.0

    def __post_init__(self):
        if self.nx <= 0 or self.ny <= 0:
            raise ValueError("grid cell counts must be positive")
        if self.extent_x <= 0 or self.extent_y <= 0:
            raise ValueError("grid extent must be positive")

    @property
    def cell_size(self) -> tuple[float, float]:
        return self.extent_x / self.nx, self.extent_y / self.ny

    def shape_at(self, s: int) -> tuple[int, int]:
        if s < 0:
            raise ValueError("scale exponent s must be >= 0")
        nx, ny = self.nx >> s, self.ny >> s
        if nx < 1 or ny < 1:
            raise ValueError(f"scale s={s} leaves an empty grid for {self.nx}x{self.ny}")
        return nx, ny

    def to_dict(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "extent_x": self.extent_x, "extent_y": self.extent_y}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(int(d["nx"]), int(d["ny"]), float(d["extent_x"]), float(d["extent_y"]))


@dataclass
class ProjectedPoints:
    """Struct-of-arrays result of a projection; index-aligned with the input."""

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    valid: np.ndarray

    @property
    def uv(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=-1)


def look_at_rotation(yaw: float, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """World->camera rotation for a camera looking along heading ``yaw``.

    ``pitch`` > 0 tilts the optical axis downwards, ``roll`` spins it about
    the optical axis.  Angles in radians.
    """
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    forward = np.array([cp * cy, cp * sy, -sp])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    if roll:
        cr, sr = math.cos(roll), math.sin(roll)
        R = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]]) @ R
    return R


def intrinsics(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def default_rig(
    height: int = 112,
    width: int = 224,
    n_cameras: int = 4,
    mount_height: float = 1.6,
    pitch_deg: float = 8.0,
    hfov_deg: float = 90.0,
) -> CameraRig:
    """Ring of cameras at equal yaw spacing, all mounted above the ego origin."""
    f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    K = intrinsics(f, f, width / 2.0, height / 2.0)
    cams = []
    for k in range(n_cameras):
        yaw = 2.0 * math.pi * k / n_cameras
        R = look_at_rotation(yaw, math.radians(pitch_deg))
        # small forward offset so the centres are distinct
        T = np.array([0.5 * math.cos(yaw), 0.5 * math.sin(yaw), mount_height])
        cams.append(CameraModel(K=K.copy(), R=R, T=T, height=height, width=width))
    return CameraRig(cams)


def project_world_to_image(camera: CameraModel, points) -> ProjectedPoints:
    """Project world points (N,3) through the pinhole model.

    Points at or behind the camera keep their slot with ``valid=False`` and
    NaN pixel coordinates.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    hom = (camera.K @ camera.R @ (pts - camera.T).T).T
    depth = hom[:, 2]
    front = depth > 0
    u = np.full(len(pts), np.nan)
    v = np.full(len(pts), np.nan)
    u[front] = hom[front, 0] / depth[front]
    v[front] = hom[front, 1] / depth[front]
    with np.errstate(invalid="ignore"):
        valid = front & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    return ProjectedPoints(u=u, v=v, depth=depth, valid=valid)


def pixel_rays(camera: CameraModel, pixels) -> np.ndarray:
    """World-frame ray directions scaled so that unit ray length = unit depth."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    hom = np.concatenate([px, np.ones((len(px), 1))], axis=1)
    cam_dirs = np.linalg.solve(camera.K, hom.T)
    return (camera.R.T @ cam_dirs).T


def backproject_to_ground(camera: CameraModel, pixels) -> tuple[np.ndarray, np.ndarray]:
    """Intersect pixel rays with z = 0.

    Returns ``(points, hit)``; rows where the ray is parallel to the ground
    or points away from it have ``hit=False`` and NaN coordinates.
    """
    dirs = pixel_rays(camera, pixels)
    dz = dirs[:, 2]
    hit = np.abs(dz) > PARALLEL_TOL
    t = np.full(len(dirs), np.nan)
    t[hit] = -camera.T[2] / dz[hit]
    hit &= t > 0
    out = np.full((len(dirs), 3), np.nan)
    out[hit] = camera.T + t[hit, None] * dirs[hit]
    out[hit, 2] = 0.0
    return out, hit


def make_bev_grid(spec: GridSpec, s: int = 0) -> np.ndarray:
    """Cell-centre world coordinates at scale ``s``, shape (nx_s * ny_s, 3), row-major."""
    nx, ny = spec.shape_at(s)
    dx, dy = spec.extent_x / nx, spec.extent_y / ny
    xs = -spec.extent_x / 2.0 + (np.arange(nx) + 0.5) * dx
    ys = -spec.extent_y / 2.0 + (np.arange(ny) + 0.5) * dy
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), np.zeros(nx * ny)], axis=1)


def make_pixel_grid(camera: CameraModel, down: int, normalized: bool = True) -> np.ndarray:
    """Pixel-centre coordinates (u, v) at stride ``down``, row-major over (row, col)."""
    if down < 1 or camera.height % down or camera.width % down:
        raise ValueError(
            f"stride {down} must divide the image size {camera.height}x{camera.width}"
        )
    h, w = camera.height // down, camera.width // down
    us = (np.arange(w) + 0.5) * down
    vs = (np.arange(h) + 0.5) * down
    gv, gu = np.meshgrid(vs, us, indexing="ij")
    grid = np.stack([gu.ravel(), gv.ravel()], axis=1)
    if normalized:
        grid = grid / np.array([camera.width, camera.height], dtype=np.float64)
    return grid


def world_to_cell(spec: GridSpec, xy) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map world (x, y) to integer cell indices; returns ``(i, j, inside)``."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    dx, dy = spec.cell_size
    i = np.floor((xy[:, 0] + spec.extent_x / 2.0) / dx).astype(np.int64)
    j = np.floor((xy[:, 1] + spec.extent_y / 2.0) / dy).astype(np.int64)
    inside = (i >= 0) & (i < spec.nx) & (j >= 0) & (j < spec.ny)
    return i, j, inside


# --- oriented boxes -----------------------------------------------------------


def box_frame(center_xy, yaw) -> np.ndarray:
    """Rotation taking box-local xy to world xy."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def footprint_corners(center_xy, length, width, yaw) -> np.ndarray:
    """Four footprint corners (counter-clockwise) in world xy."""
    local = np.array(
        [[length, width], [-length, width], [-length, -width], [length, -width]]
    ) / 2.0
    return local @ box_frame(center_xy, yaw).T + np.asarray(center_xy, dtype=np.float64)


def ray_box_hits(origin, dirs, boxes) -> np.ndarray:
    """Entry parameter of each ray into each box, ``inf`` when missed.

    ``boxes`` is an (M, 6) array of (cx, cy, length, width, height, yaw); a box
    spans z in [0, height].  Rays are ``origin + t * dirs`` for t > 0.
    """
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
    out = np.full((len(dirs), len(boxes)), np.inf)
    if len(boxes) == 0 or len(dirs) == 0:
        return out
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    for m, (cx, cy, length, width, height, yaw) in enumerate(boxes):
        c, s = math.cos(yaw), math.sin(yaw)
        ox, oy = origin[0] - cx, origin[1] - cy
        lo = np.array([c * ox + s * oy, -s * ox + c * oy, origin[2]])
        ld = np.stack(
            [c * dirs[:, 0] + s * dirs[:, 1], -s * dirs[:, 0] + c * dirs[:, 1], dirs[:, 2]],
            axis=1,
        )
        bmin = np.array([-length / 2.0, -width / 2.0, 0.0])
        bmax = np.array([length / 2.0, width / 2.0, height])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / ld
            t1 = (bmin - lo) * inv
            t2 = (bmax - lo) * inv
        # rays parallel to a slab: inside the slab -> unconstrained, outside -> miss
        par = ld == 0
        inside_slab = (lo >= bmin) & (lo <= bmax)
        t1 = np.where(par, np.where(inside_slab, -np.inf, np.inf), t1)
        t2 = np.where(par, np.where(inside_slab, np.inf, -np.inf), t2)
        tnear = np.minimum(t1, t2).max(axis=1)
        tfar = np.maximum(t1, t2).min(axis=1)
        hit = (tfar >= tnear) & (tfar > 0)
        out[hit, m] = np.maximum(tnear[hit], 0.0)
    return out


def box_surface_samples(box, sampling: int = 16) -> np.ndarray:
    """Regular grid of ``sampling`` x ``sampling`` cell-centre points on each of
    the four side faces and the top face of a box (the ground face is never
    observable).  Returns (5 * sampling**2, 3) world points."""
    cx, cy, length, width, height, yaw = [float(x) for x in box]
    a = (np.arange(sampling) + 0.5) / sampling - 0.5
    ga, gb = np.meshgrid(a, a, indexing="ij")
    ga, gb = ga.ravel(), gb.ravel()
    z = (gb + 0.5) * height
    faces = [
        np.stack([np.full_like(ga, length / 2), ga * width, z], 1),
        np.stack([np.full_like(ga, -length / 2), ga * width, z], 1),
        np.stack([ga * length, np.full_like(ga, width / 2), z], 1),
        np.stack([ga * length, np.full_like(ga, -width / 2), z], 1),
        np.stack([ga * length, gb * width, np.full_like(ga, height)], 1),
    ]
    local = np.concatenate(faces)
    rot = box_frame((cx, cy), yaw)
    world = local.copy()
    world[:, :2] = local[:, :2] @ rot.T + np.array([cx, cy])
    return world


def visibility_fraction(scene, object_id: int, rig: CameraRig, sampling: int = 16) -> float:
    """Share of an object's surface samples seen by at least one camera.

    A sample is seen by a camera when it projects inside the image in front of
    the camera and the segment from the camera centre to it crosses no other
    object.  Self-occlusion does not count, so an isolated object in full view
    scores 1.0.
    """
    objects = scene.objects
    if not 0 <= object_id < len(objects):
        raise KeyError(f"unknown object id {object_id}")
    boxes = scene.boxes()
    pts = box_surface_samples(boxes[object_id], sampling)
    others = np.delete(boxes, object_id, axis=0)
    seen = np.zeros(len(pts), dtype=bool)
    for cam in rig:
        proj = project_world_to_image(cam, pts)
        cand = proj.valid & ~seen
        if not cand.any():
            continue
        dirs = pts[cand] - cam.T  # sample sits at t = 1
        hits = ray_box_hits(cam.T, dirs, others)
        blocked = (hits < 1.0 - 1e-9).any(axis=1) if len(others) else np.zeros(cand.sum(), bool)
        idx = np.flatnonzero(cand)
        seen[idx[~blocked]] = True
    return float(seen.mean())


def rig_tensors(rigs: Sequence[CameraRig]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack a batch of rigs into (B,N,3,3), (B,N,3,3), (B,N,3) arrays."""
    ks, rs, ts = zip(*(r.stacked() for r in rigs))
    return np.stack(ks), np.stack(rs), np.stack(ts)
