"""Axis-aligned boxes, pinhole cameras, and ray/box intersection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned bounding box in world units, with min < max componentwise."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if not np.all(lo < hi):
            raise ValueError(f"degenerate aabb: min={lo} max={hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def size(self) -> np.ndarray:
        return self.max - self.min

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.size))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def normalize(self, points: np.ndarray) -> np.ndarray:
        """Map world points to local coordinates u in [0,1]^3 (for in-box points)."""
        return (np.asarray(points) - self.min) / self.size

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.min) & (p <= self.max), axis=-1)

    def corners(self) -> np.ndarray:
        gx, gy, gz = np.meshgrid(
            [self.min[0], self.max[0]],
            [self.min[1], self.max[1]],
            [self.min[2], self.max[2]],
            indexing="ij",
        )
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.min, other.min), np.maximum(self.max, other.max))

    def almost_equal(self, other: "Aabb", tol: float = 1e-9) -> bool:
        return bool(
            np.all(np.abs(self.min - other.min) <= tol)
            and np.all(np.abs(self.max - other.max) <= tol)
        )


def ray_aabb(origins: np.ndarray, dirs: np.ndarray, box: Aabb):
    """Slab-method intersection of rays with a box, clipped to t >= 0.

    Accepts (3,) or (N,3) arrays. Returns (t_near, t_far, hit) with
    t_near <= t_far where hit is True; both arrays are 0 where hit is False.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (box.min - o) * inv
        t1 = (box.max - o) * inv
    # Directions with a zero component yield +-inf bounds; nan appears only
    # when the origin sits exactly on a face plane it is parallel to.
    t0, t1 = np.minimum(t0, t1), np.maximum(t0, t1)
    parallel_outside = (d == 0) & ((o < box.min) | (o > box.max))
    t_near = np.where(np.isnan(t0), -np.inf, t0).max(axis=-1)
    t_far = np.where(np.isnan(t1), np.inf, t1).min(axis=-1)
    t_near = np.maximum(t_near, 0.0)
    hit = (t_near <= t_far) & ~parallel_outside.any(axis=-1) & np.isfinite(t_far)
    t_near = np.where(hit, t_near, 0.0)
    t_far = np.where(hit, t_far, 0.0)
    if np.asarray(origins).ndim == 1:
        return float(t_near[0]), float(t_far[0]), bool(hit[0])
    return t_near, t_far, hit


@dataclass(frozen=True)
class Ray:
    """A world-space ray with unit direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-6:
            if n == 0:
                raise ValueError("zero ray direction")
            d = d / n
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


def focal_from_angle(width: int, camera_angle_x: float) -> float:
    return 0.5 * width / np.tan(0.5 * camera_angle_x)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. Looks along -z in its own frame, x right, y up."""

    width: int
    height: int
    focal: float
    camera_to_world: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.camera_to_world, dtype=np.float64).reshape(4, 4)
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        rot = m[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-5):
            raise ValueError("camera rotation block is not orthonormal")
        object.__setattr__(self, "camera_to_world", m)

    def pixel_grid(self) -> np.ndarray:
        """All (row, col) index pairs in row-major order."""
        rr, cc = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([rr.ravel(), cc.ravel()], axis=-1)


def generate_rays(camera: Camera, pixels: np.ndarray | None = None):
    """Rays through pixel centers. `pixels` is (N,2) of (row, col); default all.

    Returns (origins (N,3), directions (N,3)) with unit directions.
    """
    if pixels is None:
        pixels = camera.pixel_grid()
    pixels = np.atleast_2d(pixels)
    if np.any(pixels[:, 0] >= camera.height) or np.any(pixels[:, 1] >= camera.width):
        raise ValueError("pixel index out of image bounds")
    px = (pixels[:, 1] + 0.5 - 0.5 * camera.width) / camera.focal
    py = (0.5 * camera.height - (pixels[:, 0] + 0.5)) / camera.focal
    d_cam = np.stack([px, py, -np.ones_like(px)], axis=-1)
    rot = camera.camera_to_world[:3, :3]
    d = d_cam @ rot.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.camera_to_world[:3, 3], d.shape).copy()
    return o, d


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at `eye` looking at `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    z = eye - target
    z = z / np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:  # looking straight along up
        x = np.cross(np.array([0.0, 1.0, 0.0]), z)
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x, y, z, eye
    return m
