"""Analytic test scenes, their reference renderer, and dataset generation.

Scenes are lists of primitives (spheres, boxes, gaussian blobs) with known
density and color everywhere, so ground truth is computable without any
learned model. The reference renderer marches the analytic functions
directly at four times the default sampling density and serves as the
quadrature and image oracle for training and acceptance experiments.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .geometry import Aabb, Camera, focal_from_angle, generate_rays, look_at, ray_aabb
from .rendering import make_sample_grid

BLENDER_CAMERA_ANGLE_X = 0.6911112070083618

ORACLE_OVERSAMPLING = 4  # relative to the default renderer's 512 per diagonal


@dataclass(frozen=True)
class Primitive:
    """One analytic density blob. `extent` means radius (sphere), half-sizes
    (box), or standard deviation (gaussian)."""

    kind: str
    center: tuple
    extent: tuple
    density: float
    color: tuple
    view_tint: float = 0.0

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "gaussian"):
            raise ValueError(f"unknown primitive kind '{self.kind}'")
        if self.density < 0:
            raise ValueError("density amplitude must be non-negative")
        if not all(0.0 <= c <= 1.0 for c in self.color):
            raise ValueError("colors must lie in [0,1]")
        ext = np.asarray(self.extent, dtype=np.float64)
        ext = np.full(3, float(ext)) if ext.ndim == 0 else ext.reshape(-1)
        object.__setattr__(self, "extent", tuple(ext.tolist()))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def sigma(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        rel = pts - np.asarray(self.center, dtype=pts.dtype)
        ext = np.asarray(self.extent, dtype=pts.dtype)
        if self.kind == "sphere":
            r2 = np.einsum("pi,pi->p", rel, rel)
            return np.where(r2 <= ext[0] * ext[0], self.density, 0.0).astype(pts.dtype)
        if self.kind == "box":
            inside = np.all(np.abs(rel) <= ext[None, :], axis=-1)
            return np.where(inside, self.density, 0.0).astype(pts.dtype)
        r2 = np.einsum("pi,pi->p", rel, rel)
        return (self.density * np.exp(-0.5 * r2 / ext[0] ** 2)).astype(pts.dtype)

    def radius_bound(self) -> float:
        """Radius around the center beyond which the density is negligible."""
        ext = np.asarray(self.extent)
        if self.kind == "sphere":
            return float(ext[0])
        if self.kind == "box":
            return float(np.linalg.norm(ext))
        return 4.5 * float(ext[0])  # exp(-10) tail


@dataclass(frozen=True)
class AnalyticScene:
    primitives: tuple
    aabb: Aabb = dataclass_field(
        default_factory=lambda: Aabb((-1.2, -1.2, -1.2), (1.2, 1.2, 1.2))
    )
    background: tuple = (1.0, 1.0, 1.0)

    def sigma_color(self, pts: np.ndarray, dirs: np.ndarray | None = None):
        """Total density plus the density-weighted blend of primitive colors.

        A primitive with view_tint t modulates its color by
        1 - 0.5 * t * (1 - d_z): full brightness looking along +z, dimmed by
        t looking along -z. Linear in the direction, so it is exactly
        representable by first-degree spherical harmonics.
        """
        pts = np.atleast_2d(pts)
        n = len(pts)
        sigma = np.zeros(n, dtype=pts.dtype)
        weighted = np.zeros((n, 3), dtype=pts.dtype)
        for prim in self.primitives:
            s = prim.sigma(pts)
            color = np.asarray(prim.color, dtype=pts.dtype)
            if prim.view_tint and dirs is not None:
                mod = 1.0 - 0.5 * prim.view_tint * (
                    1.0 - np.atleast_2d(dirs)[:, 2].astype(pts.dtype)
                )
                weighted += (s * mod)[:, None] * color
            else:
                weighted += s[:, None] * color
            sigma += s
        rgb = np.where(sigma[:, None] > 0, weighted / np.maximum(sigma, 1e-30)[:, None], 0.0)
        return sigma, rgb

    def content_center_radius(self):
        """A bounding sphere of everything with non-negligible density."""
        centers = np.array([p.center for p in self.primitives])
        bounds = np.array([p.radius_bound() for p in self.primitives])
        center = centers.mean(axis=0) if len(centers) else np.zeros(3)
        radius = 1e-6
        for c, b in zip(centers, bounds):
            radius = max(radius, float(np.linalg.norm(c - center)) + b)
        return center, radius

    def content_radius(self) -> float:
        r = 0.0
        for p in self.primitives:
            r = max(r, float(np.linalg.norm(p.center)) + p.radius_bound())
        return max(r, 1e-6)


def demo_scene() -> AnalyticScene:
    """The standard three-primitive test scene."""
    return AnalyticScene(
        primitives=(
            Primitive("gaussian", (-0.45, -0.35, -0.1), 0.18, 30.0, (0.85, 0.25, 0.2)),
            Primitive("sphere", (0.4, -0.3, 0.0), 0.32, 40.0, (0.2, 0.7, 0.3), view_tint=0.4),
            Primitive("box", (0.0, 0.45, 0.05), (0.3, 0.22, 0.26), 40.0, (0.25, 0.35, 0.85)),
        )
    )


def single_object_scene(kind: str, color, center=(0.0, 0.0, 0.0), extent=0.45,
                        density=40.0, view_tint=0.0, half_width=1.0) -> AnalyticScene:
    hw = float(half_width)
    return AnalyticScene(
        primitives=(Primitive(kind, center, extent, density, color, view_tint),),
        aabb=Aabb((-hw, -hw, -hw), (hw, hw, hw)),
    )


def merge_scenes(a: AnalyticScene, b: AnalyticScene) -> AnalyticScene:
    return AnalyticScene(
        primitives=a.primitives + b.primitives,
        aabb=a.aabb.union(b.aabb),
        background=a.background,
    )


def oracle_render_rays(
    scene: AnalyticScene,
    origins: np.ndarray,
    dirs: np.ndarray,
    samples_per_diag: int | None = None,
    max_samples: int = 16384,
):
    """March the analytic functions directly; no decomposition involved.

    Compositing runs on flat per-sample arrays with a segmented cumulative
    sum (exact in float64), independent of the padded-array code path the
    main renderer uses.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = len(origins)
    bg = np.asarray(scene.background, dtype=np.float64)
    rgb = np.tile(bg, (n, 1))
    alpha = np.zeros(n)
    t_near, t_far, hit = ray_aabb(origins, dirs, scene.aabb)
    # restrict the march to the content bounding sphere; density vanishes
    # outside it by construction
    center, radius = scene.content_center_radius()
    oc = origins - center
    b = np.einsum("pi,pi->p", oc, dirs)
    disc = b * b - (np.einsum("pi,pi->p", oc, oc) - radius * radius)
    sphere_hit = disc > 0
    root = np.sqrt(np.maximum(disc, 0.0))
    t_near = np.maximum(t_near, -b - root)
    t_far = np.minimum(t_far, -b + root)
    hit &= sphere_hit & (t_near < t_far)
    if not np.any(hit):
        return rgb.astype(np.float32), alpha.astype(np.float32)
    hit_idx = np.nonzero(hit)[0]
    spd = samples_per_diag or 512 * ORACLE_OVERSAMPLING
    grid = make_sample_grid(
        t_near[hit_idx], t_far[hit_idx], scene.aabb.diagonal / spd, max_samples
    )
    o32 = origins[hit_idx].astype(np.float32)
    d32 = dirs[hit_idx].astype(np.float32)
    pts = o32[grid.ray_index] + grid.t[:, None].astype(np.float32) * d32[grid.ray_index]
    sigma, color = scene.sigma_color(pts, d32[grid.ray_index])

    s = sigma * grid.delta[grid.ray_index]
    cum = np.cumsum(s)
    starts = np.concatenate([[0], np.cumsum(grid.n_samples)[:-1]])
    base = cum[starts] - s[starts]  # cumulative depth before each ray begins
    excl = cum - s - base[grid.ray_index]
    w = np.exp(-excl) - np.exp(-(excl + s))
    pix = np.zeros((grid.n_rays, 3))
    for k in range(3):
        pix[:, k] = np.bincount(
            grid.ray_index, weights=w * color[:, k], minlength=grid.n_rays
        )
    acc = np.bincount(grid.ray_index, weights=w, minlength=grid.n_rays)
    pix += (1.0 - acc)[:, None] * bg
    rgb[hit_idx] = pix
    alpha[hit_idx] = acc
    return rgb.astype(np.float32), alpha.astype(np.float32)


def oracle_render_image(scene: AnalyticScene, camera: Camera, **kw):
    """Returns (rgb (H,W,3), alpha (H,W))."""
    origins, dirs = generate_rays(camera)
    rgb = np.empty((len(origins), 3), dtype=np.float32)
    alpha = np.empty(len(origins), dtype=np.float32)
    chunk = 8192
    for a in range(0, len(origins), chunk):
        rgb[a:a + chunk], alpha[a:a + chunk] = oracle_render_rays(
            scene, origins[a:a + chunk], dirs[a:a + chunk], **kw
        )
    return (
        rgb.reshape(camera.height, camera.width, 3),
        alpha.reshape(camera.height, camera.width),
    )


def orbit_cameras(
    scene: AnalyticScene,
    n_views: int,
    resolution: tuple,
    rng: np.random.Generator | None = None,
    camera_angle_x: float = BLENDER_CAMERA_ANGLE_X,
    elevation_deg: tuple = (10.0, 55.0),
    radius: float | None = None,
):
    """Cameras on a sphere orbit looking at the origin.

    Azimuths follow the golden angle; elevations cycle through the given
    band, with a small seeded jitter when `rng` is provided.
    """
    w, h = resolution
    focal = focal_from_angle(w, camera_angle_x)
    if radius is None:
        radius = 1.15 * scene.content_radius() / np.tan(0.5 * camera_angle_x)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    cams = []
    for i in range(n_views):
        az = (i * golden) % (2 * np.pi)
        lo, hi = np.deg2rad(elevation_deg[0]), np.deg2rad(elevation_deg[1])
        frac = (i % 7) / 6.0 if n_views > 1 else 0.5
        el = lo + (hi - lo) * frac
        if rng is not None:
            az += rng.uniform(-0.05, 0.05)
            el += rng.uniform(-0.03, 0.03)
        eye = radius * np.array(
            [np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)]
        )
        cams.append(Camera(w, h, focal, look_at(eye, np.zeros(3))))
    return cams


def generate_dataset(
    scene: AnalyticScene,
    out_dir,
    n_views: int = 40,
    resolution: tuple = (128, 128),
    n_test_views: int = 10,
    seed: int = 0,
    gt_grid_resolution: int = 48,
    camera_angle_x: float = BLENDER_CAMERA_ANGLE_X,
):
    """Render and write a posed-image dataset plus dense ground-truth grids.

    Train views carry seeded pose jitter; test views are a deterministic
    orbit at fixed elevation. Images store straight alpha so loaders can
    composite over any background.
    """
    from .formats import write_dataset_split

    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    specs = [
        ("train", n_views, orbit_cameras(scene, n_views, resolution, rng,
                                         camera_angle_x=camera_angle_x)),
        ("test", n_test_views, orbit_cameras(scene, n_test_views, resolution, None,
                                             camera_angle_x=camera_angle_x,
                                             elevation_deg=(30.0, 42.0))),
    ]
    for split, count, cams in specs:
        if count == 0:
            continue
        images = np.empty((count, resolution[1], resolution[0], 3), dtype=np.float32)
        alphas = np.empty((count, resolution[1], resolution[0]), dtype=np.float32)
        for i, cam in enumerate(cams):
            rgb, alpha = oracle_render_image(scene, cam)
            # store straight (unpremultiplied) colors so alpha compositing at
            # load time reproduces the render over any background
            a = np.maximum(alpha, 1e-6)[..., None]
            images[i] = np.clip(rgb / a, 0.0, 1.0) * (alpha[..., None] > 0)
            alphas[i] = alpha
        write_dataset_split(
            out_dir, split, camera_angle_x, cams, images, alphas, aabb=scene.aabb
        )

    r = gt_grid_resolution
    axes = [
        scene.aabb.min[i] + (np.arange(r) + 0.5) / r * scene.aabb.size[i]
        for i in range(3)
    ]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)
    sigma, rgb = scene.sigma_color(pts)
    np.savez(
        os.path.join(out_dir, "gt_fields.npz"),
        sigma=sigma.reshape(r, r, r).astype(np.float32),
        rgb=rgb.reshape(r, r, r, 3).astype(np.float32),
        aabb=np.stack([scene.aabb.min, scene.aabb.max]),
    )
    return out_dir
