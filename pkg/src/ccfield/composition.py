"""Scene composition: affine-placed models blended per sample point.

Each object keeps its own decomposition, box, and occupancy grid. A single
world-space sample grid is marched per ray; at every sample, each object
whose warped point lands inside its (occupied) box contributes a density
and color. Densities sum into the opacity, colors blend with softmax
weights over the contributing objects' densities. Objects absent at a
sample are excluded from the softmax entirely, so a lone object reduces
exactly to the single-model renderer.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dataclass_field

import numpy as np
from scipy.special import expit as sigmoid

from .geometry import Aabb, ray_aabb
from .decomposition import FieldSampler, query_features
from .model import FieldPair
from .rendering import RenderOptions, composite_weights, make_sample_grid
from .shading import eval_sh_basis, softplus

_instance_ids = itertools.count(1)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quaternion_about(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


@dataclass(frozen=True)
class AffineTransform:
    """Object-to-world placement: translation, unit-quaternion rotation, scale."""

    translation: np.ndarray = dataclass_field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = dataclass_field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    scale: np.ndarray = dataclass_field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        s = np.asarray(self.scale, dtype=np.float64)
        s = np.full(3, float(s)) if s.ndim == 0 else s.reshape(3)
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError("rotation quaternion must have unit norm")
        if np.any(s <= 0):
            raise ValueError("scale must be positive componentwise")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "scale", s)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quaternion_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        """4x4 object-to-world matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix * self.scale[None, :]
        m[:3, 3] = self.translation
        return m

    def inverse_matrix(self) -> np.ndarray:
        """4x4 world-to-object matrix."""
        m = np.eye(4)
        a = self.rotation_matrix.T / self.scale[:, None]
        m[:3, :3] = a
        m[:3, 3] = -a @ self.translation
        return m

    def world_points_to_object(self, pts: np.ndarray) -> np.ndarray:
        a = self.rotation_matrix.T / self.scale[:, None]
        return (np.atleast_2d(pts) - self.translation) @ a.T

    def world_dirs_to_object(self, dirs: np.ndarray) -> np.ndarray:
        """Rotation-only mapping used for the view-direction lookup."""
        return np.atleast_2d(dirs) @ self.rotation_matrix


def warp_ray(origin: np.ndarray, direction: np.ndarray, tf: AffineTransform):
    """Map a world ray into object space.

    Returns (origin, unit direction, scale) where `scale` converts world
    t-distances into object-space t-distances (t_obj = scale * t_world).
    """
    o = tf.world_points_to_object(origin)[0]
    a = tf.rotation_matrix.T / tf.scale[:, None]
    v = a @ np.asarray(direction, dtype=np.float64)
    scale = float(np.linalg.norm(v))
    return o, v / scale, scale


@dataclass
class ObjectInstance:
    """A placed model, optionally rank-truncated at load time."""

    model: FieldPair
    transform: AffineTransform = AffineTransform()
    lod: tuple | None = None
    name: str = ""
    instance_id: int = dataclass_field(default_factory=lambda: next(_instance_ids))

    def __post_init__(self):
        if self.lod is not None:
            from .compression import truncate_color

            self.model = truncate_color(self.model, self.lod)

    @property
    def rank_counts(self) -> dict:
        """Retained components per field kind, for scene bookkeeping."""
        d, c = self.model.density.layout, self.model.color.layout
        return {
            "density": (d.n_vec, d.n_mat),
            "color": (c.n_vec, c.n_mat),
        }

    def world_aabb(self) -> Aabb:
        corners = self.model.aabb.corners()
        m = self.transform.matrix()
        world = corners @ m[:3, :3].T + m[:3, 3]
        return Aabb(world.min(axis=0), world.max(axis=0))

    def world_diagonal(self) -> float:
        return float(np.linalg.norm(self.model.aabb.size * self.transform.scale))


@dataclass
class Scene:
    """Ordered object instances plus a background color."""

    instances: list
    background: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not self.instances:
            raise ValueError("a scene needs at least one instance")

    @property
    def world_aabb(self) -> Aabb:
        box = self.instances[0].world_aabb()
        for inst in self.instances[1:]:
            box = box.union(inst.world_aabb())
        return box

    def total_ranks(self) -> dict:
        total = {"density": 0, "color": 0}
        for inst in self.instances:
            counts = inst.rank_counts
            total["density"] += sum(counts["density"])
            total["color"] += sum(counts["color"])
        return total

    def add_instance(self, model, transform=AffineTransform(), lod=None, name="") -> int:
        inst = ObjectInstance(model=model, transform=transform, lod=lod, name=name)
        self.instances.append(inst)
        return inst.instance_id

    def remove_instance(self, instance_id: int):
        for i, inst in enumerate(self.instances):
            if inst.instance_id == instance_id:
                del self.instances[i]
                return
        raise KeyError(f"no instance with id {instance_id}")


def composite_sample(sigmas, colors, delta: float):
    """Blend one sample point's per-object densities and colors.

    alpha = 1 - exp(-delta * sum(sigma)); color mixes with softmax weights
    over the raw densities (max-subtracted for stability).
    """
    sig = np.asarray(sigmas, dtype=np.float64)
    col = np.atleast_2d(np.asarray(colors, dtype=np.float64))
    if sig.ndim != 1 or len(sig) != len(col) or len(sig) == 0:
        raise ValueError("need one color per density, at least one object")
    alpha = 1.0 - np.exp(-delta * sig.sum())
    e = np.exp(sig - sig.max())
    weights = e / e.sum()
    return alpha, weights @ col


def march_composed_rays(
    scene: Scene,
    origins: np.ndarray,
    dirs: np.ndarray,
    opts: RenderOptions = RenderOptions(),
):
    """Render rays against a composed scene. Returns (rgb (N,3), alpha (N,))."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n_rays = len(origins)
    bg = np.asarray(scene.background, dtype=np.float32)
    rgb_out = np.tile(bg, (n_rays, 1))
    alpha_out = np.zeros(n_rays, dtype=np.float32)

    # Per-object hit intervals, computed in object space so they are exact
    # under the placement transform, then mapped back to world t-units.
    t_near = np.full(n_rays, np.inf)
    t_far = np.full(n_rays, -np.inf)
    any_hit = np.zeros(n_rays, dtype=bool)
    for inst in scene.instances:
        tf = inst.transform
        o_l = tf.world_points_to_object(origins)
        a = tf.rotation_matrix.T / tf.scale[:, None]
        v = dirs @ a.T
        k = np.linalg.norm(v, axis=-1)
        d_l = v / k[:, None]
        tn_l, tf_l, hit = ray_aabb(o_l, d_l, inst.model.aabb)
        tn_w, tf_w = tn_l / k, tf_l / k
        t_near = np.where(hit, np.minimum(t_near, tn_w), t_near)
        t_far = np.where(hit, np.maximum(t_far, tf_w), t_far)
        any_hit |= hit
    if not np.any(any_hit):
        return rgb_out, alpha_out

    hit_idx = np.nonzero(any_hit)[0]
    base_step = min(inst.world_diagonal() for inst in scene.instances) / opts.samples_per_diag
    grid = make_sample_grid(t_near[hit_idx], t_far[hit_idx], base_step, opts.max_samples)
    pts_w = origins[hit_idx][grid.ray_index] + grid.t[:, None] * dirs[hit_idx][grid.ray_index]
    n_pts = len(pts_w)

    sigma_sum = np.zeros(n_pts, dtype=np.float64)
    contribs = []  # (flat indices, sigma, color) per object
    for inst in scene.instances:
        model = inst.model
        pts_l = inst.transform.world_points_to_object(pts_w)
        inside = model.aabb.contains(pts_l)
        if model.occupancy is not None:
            inside &= model.occupancy.contains(pts_l)
        idx = np.nonzero(inside)[0]
        if len(idx) == 0:
            continue
        u = model.aabb.normalize(pts_l[idx]).astype(np.float32)
        sampler = FieldSampler(model.resolution, u, dtype=model.density.dtype)
        raw_d = query_features(model.density, u, sampler=sampler)[:, 0]
        sig = softplus(raw_d + model.shading.density_shift)
        raw_c = query_features(model.color, u, sampler=sampler)
        d_obj = inst.transform.world_dirs_to_object(dirs[hit_idx][grid.ray_index[idx]])
        basis = eval_sh_basis(d_obj.astype(np.float32), model.shading.sh_degree)
        B = model.shading.basis_size
        h = np.einsum("pkb,pb->pk", raw_c.reshape(-1, 3, B), basis.astype(raw_c.dtype))
        contribs.append((idx, sig, sigmoid(h)))
        sigma_sum[idx] += sig

    sigma_pad = grid.pad(sigma_sum.astype(np.float32))
    w, bg_w = composite_weights(sigma_pad, grid, opts.stop_transmittance)
    w_flat = w[grid.ray_index, grid.slot].astype(np.float64)

    # Softmax over contributing objects only, computed in two passes.
    exp_max = np.full(n_pts, -np.inf)
    for idx, sig, _ in contribs:
        exp_max[idx] = np.maximum(exp_max[idx], sig)
    denom = np.zeros(n_pts, dtype=np.float64)
    for idx, sig, _ in contribs:
        denom[idx] += np.exp(sig - exp_max[idx])
    blended = np.zeros((n_pts, 3), dtype=np.float64)
    for idx, sig, col in contribs:
        blended[idx] += (np.exp(sig - exp_max[idx]) / denom[idx])[:, None] * col

    pix = np.zeros((grid.n_rays, 3), dtype=np.float64)
    wc = w_flat[:, None] * blended
    for ch in range(3):
        pix[:, ch] = np.bincount(grid.ray_index, weights=wc[:, ch], minlength=grid.n_rays)
    pix += bg_w[:, None] * bg
    rgb_out[hit_idx] = pix.astype(np.float32)
    alpha_out[hit_idx] = (1.0 - bg_w).astype(np.float32)
    return rgb_out, alpha_out
