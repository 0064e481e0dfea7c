"""Ray marching, compositing quadrature, occupancy grids, and PSNR.

Rays are marched with uniform (non-stratified) samples so renders are
deterministic; per-sample opacity is alpha_i = 1 - exp(-sigma_i * delta_i)
and the pixel is the transmittance-weighted sum of decoded colors plus the
residual transmittance times the background. Transmittance is computed from
the exclusive cumulative sum of sigma*delta, so the per-ray weights and the
background weight partition unity exactly.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.special import expit as sigmoid

from .decomposition import FieldSampler, query_features
from .geometry import Aabb, Camera, Ray, generate_rays, ray_aabb
from .model import FieldPair, OccupancyGrid
from .shading import eval_sh_basis, softplus

PSNR_CAP_DB = 99.0


@dataclass(frozen=True)
class RenderOptions:
    """Sampling density, background, and termination knobs for ray marching."""

    samples_per_diag: int = 512
    background: tuple = (1.0, 1.0, 1.0)
    stop_transmittance: float = 1e-4
    max_samples: int = 4096
    jitter: bool = False
    color_weight_eps: float = 1e-8

    def __post_init__(self):
        if self.samples_per_diag <= 0 or self.max_samples <= 0:
            raise ValueError("sample counts must be positive")
        if self.stop_transmittance < 0 or self.color_weight_eps < 0:
            raise ValueError("thresholds must be non-negative")


@dataclass
class SampleGrid:
    """Flat per-sample arrays plus the (ray, slot) mapping for padded views."""

    t: np.ndarray        # (P,) distance along each ray
    ray_index: np.ndarray
    slot: np.ndarray
    delta: np.ndarray    # (n_rays,) step size
    n_samples: np.ndarray
    n_rays: int
    width: int

    def pad(self, values: np.ndarray, fill=0.0) -> np.ndarray:
        out = np.full((self.n_rays, self.width), fill, dtype=values.dtype)
        out[self.ray_index, self.slot] = values
        return out


def make_sample_grid(
    t_near: np.ndarray,
    t_far: np.ndarray,
    base_step: float,
    max_samples: int,
    jitter_rng: np.random.Generator | None = None,
) -> SampleGrid:
    """Uniform midpoint samples over [t_near, t_far] per ray."""
    length = np.maximum(t_far - t_near, 0.0)
    n = np.clip(np.ceil(length / base_step).astype(np.int64), 1, max_samples)
    delta = length / n
    ray_index = np.repeat(np.arange(len(n)), n)
    starts = np.concatenate([[0], np.cumsum(n)[:-1]])
    slot = np.arange(int(n.sum())) - starts[ray_index]
    offset = 0.5
    t = t_near[ray_index] + (slot + offset) * delta[ray_index]
    if jitter_rng is not None:
        t = t + (jitter_rng.random(t.shape) - 0.5) * delta[ray_index]
    return SampleGrid(
        t=t, ray_index=ray_index, slot=slot, delta=delta,
        n_samples=n, n_rays=len(n), width=int(n.max()),
    )


def composite_weights(
    sigma_pad: np.ndarray,
    grid: SampleGrid,
    stop_transmittance: float,
    internals: bool = False,
):
    """Per-sample weights and background weight from padded densities.

    Returns (weights (R, width), bg_weight (R,)). Weights of samples reached
    after transmittance drops below the stop threshold are zeroed; their mass
    moves to the background term, keeping sum(weights) + bg_weight == 1.
    With `internals`, also returns (t_incl, kept) needed by backpropagation.
    """
    s = sigma_pad * grid.delta[:, None]
    cum = np.cumsum(s, axis=1)
    t_incl = np.exp(-cum)
    t_excl = np.exp(-(cum - s))
    w = t_excl - t_incl
    kept = None
    if stop_transmittance > 0.0:
        kept = t_excl >= stop_transmittance
        w = np.where(kept, w, 0.0)
    bg = 1.0 - w.sum(axis=1)
    if internals:
        if kept is None:
            kept = np.ones_like(w, dtype=bool)
        return w, bg, t_incl, kept
    return w, bg


def _query_sigma(pair: FieldPair, u: np.ndarray, keep=None, sampler=None) -> np.ndarray:
    raw = query_features(pair.density, u, keep=keep, sampler=sampler)[:, 0]
    return softplus(raw + pair.shading.density_shift)


def march_rays(
    pair: FieldPair,
    origins: np.ndarray,
    dirs: np.ndarray,
    opts: RenderOptions = RenderOptions(),
    keep_density=None,
    keep_color=None,
):
    """Render a batch of rays against one model. Returns (rgb (N,3), alpha (N,))."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n_rays = len(origins)
    bg = np.asarray(opts.background, dtype=np.float32)
    rgb = np.tile(bg, (n_rays, 1))
    alpha = np.zeros(n_rays, dtype=np.float32)

    t_near, t_far, hit = ray_aabb(origins, dirs, pair.aabb)
    if not np.any(hit):
        return rgb, alpha
    hit_idx = np.nonzero(hit)[0]
    base_step = pair.aabb.diagonal / opts.samples_per_diag
    grid = make_sample_grid(t_near[hit_idx], t_far[hit_idx], base_step, opts.max_samples)

    pts = origins[hit_idx][grid.ray_index] + grid.t[:, None] * dirs[hit_idx][grid.ray_index]
    live = (
        pair.occupancy.contains(pts)
        if pair.occupancy is not None
        else np.ones(len(pts), dtype=bool)
    )
    sigma_pad = np.zeros((grid.n_rays, grid.width), dtype=np.float32)
    if np.any(live):
        u = pair.aabb.normalize(pts[live]).astype(np.float32)
        sampler = FieldSampler(pair.resolution, u, dtype=pair.density.dtype)
        sig = _query_sigma(pair, u, keep=keep_density, sampler=sampler)
        sigma_pad[grid.ray_index[live], grid.slot[live]] = sig.astype(np.float32)

        w, bg_w = composite_weights(sigma_pad, grid, opts.stop_transmittance)
        w_flat = w[grid.ray_index, grid.slot]
        # Color is only decoded where it can contribute visibly.
        sel = live & (w_flat > opts.color_weight_eps)
        pix = np.zeros((grid.n_rays, 3), dtype=np.float64)
        if np.any(sel):
            sel_of_live = sel[live]
            u_sel = u[sel_of_live]
            sub_sampler = FieldSampler(pair.resolution, u_sel, dtype=pair.color.dtype)
            raw_c = query_features(pair.color, u_sel, keep=keep_color, sampler=sub_sampler)
            B = pair.shading.basis_size
            basis = eval_sh_basis(dirs[hit_idx], pair.shading.sh_degree).astype(np.float32)
            basis_sel = basis[grid.ray_index[sel]]
            h = np.einsum("pkb,pb->pk", raw_c.reshape(-1, 3, B), basis_sel)
            c = sigmoid(h)
            wc = w_flat[sel][:, None] * c
            for k in range(3):
                pix[:, k] = np.bincount(
                    grid.ray_index[sel], weights=wc[:, k], minlength=grid.n_rays
                )
        pix += bg_w[:, None] * bg
        rgb[hit_idx] = pix.astype(np.float32)
        alpha[hit_idx] = (1.0 - bg_w).astype(np.float32)
    return rgb, alpha


def march_ray(pair: FieldPair, ray: Ray, opts: RenderOptions = RenderOptions()):
    """Single-ray convenience wrapper. Returns (rgb (3,), alpha)."""
    rgb, alpha = march_rays(pair, ray.origin[None], ray.direction[None], opts)
    return rgb[0], float(alpha[0])


def render_image(
    model,
    camera: Camera,
    opts: RenderOptions = RenderOptions(),
    threads: int = 1,
):
    """Render a full image, row-major (H, W, 3) float32.

    `model` is a FieldPair or a composed Scene. Pixels are partitioned into
    disjoint chunks across workers, so output is identical for any thread
    count.
    """
    from .composition import Scene, march_composed_rays  # local: avoids cycle

    origins, dirs = generate_rays(camera)
    if isinstance(model, Scene):
        march = lambda o, d: march_composed_rays(model, o, d, opts)
    else:
        march = lambda o, d: march_rays(model, o, d, opts)

    n = len(origins)
    out = np.empty((n, 3), dtype=np.float32)
    chunk = max(4096, camera.width)
    spans = [(i, min(i + chunk, n)) for i in range(0, n, chunk)]
    if threads > 1 and len(spans) > 1:
        def work(span):
            a, b = span
            out[a:b] = march(origins[a:b], dirs[a:b])[0]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, spans))
    else:
        for a, b in spans:
            out[a:b] = march(origins[a:b], dirs[a:b])[0]
    return out.reshape(camera.height, camera.width, 3)


# ---------------------------------------------------------------------------
# Occupancy
# ---------------------------------------------------------------------------

def build_occupancy(
    pair: FieldPair,
    resolution: int | tuple = 128,
    threshold: float = 1e-2,
    dilation: int = 1,
) -> OccupancyGrid:
    """Mark cells whose center density exceeds `threshold`, then dilate."""
    res = (resolution,) * 3 if np.isscalar(resolution) else tuple(resolution)
    centers_1d = [(np.arange(r) + 0.5) / r for r in res]
    gx, gy, gz = np.meshgrid(*centers_1d, indexing="ij")
    u = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1).astype(np.float32)
    occ = np.empty(u.shape[0], dtype=bool)
    step = 1 << 18
    for a in range(0, len(u), step):
        occ[a:a + step] = _query_sigma(pair, u[a:a + step]) > threshold
    occ = occ.reshape(res)
    if dilation > 0 and occ.any():
        occ = ndimage.binary_dilation(occ, structure=np.ones((3, 3, 3), dtype=bool),
                                      iterations=dilation)
    return OccupancyGrid(occupied=occ, aabb=pair.aabb, threshold=threshold,
                         dilation=dilation)


def shrink_aabb(grid: OccupancyGrid) -> Aabb:
    """Tight box around occupied cells, expanded by one cell and clipped."""
    if not grid.occupied.any():
        warnings.warn("occupancy grid is empty; keeping previous bounding box")
        return grid.aabb
    res = np.array(grid.occupied.shape)
    cell = grid.aabb.size / res
    idx = np.nonzero(grid.occupied)
    lo_cell = np.array([a.min() for a in idx]) - 1
    hi_cell = np.array([a.max() for a in idx]) + 1
    lo = grid.aabb.min + np.maximum(lo_cell, 0) * cell
    hi = grid.aabb.min + np.minimum(hi_cell + 1, res) * cell
    return Aabb(lo, hi)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images; capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10 ** (-PSNR_CAP_DB / 10.0):
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))
