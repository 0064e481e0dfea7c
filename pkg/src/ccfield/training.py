"""Fitting a model to posed images with analytic gradients.

Every iteration renders a ray batch once per rank-residual stage, where
stage m uses only the first m groups of each field (clamped to the field's
own group count). All stages share one sample grid, so the stage-m render
equals an honest truncation render. The loss sums the squared error of
every supervised stage, ray-averaged, plus an L1 penalty on the density
factor tensors.

Gradients are computed by hand in reverse mode. For the quadrature with
weights w_i and background b, the derivative of the pixel with respect to
the optical depth s_i = sigma_i * delta_i of a kept sample is

    exp(-cum_i) * (c_i - b) - sum_{j > i, kept} w_j * (c_j - b),

which follows from w_j = exp(-cum_{j-1}) - exp(-cum_j) and absorbs the
background term; samples past the early-termination cut get zero. From
there the chain runs through the activations, the spherical-harmonics
projection, the rank-weight matmul, the per-rank factor products, and the
interpolation operators (whose transposes scatter gradients back onto the
grids). Stage losses are accumulated from the last stage backwards, so a
rank group receives gradients from every stage at or above it
("no-detach"), or from its own stage only ("detach").
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field, replace

import numpy as np
from scipy.special import expit

from .decomposition import FieldSampler, RankLayout
from .geometry import Aabb, ray_aabb
from .model import FieldPair, make_model
from .rendering import (
    RenderOptions,
    build_occupancy,
    composite_weights,
    make_sample_grid,
    shrink_aabb,
)
from .shading import eval_sh_basis, softplus

RESIDUAL_MODES = ("nodetach", "detach", "sequential", "plain")

DENSITY_FACTOR_NAMES = tuple(
    f"density.{n}" for n in ("Ux", "Uy", "Uz", "Uxy", "Uyz", "Uxz")
)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 30000
    batch_rays: int = 4096
    lr_factors: float = 0.02
    lr_weights: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    lambda_l1: float = 1e-4
    lr_decay_target: float = 0.1
    residual_mode: str = "nodetach"
    start_voxels: int = 128 ** 3
    upsample_schedule: tuple = ()  # ((step, total_voxels), ...)
    occupancy_steps: tuple = (2000, 4000)
    occupancy_resolution: int = 128
    occupancy_threshold: float = 1e-2
    occupancy_dilation: int = 1
    samples_per_diag: int = 512
    max_samples: int = 4096
    stop_transmittance: float = 1e-4
    background: tuple = (1.0, 1.0, 1.0)
    jitter: bool = False
    seed: int = 0
    threads: int = 1
    log_every: int = 10
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.residual_mode not in RESIDUAL_MODES:
            raise ValueError(f"residual_mode must be one of {RESIDUAL_MODES}")
        if self.batch_rays < 1 or self.iterations < 1:
            raise ValueError("batch size and iteration count must be positive")
        if list(self.upsample_schedule) != sorted(self.upsample_schedule):
            raise ValueError("upsample schedule must be sorted by step")

    def render_options(self) -> RenderOptions:
        return RenderOptions(
            samples_per_diag=self.samples_per_diag,
            background=self.background,
            stop_transmittance=self.stop_transmittance,
            max_samples=self.max_samples,
        )


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @staticmethod
    def zeros_like(params: dict) -> "OptimizerState":
        return OptimizerState(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict,
    grads: dict,
    state: OptimizerState,
    cfg: TrainConfig,
    lr_scale: float = 1.0,
    masks: dict | None = None,
):
    """One in-place Adam update with bias correction.

    Rank weights (names ending in ".S") use lr_weights, factors lr_factors.
    `masks` optionally restricts the update to a boolean subset per tensor.
    """
    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        lr = (cfg.lr_weights if name.endswith(".S") else cfg.lr_factors) * lr_scale
        m = state.m[name]
        v = state.v[name]
        mask = None if masks is None else masks.get(name)
        if mask is not None:
            m[mask] = b1 * m[mask] + (1 - b1) * g[mask]
            v[mask] = b2 * v[mask] + (1 - b2) * g[mask] ** 2
            p[mask] -= lr * (m[mask] / c1) / (np.sqrt(v[mask] / c2) + cfg.adam_eps)
        else:
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# Differentiable multi-stage renderer
# ---------------------------------------------------------------------------

def _stage_blocks(pair: FieldPair, field_name: str):
    """Per stage, the (vec_slice, mat_slice) of columns the stage introduces."""
    layout = getattr(pair, field_name).layout
    vp = np.concatenate([[0], layout.vec_prefixes()])
    mp = np.concatenate([[0], layout.mat_prefixes()])
    return [
        (slice(int(vp[g]), int(vp[g + 1])), slice(int(mp[g]), int(mp[g + 1])))
        for g in range(layout.n_groups)
    ]


def rank_residual_loss(stage_preds, gt: np.ndarray) -> float:
    """Sum over stages of the squared pixel error, averaged over rays."""
    gt = np.asarray(gt)
    total = 0.0
    for pred in stage_preds:
        total += float(np.sum((np.asarray(pred) - gt) ** 2)) / len(gt)
    return total


def l1_penalty(pair: FieldPair, lam: float) -> float:
    if lam == 0.0:
        return 0.0
    names = set(DENSITY_FACTOR_NAMES)
    return lam * float(
        sum(np.abs(arr).sum() for name, arr in pair.params() if name in names)
    )


def _zero_grads(pair: FieldPair, dtype) -> dict:
    return {name: np.zeros(arr.shape, dtype=dtype) for name, arr in pair.params()}


def _forward_backward_chunk(
    pair: FieldPair,
    origins: np.ndarray,
    dirs: np.ndarray,
    gt: np.ndarray | None,
    n_total_rays: int,
    opts: RenderOptions,
    mode: str,
    active_stage: int | None,
    want_grads: bool,
    render_all_stages: bool,
    jitter_rng=None,
):
    """Render (and optionally differentiate) one ray chunk.

    Returns (stage_preds dict {m: (n,3)}, grads dict or None). Loss terms are
    normalized by `n_total_rays` so chunk gradients sum to the batch gradient.
    """
    dtype = pair.density.dtype
    n = len(origins)
    M = pair.n_stages
    if mode == "plain":
        loss_stages = {M}
        render_stages = {M} | (set(range(1, M + 1)) if render_all_stages else set())
    elif mode == "sequential":
        p = active_stage if active_stage is not None else M
        loss_stages = {p}
        render_stages = {p} | (set(range(1, M + 1)) if render_all_stages else set())
    else:
        loss_stages = set(range(1, M + 1))
        render_stages = set(loss_stages)
    max_stage = max(render_stages)

    bg = np.asarray(opts.background, dtype=dtype)
    preds = {m: np.tile(bg, (n, 1)) for m in render_stages}
    grads = _zero_grads(pair, dtype) if want_grads else None

    t_near, t_far, hit = ray_aabb(origins, dirs, pair.aabb)
    if not np.any(hit):
        return preds, grads
    hit_idx = np.nonzero(hit)[0]
    base_step = pair.aabb.diagonal / opts.samples_per_diag
    grid = make_sample_grid(
        t_near[hit_idx], t_far[hit_idx], base_step, opts.max_samples, jitter_rng
    )
    pts = origins[hit_idx][grid.ray_index] + grid.t[:, None] * dirs[hit_idx][grid.ray_index]
    live = (
        pair.occupancy.contains(pts)
        if pair.occupancy is not None
        else np.ones(len(pts), dtype=bool)
    )
    if not np.any(live):
        return preds, grads

    u = pair.aabb.normalize(pts[live]).astype(dtype)
    P = len(u)
    sampler = FieldSampler(pair.resolution, u, dtype=dtype)
    ray_l = grid.ray_index[live]
    slot_l = grid.slot[live]
    delta_l = grid.delta[ray_l].astype(dtype)

    den, col = pair.density, pair.color
    dux, duy, duz = sampler.vec_samples(den)
    dxy, dyz, dxz = sampler.mat_samples(den)
    z_dv = dux * duy * duz
    z_dm = dxy * dyz * dxz
    cux, cuy, cuz = sampler.vec_samples(col)
    cxy, cyz, cxz = sampler.mat_samples(col)
    z_cv = cux * cuy * cuz
    z_cm = cxy * cyz * cxz

    B = pair.shading.basis_size
    basis = eval_sh_basis(dirs[hit_idx].astype(dtype), pair.shading.sh_degree)
    basis_l = np.ascontiguousarray(basis[ray_l])

    d_blocks = _stage_blocks(pair, "density")
    c_blocks = _stage_blocks(pair, "color")
    Vd = den.layout.n_vec
    Vc = col.layout.n_vec
    Sd = den.S
    Sc = col.S

    raw_d = np.zeros(P, dtype=dtype)
    raw_c = np.zeros((P, col.channels), dtype=dtype)

    shift = pair.shading.density_shift
    gt_hit = None if gt is None else gt[hit_idx]

    # per-stage tape entries for the reverse pass
    tape_dh = {}
    tape_drawd = {}
    sigma_info = None  # (w_flat, bg_w, t_incl_flat, kept_flat) of the latest density prefix

    for m in range(1, max_stage + 1):
        if m <= den.layout.n_groups:
            vs, ms = d_blocks[m - 1]
            if vs.stop > vs.start:
                raw_d += z_dv[:, vs] @ Sd[0, vs]
            if ms.stop > ms.start:
                raw_d += z_dm[:, ms] @ Sd[0, Vd + ms.start:Vd + ms.stop]
            sigma_info = None  # density prefix changed; recomposite
        if m <= col.layout.n_groups:
            vs, ms = c_blocks[m - 1]
            if vs.stop > vs.start:
                raw_c += z_cv[:, vs] @ Sc[:, vs].T
            if ms.stop > ms.start:
                raw_c += z_cm[:, ms] @ Sc[:, Vc + ms.start:Vc + ms.stop].T
        if m not in render_stages:
            continue

        if sigma_info is None:
            sigma = softplus(raw_d + shift)
            sigma_pad = np.zeros((grid.n_rays, grid.width), dtype=dtype)
            sigma_pad[ray_l, slot_l] = sigma
            w_pad, bg_w, t_incl, kept = composite_weights(
                sigma_pad, grid, opts.stop_transmittance, internals=True
            )
            sigma_info = (
                w_pad[ray_l, slot_l],
                bg_w,
                t_incl[ray_l, slot_l],
                kept[ray_l, slot_l],
            )
        w_flat, bg_w, t_incl_flat, kept_flat = sigma_info

        h = np.einsum("pkb,pb->pk", raw_c.reshape(P, 3, B), basis_l, optimize=True)
        c = expit(h)
        pix = np.empty((grid.n_rays, 3), dtype=np.float64)
        wc = w_flat[:, None] * c
        for k in range(3):
            pix[:, k] = np.bincount(ray_l, weights=wc[:, k], minlength=grid.n_rays)
        pix += bg_w[:, None] * np.asarray(opts.background, dtype=np.float64)
        preds[m][hit_idx] = pix.astype(dtype)

        if want_grads and m in loss_stages:
            g_pix = (2.0 / n_total_rays) * (pix - gt_hit).astype(dtype)  # (n_hit, 3)
            g_l = g_pix[ray_l]
            cb = c - bg[None, :]
            # suffix sums of w * (c - bg) over later kept samples, per ray
            wcb_pad = np.zeros((grid.n_rays, grid.width, 3), dtype=dtype)
            wcb_pad[ray_l, slot_l] = w_flat[:, None] * cb
            suf = np.cumsum(wcb_pad[:, ::-1], axis=1)[:, ::-1] - wcb_pad
            d_sigma = delta_l * kept_flat * (
                t_incl_flat * np.einsum("pk,pk->p", g_l, cb)
                - np.einsum("pk,pk->p", g_l, suf[ray_l, slot_l])
            )
            tape_drawd[m] = d_sigma * expit(raw_d + shift)
            tape_dh[m] = g_l * w_flat[:, None] * c * (1.0 - c)

    if not want_grads:
        return preds, None

    # Reverse pass over stages: running sums implement the no-detach rule,
    # per-stage-only sums implement detach (and the sequential single stage).
    accumulate = mode in ("nodetach", "plain")
    Dh = np.zeros((P, 3), dtype=dtype)
    Dd = np.zeros(P, dtype=dtype)
    dz_cv = np.zeros_like(z_cv)
    dz_cm = np.zeros_like(z_cm)
    dz_dv = np.zeros_like(z_dv)
    dz_dm = np.zeros_like(z_dm)
    Sc3 = Sc.reshape(3, B, -1)

    for m in range(max_stage, 0, -1):
        if accumulate:
            if m in tape_dh:
                Dh += tape_dh[m]
                Dd += tape_drawd[m]
            use_h, use_d = Dh, Dd
        else:
            if m not in tape_dh:
                continue
            use_h, use_d = tape_dh[m], tape_drawd[m]
        if mode == "sequential" and m != (active_stage or max_stage):
            continue

        if m <= col.layout.n_groups:
            vs, ms = c_blocks[m - 1]
            for kind, sl, z, dz in (
                ("vec", vs, z_cv, dz_cv),
                ("mat", ms, z_cm, dz_cm),
            ):
                if sl.stop <= sl.start:
                    continue
                cols = slice(sl.start, sl.stop) if kind == "vec" else slice(
                    Vc + sl.start, Vc + sl.stop
                )
                zb = z[:, sl]
                for kappa in range(3):
                    grads["color.S"][kappa * B:(kappa + 1) * B, cols] += (
                        basis_l.T @ (use_h[:, kappa:kappa + 1] * zb)
                    )
                    dz[:, sl] += use_h[:, kappa:kappa + 1] * (
                        basis_l @ Sc3[kappa, :, cols]
                    )
        if m <= den.layout.n_groups:
            vs, ms = d_blocks[m - 1]
            if vs.stop > vs.start:
                grads["density.S"][0, vs] += use_d @ z_dv[:, vs]
                dz_dv[:, vs] += use_d[:, None] * Sd[0, vs][None, :]
            if ms.stop > ms.start:
                cols = slice(Vd + ms.start, Vd + ms.stop)
                grads["density.S"][0, cols] += use_d @ z_dm[:, ms]
                dz_dm[:, ms] += use_d[:, None] * Sd[0, cols][None, :]

    # Factor gradients: product rule per rank, then scatter through the
    # interpolation operators' transposes.
    def vec_scatter(prefix, dz, ua, ub, uc):
        grads[f"{prefix}.Ux"] += sampler.scatter_axis("x", dz * ub * uc)
        grads[f"{prefix}.Uy"] += sampler.scatter_axis("y", dz * ua * uc)
        grads[f"{prefix}.Uz"] += sampler.scatter_axis("z", dz * ua * ub)

    def mat_scatter(prefix, dz, uab, ubc, uac):
        grads[f"{prefix}.Uxy"] += sampler.scatter_axis("xy", dz * ubc * uac)
        grads[f"{prefix}.Uyz"] += sampler.scatter_axis("yz", dz * uab * uac)
        grads[f"{prefix}.Uxz"] += sampler.scatter_axis("xz", dz * uab * ubc)

    if Vd:
        vec_scatter("density", dz_dv, dux, duy, duz)
    if den.layout.n_mat:
        mat_scatter("density", dz_dm, dxy, dyz, dxz)
    if Vc:
        vec_scatter("color", dz_cv, cux, cuy, cuz)
    if col.layout.n_mat:
        mat_scatter("color", dz_cm, cxy, cyz, cxz)
    return preds, grads


def loss_and_grads(
    pair: FieldPair,
    origins: np.ndarray,
    dirs: np.ndarray,
    gt: np.ndarray,
    cfg: TrainConfig,
    opts: RenderOptions | None = None,
    active_stage: int | None = None,
    want_grads: bool = True,
    render_all_stages: bool = False,
    jitter_rng=None,
    threads: int = 1,
):
    """Batch loss (residual + L1), per-stage predictions, and gradients.

    Ray chunks run on a thread pool and are reduced in a fixed order, so the
    result is identical for any thread count.
    """
    n = len(origins)
    mode = cfg.residual_mode
    opts = opts or cfg.render_options()

    def run(span):
        a, b = span
        return _forward_backward_chunk(
            pair, origins[a:b], dirs[a:b], None if gt is None else gt[a:b],
            n, opts, mode, active_stage, want_grads, render_all_stages, jitter_rng,
        )

    if threads > 1 and n >= 2 * threads and jitter_rng is None:
        bounds = np.linspace(0, n, threads + 1).astype(int)
        spans = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, spans))
        preds = {
            m: np.concatenate([r[0][m] for r in results])
            for m in results[0][0]
        }
        grads = None
        if want_grads:
            grads = results[0][1]
            for _, g in results[1:]:
                for k in grads:
                    grads[k] += g[k]
    else:
        preds, grads = run((0, n))

    stage_list = [preds[m] for m in sorted(preds)]
    loss = 0.0
    if gt is not None:
        if mode == "plain":
            supervised = [preds[pair.n_stages]]
        elif mode == "sequential":
            supervised = [preds[active_stage or pair.n_stages]]
        else:
            supervised = stage_list
        loss = rank_residual_loss(supervised, gt)
    loss += l1_penalty(pair, cfg.lambda_l1)
    if want_grads and cfg.lambda_l1:
        for name in DENSITY_FACTOR_NAMES:
            arr = dict(pair.params())[name]
            grads[name] += cfg.lambda_l1 * np.sign(arr)
    return loss, stage_list, grads


def forward_groups(
    pair: FieldPair,
    origins: np.ndarray,
    dirs: np.ndarray,
    opts: RenderOptions | None = None,
    threads: int = 1,
):
    """Per-stage predictions C_1..C_M for a ray batch (no gradients)."""
    cfg = TrainConfig(residual_mode="nodetach", iterations=1, lambda_l1=0.0)
    opts = opts or RenderOptions()
    _, stages, _ = loss_and_grads(
        pair, origins, dirs, None, cfg, opts=opts,
        want_grads=False, render_all_stages=True, threads=threads,
    )
    return stages


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def resolution_from_voxels(aabb: Aabb, n_voxels: int) -> tuple:
    """Per-axis resolution proportional to edge lengths, product close to n_voxels."""
    edges = aabb.size
    scale = (n_voxels / float(np.prod(edges))) ** (1.0 / 3.0)
    return tuple(max(2, int(round(e * scale))) for e in edges)


@dataclass
class TrainResult:
    pair: FieldPair
    curve: list  # rows of (step, loss, psnr per stage ...)
    final_loss: float

    def curve_csv(self) -> str:
        if not self.curve:
            return ""
        n_stages = len(self.curve[0]) - 2
        head = "step,loss," + ",".join(f"psnr_g{m + 1}" for m in range(n_stages))
        rows = [head]
        for row in self.curve:
            rows.append(
                f"{row[0]},{row[1]:.6f}," + ",".join(f"{v:.4f}" for v in row[2:])
            )
        return "\n".join(rows) + "\n"


def _batch_psnrs(stage_preds, gt) -> list:
    out = []
    for pred in stage_preds:
        mse = float(np.mean((np.asarray(pred, dtype=np.float64) - gt) ** 2))
        out.append(99.0 if mse <= 1e-10 else 10.0 * math.log10(1.0 / mse))
    return out


def _first_nonfinite(pair: FieldPair, grads: dict | None):
    for name, arr in pair.params():
        if not np.all(np.isfinite(arr)):
            return f"parameter {name}"
    if grads:
        for name, arr in grads.items():
            if not np.all(np.isfinite(arr)):
                return f"gradient of {name}"
    return "the loss"


def _sequential_stage(step: int, iterations: int, n_stages: int) -> int:
    phase = iterations / n_stages
    return min(n_stages, int((step - 1) // phase) + 1)


def _sequential_masks(pair: FieldPair, stage: int) -> dict:
    """Boolean masks selecting exactly the parameters of `stage`'s blocks."""
    masks = {}
    for field_name in ("density", "color"):
        f = getattr(pair, field_name)
        if stage > f.layout.n_groups:
            for name, arr in f.params():
                masks[f"{field_name}.{name}"] = np.zeros(arr.shape, dtype=bool)
            continue
        vp = np.concatenate([[0], f.layout.vec_prefixes()])
        mp = np.concatenate([[0], f.layout.mat_prefixes()])
        v0, v1 = int(vp[stage - 1]), int(vp[stage])
        m0, m1 = int(mp[stage - 1]), int(mp[stage])
        V = f.layout.n_vec
        for name, arr in f.params():
            mask = np.zeros(arr.shape, dtype=bool)
            if name == "S":
                mask[:, v0:v1] = True
                mask[:, V + m0:V + m1] = True
            elif name in ("Ux", "Uy", "Uz"):
                mask[:, v0:v1] = True
            else:
                mask[:, :, m0:m1] = True
            masks[f"{field_name}.{name}"] = mask
    return masks


def train(
    dataset,
    density_layout: RankLayout,
    color_layout: RankLayout,
    cfg: TrainConfig,
    shading=None,
    curve_path=None,
    checkpoint_path=None,
) -> TrainResult:
    """Fit a model to the dataset's train split.

    Follows the schedule in `cfg`: coarse-to-fine upsampling at the given
    voxel counts, occupancy grid builds (with a bounding-box shrink at the
    first one), Adam with separate learning rates for factors and rank
    weights, and a single exponential learning-rate decay.
    """
    from .shading import ShadingConfig

    shading = shading or ShadingConfig()
    split = dataset.split("train")
    origins, dirs, colors = split.all_rays()
    aabb = dataset.aabb or Aabb((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))

    rng = np.random.default_rng(cfg.seed)
    resolution = resolution_from_voxels(aabb, cfg.start_voxels)
    pair = make_model(density_layout, color_layout, resolution, aabb, shading, rng)
    params = dict(pair.params())
    state = OptimizerState.zeros_like(params)
    opts = cfg.render_options()
    jitter_rng = np.random.default_rng(cfg.seed + 1) if cfg.jitter else None

    n_pixels = len(origins)
    order = rng.permutation(n_pixels)
    cursor = 0
    curve = []
    upsample_left = list(cfg.upsample_schedule)
    occupancy_left = list(cfg.occupancy_steps)
    shrink_pending = bool(cfg.occupancy_steps)
    loss = float("nan")

    for step in range(1, cfg.iterations + 1):
        if cursor + cfg.batch_rays > n_pixels:
            order = rng.permutation(n_pixels)
            cursor = 0
        idx = order[cursor:cursor + cfg.batch_rays]
        cursor += cfg.batch_rays

        active_stage = None
        masks = None
        if cfg.residual_mode == "sequential":
            active_stage = _sequential_stage(step, cfg.iterations, pair.n_stages)
            masks = _sequential_masks(pair, active_stage)

        loss, stage_preds, grads = loss_and_grads(
            pair, origins[idx], dirs[idx], colors[idx], cfg,
            opts=opts, active_stage=active_stage, jitter_rng=jitter_rng,
            threads=cfg.threads,
        )
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss at step {step}; first non-finite tensor: "
                f"{_first_nonfinite(pair, grads)}"
            )
        lr_scale = cfg.lr_decay_target ** (step / cfg.iterations)
        adam_step(params, grads, state, cfg, lr_scale=lr_scale, masks=masks)

        if step % cfg.log_every == 0 or step == cfg.iterations:
            curve.append((step, loss, *_batch_psnrs(stage_preds, colors[idx])))

        changed = False
        while occupancy_left and step >= occupancy_left[0]:
            occupancy_left.pop(0)
            grid = build_occupancy(
                pair, cfg.occupancy_resolution, cfg.occupancy_threshold,
                cfg.occupancy_dilation,
            )
            if shrink_pending:
                shrink_pending = False
                new_box = shrink_aabb(grid)
                if not new_box.almost_equal(pair.aabb):
                    pair = pair.with_aabb(new_box)
                    grid = build_occupancy(
                        pair, cfg.occupancy_resolution, cfg.occupancy_threshold,
                        cfg.occupancy_dilation,
                    )
            pair = replace(pair, occupancy=grid)
            changed = True
        while upsample_left and step >= upsample_left[0][0]:
            _, voxels = upsample_left.pop(0)
            pair = pair.with_resolution(resolution_from_voxels(pair.aabb, voxels))
            changed = True
        if changed:
            params = dict(pair.params())
            state = OptimizerState.zeros_like(params)

        if checkpoint_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            _save_checkpoint(pair, state, checkpoint_path)

    pair.density.assert_finite()
    pair.color.assert_finite()
    result = TrainResult(pair=pair, curve=curve, final_loss=loss)
    if curve_path:
        with open(os.fspath(curve_path), "w") as fh:
            fh.write(result.curve_csv())
    if checkpoint_path:
        _save_checkpoint(pair, state, checkpoint_path)
    return result


def _save_checkpoint(pair: FieldPair, state: OptimizerState, path):
    from .formats import save_model

    save_model(pair, path)
    sidecar = {}
    for key, d in (("m", state.m), ("v", state.v)):
        for name, arr in d.items():
            sidecar[f"{key}:{name}"] = arr
    np.savez(os.fspath(path) + ".opt.npz", step=state.step, **sidecar)


def load_optimizer_sidecar(path) -> OptimizerState:
    data = np.load(os.fspath(path) + ".opt.npz")
    m = {k[2:]: data[k] for k in data.files if k.startswith("m:")}
    v = {k[2:]: data[k] for k in data.files if k.startswith("v:")}
    return OptimizerState(m=m, v=v, step=int(data["step"]))


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def _geomspace_voxels(start: int, final: int, steps: tuple) -> tuple:
    counts = np.geomspace(start, final, len(steps) + 1)[1:]
    return tuple((int(s), int(round(c))) for s, c in zip(steps, counts))


_PRESETS = {
    "cp": dict(
        lambda_l1=1e-10,
        density=RankLayout.single_group(96, 0),
        color=RankLayout(384, 0, ((96, 0),) * 4),
        iterations=30000,
        start_voxels=128 ** 3,
        upsample=_geomspace_voxels(128 ** 3, 500 ** 3, (2000, 3000, 4000, 5500, 7000)),
        occupancy=(2000, 4000),
        batch=4096,
        samples=512,
    ),
    "hy": dict(
        lambda_l1=1e-10,
        density=RankLayout.single_group(64, 16),
        color=RankLayout(256, 64, ((64, 16),) * 4),
        iterations=30000,
        start_voxels=128 ** 3,
        upsample=_geomspace_voxels(128 ** 3, 300 ** 3, (2000, 3000, 4000, 5500, 7000)),
        occupancy=(2000, 4000),
        batch=4096,
        samples=512,
    ),
    "hy-s": dict(
        lambda_l1=1e-10,
        density=RankLayout.single_group(96, 0),
        color=RankLayout(96, 64, ((96, 0), (0, 4), (0, 12), (0, 16), (0, 32))),
        iterations=30000,
        start_voxels=128 ** 3,
        upsample=_geomspace_voxels(128 ** 3, 300 ** 3, (2000, 3000, 4000, 5500, 7000)),
        occupancy=(2000, 4000),
        batch=4096,
        samples=512,
    ),
    "desk": dict(
        lambda_l1=1e-10,
        density=RankLayout.single_group(16, 0),
        color=RankLayout(16, 8, ((16, 0), (0, 1), (0, 1), (0, 2), (0, 4))),
        iterations=3000,
        start_voxels=32 ** 3,
        upsample=_geomspace_voxels(32 ** 3, 64 ** 3, (300, 450, 600)),
        occupancy=(200, 400),
        batch=2048,
        samples=256,
    ),
}

PRESET_NAMES = tuple(_PRESETS)


def make_preset(name: str, iterations: int | None = None, **overrides):
    """(density_layout, color_layout, TrainConfig) for a named preset.

    Overriding `iterations` rescales the upsample and occupancy schedules
    proportionally.
    """
    if name not in _PRESETS:
        raise ValueError(f"unknown preset '{name}'; choose from {PRESET_NAMES}")
    p = _PRESETS[name]
    iters = iterations or p["iterations"]
    ratio = iters / p["iterations"]
    scale = lambda s: max(1, int(round(s * ratio)))
    cfg = TrainConfig(
        iterations=iters,
        batch_rays=p["batch"],
        lambda_l1=p["lambda_l1"],
        start_voxels=p["start_voxels"],
        upsample_schedule=tuple((scale(s), v) for s, v in p["upsample"]),
        occupancy_steps=tuple(scale(s) for s in p["occupancy"]),
        samples_per_diag=p["samples"],
        **overrides,
    )
    return p["density"], p["color"], cfg


# ---------------------------------------------------------------------------
# Finite-difference gradient oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: tuple  # (tensor name, flat index, analytic, finite difference)
    per_tensor: dict

    @property
    def passed(self) -> bool:
        return self.max_rel_err < 1e-4


def finite_difference_check(
    pair: FieldPair,
    origins: np.ndarray,
    dirs: np.ndarray,
    gt: np.ndarray,
    cfg: TrainConfig,
    opts: RenderOptions,
    h: float = 1e-4,
    active_stage: int | None = None,
) -> GradCheckReport:
    """Compare every analytic parameter gradient with central differences.

    Runs in float64. In detach mode the reference scalar for a block-m
    parameter is that stage's own loss term (plus the L1 penalty), matching
    the gradient the mode actually applies; in no-detach mode it is the full
    loss. The relative error uses max(|analytic|, |fd|, 1e-6) as denominator;
    the floor keeps truncation noise on effectively-zero gradients (both
    sides around 1e-9 for barely-touched grid nodes) from dominating while
    gradients of any real magnitude are held to the strict relative bound.
    """
    pair = pair.astype(np.float64)
    params = dict(pair.params())
    _, _, grads = loss_and_grads(
        pair, origins, dirs, gt, cfg, opts=opts, active_stage=active_stage
    )

    def stage_losses():
        _, stages, _ = loss_and_grads(
            pair, origins, dirs, gt, cfg, opts=opts, want_grads=False,
            active_stage=active_stage, render_all_stages=True,
        )
        return [float(np.sum((s - gt) ** 2)) / len(gt) for s in stages]

    l1_names = set(DENSITY_FACTOR_NAMES)

    def scalar_for(name: str, stage_of_entry):
        terms = stage_losses()
        if cfg.residual_mode == "detach":
            base = terms[stage_of_entry - 1]
        elif cfg.residual_mode == "sequential":
            base = terms[(active_stage or len(terms)) - 1]
        elif cfg.residual_mode == "plain":
            base = terms[-1]
        else:
            base = sum(terms)
        if cfg.lambda_l1 and name in l1_names:
            base += l1_penalty(pair, cfg.lambda_l1)
        return base

    def block_of(field_name: str, param: str, flat_idx: int) -> int:
        f = getattr(pair, field_name)
        arr = dict(f.params())[param]
        idx = np.unravel_index(flat_idx, arr.shape)
        V = f.layout.n_vec
        if param == "S":
            col = idx[1]
            kind, comp = ("vec", col) if col < V else ("mat", col - V)
        elif param in ("Ux", "Uy", "Uz"):
            kind, comp = "vec", idx[1]
        else:
            kind, comp = "mat", idx[2]
        groups = f.layout.group_of_vec() if kind == "vec" else f.layout.group_of_mat()
        return int(groups[comp]) + 1

    max_rel = 0.0
    worst = ("", -1, 0.0, 0.0)
    per_tensor = {}
    for name, arr in params.items():
        field_name, param = name.split(".")
        flat = arr.reshape(-1)
        tensor_max = 0.0
        for i in range(flat.size):
            stage = block_of(field_name, param, i)
            if cfg.residual_mode == "sequential" and stage != (active_stage or pair.n_stages):
                # frozen block: its gradient is never applied (masked in Adam)
                continue
            old = flat[i]
            flat[i] = old + h
            up = scalar_for(name, stage)
            flat[i] = old - h
            down = scalar_for(name, stage)
            flat[i] = old
            fd = (up - down) / (2.0 * h)
            a = float(grads[name].reshape(-1)[i])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            if rel > tensor_max:
                tensor_max = rel
            if rel > max_rel:
                max_rel = rel
                worst = (name, i, a, fd)
        per_tensor[name] = tensor_max
    return GradCheckReport(max_rel_err=max_rel, worst=worst, per_tensor=per_tensor)


def gradcheck_setup(seed: int = 7, n_rays: int = 16, mode: str = "nodetach"):
    """The standard gradient-check scenario: an 8^3 hybrid two-group model
    viewed by a small ray bundle, with moderate density so every sample
    carries signal."""
    from .shading import ShadingConfig

    rng = np.random.default_rng(seed)
    aabb = Aabb((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    shading = ShadingConfig(sh_degree=3, density_shift=-1.0)
    pair = make_model(
        density_layout=RankLayout(3, 2, ((2, 1), (1, 1))),
        color_layout=RankLayout(3, 3, ((2, 1), (1, 2))),
        resolution=(8, 8, 8),
        aabb=aabb,
        shading=shading,
        rng=rng,
        factor_scale=0.5,
        weight_scale=0.5,
    )
    # Keep parameters away from zero: the L1 subgradient jumps there and
    # finite differences would straddle the kink.
    nudged = {}
    for name, arr in pair.params():
        a = arr.copy()
        small = np.abs(a) < 0.05
        a[small] = 0.05 * np.where(a[small] >= 0, 1.0, -1.0)
        nudged[name.split(".")[1]] = a
        if name.startswith("density"):
            pair = pair.replace_field("density", pair.density.replace_params(**{name.split(".")[1]: a}))
        else:
            pair = pair.replace_field("color", pair.color.replace_params(**{name.split(".")[1]: a}))

    o = np.tile(np.array([0.0, 0.0, 3.0]), (n_rays, 1))
    o[:, 0] = np.linspace(-0.6, 0.6, n_rays)
    d = np.array([0.15, 0.1, -1.0]) + 0.1 * rng.standard_normal((n_rays, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    gt = rng.random((n_rays, 3)).astype(np.float64)
    cfg = TrainConfig(
        iterations=1, residual_mode=mode, lambda_l1=1e-4,
        samples_per_diag=48, stop_transmittance=0.0,
    )
    opts = cfg.render_options()
    return pair, o, d, gt, cfg, opts
