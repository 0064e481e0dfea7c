"""Hybrid tensor rank decomposition of multichannel 3D feature volumes.

A field stores a C x H x W x D feature volume as a sum of rank components.
Each component is either vector-based (outer product of three 1D factors,
one per axis) or matrix-based (product of three bilinear plane factors),
weighted per channel by a column of the rank-weight matrix S.

Continuous queries sample each factor by linear/bilinear interpolation at
the query point FIRST, then multiply per rank and apply S. For matrix
components this is not the same as interpolating the dense tensor; the
sample-then-multiply order is the normative semantics of this module.
Summation over ranks always runs in ascending column order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse

MAX_DENSE_ELEMENTS = 1 << 24  # reconstruct_dense guard


@dataclass(frozen=True)
class RankLayout:
    """Counts of vector and matrix rank components and their grouping.

    `groups` is an ordered tuple of (vec_count, mat_count) increments; group
    m ends at the m-th dividing rank. Group order is significant.
    """

    n_vec: int
    n_mat: int
    groups: tuple

    def __post_init__(self):
        groups = tuple((int(v), int(m)) for v, m in self.groups)
        object.__setattr__(self, "groups", groups)
        if self.n_vec < 0 or self.n_mat < 0 or self.n_vec + self.n_mat == 0:
            raise ValueError("layout must contain at least one rank component")
        if not groups:
            raise ValueError("layout needs at least one group")
        for v, m in groups:
            if v < 0 or m < 0 or v + m == 0:
                raise ValueError(f"empty or negative group ({v},{m})")
        if sum(v for v, _ in groups) != self.n_vec or sum(m for _, m in groups) != self.n_mat:
            raise ValueError("group counts do not sum to (n_vec, n_mat)")

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def total(self) -> int:
        return self.n_vec + self.n_mat

    def vec_prefixes(self) -> np.ndarray:
        """Cumulative vec counts after each group."""
        return np.cumsum([v for v, _ in self.groups])

    def mat_prefixes(self) -> np.ndarray:
        return np.cumsum([m for _, m in self.groups])

    def prefix(self, n_groups: int) -> tuple:
        """(vec, mat) counts covered by the first `n_groups` groups."""
        if not 1 <= n_groups <= self.n_groups:
            raise ValueError(f"group prefix {n_groups} outside 1..{self.n_groups}")
        return int(self.vec_prefixes()[n_groups - 1]), int(self.mat_prefixes()[n_groups - 1])

    def group_of_vec(self) -> np.ndarray:
        """Group id (0-based) of each vec component."""
        return np.repeat(np.arange(self.n_groups), [v for v, _ in self.groups])

    def group_of_mat(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_groups), [m for _, m in self.groups])

    @staticmethod
    def single_group(n_vec: int, n_mat: int) -> "RankLayout":
        return RankLayout(n_vec, n_mat, ((n_vec, n_mat),))


@dataclass(frozen=True)
class DecomposedField:
    """One channel-group's factors: rank weights S plus axis/plane factors.

    Shapes: S (C, n_vec + n_mat) with columns ordered [vec | mat],
    Ux (H, n_vec), Uy (W, n_vec), Uz (D, n_vec),
    Uxy (H, W, n_mat), Uyz (W, D, n_mat), Uxz (H, D, n_mat).
    Factors are float32 in storage; float64 copies exist only for gradient
    checking (`astype`).
    """

    channels: int
    resolution: tuple
    S: np.ndarray
    Ux: np.ndarray
    Uy: np.ndarray
    Uz: np.ndarray
    Uxy: np.ndarray
    Uyz: np.ndarray
    Uxz: np.ndarray
    layout: RankLayout

    def __post_init__(self):
        H, W, D = self.resolution
        V, M = self.layout.n_vec, self.layout.n_mat
        expect = {
            "S": (self.channels, V + M),
            "Ux": (H, V),
            "Uy": (W, V),
            "Uz": (D, V),
            "Uxy": (H, W, M),
            "Uyz": (W, D, M),
            "Uxz": (H, D, M),
        }
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")

    @property
    def dtype(self):
        return self.S.dtype

    def params(self):
        """(name, array) pairs in canonical serialization order."""
        return [
            ("S", self.S),
            ("Ux", self.Ux),
            ("Uy", self.Uy),
            ("Uz", self.Uz),
            ("Uxy", self.Uxy),
            ("Uyz", self.Uyz),
            ("Uxz", self.Uxz),
        ]

    def replace_params(self, **arrays) -> "DecomposedField":
        return replace(self, **arrays)

    def astype(self, dtype) -> "DecomposedField":
        kw = {name: arr.astype(dtype) for name, arr in self.params()}
        return replace(self, **kw)

    def assert_finite(self):
        for name, arr in self.params():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite values in factor {name}")

    @staticmethod
    def random(
        channels: int,
        resolution: tuple,
        layout: RankLayout,
        rng: np.random.Generator,
        factor_scale: float = 0.2,
        weight_scale: float = 0.1,
        dtype=np.float32,
    ) -> "DecomposedField":
        H, W, D = resolution
        V, M = layout.n_vec, layout.n_mat

        def g(*shape):
            return (factor_scale * rng.standard_normal(shape)).astype(dtype)

        return DecomposedField(
            channels=channels,
            resolution=tuple(int(r) for r in resolution),
            S=(weight_scale * rng.standard_normal((channels, V + M))).astype(dtype),
            Ux=g(H, V),
            Uy=g(W, V),
            Uz=g(D, V),
            Uxy=g(H, W, M),
            Uyz=g(W, D, M),
            Uxz=g(H, D, M),
            layout=layout,
        )

    @staticmethod
    def zeros(channels, resolution, layout, dtype=np.float32) -> "DecomposedField":
        H, W, D = resolution
        V, M = layout.n_vec, layout.n_mat
        z = lambda *s: np.zeros(s, dtype=dtype)
        return DecomposedField(
            channels, tuple(resolution), z(channels, V + M),
            z(H, V), z(W, V), z(D, V), z(H, W, M), z(W, D, M), z(H, D, M), layout,
        )


# ---------------------------------------------------------------------------
# Interpolation operators
# ---------------------------------------------------------------------------

def _axis_interp(g: np.ndarray, n: int, dtype) -> sparse.csr_matrix:
    """Sparse (P, n) operator: row p linearly interpolates node values at g[p].

    g is in grid coordinates [0, n-1]; node i sits at g = i. Endpoint queries
    are exact.
    """
    g = np.clip(np.asarray(g, dtype=np.float64), 0.0, n - 1)
    i0 = np.minimum(g.astype(np.int64), n - 2)
    f = g - i0
    P = g.shape[0]
    indptr = np.arange(P + 1, dtype=np.int64) * 2
    indices = np.empty(P * 2, dtype=np.int64)
    indices[0::2] = i0
    indices[1::2] = i0 + 1
    data = np.empty(P * 2, dtype=dtype)
    data[0::2] = 1.0 - f
    data[1::2] = f
    return sparse.csr_matrix((data, indices, indptr), shape=(P, n))


def _plane_interp(ga, gb, na, nb, dtype) -> sparse.csr_matrix:
    """Sparse (P, na*nb) bilinear operator over a row-major (na, nb) plane."""
    ga = np.clip(np.asarray(ga, dtype=np.float64), 0.0, na - 1)
    gb = np.clip(np.asarray(gb, dtype=np.float64), 0.0, nb - 1)
    ia = np.minimum(ga.astype(np.int64), na - 2)
    ib = np.minimum(gb.astype(np.int64), nb - 2)
    fa = ga - ia
    fb = gb - ib
    P = ga.shape[0]
    base = ia * nb + ib
    indptr = np.arange(P + 1, dtype=np.int64) * 4
    indices = np.empty(P * 4, dtype=np.int64)
    indices[0::4] = base
    indices[1::4] = base + 1
    indices[2::4] = base + nb
    indices[3::4] = base + nb + 1
    data = np.empty(P * 4, dtype=dtype)
    data[0::4] = (1 - fa) * (1 - fb)
    data[1::4] = (1 - fa) * fb
    data[2::4] = fa * (1 - fb)
    data[3::4] = fa * fb
    return sparse.csr_matrix((data, indices, indptr), shape=(P, na * nb))


class FieldSampler:
    """Interpolation operators for a batch of normalized query points.

    Built once per batch and reused for every field sharing the resolution
    (e.g. the density and color fields of one model), and for both the
    forward gather (W @ factors) and the backward scatter (W.T @ grads).
    """

    def __init__(self, resolution: tuple, u: np.ndarray, dtype=np.float32):
        H, W, D = resolution
        u = np.atleast_2d(np.asarray(u))
        if u.shape[-1] != 3:
            raise ValueError("query points must have 3 components")
        self.resolution = tuple(resolution)
        self.n_points = u.shape[0]
        self.dtype = dtype
        gx = u[:, 0] * (H - 1)
        gy = u[:, 1] * (W - 1)
        gz = u[:, 2] * (D - 1)
        self.Wx = _axis_interp(gx, H, dtype)
        self.Wy = _axis_interp(gy, W, dtype)
        self.Wz = _axis_interp(gz, D, dtype)
        self.Wxy = _plane_interp(gx, gy, H, W, dtype)
        self.Wyz = _plane_interp(gy, gz, W, D, dtype)
        self.Wxz = _plane_interp(gx, gz, H, D, dtype)

    def vec_samples(self, field: DecomposedField, limit: int | None = None):
        """Per-point samples (ux, uy, uz), each (P, n_vec[:limit])."""
        sl = slice(None, limit)
        return (
            self.Wx @ field.Ux[:, sl],
            self.Wy @ field.Uy[:, sl],
            self.Wz @ field.Uz[:, sl],
        )

    def mat_samples(self, field: DecomposedField, limit: int | None = None):
        sl = slice(None, limit)
        M = field.layout.n_mat if limit is None else limit
        H, W, D = field.resolution
        return (
            self.Wxy @ field.Uxy[:, :, sl].reshape(H * W, -1),
            self.Wyz @ field.Uyz[:, :, sl].reshape(W * D, -1),
            self.Wxz @ field.Uxz[:, :, sl].reshape(H * D, -1),
        )

    def scatter_axis(self, which: str, grad: np.ndarray) -> np.ndarray:
        """Accumulate per-point factor gradients back onto grid nodes."""
        W = getattr(self, "W" + which)
        out = W.T @ grad
        if which in ("xy", "yz", "xz"):
            H, Wr, D = self.resolution
            shapes = {"xy": (H, Wr), "yz": (Wr, D), "xz": (H, D)}
            out = out.reshape(*shapes[which], -1)
        return np.ascontiguousarray(out)


def query_features(
    field: DecomposedField,
    u: np.ndarray,
    keep: tuple | None = None,
    sampler: FieldSampler | None = None,
) -> np.ndarray:
    """Feature vectors at normalized coordinates u in [0,1]^3.

    `keep = (vec_limit, mat_limit)` evaluates only the leading components of
    each kind; ranks beyond the limits contribute nothing.
    Returns (P, C) for (P, 3) input, or (C,) for a single point.
    """
    single = np.asarray(u).ndim == 1
    if keep is None:
        nv, nm = field.layout.n_vec, field.layout.n_mat
    else:
        nv, nm = int(keep[0]), int(keep[1])
        if nv > field.layout.n_vec or nm > field.layout.n_mat or nv < 0 or nm < 0:
            raise ValueError(f"keep {keep} exceeds layout "
                             f"({field.layout.n_vec},{field.layout.n_mat})")
    if sampler is None:
        sampler = FieldSampler(field.resolution, u, dtype=field.dtype)
    out = np.zeros((sampler.n_points, field.channels), dtype=field.dtype)
    if nv:
        ux, uy, uz = sampler.vec_samples(field, nv)
        out += (ux * uy * uz) @ field.S[:, :nv].T
    if nm:
        uxy, uyz, uxz = sampler.mat_samples(field, nm)
        out += (uxy * uyz * uxz) @ field.S[:, field.layout.n_vec:field.layout.n_vec + nm].T
    return out[0] if single else out


def reconstruct_dense(field: DecomposedField) -> np.ndarray:
    """Materialize the dense (C, H, W, D) tensor at the grid nodes."""
    H, W, D = field.resolution
    if field.channels * H * W * D > MAX_DENSE_ELEMENTS:
        raise ValueError("field too large to materialize densely")
    V = field.layout.n_vec
    dense = np.zeros((field.channels, H, W, D), dtype=field.dtype)
    if V:
        dense += np.einsum(
            "cr,ir,jr,kr->cijk", field.S[:, :V], field.Ux, field.Uy, field.Uz,
            optimize=True,
        )
    if field.layout.n_mat:
        dense += np.einsum(
            "cr,ijr,jkr,ikr->cijk", field.S[:, V:], field.Uxy, field.Uyz, field.Uxz,
            optimize=True,
        )
    return dense


# ---------------------------------------------------------------------------
# Structural edits (all return new values, never mutate)
# ---------------------------------------------------------------------------

def _regroup(layout: RankLayout, kept_vec: np.ndarray, kept_mat: np.ndarray) -> RankLayout:
    """Group table for a kept-index subset; groups emptied entirely are dropped."""
    gv = layout.group_of_vec()
    gm = layout.group_of_mat()
    groups = []
    for g in range(layout.n_groups):
        v = int(np.count_nonzero(gv[kept_vec] == g))
        m = int(np.count_nonzero(gm[kept_mat] == g))
        if v + m:
            groups.append((v, m))
    if not groups:
        raise ValueError("truncation would drop every rank component")
    return RankLayout(len(kept_vec), len(kept_mat), tuple(groups))


def truncate(field: DecomposedField, keep) -> DecomposedField:
    """Keep a subset of rank components (mechanical slicing).

    `keep` is either a (vec_limit, mat_limit) prefix pair or an explicit
    (vec_indices, mat_indices) pair of index sequences.
    """
    k0, k1 = keep
    if np.isscalar(k0) and np.isscalar(k1):
        kept_vec = np.arange(int(k0))
        kept_mat = np.arange(int(k1))
    else:
        kept_vec = np.asarray(sorted(int(i) for i in k0), dtype=np.int64)
        kept_mat = np.asarray(sorted(int(i) for i in k1), dtype=np.int64)
    V = field.layout.n_vec
    if len(kept_vec) + len(kept_mat) == 0:
        raise ValueError("empty keep set")
    if (len(kept_vec) and (kept_vec.min() < 0 or kept_vec.max() >= V)) or len(
        set(kept_vec.tolist())
    ) != len(kept_vec):
        raise ValueError("invalid vec indices")
    if (len(kept_mat) and (kept_mat.min() < 0 or kept_mat.max() >= field.layout.n_mat)) or len(
        set(kept_mat.tolist())
    ) != len(kept_mat):
        raise ValueError("invalid mat indices")
    layout = _regroup(field.layout, kept_vec, kept_mat)
    cols = np.concatenate([kept_vec, V + kept_mat]).astype(np.int64)
    return DecomposedField(
        channels=field.channels,
        resolution=field.resolution,
        S=field.S[:, cols].copy(),
        Ux=field.Ux[:, kept_vec].copy(),
        Uy=field.Uy[:, kept_vec].copy(),
        Uz=field.Uz[:, kept_vec].copy(),
        Uxy=field.Uxy[:, :, kept_mat].copy(),
        Uyz=field.Uyz[:, :, kept_mat].copy(),
        Uxz=field.Uxz[:, :, kept_mat].copy(),
        layout=layout,
    )


def concat_ranks(a: DecomposedField, b: DecomposedField) -> DecomposedField:
    """Direct sum of two fields along the rank dimension."""
    if a.channels != b.channels:
        raise ValueError(f"channel mismatch: {a.channels} vs {b.channels}")
    if a.resolution != b.resolution:
        raise ValueError(f"resolution mismatch: {a.resolution} vs {b.resolution}")
    Va = a.layout.n_vec
    Vb = b.layout.n_vec
    S = np.concatenate(
        [a.S[:, :Va], b.S[:, :Vb], a.S[:, Va:], b.S[:, Vb:]], axis=1
    )
    layout = RankLayout(
        Va + Vb, a.layout.n_mat + b.layout.n_mat, a.layout.groups + b.layout.groups
    )
    return DecomposedField(
        channels=a.channels,
        resolution=a.resolution,
        S=S,
        Ux=np.concatenate([a.Ux, b.Ux], axis=1),
        Uy=np.concatenate([a.Uy, b.Uy], axis=1),
        Uz=np.concatenate([a.Uz, b.Uz], axis=1),
        Uxy=np.concatenate([a.Uxy, b.Uxy], axis=2),
        Uyz=np.concatenate([a.Uyz, b.Uyz], axis=2),
        Uxz=np.concatenate([a.Uxz, b.Uxz], axis=2),
        layout=layout,
    )


def _check_perm(perm, n):
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError("not a permutation")
    return perm


def permute_ranks(field: DecomposedField, vec_perm, mat_perm) -> DecomposedField:
    """Reorder components within each kind; queries are unchanged up to rounding."""
    vp = _check_perm(vec_perm, field.layout.n_vec)
    mp = _check_perm(mat_perm, field.layout.n_mat)
    V = field.layout.n_vec
    cols = np.concatenate([vp, V + mp])
    return replace(
        field,
        S=field.S[:, cols].copy(),
        Ux=field.Ux[:, vp].copy(),
        Uy=field.Uy[:, vp].copy(),
        Uz=field.Uz[:, vp].copy(),
        Uxy=field.Uxy[:, :, mp].copy(),
        Uyz=field.Uyz[:, :, mp].copy(),
        Uxz=field.Uxz[:, :, mp].copy(),
    )


def _resample_axis(arr: np.ndarray, op: sparse.csr_matrix, axis: int) -> np.ndarray:
    moved = np.moveaxis(arr, axis, 0)
    flat = moved.reshape(moved.shape[0], -1)
    out = op @ flat
    out = out.reshape((op.shape[0],) + moved.shape[1:])
    return np.ascontiguousarray(np.moveaxis(out, 0, axis))


def resample(
    field: DecomposedField,
    new_resolution: tuple,
    src_box=None,
    dst_box=None,
) -> DecomposedField:
    """Resample factors onto a new grid (and optionally a new bounding box).

    Vector factors use 1D linear interpolation, matrix factors bilinear.
    With identical boxes, corner nodes map to corners exactly. `src_box` and
    `dst_box` are Aabb-like objects; pass both to shrink/move the domain
    (dst must lie inside src).
    """
    H2, W2, D2 = (int(r) for r in new_resolution)
    if min(H2, W2, D2) < 2:
        raise ValueError("target resolution must be at least 2 per axis")
    ops = []
    for axis, (n_old, n_new) in enumerate(zip(field.resolution, (H2, W2, D2))):
        u_new = np.linspace(0.0, 1.0, n_new)
        if src_box is not None and dst_box is not None:
            lo_s, hi_s = src_box.min[axis], src_box.max[axis]
            lo_d, hi_d = dst_box.min[axis], dst_box.max[axis]
            x = lo_d + u_new * (hi_d - lo_d)
            u_new = (x - lo_s) / (hi_s - lo_s)
        ops.append(_axis_interp(u_new * (n_old - 1), n_old, field.dtype))
    Lx, Ly, Lz = ops
    return DecomposedField(
        channels=field.channels,
        resolution=(H2, W2, D2),
        S=field.S.copy(),
        Ux=np.ascontiguousarray(Lx @ field.Ux),
        Uy=np.ascontiguousarray(Ly @ field.Uy),
        Uz=np.ascontiguousarray(Lz @ field.Uz),
        Uxy=_resample_axis(_resample_axis(field.Uxy, Lx, 0), Ly, 1),
        Uyz=_resample_axis(_resample_axis(field.Uyz, Ly, 0), Lz, 1),
        Uxz=_resample_axis(_resample_axis(field.Uxz, Lx, 0), Lz, 1),
        layout=field.layout,
    )


def upsample(field: DecomposedField, new_resolution: tuple) -> DecomposedField:
    """Resample to a finer grid over the same bounding box; S is unchanged."""
    return resample(field, new_resolution)
