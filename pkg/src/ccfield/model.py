"""A trained model: density + color decompositions, bounding box, occupancy."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .decomposition import DecomposedField, RankLayout, resample
from .geometry import Aabb
from .shading import ShadingConfig


@dataclass(frozen=True)
class OccupancyGrid:
    """Binary mask over a box; cells with density above threshold, then dilated."""

    occupied: np.ndarray  # (H, W, D) bool
    aabb: Aabb
    threshold: float = 1e-2
    dilation: int = 1

    def __post_init__(self):
        occ = np.asarray(self.occupied, dtype=bool)
        if occ.ndim != 3:
            raise ValueError("occupancy grid must be 3D")
        object.__setattr__(self, "occupied", occ)

    @property
    def resolution(self) -> tuple:
        return self.occupied.shape

    @property
    def fraction_occupied(self) -> float:
        return float(self.occupied.mean())

    def contains(self, points: np.ndarray) -> np.ndarray:
        """True for points whose cell is occupied; out-of-box points are False."""
        p = np.atleast_2d(points)
        u = (p - self.aabb.min) / self.aabb.size
        inside = np.all((u >= 0.0) & (u <= 1.0), axis=-1)
        res = np.array(self.occupied.shape)
        cells = np.clip((u * res).astype(np.int64), 0, res - 1)
        out = np.zeros(len(p), dtype=bool)
        idx = np.nonzero(inside)[0]
        out[idx] = self.occupied[cells[idx, 0], cells[idx, 1], cells[idx, 2]]
        return out


@dataclass(frozen=True)
class FieldPair:
    """Density field (1 channel) + color field (SH coefficients) over one box."""

    density: DecomposedField
    color: DecomposedField
    aabb: Aabb
    shading: ShadingConfig
    occupancy: OccupancyGrid | None = None

    def __post_init__(self):
        if self.density.channels != 1:
            raise ValueError("density field must have exactly 1 channel")
        if self.color.channels != self.shading.color_channels:
            raise ValueError(
                f"color field has {self.color.channels} channels; shading config "
                f"wants {self.shading.color_channels}"
            )
        if self.density.resolution != self.color.resolution:
            raise ValueError("density and color fields must share one resolution")

    @property
    def resolution(self) -> tuple:
        return self.density.resolution

    @property
    def n_stages(self) -> int:
        """Number of rank-residual supervision stages across both fields."""
        return max(self.density.layout.n_groups, self.color.layout.n_groups)

    def stage_limits(self, stage: int):
        """((vec, mat) density, (vec, mat) color) prefixes active at `stage` (1-based)."""
        d = self.density.layout.prefix(min(stage, self.density.layout.n_groups))
        c = self.color.layout.prefix(min(stage, self.color.layout.n_groups))
        return d, c

    def params(self):
        """(name, array) pairs over both fields, canonical order."""
        out = []
        for prefix, f in (("density", self.density), ("color", self.color)):
            out.extend((f"{prefix}.{name}", arr) for name, arr in f.params())
        return out

    def replace_field(self, name: str, field: DecomposedField) -> "FieldPair":
        return replace(self, **{name: field})

    def with_resolution(self, new_resolution: tuple) -> "FieldPair":
        return replace(
            self,
            density=resample(self.density, new_resolution),
            color=resample(self.color, new_resolution),
            occupancy=self.occupancy,
        )

    def with_aabb(self, new_box: Aabb, new_resolution: tuple | None = None) -> "FieldPair":
        """Resample both fields onto a (usually smaller) box; drops occupancy."""
        res = new_resolution or self.resolution
        return replace(
            self,
            density=resample(self.density, res, self.aabb, new_box),
            color=resample(self.color, res, self.aabb, new_box),
            aabb=new_box,
            occupancy=None,
        )

    def astype(self, dtype) -> "FieldPair":
        return replace(self, density=self.density.astype(dtype), color=self.color.astype(dtype))

    def parameter_count(self) -> int:
        return sum(arr.size for _, arr in self.params())


def make_model(
    density_layout: RankLayout,
    color_layout: RankLayout,
    resolution: tuple,
    aabb: Aabb,
    shading: ShadingConfig = ShadingConfig(),
    rng: np.random.Generator | None = None,
    factor_scale: float = 0.2,
    weight_scale: float = 0.1,
) -> FieldPair:
    """A randomly initialized model; zero-ish density, gray color."""
    rng = rng or np.random.default_rng(0)
    density = DecomposedField.random(
        1, resolution, density_layout, rng, factor_scale, weight_scale
    )
    color = DecomposedField.random(
        shading.color_channels, resolution, color_layout, rng, factor_scale, weight_scale
    )
    return FieldPair(density=density, color=color, aabb=aabb, shading=shading)
