"""Density and view-dependent color from raw field features.

Density comes from a shifted softplus so a zero-initialized field starts
nearly transparent. Color channels are logistic-sigmoid outputs of a real
spherical harmonics expansion in the viewing direction. The basis uses the
standard real SH without the Condon-Shortley phase, in (l, m) order with
l = 0..l_max and m = -l..l; this ordering is frozen into the file format.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit as sigmoid


@dataclass(frozen=True)
class ShadingConfig:
    sh_degree: int = 3
    density_shift: float = -10.0

    def __post_init__(self):
        if not 0 <= self.sh_degree <= 4:
            raise ValueError("sh_degree must be in [0, 4]")

    @property
    def basis_size(self) -> int:
        return (self.sh_degree + 1) ** 2

    @property
    def color_channels(self) -> int:
        return 3 * self.basis_size


def softplus(x):
    x = np.asarray(x)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def eval_sh_basis(dirs: np.ndarray, sh_degree: int) -> np.ndarray:
    """Real SH basis values at unit directions.

    dirs: (..., 3), unit within 1e-6 (re-normalized beyond that; zero raises).
    Returns (..., (sh_degree+1)^2) in (l, m) order.
    """
    d = np.asarray(dirs, dtype=np.float64 if np.asarray(dirs).dtype == np.float64 else np.float32)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    norms = np.linalg.norm(d, axis=-1)
    if np.any(norms < 1e-12):
        raise ValueError("zero viewing direction")
    if np.any(np.abs(norms - 1.0) > 1e-6):
        d = d / norms[..., None]
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    n = (sh_degree + 1) ** 2
    out = np.empty(d.shape[:-1] + (n,), dtype=d.dtype)
    out[..., 0] = 0.28209479177387814
    if sh_degree >= 1:
        out[..., 1] = 0.4886025119029199 * y
        out[..., 2] = 0.4886025119029199 * z
        out[..., 3] = 0.4886025119029199 * x
    if sh_degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = 1.0925484305920792 * x * y
        out[..., 5] = 1.0925484305920792 * y * z
        out[..., 6] = 0.31539156525252005 * (3.0 * zz - 1.0)
        out[..., 7] = 1.0925484305920792 * x * z
        out[..., 8] = 0.5462742152960396 * (xx - yy)
    if sh_degree >= 3:
        out[..., 9] = 0.5900435899266435 * y * (3.0 * xx - yy)
        out[..., 10] = 2.890611442640554 * x * y * z
        out[..., 11] = 0.4570457994644658 * y * (5.0 * zz - 1.0)
        out[..., 12] = 0.3731763325901154 * z * (5.0 * zz - 3.0)
        out[..., 13] = 0.4570457994644658 * x * (5.0 * zz - 1.0)
        out[..., 14] = 1.445305721320277 * z * (xx - yy)
        out[..., 15] = 0.5900435899266435 * x * (xx - 3.0 * yy)
    if sh_degree >= 4:
        out[..., 16] = 2.5033429417967046 * x * y * (xx - yy)
        out[..., 17] = 1.7701307697799304 * y * z * (3.0 * xx - yy)
        out[..., 18] = 0.9461746957575601 * x * y * (7.0 * zz - 1.0)
        out[..., 19] = 0.6690465435572892 * y * z * (7.0 * zz - 3.0)
        out[..., 20] = 0.10578554691520431 * (35.0 * zz * zz - 30.0 * zz + 3.0)
        out[..., 21] = 0.6690465435572892 * x * z * (7.0 * zz - 3.0)
        out[..., 22] = 0.47308734787878004 * (xx - yy) * (7.0 * zz - 1.0)
        out[..., 23] = 1.7701307697799304 * x * z * (xx - 3.0 * yy)
        out[..., 24] = 0.6258357354491761 * (xx * xx - 6.0 * xx * yy + yy * yy)
    return out[0] if single else out


def decode(
    raw_density: np.ndarray,
    raw_color: np.ndarray,
    dirs: np.ndarray,
    cfg: ShadingConfig,
):
    """(sigma, rgb) from raw features and viewing directions.

    raw_color holds the SH coefficients channel-major: the first basis_size
    entries belong to red, then green, then blue.
    """
    raw_color = np.asarray(raw_color)
    single = raw_color.ndim == 1
    raw_color = np.atleast_2d(raw_color)
    B = cfg.basis_size
    if raw_color.shape[-1] != 3 * B:
        raise ValueError(
            f"raw_color has {raw_color.shape[-1]} channels, expected {3 * B}"
        )
    sigma = softplus(np.asarray(raw_density) + cfg.density_shift)
    basis = np.atleast_2d(eval_sh_basis(dirs, cfg.sh_degree))
    coeffs = raw_color.reshape(-1, 3, B)
    h = np.einsum("pkb,pb->pk", coeffs, basis.astype(coeffs.dtype))
    rgb = sigmoid(h)
    return (sigma, rgb[0]) if single else (sigma, rgb)
