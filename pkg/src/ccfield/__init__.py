"""Compressible, composable radiance fields via hybrid tensor rank decomposition.

A scene is a multichannel 3D feature volume stored as a sum of vector- and
matrix-based rank components with per-channel rank weights. Models train
from posed images by analytic-gradient descent with a rank-residual loss,
compress by sorting and truncating rank components, and compose by
concatenating rank components under per-object affine transforms.
"""

from .decomposition import (
    DecomposedField,
    RankLayout,
    concat_ranks,
    permute_ranks,
    query_features,
    reconstruct_dense,
    truncate,
    upsample,
)
from .geometry import Aabb, Camera, Ray, generate_rays, look_at, ray_aabb
from .model import FieldPair, OccupancyGrid, make_model
from .shading import ShadingConfig, decode, eval_sh_basis
from .rendering import (
    RenderOptions,
    build_occupancy,
    march_ray,
    march_rays,
    psnr,
    render_image,
    shrink_aabb,
)
from .compression import (
    ImportanceReport,
    compress_to_budget,
    rank_importance,
    rank_sweep_targets,
    sort_and_truncate,
    truncate_color,
)
from .composition import (
    AffineTransform,
    ObjectInstance,
    Scene,
    composite_sample,
    march_composed_rays,
    warp_ray,
)
from .formats import (
    Dataset,
    load_dataset,
    load_model,
    load_scene,
    model_file_size,
    save_model,
)
from .training import (
    TrainConfig,
    TrainResult,
    adam_step,
    finite_difference_check,
    forward_groups,
    loss_and_grads,
    make_preset,
    rank_residual_loss,
    train,
)
from .synthetic import AnalyticScene, Primitive, demo_scene, generate_dataset

__version__ = "0.1.0"
