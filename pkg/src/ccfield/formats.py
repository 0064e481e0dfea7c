"""File formats: binary models, JSON scene files, and posed-image datasets.

Model files ("CCNF", version 1, little-endian throughout):

    magic 4s | version u16 | flags u16 (bit 0: occupancy present)
    aabb 6 x f64 (min xyz, max xyz)
    sh_degree u16 | reserved u16 | density_shift f64
    2 field descriptors (density, then color):
        C, H, W, D, n_vec, n_mat, n_groups as u32, then n_groups x (vec u32, mat u32)
    occupancy descriptor when present: resolution 3 x u32 | threshold f64 | dilation u32
    payload per field, in descriptor order: S, Ux, Uy, Uz, Uxy, Uyz, Uxz as
        C-order f32; then the occupancy bitset packed 8 cells per byte.

The declared payload length must match the header arithmetic exactly and
save -> load -> save round-trips are byte-identical.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np
from PIL import Image

import jsonschema

from .decomposition import DecomposedField, RankLayout
from .geometry import Aabb, Camera, focal_from_angle
from .model import FieldPair, OccupancyGrid
from .shading import ShadingConfig

MAGIC = b"CCNF"
VERSION = 1
_FLAG_OCCUPANCY = 1


class FormatError(ValueError):
    """Raised for malformed or unsupported model files."""


def _field_descriptor(f: DecomposedField) -> bytes:
    H, W, D = f.resolution
    head = struct.pack(
        "<7I", f.channels, H, W, D, f.layout.n_vec, f.layout.n_mat, f.layout.n_groups
    )
    return head + b"".join(struct.pack("<2I", v, m) for v, m in f.layout.groups)


def _field_param_floats(channels, resolution, n_vec, n_mat) -> int:
    H, W, D = resolution
    return (
        channels * (n_vec + n_mat)
        + (H + W + D) * n_vec
        + (H * W + W * D + H * D) * n_mat
    )


def header_size(n_groups_density: int, n_groups_color: int, has_occupancy: bool) -> int:
    size = 4 + 2 + 2 + 6 * 8 + 2 + 2 + 8
    size += 2 * 28 + 8 * (n_groups_density + n_groups_color)
    if has_occupancy:
        size += 3 * 4 + 8 + 4
    return size


def model_file_size(pair: FieldPair) -> int:
    """Exact on-disk size in bytes of `pair` in the model format."""
    floats = sum(
        _field_param_floats(f.channels, f.resolution, f.layout.n_vec, f.layout.n_mat)
        for f in (pair.density, pair.color)
    )
    occ_bytes = 0
    if pair.occupancy is not None:
        occ_bytes = math.ceil(np.prod(pair.occupancy.resolution) / 8)
    return (
        header_size(
            pair.density.layout.n_groups,
            pair.color.layout.n_groups,
            pair.occupancy is not None,
        )
        + 4 * floats
        + occ_bytes
    )


def save_model(pair: FieldPair, path):
    """Write a model file atomically (temp file + rename)."""
    if pair.occupancy is not None and not pair.occupancy.aabb.almost_equal(pair.aabb):
        raise ValueError("occupancy grid box does not match the model box")
    flags = _FLAG_OCCUPANCY if pair.occupancy is not None else 0
    parts = [struct.pack("<4sHH", MAGIC, VERSION, flags)]
    parts.append(struct.pack("<6d", *pair.aabb.min, *pair.aabb.max))
    parts.append(struct.pack("<HHd", pair.shading.sh_degree, 0, pair.shading.density_shift))
    parts.append(_field_descriptor(pair.density))
    parts.append(_field_descriptor(pair.color))
    if pair.occupancy is not None:
        occ = pair.occupancy
        parts.append(
            struct.pack("<3IdI", *occ.resolution, occ.threshold, occ.dilation)
        )
    for f in (pair.density, pair.color):
        for _, arr in f.params():
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if pair.occupancy is not None:
        parts.append(np.packbits(pair.occupancy.occupied.reshape(-1)).tobytes())
    blob = b"".join(parts)

    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(blob)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.blob):
            raise FormatError("model file truncated inside the header")
        out = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += size
        return out

    def take_array(self, count: int, dtype="<f4") -> np.ndarray:
        size = count * np.dtype(dtype).itemsize
        if self.pos + size > len(self.blob):
            raise FormatError("model file truncated inside the payload")
        arr = np.frombuffer(self.blob, dtype=dtype, count=count, offset=self.pos).copy()
        self.pos += size
        return arr


def _read_field_descriptor(r: _Reader):
    C, H, W, D, n_vec, n_mat, n_groups = r.take("<7I")
    groups = tuple(r.take("<2I") for _ in range(n_groups))
    return C, (H, W, D), RankLayout(n_vec, n_mat, groups)


def _read_field(r: _Reader, C, resolution, layout) -> DecomposedField:
    H, W, D = resolution
    V, M = layout.n_vec, layout.n_mat
    S = r.take_array(C * (V + M)).reshape(C, V + M)
    Ux = r.take_array(H * V).reshape(H, V)
    Uy = r.take_array(W * V).reshape(W, V)
    Uz = r.take_array(D * V).reshape(D, V)
    Uxy = r.take_array(H * W * M).reshape(H, W, M)
    Uyz = r.take_array(W * D * M).reshape(W, D, M)
    Uxz = r.take_array(H * D * M).reshape(H, D, M)
    return DecomposedField(C, resolution, S, Ux, Uy, Uz, Uxy, Uyz, Uxz, layout)


def load_model(path) -> FieldPair:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    magic, version, flags = r.take("<4sHH")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}; not a model file")
    if version > VERSION:
        raise FormatError(f"unsupported model version {version} (max {VERSION})")
    box = r.take("<6d")
    aabb = Aabb(box[:3], box[3:])
    sh_degree, _, density_shift = r.take("<HHd")
    shading = ShadingConfig(sh_degree=sh_degree, density_shift=density_shift)
    d_desc = _read_field_descriptor(r)
    c_desc = _read_field_descriptor(r)
    occ_meta = None
    if flags & _FLAG_OCCUPANCY:
        rx, ry, rz, tau, dilation = r.take("<3IdI")
        occ_meta = ((rx, ry, rz), tau, dilation)
    density = _read_field(r, *d_desc)
    color = _read_field(r, *c_desc)
    occupancy = None
    if occ_meta is not None:
        res, tau, dilation = occ_meta
        cells = int(np.prod(res))
        raw = r.take_array(math.ceil(cells / 8), dtype=np.uint8)
        bits = np.unpackbits(raw)[:cells].astype(bool).reshape(res)
        occupancy = OccupancyGrid(bits, aabb, threshold=tau, dilation=dilation)
    if r.pos != len(blob):
        raise FormatError(
            f"trailing bytes: payload ends at {r.pos}, file has {len(blob)}"
        )
    return FieldPair(density=density, color=color, aabb=aabb, shading=shading,
                     occupancy=occupancy)


# ---------------------------------------------------------------------------
# Scene description files
# ---------------------------------------------------------------------------

_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
SCENE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["objects"],
    "properties": {
        "background": _VEC3,
        "objects": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["model"],
                "properties": {
                    "model": {"type": "string"},
                    "name": {"type": "string"},
                    "translation": _VEC3,
                    "rotation": {
                        "type": "array",
                        "items": {"type": "number"},
                        "minItems": 4,
                        "maxItems": 4,
                    },
                    "scale": {
                        "anyOf": [{"type": "number", "exclusiveMinimum": 0}, _VEC3]
                    },
                    "lod": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["vec", "mat"],
                        "properties": {
                            "vec": {"type": "integer", "minimum": 0},
                            "mat": {"type": "integer", "minimum": 0},
                        },
                    },
                },
            },
        },
    },
}


def load_scene_file(path) -> dict:
    """Parse and schema-validate a scene description; unknown keys are rejected."""
    with open(path) as fh:
        doc = json.load(fh)
    jsonschema.validate(doc, SCENE_SCHEMA)
    return doc


def load_scene(path):
    """Build a composed Scene from a scene file, loading referenced models."""
    from .composition import AffineTransform, ObjectInstance, Scene

    doc = load_scene_file(path)
    base = os.path.dirname(os.path.abspath(os.fspath(path)))
    instances = []
    for obj in doc["objects"]:
        model_path = obj["model"]
        if not os.path.isabs(model_path):
            model_path = os.path.join(base, model_path)
        model = load_model(model_path)
        tf = AffineTransform(
            translation=np.asarray(obj.get("translation", [0.0, 0.0, 0.0])),
            rotation=np.asarray(obj.get("rotation", [1.0, 0.0, 0.0, 0.0])),
            scale=np.asarray(obj.get("scale", [1.0, 1.0, 1.0])),
        )
        lod = None
        if "lod" in obj:
            lod = (obj["lod"]["vec"], obj["lod"]["mat"])
        instances.append(
            ObjectInstance(model=model, transform=tf, lod=lod, name=obj.get("name", ""))
        )
    return Scene(instances=instances, background=tuple(doc.get("background", (1, 1, 1))))


def save_scene_file(doc: dict, path):
    jsonschema.validate(doc, SCENE_SCHEMA)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def save_png(path, rgb: np.ndarray, alpha: np.ndarray | None = None):
    """Clamp to [0,1], scale by 255, round, write 8-bit PNG (RGBA if alpha given)."""
    q = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    q = np.rint(q * 255.0).astype(np.uint8)
    if alpha is not None:
        a = np.rint(np.clip(alpha, 0.0, 1.0) * 255.0).astype(np.uint8)
        q = np.concatenate([q, a[..., None]], axis=-1)
    Image.fromarray(q).save(os.fspath(path))


def load_png(path):
    """Return (rgb float32 in [0,1], alpha float32 or None)."""
    img = np.asarray(Image.open(os.fspath(path)))
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    if img.shape[-1] == 4:
        return img[..., :3].copy(), img[..., 3].copy()
    return img[..., :3].copy(), None


def save_float_image(path, rgb: np.ndarray):
    """Lossless float32 dump for metric computation."""
    np.save(os.fspath(path), np.asarray(rgb, dtype=np.float32))


# ---------------------------------------------------------------------------
# Posed-image datasets (transforms_{split}.json convention)
# ---------------------------------------------------------------------------

@dataclass
class DatasetSplit:
    cameras: list
    images: np.ndarray  # (N, H, W, 3) float32, alpha already composited

    def __len__(self):
        return len(self.cameras)

    def all_rays(self):
        """Flattened (origins, directions, colors) over every pixel of the split."""
        from .geometry import generate_rays

        os_, ds, cs = [], [], []
        for cam, img in zip(self.cameras, self.images):
            o, d = generate_rays(cam)
            os_.append(o)
            ds.append(d)
            cs.append(img.reshape(-1, 3))
        return (
            np.concatenate(os_).astype(np.float64),
            np.concatenate(ds).astype(np.float64),
            np.concatenate(cs).astype(np.float32),
        )


@dataclass
class Dataset:
    splits: dict
    camera_angle_x: float
    aabb: Aabb | None = None

    def split(self, name: str) -> DatasetSplit:
        if name not in self.splits:
            raise KeyError(f"dataset has no '{name}' split; found {sorted(self.splits)}")
        return self.splits[name]


def load_dataset(directory, background=(1.0, 1.0, 1.0), splits=("train", "test")) -> Dataset:
    """Load transforms_{split}.json plus images; alpha is composited over
    `background` at load time."""
    directory = os.fspath(directory)
    bg = np.asarray(background, dtype=np.float32)
    out = {}
    camera_angle_x = None
    aabb = None
    for split in splits:
        meta_path = os.path.join(directory, f"transforms_{split}.json")
        if not os.path.exists(meta_path):
            continue
        try:
            with open(meta_path) as fh:
                meta = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"malformed JSON in {meta_path}: {e}") from e
        camera_angle_x = float(meta["camera_angle_x"])
        if "aabb" in meta:
            box = np.asarray(meta["aabb"], dtype=np.float64)
            aabb = Aabb(box[0], box[1])
        cameras, images = [], []
        shape = None
        for frame in meta["frames"]:
            rel = frame["file_path"]
            img_path = os.path.join(directory, rel)
            if not os.path.splitext(img_path)[1]:
                img_path += ".png"
            if not os.path.exists(img_path):
                raise FormatError(f"frame image missing: {img_path}")
            rgb, alpha = load_png(img_path)
            if shape is None:
                shape = rgb.shape
            elif rgb.shape != shape:
                raise FormatError(
                    f"frame {rel} has shape {rgb.shape[:2]}, expected {shape[:2]}"
                )
            if alpha is not None:
                rgb = rgb * alpha[..., None] + bg * (1.0 - alpha[..., None])
            h, w = rgb.shape[:2]
            cam = Camera(
                width=w,
                height=h,
                focal=focal_from_angle(w, camera_angle_x),
                camera_to_world=np.asarray(frame["transform_matrix"], dtype=np.float64),
            )
            cameras.append(cam)
            images.append(rgb.astype(np.float32))
        out[split] = DatasetSplit(cameras=cameras, images=np.stack(images))
    if not out:
        raise FormatError(f"no transforms_*.json found under {directory}")
    return Dataset(splits=out, camera_angle_x=camera_angle_x, aabb=aabb)


def write_dataset_split(
    directory,
    split: str,
    camera_angle_x: float,
    cameras: list,
    images: np.ndarray,
    alphas: np.ndarray | None = None,
    aabb: Aabb | None = None,
):
    """Write PNGs plus transforms_{split}.json in the layout load_dataset reads."""
    directory = os.fspath(directory)
    os.makedirs(os.path.join(directory, split), exist_ok=True)
    frames = []
    for i, cam in enumerate(cameras):
        rel = f"./{split}/r_{i}"
        save_png(
            os.path.join(directory, f"{rel}.png"),
            images[i],
            None if alphas is None else alphas[i],
        )
        frames.append(
            {
                "file_path": rel,
                "transform_matrix": cam.camera_to_world.tolist(),
            }
        )
    meta = {"camera_angle_x": camera_angle_x, "frames": frames}
    if aabb is not None:
        meta["aabb"] = [aabb.min.tolist(), aabb.max.tolist()]
    with open(os.path.join(directory, f"transforms_{split}.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
