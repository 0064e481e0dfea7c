"""Command-line interface: gen-data, train, render, compress, compose, eval,
info, and gradcheck verbs over the library."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


def _threads_default() -> int:
    env = os.environ.get("CCFIELD_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _add_threads(p):
    p.add_argument("--threads", type=int, default=_threads_default(),
                   help="worker threads (default: cores, or CCFIELD_THREADS)")


def _parse_res(text: str):
    w, h = text.lower().split("x")
    return int(w), int(h)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ccfield",
        description="Compressible, composable radiance fields via tensor rank "
                    "decomposition.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset from an analytic scene")
    p.add_argument("--scene-spec", help="analytic scene JSON (default: built-in 3-primitive scene)")
    p.add_argument("--views", type=int, default=40)
    p.add_argument("--test-views", type=int, default=10)
    p.add_argument("--res", type=_parse_res, default=(128, 128), metavar="WxH")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="fit a model to a posed-image dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--preset", default="desk", choices=["cp", "hy", "hy-s", "desk"])
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--groups", type=int, help="re-split color ranks evenly into this many groups")
    p.add_argument("--residual", default="nodetach",
                   choices=["nodetach", "detach", "sequential", "plain"])
    p.add_argument("--batch", type=int)
    p.add_argument("--curve", help="write the loss curve CSV here")
    p.add_argument("--seed", type=int, default=0)
    _add_threads(p)

    p = sub.add_parser("render", help="render views of a model or composed scene")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--scene")
    poses = p.add_mutually_exclusive_group(required=True)
    poses.add_argument("--pose-file", help="a transforms_*.json with cameras to render")
    poses.add_argument("--orbit", type=int, help="render N orbit views around the content")
    p.add_argument("--res", type=_parse_res, default=(128, 128), metavar="WxH")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-float", action="store_true",
                   help="also write lossless float32 .npy images")
    p.add_argument("--seed", type=int, default=0)
    _add_threads(p)

    p = sub.add_parser("compress", help="truncate a model's color ranks")
    p.add_argument("--model", required=True)
    p.add_argument("--vec", type=int)
    p.add_argument("--mat", type=int)
    p.add_argument("--budget", type=int, help="target file size in bytes")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="write per-rank importance CSV here")

    p = sub.add_parser("compose", help="render a composed scene description")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--orbit", type=int, default=8)
    p.add_argument("--pose-file")
    p.add_argument("--res", type=_parse_res, default=(128, 128), metavar="WxH")
    p.add_argument("--seed", type=int, default=0)
    _add_threads(p)

    p = sub.add_parser("eval", help="PSNR of a model or scene against a dataset split")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--scene")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    _add_threads(p)

    p = sub.add_parser("info", help="print a model or scene file's layout and sizes")
    p.add_argument("path")
    p.add_argument("--importance", action="store_true", help="include per-rank importance")

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--preset", default="desk", choices=["desk"])
    p.add_argument("--mode", default="both",
                   choices=["nodetach", "detach", "both"])
    p.add_argument("--rays", type=int, default=16)
    p.add_argument("--seed", type=int, default=7)
    return parser


def _load_source(args):
    """The renderable object (FieldPair or Scene) named by --model/--scene."""
    from .formats import load_model, load_scene

    if getattr(args, "model", None):
        return load_model(args.model)
    return load_scene(args.scene)


def _orbit_cameras_for(source, n_views: int, res):
    from .composition import Scene
    from .geometry import Camera, focal_from_angle, look_at
    from .synthetic import BLENDER_CAMERA_ANGLE_X

    box = source.world_aabb if isinstance(source, Scene) else source.aabb
    radius = 1.3 * (box.diagonal / 2) / np.tan(0.5 * BLENDER_CAMERA_ANGLE_X)
    center = box.center
    w, h = res
    focal = focal_from_angle(w, BLENDER_CAMERA_ANGLE_X)
    cams = []
    for i in range(n_views):
        az = 2 * np.pi * i / max(n_views, 1)
        el = np.deg2rad(30.0)
        eye = center + radius * np.array(
            [np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)]
        )
        cams.append(Camera(w, h, focal, look_at(eye, center)))
    return cams


def _cameras_from_pose_file(path, res):
    from .geometry import Camera, focal_from_angle

    with open(path) as fh:
        meta = json.load(fh)
    w, h = res
    focal = focal_from_angle(w, float(meta["camera_angle_x"]))
    return [
        Camera(w, h, focal, np.asarray(f["transform_matrix"], dtype=np.float64))
        for f in meta["frames"]
    ]


def cmd_gen_data(args) -> int:
    from .synthetic import AnalyticScene, Primitive, demo_scene, generate_dataset
    from .geometry import Aabb

    if args.scene_spec:
        with open(args.scene_spec) as fh:
            doc = json.load(fh)
        prims = tuple(
            Primitive(
                kind=p["type"],
                center=tuple(p["center"]),
                extent=p.get("radius", p.get("size", p.get("sigma", 0.3))),
                density=p.get("density", 30.0),
                color=tuple(p.get("color", (0.5, 0.5, 0.5))),
                view_tint=p.get("tint", 0.0),
            )
            for p in doc["primitives"]
        )
        aabb = Aabb(*doc["aabb"]) if "aabb" in doc else Aabb((-1.2,) * 3, (1.2,) * 3)
        scene = AnalyticScene(primitives=prims, aabb=aabb,
                              background=tuple(doc.get("background", (1, 1, 1))))
    else:
        scene = demo_scene()
    generate_dataset(
        scene, args.out, n_views=args.views, resolution=args.res,
        n_test_views=args.test_views, seed=args.seed,
    )
    print(f"wrote {args.views} train + {args.test_views} test views to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .decomposition import RankLayout
    from .formats import load_dataset
    from .training import make_preset, train

    dataset = load_dataset(args.data)
    density_layout, color_layout, cfg = make_preset(args.preset, iterations=args.iters)
    if args.groups:
        per = color_layout.n_vec // args.groups
        counts = [per] * args.groups
        counts[-1] += color_layout.n_vec - per * args.groups
        mper = color_layout.n_mat // args.groups
        mcounts = [mper] * args.groups
        mcounts[-1] += color_layout.n_mat - mper * args.groups
        groups = tuple(
            (v, m) for v, m in zip(counts, mcounts) if v + m > 0
        )
        color_layout = RankLayout(sum(c[0] for c in groups), sum(c[1] for c in groups), groups)
    cfg.residual_mode = args.residual
    cfg.seed = args.seed
    cfg.threads = args.threads
    if args.batch:
        cfg.batch_rays = args.batch
    result = train(
        dataset, density_layout, color_layout, cfg,
        curve_path=args.curve, checkpoint_path=args.out,
    )
    print(f"trained {cfg.iterations} iterations; final loss {result.final_loss:.6f}")
    print(f"saved model to {args.out}")
    return 0


def _render_to_dir(source, cameras, out_dir, threads, dump_float=False):
    from .formats import save_float_image, save_png
    from .rendering import render_image

    os.makedirs(out_dir, exist_ok=True)
    for i, cam in enumerate(cameras):
        img = render_image(source, cam, threads=threads)
        save_png(os.path.join(out_dir, f"r_{i}.png"), img)
        if dump_float:
            save_float_image(os.path.join(out_dir, f"r_{i}.npy"), img)
    print(f"rendered {len(cameras)} views into {out_dir}")


def cmd_render(args) -> int:
    source = _load_source(args)
    if args.pose_file:
        cams = _cameras_from_pose_file(args.pose_file, args.res)
    else:
        cams = _orbit_cameras_for(source, args.orbit, args.res)
    _render_to_dir(source, cams, args.out, args.threads,
                   getattr(args, "dump_float", False))
    return 0


def cmd_compress(args) -> int:
    from .compression import compress_to_budget, rank_importance, truncate_color
    from .formats import load_model, model_file_size, save_model

    pair = load_model(args.model)
    before = model_file_size(pair)
    if args.budget is not None:
        out = compress_to_budget(pair, args.budget)
    elif args.vec is not None and args.mat is not None:
        out = truncate_color(pair, (args.vec, args.mat))
    else:
        print("error: pass either --budget or both --vec and --mat", file=sys.stderr)
        return 2
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(rank_importance(pair.color).to_csv())
    save_model(out, args.out)
    after = model_file_size(out)
    c = out.color.layout
    print(f"color ranks {pair.color.layout.n_vec}/{pair.color.layout.n_mat} -> "
          f"{c.n_vec}/{c.n_mat}; size {before} -> {after} bytes")
    return 0


def cmd_compose(args) -> int:
    from .formats import load_scene

    scene = load_scene(args.scene)
    if args.pose_file:
        cams = _cameras_from_pose_file(args.pose_file, args.res)
    else:
        cams = _orbit_cameras_for(scene, args.orbit, args.res)
    _render_to_dir(scene, cams, args.out, args.threads)
    return 0


def cmd_eval(args) -> int:
    from .formats import load_dataset
    from .rendering import psnr, render_image

    source = _load_source(args)
    dataset = load_dataset(args.data)
    split = dataset.split(args.split)
    values = []
    for i, (cam, gt) in enumerate(zip(split.cameras, split.images)):
        img = render_image(source, cam, threads=args.threads)
        values.append(psnr(img, gt))
        print(f"PSNR r_{i}: {values[-1]:.2f} dB")
    print(f"mean PSNR: {float(np.mean(values)):.2f} dB")
    return 0


def cmd_info(args) -> int:
    from .compression import rank_importance
    from .formats import load_model, load_scene_file, model_file_size

    if args.path.endswith(".json"):
        doc = load_scene_file(args.path)
        print(f"scene with {len(doc['objects'])} objects, "
              f"background {doc.get('background', [1, 1, 1])}")
        for obj in doc["objects"]:
            lod = obj.get("lod")
            print(f"  {obj['model']}" + (f" lod vec={lod['vec']} mat={lod['mat']}" if lod else ""))
        return 0
    pair = load_model(args.path)
    print(f"model {args.path}")
    print(f"  file size: {model_file_size(pair)} bytes "
          f"({pair.parameter_count()} parameters)")
    print(f"  aabb: {pair.aabb.min.tolist()} .. {pair.aabb.max.tolist()}")
    print(f"  sh degree: {pair.shading.sh_degree} "
          f"({pair.shading.color_channels} color channels)")
    for name in ("density", "color"):
        f = getattr(pair, name)
        lay = f.layout
        print(f"  {name}: resolution {f.resolution}, ranks {lay.n_vec}/{lay.n_mat}, "
              f"groups {list(lay.groups)}")
    if pair.occupancy is not None:
        print(f"  occupancy: {pair.occupancy.resolution} "
              f"{pair.occupancy.fraction_occupied * 100:.1f}% occupied")
    if args.importance:
        print(rank_importance(pair.color).to_csv(), end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .training import finite_difference_check, gradcheck_setup

    modes = ["nodetach", "detach"] if args.mode == "both" else [args.mode]
    ok = True
    for mode in modes:
        pair, o, d, gt, cfg, opts = gradcheck_setup(
            seed=args.seed, n_rays=args.rays, mode=mode
        )
        report = finite_difference_check(pair, o, d, gt, cfg, opts)
        status = "PASS" if report.passed else "FAIL"
        print(f"{mode}: max relative error {report.max_rel_err:.3e} "
              f"(worst {report.worst[0]}) {status}")
        ok &= report.passed
    return 0 if ok else 1


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    np.random.seed(getattr(args, "seed", 0))  # legacy global state, for any consumer
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "render": cmd_render,
        "compress": cmd_compress,
        "compose": cmd_compose,
        "eval": cmd_eval,
        "info": cmd_info,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.verb](args)
    except (ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
