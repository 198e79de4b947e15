"""Command-line entry point: ``ucnerf <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np
import torch

from ..camera import Camera
from ..io import read_json, write_pfm, write_png
from ..synthscene import SceneRecipe, SceneSpec, export_dataset, generate_dataset, reference_recipe
from .config import PROFILES, load_config


def _recipe_from_file(path) -> SceneRecipe:
    if path is None:
        return reference_recipe()
    d = read_json(path)
    if "scene" in d:
        return SceneRecipe.from_dict(d)
    spec = SceneSpec.from_dict(d)
    spec.validate()
    return SceneRecipe(scene=spec)


def cmd_generate(args) -> int:
    recipe = _recipe_from_file(args.spec)
    ds = generate_dataset(recipe)
    export_dataset(ds.views, ds.sparse, ds.prior, args.out, ds.meta)
    print(f"wrote {len(ds)} views to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .training import train

    cfg = load_config(args.config, profile=args.profile)
    data = args.data[0] if len(args.data) == 1 else args.data
    result = train(data, cfg, args.out)
    last = result.curve[-1][1] if result.curve else float("nan")
    print(f"trained {cfg.iters} iterations in {result.wall_clock:.1f}s, final total loss {last:.5f}")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate

    report = evaluate(args.run, args.split, args.data, args.out)
    print(report.table(), end="")
    return 0


def cmd_ablate(args) -> int:
    from .ablation import run_ablation

    cfg = load_config(args.config, profile=args.profile)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    values = None
    if args.values:
        values = [v if args.axis == "density_fusion" else int(v) for v in args.values.split(",")]
    report = run_ablation(args.data, cfg, args.axis, seeds, values, args.cache, args.out)
    print(report.table(), end="")
    return 0


def cmd_oracle_check(args) -> int:
    from ..checks import format_results, run_checks

    results = run_checks(args.n, args.seed)
    print(format_results(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_render(args) -> int:
    from .evaluation import load_run

    model, scene, _ = load_run(args.run, args.data)
    cam = Camera.from_dict(read_json(args.camera))
    if (cam.width, cam.height) != (scene.width, scene.height):
        raise SystemExit(f"camera size {cam.width}x{cam.height} differs from training size {scene.width}x{scene.height}")
    # register the novel camera as an extra (test) view so it conditions on the nearest training views
    views = scene.dataset.views
    views.cameras.append(cam)
    views.images.append(np.zeros((cam.height, cam.width, 3), dtype=np.float32))
    views.gt_depth.append(np.ones((cam.height, cam.width), dtype=np.float32))
    views.split.append("test")
    idx = len(views.cameras) - 1
    with torch.no_grad():
        out = model.render_view(scene, idx)
    write_png(args.out, np.clip(out["color"], 0, 1))
    if args.depth:
        write_pfm(args.depth, out["depth"])
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ucnerf", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-scene", help="render a synthetic dataset")
    g.add_argument("--spec", help="JSON scene spec or full recipe (default: reference scene)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--data", required=True, nargs="+", help="dataset directory; several select multi-scene mode")
    t.add_argument("--config", help="JSON config (keys = TrainConfig fields)")
    t.add_argument("--profile", default="desk", choices=sorted(PROFILES), help="defaults the config file overrides")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a training run")
    e.add_argument("--run", required=True)
    e.add_argument("--split", default="test", choices=("test", "train"))
    e.add_argument("--data", help="dataset directory (default: the one recorded in the run)")
    e.add_argument("--out", help="output directory (default: RUN/eval_SPLIT)")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="run an ablation study")
    a.add_argument("--axis", required=True, choices=("components", "source_views", "train_size", "density_fusion"))
    a.add_argument("--data", required=True)
    a.add_argument("--config")
    a.add_argument("--profile", default="desk", choices=sorted(PROFILES))
    a.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    a.add_argument("--values", help="comma-separated axis values")
    a.add_argument("--cache", help="directory for cached run results")
    a.add_argument("--out", help="directory for the ablation report")
    a.set_defaults(func=cmd_ablate)

    o = sub.add_parser("oracle-check", help="finite-difference checks of every differentiable op")
    o.add_argument("-n", type=int, default=100, help="random inputs per operation")
    o.add_argument("--seed", type=int, default=0)
    o.set_defaults(func=cmd_oracle_check)

    r = sub.add_parser("render", help="render a novel camera from a trained run")
    r.add_argument("--run", required=True)
    r.add_argument("--camera", required=True, help="camera JSON (same keys as cameras.json entries)")
    r.add_argument("--out", required=True)
    r.add_argument("--depth", help="optional PFM path for the z-depth map")
    r.add_argument("--data")
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
