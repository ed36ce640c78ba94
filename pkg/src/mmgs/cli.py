"""Command-line surface: generate | train | render | eval | ablate.

Deterministic by default (--threads 1); MMGS_SEED in the environment
overrides --seed for every subcommand. Diagnostics go to stderr, results
to the paths given by flags; exit code 0 on success, 1 on runtime
failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


def _seed_override(seed):
    env = os.environ.get("MMGS_SEED")
    if env is not None and env != "":
        return int(env)
    return seed


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="mmgs",
        description="Hierarchical Gaussian-splat refinement for multi-human "
        "multi-object scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        return sub.add_parser(
            name, help=help_text,
            formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        )

    g = add("generate", "create a synthetic scene directory")
    g.add_argument("--out", required=True, help="output scene directory")
    g.add_argument("--humans", type=int, default=2, help="human instance count")
    g.add_argument("--objects", type=int, default=1, help="object instance count")
    g.add_argument("--cameras", type=int, default=4, help="ring camera count")
    g.add_argument("--frames", type=int, default=3, help="frame count")
    g.add_argument("--res", type=int, nargs=2, default=[64, 64],
                   metavar=("W", "H"), help="image resolution")
    g.add_argument("--seed", type=int, default=7, help="generator seed")

    t = add("train", "optimize networks and Gaussian attributes")
    t.add_argument("--scene", required=True, help="scene directory")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--iters", type=int, default=2000, help="optimization steps")
    t.add_argument("--variant", default="full",
                   choices=["full", "no_fusion", "no_interaction", "none"],
                   help="refinement variant")
    t.add_argument("--seed", type=int, default=0, help="training seed")
    t.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    t.add_argument("--lambda-l1", type=float, default=0.8, help="L1 loss weight")
    t.add_argument("--lambda-ssim", type=float, default=0.2, help="SSIM loss weight")
    t.add_argument("--threads", type=int, default=1, help="rasterizer tile workers")
    t.add_argument("--cameras", default="",
                   help="comma-separated training camera ids (empty: all)")
    t.add_argument("--curve", default="", help="loss-curve CSV path")

    r = add("render", "render one frame from a checkpoint")
    r.add_argument("--scene", required=True, help="scene directory")
    r.add_argument("--ckpt", required=True, help="checkpoint path")
    r.add_argument("--frame", type=int, required=True, help="frame index")
    r.add_argument("--camera", type=int, required=True, help="camera id")
    r.add_argument("--out", required=True, help="PNG path")
    r.add_argument("--float-dump", default="", help="lossless float image path")

    e = add("eval", "compute metrics on chosen cameras")
    e.add_argument("--scene", required=True, help="scene directory")
    e.add_argument("--ckpt", required=True, help="checkpoint path")
    e.add_argument("--cameras", required=True, help="comma-separated camera ids")
    e.add_argument("--out", required=True, help="metrics JSON path")
    e.add_argument("--threads", type=int, default=1, help="rasterizer tile workers")
    e.add_argument("--graph-dump", default="",
                   help="directory for per-frame scene-graph debug JSON")

    a = add("ablate", "train and compare all four variants")
    a.add_argument("--scene", required=True, help="scene directory")
    a.add_argument("--out", required=True, help="table JSON path")
    a.add_argument("--iters", type=int, default=800, help="steps per variant")
    a.add_argument("--seed", type=int, default=0, help="shared training seed")
    a.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    a.add_argument("--holdout", type=int, default=-1,
                   help="held-out camera id (-1: highest id)")
    a.add_argument("--threads", type=int, default=1, help="rasterizer tile workers")
    return parser


def _cmd_generate(args):
    from . import sceneio

    seed = _seed_override(args.seed)
    sceneio.generate_synthetic_scene(
        args.out, humans=args.humans, objects=args.objects, cameras=args.cameras,
        frames=args.frames, resolution=tuple(args.res), seed=seed,
    )
    print(args.out)
    return 0


def _cmd_train(args):
    from . import pipeline, sceneio

    scene = sceneio.load_scene(args.scene)
    train_ids = [int(c) for c in args.cameras.split(",") if c != ""]
    config = pipeline.TrainConfig(
        iterations=args.iters,
        lr=args.lr,
        lambda_l1=args.lambda_l1,
        lambda_ssim=args.lambda_ssim,
        seed=_seed_override(args.seed),
        variant=args.variant,
        threads=args.threads,
        train_camera_ids=train_ids,
    )
    curve_path = args.curve or None
    _, curve = pipeline.train(scene, config, out_checkpoint=args.out,
                              curve_path=curve_path)
    if curve:
        print(f"final loss {curve[-1][1]:.6f} after {len(curve)} iterations",
              file=sys.stderr)
    print(args.out)
    return 0


def _cmd_render(args):
    from . import imgio, pipeline, sceneio

    scene = sceneio.load_scene(args.scene)
    state = sceneio.restore_state(scene, sceneio.load_checkpoint(args.ckpt))
    frame = next((f for f in scene.frames if f.index == args.frame), None)
    if frame is None:
        raise ValueError(f"frame {args.frame} not in scene")
    if args.camera not in scene.cameras:
        raise ValueError(f"camera {args.camera} not in scene")
    import mmgs.diffgrad as dg

    with dg.no_grad():
        out = pipeline.forward_frame(state, frame, [args.camera])[args.camera]
    imgio.write_png(args.out, out.array())
    if args.float_dump:
        imgio.write_float_image(args.float_dump, out.array())
    print(args.out)
    return 0


def _cmd_eval(args):
    from . import kernels, pipeline, sceneio

    kernels.set_tile_workers(args.threads)
    scene = sceneio.load_scene(args.scene)
    state = sceneio.restore_state(scene, sceneio.load_checkpoint(args.ckpt))
    camera_ids = [int(c) for c in args.cameras.split(",") if c != ""]
    dump_dir = args.graph_dump or None
    if dump_dir:
        os.makedirs(dump_dir, exist_ok=True)
    report = pipeline.evaluate(scene, state, camera_ids, graph_dump_dir=dump_dir)
    payload = report.to_dict()
    payload["flags"] = {"cameras": camera_ids, "threads": args.threads,
                        "ckpt": args.ckpt}
    with open(args.out, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")
    print(args.out)
    return 0


def _cmd_ablate(args):
    from . import pipeline, sceneio

    scene = sceneio.load_scene(args.scene)
    config = pipeline.TrainConfig(
        iterations=args.iters, lr=args.lr, seed=_seed_override(args.seed),
        threads=args.threads,
    )
    holdout = args.holdout if args.holdout >= 0 else None
    table = pipeline.ablate(scene, config, holdout_camera=holdout,
                            out_path=args.out)
    table["flags"] = {"iters": args.iters, "seed": config.seed, "lr": args.lr}
    with open(args.out, "w") as f:
        json.dump(table, f, indent=1, sort_keys=True)
        f.write("\n")
    print(args.out)
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
}


def run(argv):
    parser = _build_parser()
    args = parser.parse_args(argv)
    np.seterr(over="ignore", under="ignore")
    try:
        return _COMMANDS[args.command](args)
    except Exception as e:  # runtime failure -> exit 1 with a message
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
