"""Command-line entry point: ``seqnav <subcommand> ...``."""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

import numpy as np

from .errors import SeqNavError
from .geodesy import DEFAULT_TAU1, DEFAULT_TAU2

TRANSFORM_IN = [
    ("robot_lat", "f"), ("robot_lon", "f"), ("prev_lat", "f"), ("prev_lon", "f"),
    ("r1_lat", "f"), ("r1_lon", "f"), ("r2_lat", "f"), ("r2_lon", "f"),
]
TRANSFORM_OUT = [("bearing", "f"), ("p1x", "f"), ("p1y", "f"), ("p2x", "f"), ("p2y", "f"), ("command", "s")]


def _pair(text: str) -> tuple[float, float]:
    a, b = text.split(",")
    return float(a), float(b)


def _polygon(text: str) -> tuple:
    pts = tuple(_pair(p) for p in text.split(";") if p.strip())
    if len(pts) < 3:
        raise argparse.ArgumentTypeError("a polygon needs at least three 'east,north' vertices")
    return pts


def cmd_transform(args) -> int:
    from .geodesy import GeoFix, bearing, global_to_local, infer_command
    from .tensorfile import read_records, write_records

    _, rows = read_records(args.input)
    out = []
    for k, r in enumerate(rows):
        missing = [n for n, _ in TRANSFORM_IN if n not in r]
        if missing:
            raise SeqNavError(f"record {k} lacks {missing}")
        robot = GeoFix(r["robot_lat"], r["robot_lon"])
        beta = bearing(GeoFix(r["prev_lat"], r["prev_lon"]), robot)
        p1 = global_to_local(GeoFix(r["r1_lat"], r["r1_lon"]), robot, beta)
        p2 = global_to_local(GeoFix(r["r2_lat"], r["r2_lon"]), robot, beta)
        out.append({"bearing": beta, "p1x": p1.x, "p1y": p1.y, "p2x": p2.x, "p2y": p2.y,
                    "command": infer_command(p1, p2, args.tau1, args.tau2).name})
    write_records(args.output, TRANSFORM_OUT, out)
    return 0


def cmd_bev(args) -> int:
    from .bevmap import DEFAULT_ALPHA, build_bev, colorize
    from .dataset import read_route
    from .tensorfile import write_tensors

    route = read_route(args.route)
    last = len(route.frames) - 1 if args.frame is None else args.frame
    if not 0 <= last < len(route.frames):
        raise SeqNavError(f"frame {last} outside 0..{len(route.frames) - 1}")
    intr, ext = route.spec.intrinsics, route.spec.extrinsics
    fused = None
    for o in route.frames[: last + 1]:
        fused = build_bev(o.labels, o.depth, intr, ext, fused, args.alpha if args.alpha is not None else DEFAULT_ALPHA)
    write_tensors(args.output, {"bev": fused})
    if args.png:
        from PIL import Image

        Image.fromarray(colorize(fused)).save(args.png, optimize=False)
    return 0


def cmd_gen(args) -> int:
    from dataclasses import replace

    from .dataset import generate_splits, write_splits
    from .learning import history_scene

    base = replace(history_scene(), sample_every=args.sample_every, gnss_sigma=args.gnss_sigma)
    splits = generate_splits(base, args.seed, tuple(args.counts))
    paths = write_splits(splits, args.output)
    print(f"wrote {len(paths)} routes under {args.output}")
    return 0


def _load_split(data: str, split: str):
    from .dataset import read_split

    routes = read_split(data, split)
    if not routes:
        raise SeqNavError(f"no {split!r} routes under {data}")
    return routes


def cmd_train(args) -> int:
    from .learning import (HISTORY_FIELDS, FeatureSpec, TrainConfig, model_config_for, routes_batch,
                           save_checkpoint, train)
    from .tensorfile import write_records

    tr_routes, va_routes = _load_split(args.data, "train"), _load_split(args.data, "val")
    fs = FeatureSpec(args.image_factor, args.bev_factor)
    r0 = tr_routes[0]
    o = r0.frames[0]
    cfg = model_config_for(o.rgb.shape[:2], o.bev(r0.spec.intrinsics, r0.spec.extrinsics).shape[:2], fs)
    cache: dict = {}
    tr = routes_batch(tr_routes, args.K, fs, cache)
    va = routes_batch(va_routes, args.K, fs, cache)
    tcfg = TrainConfig(lr=args.lr, K=args.K, max_epochs=args.epochs, seed=args.seed)
    res = train(tr, va, cfg, tcfg)
    meta = {"K": args.K, "stride": r0.spec.sample_every, "image_factor": fs.image_factor,
            "bev_factor": fs.bev_factor, "best_epoch": res.best_epoch, "seed": args.seed}
    save_checkpoint(args.output, res.params, cfg, meta)
    if args.history:
        write_records(args.history, HISTORY_FIELDS, res.history)
    best = res.history[res.best_epoch]
    print(f"best epoch {res.best_epoch}: val l_total {best['val_l_total']:.6f}, stopped at {res.stopped_epoch}")
    return 0


def evaluate_routes(params, cfg, routes, K: int, fs):
    """Per-sample metrics on every window of ``routes``, averaged per route and overall."""
    from . import metrics
    from .learning import forward, route_batch
    from .perception import DEPTH_SCALE, NUM_CLASSES

    per_route = {}
    totals = {"iou": [], "depth_mae": [], "wp_mae": [], "ctrl_mae": []}
    for k, route in enumerate(routes):
        data = route_batch(route, K, fs)
        c = forward(params, data, cfg)
        n = len(data)
        seg_pred = (c["seg"] > 0.5).reshape(n, -1, NUM_CLASSES)
        seg_true = data.seg.reshape(n, -1, NUM_CLASSES)
        vals = {
            "iou": [metrics.iou(seg_pred[i], seg_true[i]) for i in range(n)],
            "depth_mae": [metrics.depth_mae(c["depth"][i] * DEPTH_SCALE, data.depth[i] * DEPTH_SCALE)
                          for i in range(n) if np.any(data.depth[i] > 0)],
            "wp_mae": [metrics.wp_mae(c["wp"][i], data.wp[i]) for i in range(n)],
            "ctrl_mae": [metrics.ctrl_mae(c["u"][i], data.ctrl[i]) for i in range(n)],
        }
        per_route[f"route_{k:03d}"] = {m: float(np.mean(v)) for m, v in vals.items() if v}
        for m, v in vals.items():
            totals[m].extend(v)
    return metrics.EvalReport(**{m: float(np.mean(v)) for m, v in totals.items()}, per_route=per_route)


def cmd_eval(args) -> int:
    from .learning import FeatureSpec, load_checkpoint_meta

    params, cfg, meta = load_checkpoint_meta(args.checkpoint)
    fs = FeatureSpec(int(meta.get("image_factor", 4)), int(meta.get("bev_factor", 16)))
    report = evaluate_routes(params, cfg, _load_split(args.data, args.split), int(meta.get("K", 1)), fs)
    print(report.to_text())
    if args.json:
        with open(args.json, "w", encoding="utf-8") as f:
            f.write(report.to_json() + "\n")
    return 0


def cmd_simulate(args) -> int:
    from .dataset import read_route, world_for
    from .simulator import EXIT_CODES, SimConfig, checkpoint_policy, route_following_policy, run_episode
    from .world import BiasZone

    route = read_route(args.route)
    world = world_for(route)
    fixes = route.route_fixes or world.route_fixes(route.spec.route_spacing)
    zones = tuple(BiasZone(poly, args.bias, args.bias_sigma) for poly in args.bias_zone)
    cfg = SimConfig(gnss_sigma=args.noise, bias_zones=zones, max_ticks=args.max_ticks,
                    bev_every=args.bev_every, seed=args.seed)
    policy = checkpoint_policy(args.checkpoint) if args.checkpoint else route_following_policy()
    log = run_episode(world, fixes, policy, cfg, route.spec.intrinsics, route.spec.extrinsics)
    log.write(args.output)
    print(f"{log.outcome}: {len(log.records)} ticks, max cross-track {log.max_cross_track:.3f} m")
    return EXIT_CODES[log.outcome]


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1 so that 2 and 3 stay reserved for episode outcomes
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seqnav", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("transform", help="GNSS records to local route points, bearing and command")
    t.add_argument("input", help="record file with fields " + ", ".join(n for n, _ in TRANSFORM_IN))
    t.add_argument("-o", "--output", required=True)
    t.add_argument("--tau1", type=float, default=DEFAULT_TAU1)
    t.add_argument("--tau2", type=float, default=DEFAULT_TAU2)
    t.set_defaults(func=cmd_transform)

    b = sub.add_parser("bev", help="fuse a route's frames into a BEV grid")
    b.add_argument("route", help="route directory")
    b.add_argument("-o", "--output", required=True, help="tensor file for the grid")
    b.add_argument("--frame", type=int, default=None, help="last frame to fuse (default: all)")
    b.add_argument("--alpha", type=float, default=None)
    b.add_argument("--png", default=None, help="optional colour render")
    b.set_defaults(func=cmd_bev)

    g = sub.add_parser("gen", help="generate train/val/test routes")
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--counts", type=int, nargs=3, default=[16, 5, 5], metavar=("TRAIN", "VAL", "TEST"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sample-every", type=int, default=10)
    g.add_argument("--gnss-sigma", type=float, default=0.0)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("train", help="train a model on generated routes")
    r.add_argument("data", help="directory written by 'gen'")
    r.add_argument("-o", "--output", required=True, help="checkpoint file")
    r.add_argument("-K", type=int, default=1, choices=(1, 2, 3))
    r.add_argument("--epochs", type=int, default=60)
    r.add_argument("--lr", type=float, default=1e-3)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--image-factor", type=int, default=8)
    r.add_argument("--bev-factor", type=int, default=16)
    r.add_argument("--history", default=None, help="record file for per-epoch losses")
    r.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("checkpoint")
    e.add_argument("data")
    e.add_argument("--split", default="test")
    e.add_argument("--json", default=None, help="write the report as JSON")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="closed-loop episode on a route's world")
    s.add_argument("--route", required=True)
    s.add_argument("--checkpoint", default=None, help="trained model (default: hand-built route follower)")
    s.add_argument("--noise", type=float, default=0.0, help="GNSS sigma in meters")
    s.add_argument("--bias-zone", type=_polygon, action="append", default=[],
                   help="polygon 'e1,n1;e2,n2;...' in local meters; repeatable")
    s.add_argument("--bias", type=_pair, default=(5.0, 0.0), help="'east,north' offset inside zones")
    s.add_argument("--bias-sigma", type=float, default=0.0)
    s.add_argument("--max-ticks", type=int, default=6000)
    s.add_argument("--bev-every", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", required=True, help="episode log directory")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SeqNavError, OSError, ValueError) as exc:
        print(f"seqnav {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
