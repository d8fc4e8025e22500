"""Command-line entry point: ``spheredepth <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 file/format error,
4 numeric failure (non-finite loss, empty valid set).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .mesh import MAX_LEVEL, icosphere, hierarchy, sample_pattern, surface_area_ratio
from .metrics import NoValidPixelsError, evaluate
from .network import CheckpointError, ConfigMismatchError, build_network, forward, \
    load_checkpoint, save_checkpoint
from .panorama import MeshTensor, depth_to_pointcloud_equirect, depth_to_pointcloud_mesh, \
    image_to_mesh, mesh_to_image, table_image_size, table_sr
from .training import LOSS_KINDS, LossConfig, NonFiniteLossError, SyntheticScene, \
    TrainConfig, render_scene, train, write_history

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _level(text: str) -> int:
    value = int(text)
    if not 0 <= value <= MAX_LEVEL:
        raise argparse.ArgumentTypeError(f"must be in [0, {MAX_LEVEL}], got {value}")
    return value


def _non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def read_config_file(path) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment, dashes map to underscores."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="spheredepth",
        description="Panorama depth estimation on icosphere meshes.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="key=value file supplying defaults; explicit flags win")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    leaves = {}

    mesh = sub.add_parser("mesh", help="mesh inspection")
    mesh_sub = mesh.add_subparsers(dest="action", metavar="action", required=True)
    info = mesh_sub.add_parser("info", parents=[common], help="counts and resolution table row")
    info.add_argument("--mr", type=_level, help="mesh resolution (0-8)")
    info.add_argument("--tr", type=_non_negative, default=0, help="triangle resolution")
    leaves["mesh info"] = info

    res = sub.add_parser("resample", help="convert between panoramas and mesh tensors")
    res_sub = res.add_subparsers(dest="action", metavar="action", required=True)
    tm = res_sub.add_parser("to-mesh", parents=[common], help="panorama -> mesh tensor")
    tm.add_argument("--in", dest="input", metavar="PATH", help="input .ppm or .pfm")
    tm.add_argument("--mr", type=_level, help="mesh resolution")
    tm.add_argument("--tr", type=_non_negative, default=0, help="triangle resolution")
    tm.add_argument("--out", metavar="PATH", help="output mesh tensor (.smt)")
    tm.add_argument("--sampling", choices=("bilinear", "nearest"),
                    help="interpolation (default: bilinear for .ppm, nearest for .pfm)")
    leaves["resample to-mesh"] = tm
    ti = res_sub.add_parser("to-image", parents=[common], help="mesh tensor -> panorama")
    ti.add_argument("--in", dest="input", metavar="PATH", help="input mesh tensor (.smt)")
    ti.add_argument("--width", type=_positive, help="output width in pixels")
    ti.add_argument("--height", type=_positive, help="output height in pixels")
    ti.add_argument("--out", metavar="PATH", help="output .ppm or .pfm")
    leaves["resample to-image"] = ti

    tt = sub.add_parser("train-toy", parents=[common],
                        help="train on synthetic box rooms and write a checkpoint")
    tt.add_argument("--mr", type=_level, default=5, help="mesh resolution (>= 5)")
    tt.add_argument("--tr", type=_non_negative, default=1, help="triangle resolution")
    tt.add_argument("--steps", type=_positive, default=200, help="optimisation steps")
    tt.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    tt.add_argument("--width-divisor", type=_positive, default=16,
                    help="divide every layer width by this")
    tt.add_argument("--loss", choices=LOSS_KINDS, default="log", help="loss function")
    tt.add_argument("--lr", type=float, default=3e-3, help="Adam learning rate")
    tt.add_argument("--batch-size", type=_positive, default=1, help="scenes per step")
    tt.add_argument("--jitter", type=float, default=0.0,
                    help="relative room-extent jitter per sample (0 = fixed room)")
    tt.add_argument("--half-extents", type=float, nargs=3, metavar=("X", "Y", "Z"),
                    default=list(SyntheticScene().half_extents), help="room half extents (m)")
    tt.add_argument("--out", metavar="PATH", help="output checkpoint")
    tt.add_argument("--history", metavar="PATH",
                    help="loss CSV (default: checkpoint path with .loss.csv)")
    tt.add_argument("--scene-dir", metavar="DIR",
                    help="also write the room's rgb.ppm and depth.pfm here")
    leaves["train-toy"] = tt

    inf = sub.add_parser("infer", parents=[common], help="predict depth for a panorama")
    inf.add_argument("--ckpt", metavar="PATH", help="checkpoint")
    inf.add_argument("--in", dest="input", metavar="PATH", help="input .ppm panorama")
    inf.add_argument("--out", metavar="PATH", help="output depth .pfm")
    inf.add_argument("--out-mesh", metavar="PATH", help="also write the mesh depth (.smt)")
    leaves["infer"] = inf

    ev = sub.add_parser("eval", parents=[common], help="depth metrics")
    ev.add_argument("--pred", metavar="PATH", help="predicted depth (.pfm or .smt)")
    ev.add_argument("--gt", metavar="PATH", help="ground-truth depth (.pfm or .smt)")
    ev.add_argument("--max-depth", type=float, default=10.0, help="upper valid depth (m)")
    ev.add_argument("--min-depth", type=float, default=0.1, help="lower valid depth (m)")
    ev.add_argument("--csv", metavar="PATH", help="append the report as a CSV row")
    leaves["eval"] = ev

    pc = sub.add_parser("pointcloud", parents=[common], help="export depth as a PLY cloud")
    pc.add_argument("--depth", metavar="PATH", help="depth .pfm (equirect) or .smt (mesh)")
    pc.add_argument("--rgb", metavar="PATH", help="colors (.ppm, or .smt in mesh mode)")
    pc.add_argument("--mode", choices=("mesh", "equirect"), help="conversion route")
    pc.add_argument("--out", metavar="PATH", help="output .ply")
    leaves["pointcloud"] = pc
    return parser, leaves


REQUIRED = {
    "mesh info": ("mr",),
    "resample to-mesh": ("input", "mr", "out"),
    "resample to-image": ("input", "width", "height", "out"),
    "train-toy": ("out",),
    "infer": ("ckpt", "input", "out"),
    "eval": ("pred", "gt"),
    "pointcloud": ("depth", "mode", "out"),
}


def parse_args(argv):
    parser, leaves = build_parser()
    args = parser.parse_args(argv)
    key = " ".join(filter(None, [args.command, getattr(args, "action", None)]))
    leaf = leaves[key]
    if args.config:
        try:
            values = read_config_file(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        known = {a.dest for a in leaf._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        # re-parse: config values become defaults, explicit flags still win
        for action in leaf._actions:
            if action.dest in values:
                raw = values[action.dest]
                parts = raw.split() if action.nargs not in (None, "?") else [raw]
                conv = action.type or str
                try:
                    vals = [conv(p) for p in parts]
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise UsageError(f"config {action.dest}={raw!r}: {exc}") from None
                if action.choices is not None and any(v not in action.choices for v in vals):
                    raise UsageError(f"config {action.dest}={raw!r}: not one of {action.choices}")
                leaf.set_defaults(**{action.dest: vals if len(vals) > 1 or action.nargs else vals[0]})
        args = parser.parse_args(argv)
    missing = [d for d in REQUIRED[key] if getattr(args, d, None) is None]
    if missing:
        flags = ", ".join("--" + ("in" if d == "input" else d.replace("_", "-")) for d in missing)
        leaf.error(f"missing required option(s): {flags}")
    return key, args


def _print_config(key, args):
    items = [f"{k}={v}" for k, v in sorted(vars(args).items())
             if k not in ("command", "action")]
    print(f"[{key}] " + " ".join(items))


def _load_depth_any(path):
    if Path(path).suffix.lower() == ".smt":
        return fileio.read_mesh_tensor(path)
    return fileio.read_panorama(path)


def cmd_mesh_info(args):
    mesh = icosphere(args.mr)
    sr = args.mr + args.tr
    print(f"MR={args.mr} TR={args.tr} SR={sr}")
    print(f"faces={mesh.num_faces} vertices={mesh.num_vertices} edges={mesh.num_edges}")
    print(f"euler={mesh.num_vertices - mesh.num_edges + mesh.num_faces}")
    print(f"surface_area_ratio={surface_area_ratio(mesh):.6f}")
    print(f"samples_per_face={4 ** args.tr}")
    size = table_image_size(sr)
    if size:
        print(f"SR={sr}, matches IR {size[0]}×{size[1]}")
    else:
        print(f"SR={sr} has no entry in the resolution table")


def cmd_to_mesh(args):
    img = fileio.read_panorama(args.input)
    sampling = args.sampling or ("nearest" if args.input.lower().endswith(".pfm") else "bilinear")
    sr = table_sr(img.height, img.width)
    if sr is not None and sr != args.mr + args.tr:
        print(f"warning: IR {img.height}x{img.width} corresponds to SR={sr}, "
              f"but MR+TR={args.mr + args.tr}", file=sys.stderr)
    mesh = icosphere(args.mr)
    t = image_to_mesh(img, mesh, sample_pattern(mesh, args.tr), sampling)
    fileio.write_mesh_tensor(args.out, t)
    print(f"wrote {args.out}: batch={t.batch} faces={t.data.shape[1]} channels={t.channels}")


def cmd_to_image(args):
    t = fileio.read_mesh_tensor(args.input)
    sr = table_sr(args.height, args.width)
    if sr is not None and sr != t.level + t.tr:
        print(f"warning: IR {args.height}x{args.width} corresponds to SR={sr}, "
              f"but MR+TR={t.level + t.tr}", file=sys.stderr)
    img = mesh_to_image(MeshTensor(t.data[:1], t.level, t.tr), icosphere(t.level),
                        args.width, args.height)
    fileio.write_panorama(args.out, img)
    print(f"wrote {args.out}: {img.height}x{img.width}x{img.channels}")


def cmd_train_toy(args):
    if args.mr < 5:
        raise UsageError(f"train-toy needs --mr >= 5, got {args.mr}")
    net = build_network(args.mr, args.tr, 3, args.seed, args.width_divisor)
    scene = SyntheticScene(tuple(args.half_extents))
    cfg = TrainConfig(steps=args.steps, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
                      jitter=args.jitter, loss=LossConfig(kind=args.loss))

    def log(step, loss):
        if step % 20 == 0 or step == args.steps - 1:
            print(f"step {step:5d} loss {loss:.6f}", file=sys.stderr)

    net, history = train(net, [scene], cfg, log=log)
    save_checkpoint(net, args.out)
    hist_path = args.history or str(Path(args.out).with_suffix(".loss.csv"))
    write_history(hist_path, history)
    if args.scene_dir:
        out = Path(args.scene_dir)
        out.mkdir(parents=True, exist_ok=True)
        h = table_image_size(args.mr + args.tr)[0]
        rgb, depth = render_scene(scene, 2 * h, h)
        fileio.write_ppm(out / "rgb.ppm", rgb)
        fileio.write_pfm(out / "depth.pfm", depth)
    print(f"wrote {args.out} and {hist_path}; loss {history[0]:.6f} -> {history[-1]:.6f}")


def cmd_infer(args):
    net = load_checkpoint(args.ckpt)
    cfg = net.config
    img = fileio.read_panorama(args.input)
    if img.channels != cfg.in_channels:
        raise ConfigMismatchError(f"checkpoint expects {cfg.in_channels}-channel input, "
                                  f"{args.input} has {img.channels}")
    mesh = icosphere(cfg.mr)
    x = image_to_mesh(img, mesh, sample_pattern(mesh, cfg.tr), "bilinear").data
    log_depth = forward(net, x.astype(np.float32), training=False, meshes=hierarchy(cfg.mr))[0]
    depth = MeshTensor(np.exp(log_depth.astype(np.float64)), cfg.mr, cfg.tr)
    if args.out_mesh:
        fileio.write_mesh_tensor(args.out_mesh, depth)
    fileio.write_pfm(args.out, mesh_to_image(depth, mesh, img.width, img.height))
    print(f"wrote {args.out}")


def cmd_eval(args):
    pred = _load_depth_any(args.pred)
    gt = _load_depth_any(args.gt)
    if type(pred) is not type(gt) or pred.data.shape != gt.data.shape:
        raise UsageError(f"prediction {pred.data.shape} and ground truth {gt.data.shape} "
                         "must be the same kind and shape")
    report = evaluate(pred.data, gt.data, args.min_depth, args.max_depth)
    print(report.pretty())
    print(report.csv_header())
    print(report.csv_row())
    if args.csv:
        path = Path(args.csv)
        new = not path.exists()
        with open(path, "a", encoding="ascii") as fh:
            if new:
                fh.write(report.csv_header() + "\n")
            fh.write(report.csv_row() + "\n")


def cmd_pointcloud(args):
    if args.mode == "mesh":
        if not args.depth.lower().endswith(".smt"):
            raise UsageError("--mode mesh needs a mesh tensor (.smt) depth")
        depth = fileio.read_mesh_tensor(args.depth)
        mesh = icosphere(depth.level)
        pattern = sample_pattern(mesh, depth.tr)
        rgb = None
        if args.rgb:
            if args.rgb.lower().endswith(".smt"):
                rgb = fileio.read_mesh_tensor(args.rgb)
            else:
                rgb = image_to_mesh(fileio.read_panorama(args.rgb), mesh, pattern, "bilinear")
        cloud = depth_to_pointcloud_mesh(MeshTensor(depth.data[:1], depth.level, depth.tr),
                                         mesh, pattern, rgb)
    else:
        if not args.depth.lower().endswith(".pfm"):
            raise UsageError("--mode equirect needs a .pfm depth")
        depth = fileio.read_pfm(args.depth)
        rgb = fileio.read_panorama(args.rgb) if args.rgb else None
        cloud = depth_to_pointcloud_equirect(depth, rgb)
    fileio.write_ply(args.out, cloud)
    print(f"wrote {args.out}: {len(cloud)} points")


COMMANDS = {
    "mesh info": cmd_mesh_info,
    "resample to-mesh": cmd_to_mesh,
    "resample to-image": cmd_to_image,
    "train-toy": cmd_train_toy,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "pointcloud": cmd_pointcloud,
}


def main(argv=None) -> int:
    try:
        key, args = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"spheredepth: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    _print_config(key, args)
    try:
        COMMANDS[key](args)
    except (UsageError, ConfigMismatchError) as exc:
        print(f"spheredepth: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, fileio.FormatError, CheckpointError) as exc:
        print(f"spheredepth: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteLossError, NoValidPixelsError, FloatingPointError) as exc:
        print(f"spheredepth: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
