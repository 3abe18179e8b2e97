"""Command-line entry point: ``fleetsplat <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 contract violation (bad input
files or arguments, upload rejected by the server), 4 transport failure
(unreachable server, or devices that never arrive before the timeout).
Any flag can also come from ``--config FILE`` holding ``key=value`` lines
(flag names with dashes or underscores); flags on the command line win.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_CONTRACT, EXIT_TRANSPORT = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONTRACT):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# config files


def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(f"{path}:{lineno}: expected key=value", EXIT_USAGE)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _convert(action: argparse.Action, raw: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        flag = raw.lower() in ("1", "true", "yes", "on")
        if raw.lower() not in ("1", "true", "yes", "on", "0", "false", "no", "off"):
            raise CliError(f"config value {raw!r} for {action.dest} is not a boolean", EXIT_USAGE)
        return flag if isinstance(action, argparse._StoreTrueAction) else not flag
    if action.nargs in ("+", "*"):
        return [action.type(v) if action.type else v for v in raw.split()]
    return action.type(raw) if action.type else raw


def apply_config(parser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, raw in values.items():
        if key not in actions or key in ("help", "config"):
            raise CliError(f"unknown config key {key!r}", EXIT_USAGE)
        try:
            defaults[key] = _convert(actions[key], raw)
        except (TypeError, ValueError) as exc:
            raise CliError(f"bad config value for {key}: {exc}", EXIT_USAGE) from None
    parser.set_defaults(**defaults)


# ---------------------------------------------------------------------------
# manifest


def write_manifest(directory, command: str, args: argparse.Namespace, extra: dict | None = None) -> Path:
    import scipy

    from . import __version__
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    digest = hashlib.sha256(blob).hexdigest()
    manifest = {"command": command, "config": cfg, "config_hash": digest, "seed": cfg.get("seed"),
                "versions": {"fleetsplat": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                             "python": platform.python_version()},
                "time": time.strftime("%Y-%m-%dT%H:%M:%S")}
    if extra:
        manifest.update(extra)
    out = Path(directory) / "manifests"
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{command}-{digest[:12]}.json"
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    from .data.layout import write_scene
    from .data.synthetic import SceneParams, synth_scene
    params = SceneParams(n_gaussians=args.gaussians, n_cameras=args.cameras, extent=args.extent,
                         width=args.size, height=args.size, heldout_every=args.heldout_every)
    scene = synth_scene(args.seed, params)
    write_scene(args.out, scene)
    write_manifest(args.out, "synth", args)
    print(f"wrote {len(scene.cameras)} views ({len(scene.heldout)} held out) to {args.out}")


def cmd_partition(args):
    from .pipeline import partition
    assignment = partition(args.scene, args.devices, args.predictor_noise)
    for dev, ids in sorted(assignment.items()):
        print(f"device {dev}\t{len(ids)} views\t{' '.join(map(str, ids))}")
    write_manifest(args.scene, "partition", args)


def cmd_init(args):
    from .data import layout
    from .data.formats import save_model
    from .pipeline import init_device
    model = init_device(args.scene, args.device, args.stride, args.align_steps, args.scale_mode)
    out = layout.device_dir(args.scene, args.device) / "init.dgs"
    save_model(out, model)
    write_manifest(args.scene, "init", args, {"n_gaussians": len(model)})
    print(f"wrote {len(model)} Gaussians to {out}")


def _train_cfg(args):
    from .pipeline import train_config
    return train_config(args.scene, steps=args.steps, densify_interval=args.densify_every,
                        depth=not args.no_depth_loss, shape_freeze=not args.no_shape_freeze, seed=args.seed,
                        max_gaussians=args.max_gaussians)


def cmd_train(args):
    from .data import layout
    from .data.formats import load_model, save_model
    from .pipeline import device_dataset, init_device
    from .train import train_device, write_trace
    d = layout.device_dir(args.scene, args.device)
    init_path = Path(args.init) if args.init else d / "init.dgs"
    if init_path.exists():
        model = load_model(init_path)
    else:
        model = init_device(args.scene, args.device, args.stride, args.align_steps)
        save_model(init_path, model)
    trained, trace = train_device(model, device_dataset(args.scene, args.device), _train_cfg(args))
    save_model(d / "trained.dgs", trained)
    write_trace(d / "trace.tsv", trace)
    write_manifest(args.scene, "train", args, {"final_loss": trace[-1].loss, "n_gaussians": len(trained)})
    print(f"trained {args.steps} steps, final loss {trace[-1].loss:.5f}, {len(trained)} Gaussians")


def _distill_cfg(args):
    from .aggregate import DistillConfig
    from .pipeline import background
    from .data.layout import read_meta
    return DistillConfig(epochs=args.distill_epochs, background=background(args.scene),
                         scene_extent=read_meta(args.scene)["params"].extent)


def cmd_serve(args):
    from .data import layout
    from .data.formats import save_model
    from .dist.server import ServerConfig, StragglerTimeout, run_server
    from .dist.transport import SocketListener
    regions = layout.read_regions(args.scene)
    if len(regions) != args.devices:
        raise CliError(f"regions.txt holds {len(regions)} regions but --devices is {args.devices}")
    listener = SocketListener(args.listen)
    print(f"listening on {listener.address}", flush=True)
    try:
        result = run_server(ServerConfig(regions, _distill_cfg(args), args.timeout), listener)
    except StragglerTimeout as exc:
        raise CliError(str(exc), EXIT_TRANSPORT) from None
    finally:
        listener.close()
    out = Path(args.out) if args.out else Path(args.scene) / "global.dgs"
    save_model(out, result.model)
    write_manifest(args.scene, "serve", args, {"epoch_losses": result.epoch_losses,
                                               "duplicate_uploads": result.state.duplicate_uploads})
    print(f"wrote global model ({len(result.model)} Gaussians) to {out}")


def cmd_device(args):
    from .dist.device import EXIT_OK as DEV_OK
    from .dist.device import EXIT_REJECTED as DEV_REJ
    from .dist.device import DeviceConfig, run_device
    from .dist.transport import connect_tcp
    from .pipeline import run_device_pipeline

    def work(region):
        return run_device_pipeline(args.scene, args.device, _train_cfg(args), args.stride, args.align_steps)

    res = run_device(DeviceConfig(args.device, retries=args.retries), lambda: connect_tcp(args.connect), work)
    write_manifest(args.scene, f"device{args.device}", args, {"exit_code": res.exit_code})
    if res.exit_code != DEV_OK:
        raise CliError(f"device {args.device}: {res.message}", EXIT_CONTRACT if res.exit_code == DEV_REJ
                       else EXIT_TRANSPORT)
    print(f"device {args.device} uploaded after {res.attempts} attempt(s)")


def cmd_aggregate(args):
    from .aggregate import DeviceUpload, aggregate
    from .data import layout
    from .data.formats import load_model, save_model
    regions = {r.device_id: r for r in layout.read_regions(args.scene)}
    if len(args.models) != len(regions):
        raise CliError(f"{len(args.models)} models given for {len(regions)} regions")
    cams = layout.read_cameras(args.scene)
    uploads = []
    for dev, path in zip(sorted(regions), args.models):
        ids = layout.read_device_ids(args.scene, dev)
        uploads.append(DeviceUpload(dev, load_model(path), [cams[i] for i in ids]))
    model, losses = aggregate(uploads, regions, _distill_cfg(args))
    out = Path(args.out) if args.out else Path(args.scene) / "global.dgs"
    save_model(out, model)
    write_manifest(args.scene, "aggregate", args, {"epoch_losses": losses})
    for e, v in enumerate(losses):
        print(f"epoch {e + 1}\tdistill_loss {v:.6f}")
    print(f"wrote {len(model)} Gaussians to {out}")


def cmd_render(args):
    from .data import layout
    from .data.formats import load_model, read_cameras_txt, save_pfm, save_ppm
    from .raster import RenderOptions, render
    if args.scene:
        cams, bg = layout.read_cameras(args.scene), tuple(layout.read_meta(args.scene)["background"])
    elif args.cameras:
        cams, bg = read_cameras_txt(args.cameras), (0.0, 0.0, 0.0)
    else:
        raise CliError("render needs --scene or --cameras")
    if args.camera_id not in cams:
        raise CliError(f"camera id {args.camera_id} not found")
    out = render(load_model(args.model), cams[args.camera_id], RenderOptions(background=bg))
    save_ppm(args.out, out.color) if args.out.endswith(".ppm") else save_pfm(args.out, out.color)
    if args.depth:
        save_pfm(args.depth, out.depth)
    print(f"wrote {args.out}")


def cmd_eval(args):
    from .data import layout
    from .data.formats import load_model
    from .loss import psnr, ssim
    from .raster import RenderOptions, render
    model = load_model(args.model)
    cams = layout.read_cameras(args.scene)
    held = layout.read_heldout(args.scene)
    views = {"held-out": held, "train": [i for i in sorted(cams) if i not in held], "all": sorted(cams)}[args.views]
    if not views:
        raise CliError(f"no {args.views} views in {args.scene}")
    bg = tuple(layout.read_meta(args.scene)["background"])
    print("view\tpsnr\tssim")
    ps, ss = [], []
    for i in views:
        target = layout.read_images(args.scene, [i])[0]
        # compare at the stored (32-bit) precision
        img = render(model, cams[i], RenderOptions(background=bg)).color.astype(np.float32).astype(np.float64)
        p, s = psnr(target, img), ssim(target, img, with_grad=False)[0]
        ps.append(p)
        ss.append(s)
        print(f"{i}\t{p:.4f}\t{s:.6f}")
    print(f"mean\t{np.mean(ps):.4f}\t{np.mean(ss):.6f}")


def cmd_ablate(args):
    from .bench import BenchConfig, format_tsv, make_benchmark, run_ablation_depth, run_ablation_scale
    from .data.layout import read_meta
    meta = read_meta(args.scene)
    bench = make_benchmark(BenchConfig(seed=meta["seed"], scene=meta["params"], train_steps=args.steps))
    rows = run_ablation_scale(bench) if args.suite == "scale" else run_ablation_depth(bench)
    sys.stdout.write(format_tsv(rows))
    write_manifest(args.scene, f"ablate-{args.suite}", args, {"rows": rows})


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fleetsplat", description="Distributed sparse-view Gaussian reconstruction.")
    p.add_argument("--config", help="key=value file supplying defaults for any flag")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--gaussians", type=int, default=1600)
    s.add_argument("--cameras", type=int, default=8)
    s.add_argument("--size", type=int, default=32, help="image width and height")
    s.add_argument("--extent", type=float, default=1.0)
    s.add_argument("--heldout-every", type=int, default=4)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("partition", help="split training views into device regions")
    s.add_argument("--scene", required=True)
    s.add_argument("--devices", type=int, required=True)
    s.add_argument("--predictor-noise", type=float, default=0.005)
    s.set_defaults(func=cmd_partition)

    def device_flags(s, train=True):
        s.add_argument("--scene", required=True)
        s.add_argument("--device", type=int, required=True)
        s.add_argument("--stride", type=int, default=2)
        s.add_argument("--align-steps", type=int, default=500)
        if train:
            s.add_argument("--steps", type=int, default=10_000)
            s.add_argument("--densify-every", type=int, default=300)
            s.add_argument("--max-gaussians", type=int, default=20000)
            s.add_argument("--no-depth-loss", action="store_true")
            s.add_argument("--no-shape-freeze", action="store_true")
            s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("init", help="initialize one device's Gaussians")
    device_flags(s, train=False)
    s.add_argument("--scale-mode", choices=("none", "global", "global+local"), default="global+local")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("train", help="train one device")
    device_flags(s)
    s.add_argument("--init", help="initial model (default: device_<m>/init.dgs, else initialize)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("serve", help="run the aggregation server over TCP")
    s.add_argument("--scene", required=True)
    s.add_argument("--devices", type=int, required=True)
    s.add_argument("--listen", default="127.0.0.1:7070")
    s.add_argument("--distill-epochs", type=int, default=5)
    s.add_argument("--timeout", type=float, default=None, help="straggler timeout in seconds")
    s.add_argument("--out")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("device", help="run one device against a server")
    device_flags(s)
    s.add_argument("--connect", required=True)
    s.add_argument("--retries", type=int, default=3)
    s.set_defaults(func=cmd_device)

    s = sub.add_parser("aggregate", help="filter, merge and distill models offline")
    s.add_argument("--scene", required=True)
    s.add_argument("--models", nargs="+", required=True, help="one model per device, in device-id order")
    s.add_argument("--distill-epochs", type=int, default=5)
    s.add_argument("--out")
    s.set_defaults(func=cmd_aggregate)

    s = sub.add_parser("render", help="render a model from one camera")
    s.add_argument("--model", required=True)
    s.add_argument("--camera-id", type=int, required=True)
    s.add_argument("--scene")
    s.add_argument("--cameras", help="cameras.txt when no scene directory is given")
    s.add_argument("--out", required=True)
    s.add_argument("--depth")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="PSNR / SSIM table")
    s.add_argument("--model", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--views", choices=("held-out", "train", "all"), default="held-out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="run an ablation suite")
    s.add_argument("--scene", required=True)
    s.add_argument("--suite", choices=("depth", "scale"), required=True)
    s.add_argument("--steps", type=int, default=1000)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            sub = parser._subparsers._group_actions[0].choices[args.command]
            apply_config(sub, read_config(args.config))
            args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except SystemExit as exc:   # argparse usage errors
        return int(exc.code or 0)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, FileNotFoundError, KeyError, OSError) as exc:
        from .dist.transport import TransportError
        code = EXIT_TRANSPORT if isinstance(exc, TransportError) else EXIT_CONTRACT
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
