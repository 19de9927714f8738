"""Command-line entry point: ``sdsinpaint <make-scene|train|render|eval|mock-prior>``.

Errors are printed as one line ``ERROR <CODE>: <message>`` on stderr and the
process exits with status 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .errors import ConfigError, DatasetError, InvalidInputError, SdsInpaintError
from .field import load_checkpoint
from .imaging import ensure_dir, read_pfm, read_png, write_pfm, write_png
from .metrics import evaluate
from .optim import ABLATIONS, LossWeights, TrainConfig, train
from .prior import GaussianPredictor, ZeroPredictor
from .render import render_view
from .scene import SceneSpec, attach_inpainted_depth, generate_synthetic_scene, load_dataset, oracle_prior, save_dataset

log = logging.getLogger("sdsinpaint")


# -- config -------------------------------------------------------------------


def load_config(path) -> dict:
    """Read a TOML run configuration; keys mirror :class:`TrainConfig` fields."""
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
    return data


def make_train_config(data: dict, ablation: str | None = None, **overrides) -> TrainConfig:
    data = dict(data)
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    weights = data.pop("weights", {})
    if not isinstance(weights, dict):
        raise ConfigError("[weights] must be a table")
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    wknown = {f.name for f in dataclasses.fields(LossWeights)}
    if set(weights) - wknown:
        raise ConfigError(f"unknown [weights] keys: {', '.join(sorted(set(weights) - wknown))}")
    for key in ("trunk", "background", "omega_appearance_range", "omega_geometry_range"):
        if key in data:
            data[key] = tuple(data[key])
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        data["weights"] = LossWeights(**weights)
        if ablation is not None:
            return TrainConfig.for_ablation(ablation, **data)
        return TrainConfig(**data)
    except (TypeError, InvalidInputError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


# -- priors -------------------------------------------------------------------


def _gaussian_mean(args):
    if args.mu_from:
        return read_png(args.mu_from)
    return np.full(3, args.mu)


def build_predictor(args, scene_dir=None):
    if args.prior == "gaussian":
        return GaussianPredictor(_gaussian_mean(args), args.prior_var)
    if args.prior == "oracle":
        from .scene import SyntheticScene

        ds = load_dataset(scene_dir)
        if not ds.gt_frames:
            raise DatasetError(f"{scene_dir}: the oracle prior needs gt/ frames")
        normals = [_gt_normals(ds, g) for g in ds.gt_frames]
        return oracle_prior(SyntheticScene(ds, None, [], normals), args.prior_var)
    if args.prior == "remote":
        from .remote import RemotePredictor

        if not args.endpoint:
            raise ConfigError("--prior remote requires --endpoint")
        return RemotePredictor(args.endpoint, timeout=args.timeout, retries=args.retries)
    if args.prior == "zero":
        return ZeroPredictor()
    raise ConfigError(f"unknown prior {args.prior!r}")


def _gt_normals(ds, g):
    from .geometry import normal_map_from_depth, ray_depth_to_z

    nm = normal_map_from_depth(ray_depth_to_z(g.depth.astype(np.float64), g.camera), g.camera)
    return nm.normals


# -- subcommands --------------------------------------------------------------


def cmd_make_scene(args) -> int:
    spec = SceneSpec(
        kind=args.kind, width=args.width, height=args.height, frames=args.frames,
        arc_degrees=args.arc, fov_degrees=args.fov, occluder=not args.no_object,
        dilate=args.dilate, prompt=args.prompt, texture_seed=args.texture_seed,
    )
    scene = generate_synthetic_scene(spec)
    if args.inpaint_depth != "none":
        attach_inpainted_depth(scene.dataset, args.inpaint_depth)
    try:
        out = save_dataset(scene.dataset, args.out)
    except OSError as exc:
        raise DatasetError(f"{args.out}: cannot write scene ({exc.strerror})") from exc
    print(f"wrote {len(scene.dataset.frames)} frames to {out}")
    return 0


def cmd_train(args) -> int:
    data = load_config(args.config) if args.config else {}
    cfg = make_train_config(
        data, args.ablation, seed=args.seed, iterations=args.iterations,
        depth_sds=True if args.depth_sds else None,
    )
    scene = load_dataset(args.scene)
    predictor = None
    if cfg.appearance_sds or cfg.geometry_sds:
        predictor = build_predictor(args, args.scene)
    out = ensure_dir(args.out)
    (out / "config.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=2, default=list))
    try:
        res = train(cfg, scene, args.prompt, predictor, out_dir=out, resume=args.resume)
    finally:
        if hasattr(predictor, "close"):
            predictor.close()
    last = res.log[-1] if res.log else None
    if last:
        print(f"trained {cfg.iterations} iterations; final total loss {last['total']:.6g}")
    print(f"checkpoint: {out / 'field.ckpt'}  log: {out / 'loss.csv'}")
    return 0


def cmd_render(args) -> int:
    field = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.scene)
    frames = ds.gt_frames if args.frames == "gt" else ds.frames
    if not frames:
        raise DatasetError(f"{args.scene}: no {args.frames} frames to render")
    out = ensure_dir(args.out)
    rng = np.random.default_rng(args.seed) if args.stratified else None
    for f in frames:
        view = render_view(field, f.camera, args.samples, rng=rng, normals="plane" if args.normals else None,
                           workers=args.workers, bands=max(1, args.workers))
        write_png(ensure_dir(out / "images") / f"{f.index:04d}.png", np.clip(view.color, 0, 1))
        write_pfm(ensure_dir(out / "depth") / f"{f.index:04d}.pfm", view.depth)
        if args.normals:
            n = np.where(view.normal_valid[..., None], view.normals, 0.0)
            write_pfm(ensure_dir(out / "normals") / f"{f.index:04d}.pfm", n)
    print(f"rendered {len(frames)} views to {out}")
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args.gt)
    if not ds.gt_frames:
        raise DatasetError(f"{args.gt}: no gt/ frames to evaluate against")
    rdir = Path(args.renders)
    images = sorted((rdir / "images").glob("*.png"))
    if len(images) != len(ds.gt_frames):
        raise InvalidInputError(f"{len(images)} rendered images but {len(ds.gt_frames)} ground-truth frames")
    renders = []
    for g in ds.gt_frames:
        ip = rdir / "images" / f"{g.index:04d}.png"
        if not ip.exists():
            raise DatasetError(f"{ip}: missing render for frame {g.index}")
        dp = rdir / "depth" / f"{g.index:04d}.pfm"
        renders.append((read_png(ip), read_pfm(dp) if dp.exists() else None))
    report = evaluate(renders, ds.gt_frames, {"renders": str(rdir), "gt": str(args.gt)})
    text = report.to_json()
    if args.json:
        Path(args.json).write_text(text)
    print(report.table())
    return 0


def cmd_mock_prior(args) -> int:
    from .remote import MockPriorServer

    predictor = GaussianPredictor(_gaussian_mean(args), args.prior_var)
    try:
        server = MockPriorServer(predictor, args.host, args.port)
    except OSError as exc:
        raise SdsInpaintError(f"cannot bind {args.host}:{args.port} ({exc.strerror})") from exc
    print(f"serving {server.url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


# -- parser -------------------------------------------------------------------


def _add_prior_mean(p):
    p.add_argument("--mu-from", metavar="PNG", help="image used as the Gaussian prior mode (default: constant --mu)")
    p.add_argument("--mu", type=float, default=0.5, help="constant Gaussian prior mode per channel (default: 0.5)")
    p.add_argument("--prior-var", type=float, default=0.01, help="Gaussian prior variance s^2 (default: 0.01)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdsinpaint", description="Radiance-field inpainting with score distillation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("make-scene", help="generate a synthetic occluder scene")
    s.add_argument("out", help="output scene directory")
    s.add_argument("--kind", choices=("plane", "room"), default="room", help="background geometry (default: room)")
    s.add_argument("--width", type=int, default=32, help="image width in pixels (default: 32)")
    s.add_argument("--height", type=int, default=32, help="image height in pixels (default: 32)")
    s.add_argument("--frames", type=int, default=8, help="number of views (default: 8)")
    s.add_argument("--arc", type=float, default=30.0, help="camera arc in degrees (default: 30)")
    s.add_argument("--fov", type=float, default=50.0, help="horizontal field of view in degrees (default: 50)")
    s.add_argument("--dilate", type=int, default=1, help="mask dilation in pixels (default: 1)")
    s.add_argument("--no-object", action="store_true", help="omit the occluder")
    s.add_argument("--prompt", default=SceneSpec.prompt, help="text prompt stored with the scene")
    s.add_argument("--texture-seed", type=int, default=0, help="seed for the procedural textures (default: 0)")
    s.add_argument("--inpaint-depth", choices=("none", "nearest", "gt"), default="none",
                   help="also write inpainted depth maps for ablation row iii (default: none)")
    s.set_defaults(func=cmd_make_scene)

    t = sub.add_parser("train", help="train a radiance field on a scene")
    t.add_argument("--scene", required=True, help="scene directory")
    t.add_argument("--out", required=True, help="output directory for checkpoint, state and loss.csv")
    t.add_argument("--config", help="TOML run configuration")
    t.add_argument("--seed", type=int, help="run seed (overrides the config)")
    t.add_argument("--iterations", type=int, help="iteration count (overrides the config)")
    t.add_argument("--ablation", choices=ABLATIONS, help="ablation row: i none, ii appearance, iii ii+inpainted depth, "
                   "iv ii+geometry, v iv+multi-view")
    t.add_argument("--depth-sds", action="store_true", help="use depth-image distillation for the geometry term")
    t.add_argument("--prompt", help="override the scene prompt")
    t.add_argument("--prior", choices=("gaussian", "oracle", "remote", "zero"), default="gaussian",
                   help="noise predictor (default: gaussian)")
    t.add_argument("--endpoint", help="base URL of a remote prior")
    t.add_argument("--timeout", type=float, default=30.0, help="remote request timeout in seconds (default: 30)")
    t.add_argument("--retries", type=int, default=2, help="remote retries before giving up (default: 2)")
    _add_prior_mean(t)
    t.add_argument("--resume", action="store_true", help="continue from the state saved in --out")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render views from a checkpoint")
    r.add_argument("--checkpoint", required=True, help="field checkpoint")
    r.add_argument("--scene", required=True, help="scene directory supplying poses")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--frames", choices=("train", "gt"), default="train", help="which poses to render (default: train)")
    r.add_argument("--samples", type=int, default=64, help="samples per ray (default: 64)")
    r.add_argument("--normals", action="store_true", help="also write camera-frame plane-fit normals as PFM")
    r.add_argument("--stratified", action="store_true", help="jitter samples instead of using bin midpoints")
    r.add_argument("--seed", type=int, default=0, help="seed for --stratified (default: 0)")
    r.add_argument("--workers", type=int, default=1, help="render threads (default: 1)")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="score renders against held-out ground truth")
    e.add_argument("--renders", required=True, help="directory written by render --frames gt")
    e.add_argument("--gt", required=True, help="scene directory with gt/ frames")
    e.add_argument("--json", help="also write the report as JSON")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("mock-prior", help="serve a Gaussian prior over HTTP")
    m.add_argument("--host", default="127.0.0.1", help="bind address (default: 127.0.0.1)")
    m.add_argument("--port", type=int, default=8765, help="port, 0 for any free port (default: 8765)")
    _add_prior_mean(m)
    m.set_defaults(func=cmd_mock_prior)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SdsInpaintError as exc:
        print(f"ERROR {exc.code}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"ERROR E_IO: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
