"""Command line entry point: ``pyramid-trigrid <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io as pio
from .analysis import artifact_ablation, extract_mesh, power_spectrum
from .camera import CameraPose
from .grid import InvalidInput, PyramidTriGrid
from .optim import gradcheck, make_gradcheck_scene
from .pipeline import ProviderUnavailableError, build_models, read_posed_views, run_fit, run_generate

log = logging.getLogger("pyramid_trigrid")


def common_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="key=value config file with [sections]")
    p.add_argument("--seed", type=int, default=None, help="global seed (overrides run.seed)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded, bit-reproducible execution")
    p.add_argument("--provider", default="", help="oracle | remote:URL")
    p.add_argument("--skip-refine", action="store_true", help="stop after score distillation")
    p.add_argument("--out", type=Path, default=None, help="output directory (overrides run.out)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = common_options()
    parser = argparse.ArgumentParser(prog="pyramid-trigrid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit a pyramid to posed images")
    p.add_argument("--views", type=Path, help="directory with poses.csv and images; "
                   "omitted -> synthetic sphere dataset")

    p = sub.add_parser("generate", parents=[common], help="inversion, SDS and refinement pipeline")
    p.add_argument("--prompt", default=None)
    p.add_argument("--reference", type=Path, help="aligned reference image (else sampled from provider)")
    p.add_argument("--init-grid", type=Path, help="start distillation from a stored grid file")

    p = sub.add_parser("ablate", parents=[common], help="single-resolution vs pyramid artifact ablation")
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--steps", type=int, default=1000)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the renderer adjoint")
    p.add_argument("--threshold", type=float, default=1e-3)

    p = sub.add_parser("mesh", parents=[common], help="marching-cubes mesh of a grid's density")
    p.add_argument("--grid", type=Path, help="grid file; omitted -> zero grid of the configured shape")
    p.add_argument("--weights", type=Path, help="renderer weights file")
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--iso", type=float, default=10.0)

    p = sub.add_parser("spectrum", parents=[common], help="radial power spectrum of an image")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--cutoff", type=float, default=0.25)

    p = sub.add_parser("render", parents=[common], help="render a grid from one camera")
    p.add_argument("--grid", type=Path, required=True)
    p.add_argument("--weights", type=Path, help="renderer weights file")
    p.add_argument("--latent", type=Path, help="latent file (array 'w'); default zeros")
    p.add_argument("--azimuth", type=float, default=0.0)
    p.add_argument("--polar", type=float, default=90.0)
    return parser


def load_cfg(args):
    cfg = pio.load_config(args.config) if args.config else pio.PipelineConfig()
    if args.seed is not None:
        cfg.set("run", "seed", args.seed)
    if args.out is not None:
        cfg.set("run", "out", str(args.out))
    if getattr(args, "weights", None):
        cfg.set("network", "weights", str(args.weights))
    return cfg


def cmd_fit(args, cfg):
    views = None
    if args.views:
        from .pipeline import base_camera
        views = read_posed_views(args.views, base_camera(cfg))
    _, summary = run_fit(cfg, views, cfg["run"]["seed"], cfg["run"]["out"], args.deterministic)
    print(json.dumps(summary))
    return 0


def cmd_generate(args, cfg):
    if args.prompt is not None:
        cfg.set("sds", "prompt", args.prompt)
    if args.reference is not None:
        cfg.set("inversion", "reference", str(args.reference))
    res = run_generate(cfg, args.provider, cfg["run"]["seed"], cfg["run"]["out"], args.skip_refine,
                       args.deterministic, args.init_grid)
    print(f"wrote {len(res.view_images)} views and {len(res.turntable_images)} turntable frames "
          f"to {res.out}")
    return 0


def cmd_ablate(args, cfg):
    rep = artifact_ablation(seed=cfg["run"]["seed"], noise=args.noise, steps=args.steps)
    out = Path(cfg["run"]["out"])
    pio.atomic_write_text(out / "ablation.json", json.dumps(asdict(rep), indent=2, default=float))
    print(rep.summary())
    return 0


def cmd_gradcheck(args, cfg):
    rep = gradcheck(make_gradcheck_scene(cfg["run"]["seed"]), threshold=args.threshold)
    print(rep.describe())
    return 0 if rep.passed else 1


def cmd_mesh(args, cfg):
    renderer, _ = build_models(cfg)
    if args.grid:
        pyr = pio.load_grid(args.grid)
    else:
        p = cfg["pyramid"]
        pyr = PyramidTriGrid.zeros(p["resolutions"], p["channels"], p["depth_layers"])
    mesh = extract_mesh(pyr, renderer.decoder, args.resolution, args.iso)
    path = Path(cfg["run"]["out"]) / "mesh.obj"
    pio.atomic_write_text(path, mesh.to_obj())
    print(f"{len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {path}"
          + (" (empty surface)" if mesh.is_empty else ""))
    return 0


def cmd_spectrum(args, cfg):
    rep = power_spectrum(pio.load_image(args.image), cutoff=args.cutoff)
    path = Path(cfg["run"]["out"]) / "spectrum.csv"
    pio.atomic_write_text(path, rep.to_csv())
    print(f"high_band_ratio {rep.high_band_ratio:.6g} -> {path}")
    return 0


def cmd_render(args, cfg):
    from .pipeline import base_camera
    renderer, _ = build_models(cfg, args.deterministic)
    pyr = pio.load_grid(args.grid)
    w = (pio.load_weights(args.latent)["w"] if args.latent
         else np.zeros(renderer.torgb.latent_dim, renderer.dtype))
    base = base_camera(cfg)
    cam = CameraPose(args.azimuth, args.polar, base.radius, base.fov_y, base.image_size)
    img = renderer.render(pyr, cam, w).rgb
    path = Path(cfg["run"]["out"]) / "render.png"
    pio.save_image(path, img)
    print(f"-> {path}")
    return 0


COMMANDS = {"fit": cmd_fit, "generate": cmd_generate, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck, "mesh": cmd_mesh, "spectrum": cmd_spectrum,
            "render": cmd_render}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_cfg(args)
        return COMMANDS[args.command](args, cfg)
    except (pio.ConfigError, pio.FormatError, InvalidInput, FileNotFoundError,
            ProviderUnavailableError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
