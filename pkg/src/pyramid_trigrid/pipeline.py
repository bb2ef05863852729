"""End-to-end stages wired from a :class:`PipelineConfig`.

``generate`` runs reference image -> latent inversion -> synthesis ->
score distillation -> multi-view refinement and writes the grids of every
stage plus the protocol and turntable renders.
"""
from __future__ import annotations

import csv
import json
import logging
import zlib
from dataclasses import dataclass
from io import StringIO
from pathlib import Path

import numpy as np

from . import io as pio
from .camera import CameraPose, protocol_21_views, turntable
from .fitting import FitConfig, SphereField, ViewSet, fit_views, held_out_view, render_field, sphere_dataset
from .grid import InvalidInput, PyramidTriGrid
from .guidance import (Conditioning, GuidanceError, PointMassOracle, RefineConfig, SDSConfig, refine,
                       run_sds)
from .remote import RemoteProvider
from .render import Renderer
from .synthesis import SynthesisNetwork, invert, synthesize

log = logging.getLogger(__name__)

FRONT = dict(azimuth=0.0, polar=90.0)


class ProviderUnavailableError(RuntimeError):
    pass


def base_camera(cfg) -> CameraPose:
    r = cfg["render"]
    return CameraPose(radius=r["radius"], fov_y=r["fov_y"], image_size=r["image_size"])


def front_camera(cfg) -> CameraPose:
    return CameraPose(**FRONT, radius=cfg["render"]["radius"], fov_y=cfg["render"]["fov_y"],
                      image_size=cfg["render"]["image_size"])


def renderer_kwargs(cfg, deterministic=True) -> dict:
    r = cfg["render"]
    return dict(samples_per_ray=r["samples_per_ray"], near_far_margin=r["near_far_margin"],
                workers=1 if deterministic else r["workers"], deterministic=deterministic)


def build_models(cfg, deterministic=True):
    """Renderer and synthesis network, loaded from ``network.weights`` or seeded."""
    n, p = cfg["network"], cfg["pyramid"]
    if n["weights"]:
        arrays = pio.load_weights(n["weights"])
        renderer = pio.renderer_from_arrays(arrays, **renderer_kwargs(cfg, deterministic))
        net = pio.network_from_arrays(arrays) if "net.const" in arrays else None
    else:
        rng = np.random.default_rng(n["seed"])
        renderer = Renderer.init(channels=p["channels"], latent_dim=n["latent_dim"],
                                 hidden=n["hidden"], color_features=n["color_features"], rng=rng,
                                 **renderer_kwargs(cfg, deterministic))
        net = None
    if net is None:
        net = SynthesisNetwork.init(p["resolutions"], p["channels"], p["depth_layers"],
                                    n["latent_dim"], n["width"], n["head_channels"],
                                    rng=np.random.default_rng([n["seed"], 1]))
    if tuple(net.resolutions) != tuple(p["resolutions"]):
        raise InvalidInput(f"network emits levels {net.resolutions}, config asks for {p['resolutions']}")
    return renderer, net


class PromptSceneOracle(PointMassOracle):
    """Oracle provider whose 'data distribution' is one generator scene per prompt.

    The prompt and seed pick a latent code; the target for a camera is the
    render of that scene.  Calls without a camera get the front view.
    """

    def __init__(self, net: SynthesisNetwork, renderer: Renderer, prompt: str, seed: int,
                 front: CameraPose):
        rng = np.random.default_rng([zlib.crc32(prompt.encode("utf-8")), seed])
        self.latent = (0.5 * rng.standard_normal(net.latent_dim)).astype(renderer.dtype)
        self.scene = synthesize(net, self.latent, renderer.dtype)
        self.renderer = renderer
        self.front = front
        self._cache = {}
        super().__init__(self._render_target)

    def _render_target(self, cond: Conditioning):
        cam = cond.camera or self.front
        if cam not in self._cache:
            self._cache[cam] = self.renderer.render(self.scene, cam, self.latent).rgb
        return self._cache[cam]


def make_provider(spec: str, cfg, net, renderer, seed):
    spec = spec or cfg["provider"]["kind"]
    if spec == "oracle":
        return PromptSceneOracle(net, renderer, cfg["sds"]["prompt"], seed, front_camera(cfg))
    url = spec[len("remote:"):] if spec.startswith("remote:") else cfg["provider"]["url"]
    if not url:
        raise InvalidInput(f"provider must be 'oracle' or 'remote:URL', got {spec!r}")
    prov = RemoteProvider(url, timeout=cfg["provider"]["timeout"])
    try:
        info = prov.health()
    except GuidanceError as exc:
        raise ProviderUnavailableError(f"provider at {url} unavailable and no oracle fallback "
                                       f"configured: {exc}") from exc
    if str(info.get("protocol")) != "1":
        raise ProviderUnavailableError(f"provider speaks protocol {info.get('protocol')!r}, need '1'")
    return prov


def write_csv(path, header, rows):
    buf = StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    pio.atomic_write_text(path, buf.getvalue())


@dataclass
class GenerateResult:
    out: Path
    latent: np.ndarray
    pyr: PyramidTriGrid
    view_images: list
    turntable_images: list


def run_generate(cfg, provider_spec="", seed=0, out="out", skip_refine=False, deterministic=True,
                 init_grid=None) -> GenerateResult:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    renderer, net = build_models(cfg, deterministic)
    provider = make_provider(provider_spec, cfg, net, renderer, seed)
    base, front = base_camera(cfg), front_camera(cfg)
    n = cfg["render"]["image_size"]
    inv = cfg["inversion"]
    prompt = cfg["sds"]["prompt"]

    if inv["reference"]:
        reference = pio.load_image(inv["reference"])
    else:
        reference = provider.sample_image((n, n, 3), Conditioning(prompt, seed, front))
    if reference.shape != (n, n, 3):
        raise InvalidInput(f"reference image is {reference.shape}, render size is {(n, n, 3)}")
    pio.save_image(out / "reference.png", reference)

    if inv["enabled"]:
        res = invert(net, renderer, reference, front, iters=inv["iters"], lr=inv["lr"], reg=inv["reg"])
        w = res.w
        write_csv(out / "inversion_log.csv", ["step", "loss"], enumerate(res.losses))
        log.info("inversion best loss %.4g", res.best_loss)
    else:
        w = np.zeros(net.latent_dim, renderer.dtype)
    pio.save_weights(out / "latent.ptw", {"w": w})
    pio.save_weights(out / "weights.ptw", {**pio.renderer_arrays(renderer), **pio.network_arrays(net)})

    pyr = pio.load_grid(init_grid) if init_grid else synthesize(net, w, renderer.dtype)
    pio.save_grid(out / "grid_inverted.ptg", pyr)

    s = cfg["sds"]
    sds_cfg = SDSConfig(t_min=s["t_min"], t_max=s["t_max"], weighting=s["weighting"], steps=s["steps"],
                        lr=s["lr"], lr_final=s["lr_final"], prompt=prompt, seed=seed,
                        max_retries=s["max_retries"])
    pyr, _, hist = run_sds(pyr, w, renderer, provider, sds_cfg, base)
    write_csv(out / "sds_log.csv", ["step", "t", "weight", "residual_rms", "grad_norm", "skipped"],
              [(d.step, d.t, d.weight, d.residual_rms, d.grad_norm, int(d.skipped)) for d in hist])
    pio.save_grid(out / "grid_sds.ptg", pyr)

    if skip_refine:
        log.info("refinement skipped")
    else:
        r = cfg["refine"]
        rc = RefineConfig(noise_level=r["noise_level"], steps=r["steps"], lr=r["lr"], seed=seed,
                          prompt=prompt, min_views=r["min_views"], max_backtracks=r["max_backtracks"])
        result = refine(pyr, w, renderer, provider, rc, base)
        pyr = result.pyr
        write_csv(out / "refine_log.csv", ["step", "mean_loss"], enumerate(result.mean_losses))
    pio.save_grid(out / "grid.ptg", pyr)

    views = protocol_21_views(base, seed)
    view_imgs = [renderer.render(pyr, c, w).rgb for c in views]
    for i, img in enumerate(view_imgs):
        pio.save_image(out / "views" / f"view_{i:02d}.png", img)
    frames = turntable(base, cfg["run"]["turntable_frames"])
    frame_imgs = [renderer.render(pyr, c, w).rgb for c in frames]
    for i, img in enumerate(frame_imgs):
        pio.save_image(out / "turntable" / f"frame_{i:03d}.png", img)
    return GenerateResult(out, w, pyr, view_imgs, frame_imgs)


def read_posed_views(directory, base: CameraPose) -> ViewSet:
    """Images listed in ``poses.csv`` (columns file, azimuth, polar[, radius, fov_y])."""
    d = Path(directory)
    cams, imgs = [], []
    with open(d / "poses.csv", newline="") as f:
        for row in csv.DictReader(f):
            kw = {k: float(row[k]) for k in ("azimuth", "polar", "radius", "fov_y") if row.get(k)}
            img = pio.load_image(d / row["file"])
            cams.append(CameraPose(**{**vars(base), **kw, "image_size": img.shape[0]}))
            imgs.append(img)
    return ViewSet(cams, imgs)


def run_fit(cfg, views: ViewSet | None = None, seed=0, out="out", deterministic=True):
    """Fit a zero-initialised pyramid; with no views, uses the synthetic sphere dataset."""
    out = Path(out)
    renderer, _ = build_models(cfg, deterministic)
    w = np.zeros(renderer.torgb.latent_dim, renderer.dtype)
    base = base_camera(cfg)
    f = cfg["fit"]
    synthetic = views is None
    if synthetic:
        views = sphere_dataset(renderer, w, f["views"], base, seed)
    if len(views.cameras) < 2:
        raise InvalidInput("need >= 2 views")
    p = cfg["pyramid"]
    pyr = PyramidTriGrid.zeros(p["resolutions"], p["channels"], p["depth_layers"])
    fc = FitConfig(steps=f["steps"], lr=f["lr"], lr_final=f["lr_final"], batch_rays=f["batch_rays"],
                   seed=seed)
    result = fit_views(pyr, renderer, w, views, fc)
    pio.save_grid(out / "grid.ptg", result.pyr)
    pio.save_weights(out / "weights.ptw", pio.renderer_arrays(renderer))
    write_csv(out / "loss_log.csv", ["step", "loss"], ((i, repr(l)) for i, l in enumerate(result.losses)))
    summary = {"steps": fc.steps, "final_loss": result.losses[-1] if result.losses else None}
    if synthetic:
        from .analysis import psnr
        cam = held_out_view(base, seed)
        truth = render_field(renderer, SphereField(color_features=renderer.decoder.color_features),
                             cam, w).rgb
        summary["held_out_psnr"] = psnr(renderer.render(result.pyr, cam, w).rgb, truth)
    pio.atomic_write_text(out / "fit_summary.json", json.dumps(summary, indent=2))
    return result, summary
