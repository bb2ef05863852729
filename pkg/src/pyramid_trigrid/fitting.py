"""Synthetic scenes and multi-view fitting of a pyramid tri-grid.

The ground-truth scenes are analytic density/colour fields rendered with the
same ray marcher and ToRGB as the grid, so a perfect fit is representable up
to the frozen decoder's expressiveness.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .camera import CameraPose, RayBatch, camera_rays
from .grid import InvalidInput, PyramidTriGrid
from .optim import OptimizerState, adam_step, pyramid_multipliers
from .render import RenderedImage, Renderer, composite, render_backward, to_rgb

log = logging.getLogger(__name__)


@dataclass
class SphereField:
    """Soft-edged sphere with a smooth colour pattern.

    ``density(p) = peak * sigmoid((radius - |p|) / softness)``; colour
    feature ``j`` is ``0.5 + 0.4 cos(pi * freq * <p, d_j>)`` for fixed unit
    directions ``d_j``.
    """

    radius: float = 0.5
    peak: float = 30.0
    softness: float = 0.02
    color_features: int = 8
    freq: float = 1.5
    pattern_seed: int = 7

    def directions(self):
        d = np.random.default_rng(self.pattern_seed).standard_normal((self.color_features, 3))
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def density(self, points):
        r = np.linalg.norm(np.asarray(points, np.float64), axis=-1)
        return self.peak / (1.0 + np.exp(-(self.radius - r) / self.softness))

    def __call__(self, points):
        pts = np.asarray(points, np.float64)
        color = 0.5 + 0.4 * np.cos(np.pi * self.freq * pts @ self.directions().T)
        return self.density(pts), color


def render_field(renderer: Renderer, field, cam: CameraPose, w, seed=None) -> RenderedImage:
    """Render an analytic ``field(points) -> (sigma, colour)`` with the renderer's sampler and ToRGB."""
    rays = camera_rays(cam, renderer.near_far_margin)
    pts, delta = renderer.sample_points(rays, renderer.sample_offsets(len(rays), seed))
    n, s = pts.shape[:2]
    sigma, color = field(pts.reshape(-1, 3))
    if color.shape[1] != renderer.decoder.color_features:
        raise InvalidInput("field colour features do not match the renderer")
    feature, wsum, *_ = composite(sigma.reshape(n, s), color.reshape(n, s, -1), delta)
    rgb = to_rgb(feature, wsum, np.asarray(w, np.float64), renderer.torgb, renderer.background)
    k = int(cam.image_size)
    dt = renderer.dtype
    return RenderedImage(rgb.reshape(k, k, 3).astype(dt), feature.reshape(k, k, -1).astype(dt),
                         wsum.reshape(k, k).astype(dt))


@dataclass
class ViewSet:
    cameras: list
    images: list


RING_POLARS = (60.0, 90.0, 120.0, 90.0)


def ring_cameras(n_views=8, base: CameraPose = CameraPose(), offset=0.0) -> list:
    """Evenly spaced azimuths with polar angles cycling through 60/90/120/90 degrees.

    Random cameras leave unobserved gaps that a sparse fit fills with fog, so
    the synthetic training sets use this ring instead.
    """
    return [replace(base, azimuth=(offset + k * 360.0 / n_views) % 360.0,
                    polar=RING_POLARS[k % len(RING_POLARS)]) for k in range(n_views)]


def sphere_dataset(renderer: Renderer, w, n_views=8, base: CameraPose = CameraPose(), seed=0,
                   field: SphereField | None = None) -> ViewSet:
    """``n_views`` ground-truth renders on a camera ring with a seeded azimuth offset."""
    field = field or SphereField(color_features=renderer.decoder.color_features)
    offset = float(np.random.default_rng(seed).uniform(0, 360.0 / n_views))
    cams = ring_cameras(n_views, base, offset)
    return ViewSet(cams, [render_field(renderer, field, c, w).rgb for c in cams])


def held_out_view(base: CameraPose = CameraPose(), seed=0) -> CameraPose:
    """A camera between the training azimuths, near the horizontal band."""
    rng = np.random.default_rng([seed, 999])
    return replace(base, azimuth=float(rng.uniform(0, 360)), polar=float(rng.uniform(80, 100)))


@dataclass
class FitConfig:
    steps: int = 2000
    lr: float = 2e-2
    lr_final: float = 2e-3
    batch_rays: int = 512
    lr_gamma: float = 0.5
    seed: int = 0
    target_noise: float = 0.0     # std of fresh Gaussian noise added to each batch's targets

    def learning_rate(self, step):
        if self.steps <= 1:
            return self.lr
        return self.lr * (self.lr_final / self.lr) ** (step / (self.steps - 1))


@dataclass
class FitResult:
    pyr: PyramidTriGrid
    losses: list          # mean squared error of each step's ray batch
    skipped: int


def fit_views(pyr: PyramidTriGrid, renderer: Renderer, w, views: ViewSet,
              cfg: FitConfig = FitConfig(), callback=None) -> FitResult:
    """Fit grid values to posed images with random ray batches, in place.

    Every step draws ``cfg.batch_rays`` pixels across all views and a fresh
    stratified jitter, both seeded from ``(cfg.seed, step)``.  A positive
    ``cfg.target_noise`` perturbs the batch targets with fresh noise per step.
    """
    if len(views.cameras) < 2:
        raise InvalidInput("need >= 2 views")
    if len(views.cameras) != len(views.images):
        raise InvalidInput(f"{len(views.cameras)} poses for {len(views.images)} images")
    rays = [camera_rays(c, renderer.near_far_margin) for c in views.cameras]
    for c, img in zip(views.cameras, views.images):
        if np.shape(img) != (c.image_size, c.image_size, 3):
            raise InvalidInput(f"image shape {np.shape(img)} does not match camera size {c.image_size}")
    origins = np.concatenate([r.origins for r in rays])
    dirs = np.concatenate([r.directions for r in rays])
    near = np.concatenate([r.near for r in rays])
    far = np.concatenate([r.far for r in rays])
    colors = np.concatenate([np.asarray(i, renderer.dtype).reshape(-1, 3) for i in views.images])
    all_rays = RayBatch(origins, dirs, near, far)
    state = OptimizerState.for_params(pyr.arrays, pyramid_multipliers(pyr, cfg.lr_gamma))
    losses = []
    n = len(all_rays)
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        idx = rng.choice(n, min(cfg.batch_rays, n), replace=False)
        jitter = int(rng.integers(0, 2 ** 63 - 1))
        out = renderer.render_rays(pyr, all_rays.subset(idx), w, seed=jitter, record=True)
        target = colors[idx]
        if cfg.target_noise > 0:
            target = target + (cfg.target_noise * rng.standard_normal(target.shape)).astype(target.dtype)
        diff = out.rgb - target
        losses.append(float(np.mean(np.square(diff, dtype=np.float64))))
        grads = render_backward(out.tape, (2.0 / diff.size) * diff)
        adam_step(state, pyr.arrays, grads.pyramid, cfg.learning_rate(step))
        if callback is not None:
            callback(step, losses[-1])
    return FitResult(pyr, losses, state.skipped)
