"""Guidance providers, score distillation and multi-view refinement.

A provider wraps a (possibly remote) diffusion model.  The optimisation loops
here only need three things from it: an image encoder with an adjoint, a
noise predictor ``eps_hat(z_t; y, t)`` and a denoiser.

The forward noising process is variance preserving with a cosine schedule,
``z_t = alpha(t) z_0 + sigma(t) eps`` with ``alpha = cos(pi t / 2)`` and
``sigma = sin(pi t / 2)``.  Noise for a step is always drawn with
:func:`sample_noise` from an integer seed that travels with the request, so
a remote service can reproduce it.
"""
from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .camera import CameraPose, protocol_21_views, sample_band_camera
from .grid import InvalidInput, PyramidTriGrid
from .optim import OptimizerState, adam_step, pyramid_multipliers
from .render import Renderer, render_backward

log = logging.getLogger(__name__)


class GuidanceError(RuntimeError):
    """A provider call failed; the caller may retry it."""


class RefineError(RuntimeError):
    pass


def sample_noise(seed: int, shape) -> np.ndarray:
    """Standard normal float32 noise, reproducible from ``seed`` alone."""
    return np.random.default_rng(int(seed)).standard_normal(tuple(shape), dtype=np.float32)


def alpha_sigma(t: float) -> tuple:
    return math.cos(0.5 * math.pi * t), math.sin(0.5 * math.pi * t)


def add_noise(z0, t, eps):
    a, s = alpha_sigma(t)
    return a * z0 + s * eps


# -- weighting schedules --------------------------------------------------------

def constant_weight(t: float) -> float:
    return 1.0


def zero_weight(t: float) -> float:
    return 0.0


def snr_weight(t: float) -> float:
    """``sigma^2`` weighting; small at low noise, 1 at pure noise."""
    return alpha_sigma(t)[1] ** 2


WEIGHTINGS = {"constant": constant_weight, "zero": zero_weight, "snr": snr_weight}


# -- encoders -------------------------------------------------------------------

class IdentityEncoder:
    """Pixel-space guidance: ``z_0 = x``."""

    def encode(self, x):
        return np.asarray(x)

    def adjoint(self, x, g_z):
        return np.asarray(g_z)


@dataclass
class AvgPoolEncoder:
    """Linear ``factor x factor`` average-pool encoder, a stand-in latent space."""

    factor: int = 2

    def encode(self, x):
        x = np.asarray(x)
        h, w, c = x.shape
        f = self.factor
        if h % f or w % f:
            raise InvalidInput(f"image size {h}x{w} not divisible by pooling factor {f}")
        return x.reshape(h // f, f, w // f, f, c).mean(axis=(1, 3))

    def adjoint(self, x, g_z):
        f = self.factor
        g = np.asarray(g_z) / (f * f)
        return g.repeat(f, axis=0).repeat(f, axis=1)


@dataclass
class Conditioning:
    """What the provider is conditioned on for one call.

    ``seed`` is the noise seed of the request; ``camera`` lets view-aware
    providers (and test oracles) know which pose was rendered.
    """

    prompt: str = ""
    seed: int = 0
    camera: CameraPose | None = None


class GuidanceProvider(ABC):
    """Abstract score / denoise service."""

    encoder = IdentityEncoder()

    def encode(self, x):
        return self.encoder.encode(x)

    def encode_adjoint(self, x, g_z):
        return self.encoder.adjoint(x, g_z)

    @abstractmethod
    def predict_noise(self, z_t, t: float, cond: Conditioning) -> np.ndarray:
        ...

    def denoise(self, image, noise_level: float, cond: Conditioning) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} does not denoise")

    def sample_image(self, shape, cond: Conditioning) -> np.ndarray:
        """Draw an image by denoising pure noise."""
        noise = sample_noise(cond.seed, shape)
        return np.clip(self.denoise(noise, 1.0, cond), 0.0, 1.0)


class PointMassOracle(GuidanceProvider):
    """Exact denoiser for a data distribution concentrated on one image per view.

    ``target`` is an image, or a callable ``cond -> image`` for view-dependent
    targets.  The optimal noise prediction is
    ``eps_hat = (z_t - alpha z_tgt) / sigma = eps + (alpha / sigma)(z_0 - z_tgt)``,
    so SDS with this oracle is L2 descent toward the target with pull
    ``lambda(t) = alpha(t) / sigma(t)``.
    """

    def __init__(self, target, encoder=None):
        self.target = target
        if encoder is not None:
            self.encoder = encoder

    def target_image(self, cond: Conditioning):
        img = self.target(cond) if callable(self.target) else self.target
        return np.asarray(img)

    @staticmethod
    def pull(t: float) -> float:
        a, s = alpha_sigma(t)
        return a / s

    def predict_noise(self, z_t, t, cond):
        a, s = alpha_sigma(t)
        if s <= 0:
            raise InvalidInput("timestep 0 has no noise to predict")
        z_tgt = self.encode(self.target_image(cond)).astype(z_t.dtype)
        return (z_t - a * z_tgt) / s

    def denoise(self, image, noise_level, cond):
        return self.target_image(cond).astype(np.asarray(image).dtype)


class IdentityDenoiser(GuidanceProvider):
    """Returns its input; predicts zero noise."""

    def predict_noise(self, z_t, t, cond):
        return np.zeros_like(z_t)

    def denoise(self, image, noise_level, cond):
        return np.array(image, copy=True)


class EchoNoiseProvider(GuidanceProvider):
    """Predicts exactly the noise the request was built with (zero SDS residual)."""

    def predict_noise(self, z_t, t, cond):
        return sample_noise(cond.seed, np.shape(z_t)).astype(np.asarray(z_t).dtype)

    def denoise(self, image, noise_level, cond):
        return np.array(image, copy=True)


# -- score distillation ---------------------------------------------------------

@dataclass
class SDSConfig:
    t_min: float = 0.02
    t_max: float = 0.98
    weighting: str = "constant"
    steps: int = 2000
    lr: float = 1e-2
    lr_final: float | None = 1e-3
    prompt: str = ""
    seed: int = 0
    lr_gamma: float = 0.5
    max_retries: int = 3

    def __post_init__(self):
        if not 0.0 <= self.t_min < self.t_max <= 1.0:
            raise InvalidInput("need 0 <= t_min < t_max <= 1")
        if self.weighting not in WEIGHTINGS:
            raise InvalidInput(f"unknown weighting {self.weighting!r}; "
                               f"choose from {sorted(WEIGHTINGS)}")
        if self.steps < 0 or self.lr <= 0 or self.max_retries < 0:
            raise InvalidInput("steps and max_retries must be >= 0, lr > 0")
        if self.lr_final is not None and self.lr_final <= 0:
            raise InvalidInput("lr_final must be positive")

    def learning_rate(self, step_index: int) -> float:
        """Exponential decay from ``lr`` to ``lr_final`` over ``steps``; constant if unset."""
        if self.lr_final is None or self.steps <= 1:
            return self.lr
        frac = min(step_index / (self.steps - 1), 1.0)
        return self.lr * (self.lr_final / self.lr) ** frac

    def omega(self, t: float) -> float:
        return WEIGHTINGS[self.weighting](t)


@dataclass
class SDSDraw:
    """Random choices of one SDS step, a pure function of (seed, step)."""

    camera: CameraPose
    t: float
    noise_seed: int
    jitter_seed: int


def sds_draw(cfg: SDSConfig, step_index: int, base: CameraPose) -> SDSDraw:
    rng = np.random.default_rng([cfg.seed, step_index])
    cam = sample_band_camera(base, rng)
    t = float(rng.uniform(cfg.t_min, cfg.t_max))
    if t <= 0.0:
        t = cfg.t_max if cfg.t_max > 0 else 1.0
    noise_seed, jitter_seed = (int(v) for v in rng.integers(0, 2 ** 63 - 1, size=2))
    return SDSDraw(cam, t, noise_seed, jitter_seed)


@dataclass
class SDSDiagnostics:
    step: int
    t: float
    weight: float
    camera: CameraPose
    residual_rms: float
    grad_norm: float
    skipped: bool
    retries: int


def sds_pixel_gradient(provider: GuidanceProvider, x, draw: SDSDraw, cfg: SDSConfig):
    """``omega(t) (eps_hat - eps)`` pulled back to pixels through the encoder adjoint."""
    z0 = provider.encode(x)
    eps = sample_noise(draw.noise_seed, z0.shape).astype(z0.dtype)
    z_t = add_noise(z0, draw.t, eps)
    cond = Conditioning(cfg.prompt, draw.noise_seed, draw.camera)
    eps_hat = np.asarray(provider.predict_noise(z_t, draw.t, cond))
    if eps_hat.shape != z0.shape:
        raise GuidanceError(f"provider returned noise of shape {eps_hat.shape}, expected {z0.shape}")
    resid = eps_hat.astype(z0.dtype) - eps
    g_x = provider.encode_adjoint(x, cfg.omega(draw.t) * resid)
    return g_x, resid


def sds_step(pyr: PyramidTriGrid, w, renderer: Renderer, provider: GuidanceProvider,
             cfg: SDSConfig, step_index: int, state: OptimizerState,
             base: CameraPose = CameraPose()):
    """One score-distillation update of the grid values, in place.

    Provider failures are retried ``cfg.max_retries`` times before the
    :class:`GuidanceError` propagates; the parameters are untouched until a
    gradient is in hand.  Non-finite gradients are skipped by the optimizer.
    """
    draw = sds_draw(cfg, step_index, base)
    out = renderer.render(pyr, draw.camera, w, seed=draw.jitter_seed, record=True)
    retries = 0
    while True:
        try:
            g_x, resid = sds_pixel_gradient(provider, out.rgb, draw, cfg)
            break
        except GuidanceError as exc:
            if retries >= cfg.max_retries:
                raise
            retries += 1
            log.warning("provider failed on SDS step %d (%s); retry %d", step_index, exc, retries)
    grads = render_backward(out.tape, g_x)
    skipped_before = state.skipped
    adam_step(state, pyr.arrays, grads.pyramid, cfg.learning_rate(step_index))
    gnorm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64)))
                              for g in grads.pyramid)))
    diag = SDSDiagnostics(step_index, draw.t, cfg.omega(draw.t), draw.camera,
                          float(np.sqrt(np.mean(np.square(resid, dtype=np.float64)))),
                          gnorm, state.skipped > skipped_before, retries)
    return pyr, diag


def run_sds(pyr: PyramidTriGrid, w, renderer: Renderer, provider: GuidanceProvider,
            cfg: SDSConfig, base: CameraPose = CameraPose(), state=None, start_step=0,
            callback=None):
    """Run ``cfg.steps`` SDS steps starting at ``start_step``; returns (pyr, state, diagnostics)."""
    if state is None:
        state = OptimizerState.for_params(pyr.arrays, pyramid_multipliers(pyr, cfg.lr_gamma))
    history = []
    for k in range(start_step, start_step + cfg.steps):
        pyr, diag = sds_step(pyr, w, renderer, provider, cfg, k, state, base)
        history.append(diag)
        if callback is not None:
            callback(diag)
    return pyr, state, history


# -- multi-view refinement ------------------------------------------------------

@dataclass
class RefineConfig:
    noise_level: float = 0.4
    views: list | None = None
    steps: int = 200
    lr: float = 1e-2
    seed: int = 0
    prompt: str = ""
    min_views: int = 8
    lr_gamma: float = 0.5
    workers: int = 1
    # a trial step that does not lower the loss is undone and retried at half the rate
    max_backtracks: int = 8

    def __post_init__(self):
        if self.max_backtracks < 0:
            raise InvalidInput("max_backtracks must be >= 0")
        if not 0.0 <= self.noise_level < 1.0:
            raise InvalidInput("noise_level must lie in [0, 1)")
        if self.steps < 0 or self.lr <= 0:
            raise InvalidInput("steps must be >= 0 and lr > 0")


@dataclass
class RefineResult:
    pyr: PyramidTriGrid
    views: list
    targets: list
    excluded: list
    losses: list               # total loss before each step, plus the final one
    initial_view_losses: np.ndarray
    final_view_losses: np.ndarray
    rejected: int = 0          # trial steps undone because the loss did not drop
    final_scale: float = 1.0   # step scale left after backtracking

    @property
    def mean_losses(self):
        return [l / len(self.views) for l in self.losses]


def view_losses(pyr, w, renderer: Renderer, views, targets, with_grad=False):
    """Per-view ``mean((R(pyr, c, w) - x_c)^2)``; with ``with_grad`` also the grid gradient of their sum."""
    losses = np.zeros(len(views))
    total = [np.zeros(a.shape, renderer.dtype) for a in pyr.arrays] if with_grad else None
    for i, (cam, tgt) in enumerate(zip(views, targets)):
        out = renderer.render(pyr, cam, w, seed=None, record=with_grad)
        diff = out.rgb - np.asarray(tgt, renderer.dtype)
        losses[i] = float(np.mean(np.square(diff, dtype=np.float64)))
        if with_grad:
            g = render_backward(out.tape, (2.0 / diff.size) * diff)
            for acc, gl in zip(total, g.pyramid):
                acc += gl
    return (losses, total) if with_grad else losses


def refine_targets(pyr, w, renderer: Renderer, provider: GuidanceProvider, cfg: RefineConfig,
                   views):
    """Render, noise and denoise every view; returns (kept views, targets, excluded indices)."""

    def one(i):
        cam = views[i]
        x = renderer.render(pyr, cam, w, seed=None).rgb
        seed = int(np.random.default_rng([cfg.seed, i]).integers(0, 2 ** 63 - 1))
        noisy = x + x.dtype.type(cfg.noise_level) * sample_noise(seed, x.shape).astype(x.dtype)
        try:
            y = np.asarray(provider.denoise(noisy, cfg.noise_level, Conditioning(cfg.prompt, seed, cam)))
        except GuidanceError as exc:
            log.warning("view %d excluded: provider failed (%s)", i, exc)
            return None
        if y.shape != x.shape or not np.isfinite(y).all():
            log.warning("view %d excluded: denoiser returned shape %s or non-finite values", i, y.shape)
            return None
        return y

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            outs = list(ex.map(one, range(len(views))))
    else:
        outs = [one(i) for i in range(len(views))]
    kept = [i for i, y in enumerate(outs) if y is not None]
    excluded = [i for i, y in enumerate(outs) if y is None]
    return [views[i] for i in kept], [outs[i] for i in kept], excluded


def refine(pyr: PyramidTriGrid, w, renderer: Renderer, provider: GuidanceProvider,
           cfg: RefineConfig = RefineConfig(), base: CameraPose = CameraPose()) -> RefineResult:
    """Denoise the protocol views once, then fit the grid to them by full-batch L2.

    The denoised targets are fixed for the whole fit.  Fewer than
    ``cfg.min_views`` usable views aborts with :class:`RefineError`.
    """
    views = list(cfg.views) if cfg.views is not None else protocol_21_views(base, cfg.seed)
    views, targets, excluded = refine_targets(pyr, w, renderer, provider, cfg, views)
    if len(views) < cfg.min_views:
        raise RefineError(f"only {len(views)} usable views, need at least {cfg.min_views}")
    state = OptimizerState.for_params(pyr.arrays, pyramid_multipliers(pyr, cfg.lr_gamma))
    per_view, grads = view_losses(pyr, w, renderer, views, targets, with_grad=True)
    first = per_view
    losses = [float(per_view.sum())]
    scale, rejected = 1.0, 0
    for _ in range(cfg.steps):
        if losses[-1] == 0.0:          # already at the targets, nothing to descend
            losses.append(0.0)
            continue
        saved = _snapshot(pyr.arrays, state)
        for _ in range(cfg.max_backtracks + 1):
            adam_step(state, pyr.arrays, grads, cfg.lr * scale)
            trial, trial_grads = view_losses(pyr, w, renderer, views, targets, with_grad=True)
            if trial.sum() < per_view.sum() or cfg.max_backtracks == 0:
                per_view, grads = trial, trial_grads
                break
            # stale momentum can point uphill: undo, restart the moments, halve the rate
            _restore(saved, pyr.arrays, state)
            _reset_moments(state)
            saved = _snapshot(pyr.arrays, state)
            scale *= 0.5
            rejected += 1
        else:
            scale *= 2.0 ** cfg.max_backtracks
            log.warning("refine: no decrease after %d backtracks, keeping parameters", cfg.max_backtracks)
        losses.append(float(per_view.sum()))
    return RefineResult(pyr, views, targets, excluded, losses, first, per_view, rejected, scale)


def _snapshot(params, state):
    return ([p.copy() for p in params], [m.copy() for m in state.m], [v.copy() for v in state.v],
            state.step, state.skipped)


def _reset_moments(state):
    for a in state.m + state.v:
        a.fill(0)
    state.step = 0


def _restore(saved, params, state):
    ps, ms, vs, state.step, state.skipped = saved
    for dst, src in zip(params, ps):
        np.copyto(dst, src)
    for dst, src in zip(state.m, ms):
        np.copyto(dst, src)
    for dst, src in zip(state.v, vs):
        np.copyto(dst, src)
