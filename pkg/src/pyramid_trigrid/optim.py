"""First-order optimisation over grid parameters and the finite-difference checker."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraPose
from .grid import InvalidInput, PyramidTriGrid
from .render import Renderer, render_backward

log = logging.getLogger(__name__)


def level_lr_multiplier(resolution: int, gamma: float = 0.5, base_resolution: int = 8) -> float:
    """Learning-rate multiplier ``(base_resolution / resolution) ** gamma``.

    Finer levels move more slowly; ``gamma = 0`` disables the policy.
    """
    return (base_resolution / resolution) ** gamma


def pyramid_multipliers(pyr: PyramidTriGrid, gamma: float = 0.5) -> list:
    return [level_lr_multiplier(r, gamma) for r in pyr.resolutions]


@dataclass
class OptimizerState:
    """Adam moments for a list of parameter arrays."""

    multipliers: list
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    skipped: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, multipliers=None, **kw):
        mult = list(multipliers) if multipliers is not None else [1.0] * len(params)
        if len(mult) != len(params):
            raise InvalidInput("need one learning-rate multiplier per parameter array")
        return cls(mult, m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **kw)


def adam_step(state: OptimizerState, params: list, grads: list, base_lr: float) -> list:
    """One Adam update, in place on ``params`` (also returned).

    The effective rate of parameter array ``i`` is ``base_lr * multipliers[i]``.
    A step with any non-finite gradient is skipped and counted in
    ``state.skipped``.
    """
    if base_lr <= 0:
        raise InvalidInput("base_lr must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InvalidInput("params, grads and optimizer state must have equal length")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise InvalidInput(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
    if not all(np.isfinite(g).all() for g in grads):
        state.skipped += 1
        log.warning("skipping optimizer step with non-finite gradient (%d skipped so far)",
                    state.skipped)
        return params
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v, mult in zip(params, grads, state.m, state.v, state.multipliers):
        dt = p.dtype
        g = np.asarray(g, dtype=dt)
        m *= dt.type(b1)
        m += dt.type(1.0 - b1) * g
        v *= dt.type(b2)
        v += dt.type(1.0 - b2) * g * g
        lr = base_lr * mult
        p -= (dt.type(lr / c1) * m) / (np.sqrt(v / dt.type(c2)) + dt.type(state.eps))
    return params


# -- finite-difference checking ----------------------------------------------

@dataclass
class GradcheckScene:
    renderer: Renderer
    pyr: PyramidTriGrid
    w: np.ndarray
    camera: CameraPose
    upstream: np.ndarray
    seed: int = 0


def make_gradcheck_scene(seed=0, resolutions=(2, 4), image_size=4, samples_per_ray=8,
                         channels=4, latent_dim=8, hidden=16, color_features=5,
                         zero_density=False) -> GradcheckScene:
    """Small float64 scene with a random upstream gradient for adjoint checks."""
    rng = np.random.default_rng(seed)
    r = Renderer.init(channels=channels, latent_dim=latent_dim, hidden=hidden,
                      color_features=color_features, rng=rng,
                      samples_per_ray=samples_per_ray, dtype=np.float64)
    if zero_density:
        r.decoder.w2[:, 0] = 0.0
        r.decoder.b2[0] = -60.0
    pyr = PyramidTriGrid.random(resolutions, channels, scale=0.5, rng=rng, dtype=np.float64)
    w = 0.5 * rng.standard_normal(latent_dim)
    cam = CameraPose(azimuth=float(rng.uniform(0, 360)), polar=float(rng.uniform(60, 120)),
                     image_size=image_size)
    up = rng.standard_normal((image_size, image_size, 3))
    return GradcheckScene(r, pyr, w, cam, up, seed)


@dataclass
class GradcheckReport:
    max_rel_error: float
    location: tuple
    passed: bool
    threshold: float
    checked: int

    def describe(self) -> str:
        kind = self.location[0] if self.location else "-"
        where = ""
        if kind == "grid":
            where = f" at level {self.location[1]} index {self.location[2]}"
        elif kind == "latent":
            where = f" at latent[{self.location[1]}]"
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: max relative error {self.max_rel_error:.3e}{where} "
                f"({self.checked} entries, threshold {self.threshold:g})")


def relative_error(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)


def gradcheck(scene: GradcheckScene, seed=None, step=1e-3, threshold=1e-3, max_entries=None,
              backward=render_backward, floor_fraction=1e-4) -> GradcheckReport:
    """Compare :func:`render_backward` with central differences of ``<upstream, render>``.

    Every grid entry and latent component is perturbed unless ``max_entries``
    asks for a seeded random subset per level.  Errors are relative to
    ``max(|analytic|, |numeric|, floor_fraction * max|analytic|)`` so entries
    many orders below the gradient scale are judged against that scale.
    ``backward`` can be swapped for a deliberately wrong adjoint to exercise
    the harness.
    """
    r, pyr, w, cam, up = scene.renderer, scene.pyr, scene.w, scene.camera, scene.upstream
    jitter_seed = scene.seed if seed is None else seed
    pick = np.random.default_rng(jitter_seed)

    def objective(p, latent):
        return float(np.sum(r.render(p, cam, latent, seed=jitter_seed).rgb * up))

    out = r.render(pyr, cam, w, seed=jitter_seed, record=True)
    grads = backward(out.tape, up)
    scale = max([float(np.abs(g).max()) for g in grads.pyramid] + [float(np.abs(grads.latent).max())])
    floor = max(floor_fraction * scale, 1e-12)

    worst, where, count = 0.0, (), 0
    for li, lv in enumerate(pyr.levels):
        flat = lv.values.reshape(-1)
        ana = np.asarray(grads.pyramid[li]).reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(pick.choice(flat.size, max_entries, replace=False))
        for i in idx:
            old = flat[i]
            flat[i] = old + step
            fp = objective(pyr, w)
            flat[i] = old - step
            fm = objective(pyr, w)
            flat[i] = old
            err = float(relative_error(ana[i], (fp - fm) / (2 * step), floor))
            count += 1
            if err > worst:
                worst, where = err, ("grid", li, tuple(int(j) for j in np.unravel_index(i, lv.shape)))
    for j in range(w.size):
        wp, wm = w.copy(), w.copy()
        wp[j] += step
        wm[j] -= step
        err = float(relative_error(grads.latent[j],
                                   (objective(pyr, wp) - objective(pyr, wm)) / (2 * step), floor))
        count += 1
        if err > worst:
            worst, where = err, ("latent", j)
    return GradcheckReport(worst, where, worst <= threshold, threshold, count)
