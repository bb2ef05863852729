"""Neural renderer: ray marching over a pyramid tri-grid, feature compositing, ToRGB.

``render(pyr, camera, w)`` produces an RGB image by

1. generating pinhole rays for the camera,
2. taking stratified samples along every ray and querying the pyramid,
3. decoding each summed feature into a density and colour features,
4. emission-absorption compositing into a feature image and an opacity map,
5. a latent-modulated linear ToRGB map plus a constant background.

When asked to, the forward pass records a :class:`RenderTape` from which
:func:`render_backward` computes exact gradients with respect to the grid
values and the latent code.  Decoder and ToRGB weights are treated as frozen.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .camera import CameraPose, RayBatch, camera_rays
from .grid import (InvalidInput, PyramidTriGrid, feature_table, interpolation_matrix,
                   table_to_values)

LOG2 = math.log(2.0)


class NumericalError(FloatingPointError):
    """Non-finite values appeared during rendering."""

    def __init__(self, message, ray_index=None):
        super().__init__(message)
        self.ray_index = ray_index


def softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


@dataclass
class Decoder:
    """Two affine layers: features -> hidden (shifted softplus) -> density + colour.

    Density is ``softplus`` of the first output; colour features are the
    ``sigmoid`` of the remaining outputs.  The hidden activation is
    ``softplus(x) - log 2`` so that a zero feature maps to a zero hidden state.
    """

    w1: np.ndarray   # (C, H)
    b1: np.ndarray   # (H,)
    w2: np.ndarray   # (H, 1 + K)
    b2: np.ndarray   # (1 + K,)

    @classmethod
    def init(cls, channels=12, hidden=64, color_features=8, rng=None,
             density_bias=-1.0, density_gain=4.0):
        rng = np.random.default_rng(rng)
        w1 = rng.standard_normal((channels, hidden)) / math.sqrt(channels)
        w2 = rng.standard_normal((hidden, 1 + color_features)) / math.sqrt(hidden)
        w2[:, 0] *= density_gain
        b2 = np.zeros(1 + color_features)
        b2[0] = density_bias
        return cls(w1.astype(np.float32), np.zeros(hidden, np.float32),
                   w2.astype(np.float32), b2.astype(np.float32))

    @property
    def channels(self) -> int:
        return self.w1.shape[0]

    @property
    def color_features(self) -> int:
        return self.w2.shape[1] - 1

    def params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def forward(self, feats):
        dt = feats.dtype
        hp = feats @ self.w1.astype(dt) + self.b1.astype(dt)
        h = softplus(hp) - dt.type(LOG2)
        out = h @ self.w2.astype(dt) + self.b2.astype(dt)
        sigma = softplus(out[:, 0])
        color = expit(out[:, 1:])
        return sigma, color, (hp, out, color)

    def backward(self, cache, g_sigma, g_color):
        hp, out, color = cache
        dt = hp.dtype
        g_out = np.empty_like(out)
        g_out[:, 0] = g_sigma * expit(out[:, 0])
        g_out[:, 1:] = g_color * color * (1.0 - color)
        g_h = g_out @ self.w2.astype(dt).T
        g_hp = g_h * expit(hp)
        return g_hp @ self.w1.astype(dt).T


@dataclass
class ToRGB:
    """Latent-modulated linear map from colour features to RGB.

    ``scales = w @ affine + affine_bias``; ``rgb = (feature * scales) @ linear``.
    """

    affine: np.ndarray        # (d, K)
    affine_bias: np.ndarray   # (K,)
    linear: np.ndarray        # (K, 3)

    @classmethod
    def init(cls, latent_dim=8, color_features=8, rng=None, affine_scale=0.1, jitter=0.1):
        # Colour feature j feeds mostly RGB channel j % 3, so that features in
        # (0, 1) can reach the whole RGB cube.
        rng = np.random.default_rng(rng)
        k = color_features
        lin = np.zeros((k, 3))
        groups = np.arange(k) % 3
        counts = np.bincount(groups, minlength=3)
        lin[np.arange(k), groups] = 1.0 / counts[groups]
        lin += jitter * rng.standard_normal((k, 3)) / k
        affine = affine_scale * rng.standard_normal((latent_dim, k)) / math.sqrt(latent_dim)
        return cls(affine.astype(np.float32), np.ones(k, np.float32), lin.astype(np.float32))

    @property
    def latent_dim(self) -> int:
        return self.affine.shape[0]

    def params(self) -> dict:
        return {"affine": self.affine, "affine_bias": self.affine_bias, "linear": self.linear}

    def scales(self, w, dtype=np.float64):
        return np.asarray(w, dtype) @ self.affine.astype(dtype) + self.affine_bias.astype(dtype)


def to_rgb(feature, weight_sum, w, params: ToRGB, background=(1.0, 1.0, 1.0),
           return_parts=False):
    """Modulate and map a feature image to RGB over a constant background.

    Works on ``(..., K)`` feature arrays with matching ``(...)`` opacity.
    With ``return_parts`` also returns the un-clamped foreground term and
    the pre-clamp RGB.
    """
    feature = np.asarray(feature)
    dt = feature.dtype if feature.dtype in (np.float32, np.float64) else np.float64
    if feature.shape[-1] != params.linear.shape[0]:
        raise InvalidInput(f"feature image has {feature.shape[-1]} channels, ToRGB expects "
                           f"{params.linear.shape[0]}")
    if np.shape(weight_sum) != feature.shape[:-1]:
        raise InvalidInput("weight_sum shape does not match the feature image")
    if np.shape(w) != (params.latent_dim,):
        raise InvalidInput(f"latent code must have shape ({params.latent_dim},)")
    s = params.scales(w, dt)
    fg = (feature * s) @ params.linear.astype(dt)
    bg = np.asarray(background, dt)
    pre = fg + (1.0 - np.asarray(weight_sum, dt))[..., None] * bg
    rgb = np.clip(pre, 0.0, 1.0)
    if return_parts:
        return rgb, fg, pre
    return rgb


def composite(sigma, color, delta):
    """Emission-absorption compositing of ``(N, S)`` densities and ``(N, S, K)`` colours.

    ``delta`` is the per-ray sample spacing ``(N,)``.  Returns the feature
    ``(N, K)``, opacity ``(N,)`` and the per-sample weights, alphas and
    transmittances.
    """
    tau = sigma * delta[:, None]
    alpha = -np.expm1(-tau)
    csum = np.cumsum(tau, axis=1)
    trans = np.exp(-(csum - tau))
    weights = trans * alpha
    feature = np.einsum("ns,nsk->nk", weights, color)
    weight_sum = -np.expm1(-csum[:, -1])
    return feature, weight_sum, weights, alpha, trans


def composite_backward(g_feature, g_weight_sum, color, delta, weights, alpha, trans):
    """Adjoint of :func:`composite` with respect to density and colour."""
    e = np.einsum("nk,nsk->ns", g_feature, color)
    g_color = weights[..., None] * g_feature[:, None, :]
    ew = e * weights
    after = np.cumsum(ew[:, ::-1], axis=1)[:, ::-1] - ew
    t_final = trans[:, -1] * (1.0 - alpha[:, -1])
    g_tau = e * trans * (1.0 - alpha) - after + (g_weight_sum * t_final)[:, None]
    return g_tau * delta[:, None], g_color


@dataclass
class ChunkTape:
    rays: slice
    mats: list
    delta: np.ndarray
    sigma: np.ndarray
    color: np.ndarray
    weights: np.ndarray
    alpha: np.ndarray
    trans: np.ndarray
    decoder_cache: tuple


@dataclass
class RenderTape:
    """Record of one forward render, sufficient to replay it and run its adjoint."""

    renderer: "Renderer"
    pyr: PyramidTriGrid
    w: np.ndarray
    rays: RayBatch
    seed: object
    chunks: list
    feature: np.ndarray
    weight_sum: np.ndarray
    pre_rgb: np.ndarray
    rgb: np.ndarray
    image_shape: tuple | None = None

    def replay(self) -> np.ndarray:
        """Re-run the forward pass from the recorded inputs; returns RGB."""
        out = self.renderer.render_rays(self.pyr, self.rays, self.w, seed=self.seed)
        return out.rgb if self.image_shape is None else out.rgb.reshape(self.image_shape)


@dataclass
class RenderedImage:
    rgb: np.ndarray
    feature: np.ndarray
    weight_sum: np.ndarray
    tape: RenderTape | None = None


@dataclass
class RenderGrads:
    pyramid: list          # one array per level, shaped like the level values
    latent: np.ndarray


@dataclass
class Renderer:
    """Frozen decoder + ToRGB with the ray-marching configuration.

    ``workers > 1`` renders ray chunks on a thread pool; with
    ``deterministic=True`` chunk gradients are summed in chunk order, which
    makes results bit-identical to the single-threaded path.
    """

    decoder: Decoder
    torgb: ToRGB
    samples_per_ray: int = 96
    background: tuple = (1.0, 1.0, 1.0)
    near_far_margin: float = 1.3
    dtype: type = np.float32
    chunk: int = 8192
    workers: int = 1
    deterministic: bool = True
    jitter: bool = True

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise InvalidInput("samples_per_ray must be >= 2")

    @classmethod
    def init(cls, channels=12, latent_dim=8, hidden=64, color_features=8, rng=None, **kw):
        rng = np.random.default_rng(rng)
        return cls(Decoder.init(channels, hidden, color_features, rng),
                   ToRGB.init(latent_dim, color_features, rng), **kw)

    # -- sampling ---------------------------------------------------------
    def sample_offsets(self, n_rays, seed):
        """Stratified offsets in [0, 1) per bin; mid-bin when jitter is off or seed is None."""
        s = self.samples_per_ray
        if not self.jitter or seed is None:
            return np.full((n_rays, s), 0.5)
        return np.random.default_rng(seed).random((n_rays, s))

    def sample_points(self, rays: RayBatch, offsets):
        s = self.samples_per_ray
        span = rays.far - rays.near
        t = rays.near[:, None] + (np.arange(s)[None, :] + offsets) * (span / s)[:, None]
        pts = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
        return pts, span / s

    # -- forward ----------------------------------------------------------
    def _forward_chunk(self, tables, pyr, rays, offsets, sl, record):
        dt = self.dtype
        sub = rays.subset(sl)
        pts, delta = self.sample_points(sub, offsets[sl])
        n, s = pts.shape[:2]
        flat = pts.reshape(-1, 3)
        feats = None
        mats = []
        for lv, table in zip(pyr.levels, tables):
            q = interpolation_matrix(flat, lv.resolution, lv.depth_layers, dt)
            f = q @ table
            feats = f if feats is None else feats + f
            if record:
                mats.append(q)
        sigma, color, dcache = self.decoder.forward(np.asarray(feats, dt))
        bad = ~(np.isfinite(sigma) & np.isfinite(color).all(axis=1))
        if bad.any():
            ray = sl.start + int(np.flatnonzero(bad)[0]) // s
            raise NumericalError(f"non-finite decoder output on ray {ray}", ray)
        sigma = sigma.reshape(n, s)
        color = color.reshape(n, s, -1)
        delta = delta.astype(dt)
        feature, wsum, weights, alpha, trans = composite(sigma, color, delta)
        tape = None
        if record:
            tape = ChunkTape(sl, mats, delta, sigma, color, weights, alpha, trans, dcache)
        return sl, feature, wsum, tape

    def _chunks(self, n):
        return [slice(i, min(i + self.chunk, n)) for i in range(0, n, self.chunk)]

    def march_and_composite(self, pyr: PyramidTriGrid, rays: RayBatch, seed=None, record=False):
        """Feature image ``(N, K)`` and opacity ``(N,)`` for a ray batch."""
        if pyr.channels != self.decoder.channels:
            raise InvalidInput(f"pyramid has {pyr.channels} channels, decoder expects "
                               f"{self.decoder.channels}")
        n = len(rays)
        offsets = self.sample_offsets(n, seed)
        tables = [feature_table(lv, self.dtype) for lv in pyr.levels]
        k = self.decoder.color_features
        feature = np.empty((n, k), self.dtype)
        wsum = np.empty(n, self.dtype)
        tapes = []
        chunks = self._chunks(n)
        if self.workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(self.workers) as ex:
                results = list(ex.map(
                    lambda sl: self._forward_chunk(tables, pyr, rays, offsets, sl, record), chunks))
        else:
            results = [self._forward_chunk(tables, pyr, rays, offsets, sl, record) for sl in chunks]
        for sl, f, ws, tp in results:
            feature[sl] = f
            wsum[sl] = ws
            if record:
                tapes.append(tp)
        return feature, wsum, tapes

    def render_rays(self, pyr: PyramidTriGrid, rays: RayBatch, w, seed=None,
                    record=False) -> RenderedImage:
        """Render a flat ray batch; arrays are ``(N, ...)``."""
        w = np.asarray(w, dtype=self.dtype)
        feature, wsum, tapes = self.march_and_composite(pyr, rays, seed, record)
        rgb, _, pre = to_rgb(feature, wsum, w, self.torgb, self.background, return_parts=True)
        rgb = rgb.astype(self.dtype, copy=False)
        tape = None
        if record:
            tape = RenderTape(self, pyr, w, rays, seed, tapes, feature, wsum, pre, rgb)
        return RenderedImage(rgb, feature, wsum, tape)

    def render(self, pyr: PyramidTriGrid, cam: CameraPose, w, seed=None,
               record=False) -> RenderedImage:
        """``R(pyr, cam, w)``; images are ``(H, W, 3)`` / ``(H, W, K)`` / ``(H, W)``."""
        rays = camera_rays(cam, self.near_far_margin)
        out = self.render_rays(pyr, rays, w, seed, record)
        n = int(cam.image_size)
        img = RenderedImage(out.rgb.reshape(n, n, 3), out.feature.reshape(n, n, -1),
                            out.weight_sum.reshape(n, n), out.tape)
        if out.tape is not None:
            out.tape.image_shape = (n, n, 3)
        return img


def _chunk_backward(ct: ChunkTape, decoder: Decoder, g_feature, g_wsum, shapes, dt):
    g_sigma, g_color = composite_backward(g_feature, g_wsum, ct.color, ct.delta,
                                          ct.weights, ct.alpha, ct.trans)
    g_feats = decoder.backward(ct.decoder_cache, g_sigma.reshape(-1),
                               g_color.reshape(-1, g_color.shape[-1]))
    return [np.asarray(q.T @ g_feats.astype(dt, copy=False)) for q in ct.mats]


def render_backward(tape: RenderTape, grad_rgb, grad_weight_sum=None) -> RenderGrads:
    """Exact adjoint of the recorded render.

    ``grad_rgb`` is dL/d(rgb) with the image shape of the forward output.
    Returns gradients for every pyramid level and for the latent code; decoder
    and ToRGB weights are frozen and receive nothing.
    """
    r = tape.renderer
    dt = r.dtype
    g = np.asarray(grad_rgb, dtype=dt)
    if g.size != tape.rgb.size:
        raise InvalidInput(f"upstream gradient has {g.size} entries, render has {tape.rgb.size}")
    g = g.reshape(-1, 3)
    feature, wsum, pre = tape.feature, tape.weight_sum, tape.pre_rgb
    tr = r.torgb
    s = tr.scales(tape.w, dt)
    g_pre = g * ((pre >= 0.0) & (pre <= 1.0))
    g_fm = g_pre @ tr.linear.astype(dt).T
    g_feature = g_fm * s
    g_latent = tr.affine.astype(dt) @ (g_fm * feature).sum(axis=0)
    g_wsum = -(g_pre @ np.asarray(r.background, dt))
    if grad_weight_sum is not None:
        g_wsum = g_wsum + np.asarray(grad_weight_sum, dt).reshape(-1)

    shapes = [lv.shape for lv in tape.pyr.levels]
    tables = [np.zeros((3 * sh[1] * sh[3] * sh[4], sh[2]), dt) for sh in shapes]

    def job(ct):
        sl = ct.rays
        return _chunk_backward(ct, r.decoder, g_feature[sl], g_wsum[sl], shapes, dt)

    if r.workers > 1 and len(tape.chunks) > 1:
        with ThreadPoolExecutor(r.workers) as ex:
            if r.deterministic:
                parts = list(ex.map(job, tape.chunks))
            else:
                parts = [f.result() for f in as_completed([ex.submit(job, c) for c in tape.chunks])]
    else:
        parts = [job(ct) for ct in tape.chunks]
    for part in parts:
        for acc, p in zip(tables, part):
            acc += p
    grads = [table_to_values(t, sh) for t, sh in zip(tables, shapes)]
    return RenderGrads(grads, g_latent)
