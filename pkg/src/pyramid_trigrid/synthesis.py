"""Toy 3D-aware pyramid tri-grid generator and latent-code inversion.

The generator is a small modulated-convolution backbone with a 3D branch:

* 2D branch, layer ``l``: (upsample x2 unless first) -> modulated 3x3 conv
  -> leaky ReLU, then a modulated 1x1 output head giving ``F2D``.
* 3D branch, layer ``l``: ``concat(F2D, F3D_prev)`` -> upsample x2 -> 3x3
  conv giving ``F3D``.  The conv mixes channels of all three planes, which
  is what lets 3D-associated positions exchange features.
* ``F3D`` (``3 * depth * channels`` channels) is reshaped row-major into
  ``(3, depth, channels, r, r)``, one tri-grid per layer.

Modulation scales are ``w @ A + 1`` per input channel.  Network weights are
frozen; :meth:`SynthesisNetwork.backward` returns the gradient for ``w`` only.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraPose
from .grid import InvalidInput, PyramidTriGrid
from .optim import OptimizerState, adam_step
from .render import Renderer, render_backward

log = logging.getLogger(__name__)

LRELU_SLOPE = 0.2


def conv3x3(x, weight, bias):
    """Zero-padded 3x3 convolution of ``(Cin, H, W)`` with ``(Cout, Cin, 3, 3)`` weights."""
    cin, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    taps = np.ascontiguousarray(weight.transpose(2, 3, 0, 1))
    out = np.zeros((weight.shape[0], h * w), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            out += taps[dy, dx] @ xp[:, dy:dy + h, dx:dx + w].reshape(cin, -1)
    return out.reshape(-1, h, w) + bias[:, None, None]


def conv3x3_input_grad(g, weight):
    cout, h, w = g.shape
    gp = np.zeros((weight.shape[1], h + 2, w + 2), dtype=g.dtype)
    g2 = g.reshape(cout, -1)
    taps = np.ascontiguousarray(weight.transpose(2, 3, 1, 0))
    for dy in range(3):
        for dx in range(3):
            gp[:, dy:dy + h, dx:dx + w] += (taps[dy, dx] @ g2).reshape(-1, h, w)
    return gp[:, 1:-1, 1:-1]


def upsample2(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_grad(g):
    c, h, w = g.shape
    return g.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


def lrelu(x):
    return np.where(x >= 0, x, LRELU_SLOPE * x)


@dataclass
class SynthesisLayer:
    mod: np.ndarray        # (d, Cin)  2D conv modulation
    conv: np.ndarray       # (C2, Cin, 3, 3)
    conv_bias: np.ndarray  # (C2,)
    head_mod: np.ndarray   # (d, C2)
    head: np.ndarray       # (F2, C2)
    head_bias: np.ndarray  # (F2,)
    block: np.ndarray      # (F3, F2 + F3_prev, 3, 3)
    block_bias: np.ndarray  # (F3,)


@dataclass
class SynthesisNetwork:
    """Frozen toy generator ``G(w) -> PyramidTriGrid``."""

    const: np.ndarray
    layers: list
    resolutions: tuple
    channels: int
    depth_layers: int = 3
    latent_dim: int = field(init=False)

    def __post_init__(self):
        self.latent_dim = self.layers[0].mod.shape[0]
        f3 = 3 * self.depth_layers * self.channels
        if len(self.layers) != len(self.resolutions):
            raise InvalidInput("one synthesis layer per pyramid level is required")
        for i, (lay, r) in enumerate(zip(self.layers, self.resolutions)):
            if lay.block.shape[0] != f3:
                raise InvalidInput(f"layer {i}: 3D block emits {lay.block.shape[0]} channels, "
                                   f"tri-grid reshape needs {f3}")
            if i and r != 2 * self.resolutions[i - 1]:
                raise InvalidInput("level resolutions must ascend by factors of 2")
        if self.const.shape[1] * 2 != self.resolutions[0]:
            raise InvalidInput("constant input must be half the first level resolution")

    @classmethod
    def init(cls, resolutions=(8, 16, 32), channels=12, depth_layers=3, latent_dim=64,
             width=32, head_channels=16, rng=None, mod_scale=0.3):
        rng = np.random.default_rng(rng)
        r0 = resolutions[0]
        if r0 < 2 or r0 % 2:
            raise InvalidInput("first resolution must be even")
        f3 = 3 * depth_layers * channels
        const = rng.standard_normal((width, r0 // 2, r0 // 2))
        layers = []
        for i in range(len(resolutions)):
            cin3 = head_channels + (f3 if i else 0)
            layers.append(SynthesisLayer(
                mod=mod_scale * rng.standard_normal((latent_dim, width)) / math.sqrt(latent_dim),
                conv=rng.standard_normal((width, width, 3, 3)) * math.sqrt(2.0 / (9 * width)),
                conv_bias=np.zeros(width),
                head_mod=mod_scale * rng.standard_normal((latent_dim, width)) / math.sqrt(latent_dim),
                head=rng.standard_normal((head_channels, width)) / math.sqrt(width),
                head_bias=np.zeros(head_channels),
                block=rng.standard_normal((f3, cin3, 3, 3)) / math.sqrt(9 * cin3),
                block_bias=np.zeros(f3),
            ))
        return cls(const, layers, tuple(resolutions), channels, depth_layers)

    def zeroed(self) -> "SynthesisNetwork":
        """Same architecture with every weight and bias set to zero."""
        layers = [SynthesisLayer(*[np.zeros_like(a) for a in vars(l).values()]) for l in self.layers]
        return SynthesisNetwork(np.zeros_like(self.const), layers, self.resolutions,
                                self.channels, self.depth_layers)

    def params(self) -> dict:
        out = {"const": self.const}
        for i, lay in enumerate(self.layers):
            for k, v in vars(lay).items():
                out[f"layer{i}.{k}"] = v
        return out

    # -- forward / backward -----------------------------------------------
    def forward(self, w, dtype=np.float32):
        w = np.asarray(w, dtype=dtype)
        if w.shape != (self.latent_dim,):
            raise InvalidInput(f"latent code must have shape ({self.latent_dim},)")
        if not np.isfinite(w).all():
            raise InvalidInput("non-finite latent code")
        cast = lambda a: a.astype(dtype, copy=False)
        x = cast(self.const)
        f3d = None
        grids, cache = [], []
        for i, lay in enumerate(self.layers):
            x_in = x if i == 0 else upsample2(x)
            s = w @ cast(lay.mod) + 1
            y = conv3x3(x_in * s[:, None, None], cast(lay.conv), cast(lay.conv_bias))
            x = lrelu(y)
            sh = w @ cast(lay.head_mod) + 1
            c, h, wd = x.shape
            f2d = (np.ascontiguousarray(cast(lay.head)) @ (x * sh[:, None, None]).reshape(c, -1))
            f2d = f2d.reshape(-1, h, wd)
            f2d += cast(lay.head_bias)[:, None, None]
            inp = f2d if f3d is None else np.concatenate([f2d, f3d], axis=0)
            f3d = conv3x3(upsample2(inp), cast(lay.block), cast(lay.block_bias))
            r = self.resolutions[i]
            grids.append(f3d.reshape(3, self.depth_layers, self.channels, r, r))
            cache.append((x_in, s, y, x, sh, inp))
        return PyramidTriGrid.from_arrays(grids), (w, cache)

    def backward(self, state, pyramid_grads):
        """Gradient w.r.t. ``w`` given gradients of every emitted tri-grid."""
        w, cache = state
        dt = w.dtype
        cast = lambda a: a.astype(dt, copy=False)
        g_w = np.zeros_like(w)
        g_x_next = None      # dL/dx_l arriving from layer l+1's 2D input
        g_f3d_next = None    # dL/dF3D_l arriving from layer l+1's 3D input
        f2 = self.layers[0].head.shape[0]
        for i in reversed(range(len(self.layers))):
            lay = self.layers[i]
            x_in, s, y, x, sh, inp = cache[i]
            r = self.resolutions[i]
            g_f3d = np.asarray(pyramid_grads[i], dt).reshape(-1, r, r)
            if g_f3d_next is not None:
                g_f3d = g_f3d + g_f3d_next
            g_inp = upsample2_grad(conv3x3_input_grad(g_f3d, cast(lay.block)))
            g_f2d = g_inp[:f2]
            g_f3d_next = g_inp[f2:] if i else None
            c, h, wd = x.shape
            g_xs = (np.ascontiguousarray(cast(lay.head).T) @ g_f2d.reshape(f2, -1)).reshape(c, h, wd)
            g_w += cast(lay.head_mod) @ (g_xs * x).sum(axis=(1, 2))
            g_x = g_xs * sh[:, None, None]
            if g_x_next is not None:
                g_x = g_x + g_x_next
            g_y = g_x * np.where(y >= 0, 1.0, LRELU_SLOPE).astype(dt)
            g_xin_s = conv3x3_input_grad(g_y, cast(lay.conv))
            g_w += cast(lay.mod) @ (g_xin_s * x_in).sum(axis=(1, 2))
            g_xin = g_xin_s * s[:, None, None]
            g_x_next = upsample2_grad(g_xin) if i else None
        return g_w


def synthesize(net: SynthesisNetwork, w, dtype=np.float32) -> PyramidTriGrid:
    """``T_pyr = G(w)``."""
    pyr, _ = net.forward(w, dtype)
    return pyr


class InversionError(FloatingPointError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class InversionResult:
    w: np.ndarray
    best_loss: float
    best_step: int
    losses: list          # loss at every evaluated iterate
    best_so_far: list     # running minimum of ``losses``


def inversion_loss(net, renderer, target, cam, w, reg=0.0, w_mean=None, seed=None,
                   with_grad=False):
    """``mean((R(G(w), c, w) - target)^2) + reg * |w - w_mean|^2`` and optionally its gradient."""
    dt = renderer.dtype
    w = np.asarray(w, dt)
    w_mean = np.zeros_like(w) if w_mean is None else np.asarray(w_mean, dt)
    pyr, state = net.forward(w, dt)
    out = renderer.render(pyr, cam, w, seed=seed, record=with_grad)
    diff = out.rgb.astype(np.float64) - target
    loss = float(np.mean(diff ** 2) + reg * np.sum((w - w_mean).astype(np.float64) ** 2))
    if not with_grad:
        return loss
    g_rgb = (2.0 / diff.size) * diff
    grads = render_backward(out.tape, g_rgb)
    g_w = grads.latent + net.backward(state, grads.pyramid) + 2.0 * reg * (w - w_mean)
    return loss, g_w


def invert(net: SynthesisNetwork, renderer: Renderer, target, cam: CameraPose, iters=200,
           lr=0.02, reg=0.0, w_init=None, w_mean=None, seed=None) -> InversionResult:
    """Optimise the latent code so the rendered generator output matches ``target``.

    ``target`` is an aligned ``(H, W, 3)`` image in [0, 1] rendered at
    ``cam``.  Returns the best iterate seen (the initial code counts) with the
    full loss trace.
    """
    target = np.asarray(target, np.float64)
    n = int(cam.image_size)
    if target.shape != (n, n, 3):
        raise InvalidInput(f"target must be {(n, n, 3)} to match the camera, got {target.shape}")
    if not np.isfinite(target).all() or target.min() < 0 or target.max() > 1:
        raise InvalidInput("target image must be finite and within [0, 1]")
    w = np.zeros(net.latent_dim, renderer.dtype) if w_init is None else \
        np.array(w_init, dtype=renderer.dtype)
    state = OptimizerState.for_params([w])
    losses, best_so_far = [], []
    best = (np.inf, w.copy(), 0)
    for step in range(iters + 1):
        loss, g_w = inversion_loss(net, renderer, target, cam, w, reg, w_mean, seed, True)
        losses.append(loss)
        if not np.isfinite(loss):
            raise InversionError(f"non-finite inversion loss at step {step}", losses)
        if loss < best[0]:
            best = (loss, w.copy(), step)
        best_so_far.append(best[0])
        if step == iters or loss == 0.0:
            break
        adam_step(state, [w], [g_w], lr)
    log.info("inversion: best loss %.3e at step %d", best[0], best[2])
    return InversionResult(best[1], best[0], best[2], losses, best_so_far)
