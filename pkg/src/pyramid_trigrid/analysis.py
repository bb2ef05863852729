"""Spectral artifact metrics, image quality and isosurface extraction."""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np
from skimage import measure

from .grid import InvalidInput, PyramidTriGrid, query_pyramid
from .render import Decoder

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
LUMA = np.array([0.299, 0.587, 0.114])


def luma(image) -> np.ndarray:
    img = np.asarray(image, np.float64)
    if img.ndim == 3:
        if img.shape[2] == 1:
            return img[..., 0]
        return img[..., :3] @ LUMA
    return img


# -- spectra ------------------------------------------------------------------

@dataclass
class SpectrumReport:
    """Radial power spectrum of a square image.

    ``power[i]`` is the summed ``|F|^2 / N`` over frequencies in bin ``i``
    (``N`` = pixel count), so ``power.sum()`` equals the sum of squared
    deviations from the mean.  ``mean_power`` is the radial average.
    Frequencies beyond 0.5 (the corners) fall in the last bin.
    """

    bin_centers: np.ndarray
    power: np.ndarray
    mean_power: np.ndarray
    high_band_ratio: float
    cutoff: float
    total: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# cutoff={self.cutoff:g} high_band_ratio={self.high_band_ratio:.9g}\n")
        buf.write("bin_center,power\n")
        for c, p in zip(self.bin_centers, self.power):
            buf.write(f"{c:.9g},{p:.9g}\n")
        return buf.getvalue()


def radial_frequency(n: int) -> np.ndarray:
    f = np.fft.fftfreq(n)
    return np.hypot(f[:, None], f[None, :])


def power_spectrum(image, bins=None, cutoff=0.25) -> SpectrumReport:
    """Radially binned power spectrum and the fraction of non-DC energy above ``cutoff``.

    Colour images are reduced to luma first.  A constant image has no
    non-DC energy and is given ``high_band_ratio = 0``.
    """
    img = luma(image)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise InvalidInput(f"power spectrum needs a square image, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise InvalidInput("image contains non-finite values")
    n = img.shape[0]
    nbins = bins or max(n // 2, 1)
    p = np.abs(np.fft.fft2(img)) ** 2 / img.size
    rho = radial_frequency(n)
    p[0, 0] = 0.0
    idx = np.minimum((rho / 0.5 * nbins).astype(int), nbins - 1)
    nondc = rho > 0
    power = np.bincount(idx[nondc], weights=p[nondc], minlength=nbins)
    counts = np.bincount(idx[nondc], minlength=nbins)
    mean_power = np.divide(power, counts, out=np.zeros(nbins), where=counts > 0)
    total = float(p.sum())
    # relative threshold: round-off of a constant image is not energy
    scale = float(np.sum(img ** 2)) + 1e-300
    ratio = float(p[rho > cutoff].sum() / total) if total > 1e-24 * scale else 0.0
    centers = (np.arange(nbins) + 0.5) * (0.5 / nbins)
    return SpectrumReport(centers, power, mean_power, ratio, cutoff, total)


def high_band_ratio(image, cutoff=0.25) -> float:
    return power_spectrum(image, cutoff=cutoff).high_band_ratio


def psnr(a, b, cap=PSNR_CAP) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; identical images give ``cap``."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise InvalidInput(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


# -- meshes -------------------------------------------------------------------

@dataclass
class Mesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def edge_counts(self) -> dict:
        """How many faces use each undirected edge."""
        f = self.faces
        edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        edges.sort(axis=1)
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        return {tuple(e): int(c) for e, c in zip(uniq, counts)}

    def is_watertight(self) -> bool:
        if self.is_empty:
            return False
        return all(c == 2 for c in self.edge_counts().values())

    def degenerate_faces(self, tol=1e-12) -> int:
        v = self.vertices[self.faces]
        area2 = np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
        return int(np.sum(area2 <= tol))

    def to_obj(self) -> str:
        lines = [f"# vertices {len(self.vertices)} faces {len(self.faces)}"]
        lines += [f"v {x:.7g} {y:.7g} {z:.7g}" for x, y, z in self.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in self.faces]
        return "\n".join(lines) + "\n"


def lattice_points(resolution: int, bound: float = 1.0) -> np.ndarray:
    """``resolution^3`` points on a regular lattice over ``[-bound, bound]^3``, x slowest."""
    ax = np.linspace(-bound, bound, resolution)
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)


def density_lattice(pyr: PyramidTriGrid, decoder: Decoder, resolution: int,
                    chunk: int = 65536) -> np.ndarray:
    """Decoded density at every lattice point, shaped ``(R, R, R)``."""
    pts = lattice_points(resolution)
    dt = pyr.levels[0].values.dtype
    out = np.empty(len(pts), dt)
    for i in range(0, len(pts), chunk):
        feats = query_pyramid(pyr, pts[i:i + chunk]).astype(dt, copy=False)
        out[i:i + chunk] = decoder.forward(feats)[0]
    return out.reshape(resolution, resolution, resolution)


def mesh_from_volume(volume, iso: float, bound: float = 1.0) -> Mesh:
    """Marching cubes on a lattice spanning ``[-bound, bound]^3``.

    An iso level outside the volume's range gives an empty mesh.
    """
    vol = np.asarray(volume, np.float64)
    if vol.ndim != 3 or min(vol.shape) < 2:
        raise InvalidInput("volume must be a 3D array with at least 2 samples per axis")
    if not (vol.min() < iso < vol.max()):
        log.info("iso %.4g outside density range [%.4g, %.4g]: empty mesh", iso, vol.min(), vol.max())
        return Mesh()
    spacing = tuple(2.0 * bound / (s - 1) for s in vol.shape)
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso, spacing=spacing,
                                                method="lorensen", allow_degenerate=False)
    return Mesh(verts - bound, faces.astype(np.int64))


def extract_mesh(pyr: PyramidTriGrid, decoder: Decoder, resolution: int = 64, iso: float = 10.0,
                 density_fn=None) -> Mesh:
    """Isosurface of the decoded density; ``density_fn(points)`` bypasses the grid and decoder."""
    if resolution < 8:
        raise InvalidInput("mesh resolution must be >= 8")
    if density_fn is None:
        vol = density_lattice(pyr, decoder, resolution)
    else:
        vol = np.asarray(density_fn(lattice_points(resolution))).reshape((resolution,) * 3)
    mesh = mesh_from_volume(vol, iso)
    if mesh.is_empty:
        log.warning("extract_mesh: empty surface at iso %g", iso)
    return mesh


# -- representation ablation --------------------------------------------------

@dataclass
class AblationArm:
    resolutions: list
    high_band_ratio: float
    view_ratios: list
    psnr: float
    final_loss: float


@dataclass
class AblationReport:
    """Single-resolution vs pyramid grid under identical noisy multi-view fitting."""

    seed: int
    noise: float
    single: AblationArm
    pyramid: AblationArm
    optimizer: dict          # shared by both arms
    cutoff: float

    @property
    def pyramid_not_worse(self) -> bool:
        return self.pyramid.high_band_ratio <= self.single.high_band_ratio

    def summary(self) -> str:
        return (f"seed {self.seed} noise {self.noise:g}: high-band ratio single "
                f"{self.single.high_band_ratio:.3e} (PSNR {self.single.psnr:.2f}) vs pyramid "
                f"{self.pyramid.high_band_ratio:.3e} (PSNR {self.pyramid.psnr:.2f})")


def artifact_ablation(seed=0, noise=0.2, steps=1000, top_resolution=64, n_views=8, image_size=32,
                      eval_size=64, samples_per_ray=32, batch_rays=512, lr=2e-2, lr_final=2e-3,
                      renderer_seed=0, cutoff=0.25, channels=12) -> AblationReport:
    """Fit the sphere scene with a single top-resolution grid and with a pyramid.

    Both arms start from zero grids and share the renderer, views, ray
    batches, target noise and optimizer settings; only the level list
    differs.  High-band ratios are measured on ``eval_size`` renders from
    four ring cameras offset from the training ring.
    """
    from .camera import CameraPose
    from .fitting import FitConfig, SphereField, fit_views, render_field, ring_cameras, sphere_dataset
    from .render import Renderer

    if top_resolution < 8 or top_resolution & (top_resolution - 1):
        raise InvalidInput("top_resolution must be a power of two >= 8")
    renderer = Renderer.init(channels=channels, latent_dim=8, rng=renderer_seed,
                             samples_per_ray=samples_per_ray)
    w = np.zeros(8, np.float32)
    base = CameraPose(image_size=image_size)
    views = sphere_dataset(renderer, w, n_views, base, seed)
    eval_cams = ring_cameras(4, base.with_size(eval_size), 180.0 / n_views)
    field = SphereField(color_features=renderer.decoder.color_features)
    truth = [render_field(renderer, field, c, w).rgb for c in eval_cams]
    cfg = FitConfig(steps=steps, lr=lr, lr_final=lr_final, batch_rays=batch_rays, seed=seed,
                    target_noise=noise)
    pyramid_res = [8 * 2 ** i for i in range(int(np.log2(top_resolution // 8)) + 1)]
    arms = {}
    for name, levels in (("single", [top_resolution]), ("pyramid", pyramid_res)):
        pyr = PyramidTriGrid.zeros(levels, channels)
        fit = fit_views(pyr, renderer, w, views, cfg)
        imgs = [renderer.render(pyr, c, w).rgb for c in eval_cams]
        ratios = [high_band_ratio(i, cutoff) for i in imgs]
        arms[name] = AblationArm(levels, float(np.mean(ratios)), ratios,
                                 float(np.mean([psnr(i, t) for i, t in zip(imgs, truth)])),
                                 fit.losses[-1] if fit.losses else float("nan"))
    opt = dict(vars(cfg))
    opt.update(samples_per_ray=samples_per_ray, renderer_seed=renderer_seed, n_views=n_views)
    return AblationReport(seed, noise, arms["single"], arms["pyramid"], opt, cutoff)
