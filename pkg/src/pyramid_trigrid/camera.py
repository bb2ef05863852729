"""Pinhole cameras on a sphere around the origin, ray generation and view protocols."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .grid import InvalidInput

WORLD_UP = np.array([0.0, 0.0, 1.0])
# Used when the view direction is parallel to +Z (polar 0 or 180).
FALLBACK_UP = np.array([0.0, 1.0, 0.0])

POLAR_BANDS = ((55.0, 65.0), (85.0, 95.0), (115.0, 125.0))
PROTOCOL_AZIMUTHS = 7


@dataclass(frozen=True)
class CameraPose:
    """Camera at spherical position (azimuth, polar, radius) looking at the origin.

    Angles are in degrees; ``polar`` is measured from the +Z zenith so 90 is
    a horizontal view.
    """

    azimuth: float = 0.0
    polar: float = 90.0
    radius: float = 2.7
    fov_y: float = 30.0
    image_size: int = 32

    def __post_init__(self):
        if not 0.0 < self.fov_y < 180.0:
            raise InvalidInput(f"fov_y must be in (0, 180), got {self.fov_y}")
        if not self.radius > 0.0:
            raise InvalidInput(f"radius must be positive, got {self.radius}")
        if int(self.image_size) < 1:
            raise InvalidInput(f"image_size must be >= 1, got {self.image_size}")
        if not (np.isfinite(self.azimuth) and np.isfinite(self.polar)):
            raise InvalidInput("camera angles must be finite")

    def position(self) -> np.ndarray:
        az, po = np.radians(self.azimuth), np.radians(self.polar)
        return self.radius * np.array([np.sin(po) * np.cos(az),
                                       np.sin(po) * np.sin(az),
                                       np.cos(po)])

    def with_size(self, image_size: int) -> "CameraPose":
        return replace(self, image_size=int(image_size))


@dataclass
class RayBatch:
    origins: np.ndarray      # (N, 3)
    directions: np.ndarray   # (N, 3), unit norm
    near: np.ndarray         # (N,)
    far: np.ndarray          # (N,)

    def __post_init__(self):
        if np.any(self.near >= self.far):
            raise InvalidInput("ray near bound must be below far bound")

    def __len__(self):
        return self.origins.shape[0]

    def subset(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx])


def camera_basis(cam: CameraPose):
    """Return (position, forward, right, up) for ``cam``."""
    pos = cam.position()
    fwd = -pos / np.linalg.norm(pos)
    up = WORLD_UP
    if abs(np.dot(fwd, up)) > 1.0 - 1e-9:
        up = FALLBACK_UP
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    return pos, fwd, right, true_up


def camera_rays(cam: CameraPose, near_far_margin: float = 1.3) -> RayBatch:
    """Pixel-centred pinhole rays, row-major with row 0 at the top of the image.

    March bounds are ``radius -/+ near_far_margin`` (near floored at a small
    positive distance).
    """
    n = int(cam.image_size)
    pos, fwd, right, up = camera_basis(cam)
    half = np.tan(np.radians(cam.fov_y) / 2.0)
    centers = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    sx = centers[None, :] * half
    sy = -centers[:, None] * half
    dirs = fwd[None, None, :] + sx[..., None] * right + sy[..., None] * up
    dirs = dirs.reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pos, dirs.shape).copy()
    near = max(cam.radius - near_far_margin, 1e-3)
    far = cam.radius + near_far_margin
    m = dirs.shape[0]
    return RayBatch(origins, dirs, np.full(m, near), np.full(m, far))


def protocol_21_views(base: CameraPose = CameraPose(), seed=0) -> list:
    """Seven evenly spaced azimuths, each with one polar angle from every band.

    Azimuths are ``k * 360/7`` for ``k = 0..6``; the polar angle for each
    (azimuth, band) pair is drawn uniformly inside the band.
    """
    rng = np.random.default_rng(seed)
    views = []
    for k in range(PROTOCOL_AZIMUTHS):
        az = k * 360.0 / PROTOCOL_AZIMUTHS
        for lo, hi in POLAR_BANDS:
            views.append(replace(base, azimuth=az, polar=float(rng.uniform(lo, hi))))
    return views


def sample_band_camera(base: CameraPose, rng: np.random.Generator) -> CameraPose:
    """Random azimuth in [0, 360) with a polar angle from a randomly chosen band."""
    az = float(rng.uniform(0.0, 360.0))
    lo, hi = POLAR_BANDS[int(rng.integers(len(POLAR_BANDS)))]
    return replace(base, azimuth=az, polar=float(rng.uniform(lo, hi)))


def turntable(base: CameraPose = CameraPose(), frames: int = 36) -> list:
    return [replace(base, azimuth=360.0 * i / frames) for i in range(frames)]
