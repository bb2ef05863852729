import numpy as np
import pytest

from pyramid_trigrid.camera import CameraPose
from pyramid_trigrid.fitting import (FitConfig, SphereField, ViewSet, fit_views, held_out_view,
                                     render_field, ring_cameras, sphere_dataset)
from pyramid_trigrid.grid import InvalidInput, PyramidTriGrid
from pyramid_trigrid.render import Renderer


def small_renderer():
    return Renderer.init(channels=4, latent_dim=2, hidden=16, color_features=4, rng=0, samples_per_ray=16)


def test_sphere_field_profile():
    f = SphereField(color_features=4)
    sigma, color = f(np.array([[0, 0, 0], [0.5, 0, 0], [1.0, 0, 0]]))
    assert sigma[0] == pytest.approx(30.0, rel=1e-6)
    assert sigma[1] == pytest.approx(15.0)
    assert sigma[2] < 1e-6
    assert color.shape == (3, 4) and np.all((color >= 0.1) & (color <= 0.9))


def test_render_field_sees_sphere():
    r = small_renderer()
    img = render_field(r, SphereField(color_features=4), CameraPose(image_size=16), np.zeros(2))
    assert img.weight_sum[8, 8] > 0.99        # centre ray hits the sphere
    assert img.weight_sum[0, 0] < 1e-3        # corner ray misses it
    with pytest.raises(InvalidInput):
        render_field(r, SphereField(color_features=3), CameraPose(image_size=4), np.zeros(2))


def test_ring_cameras():
    cams = ring_cameras(8, CameraPose(), offset=10.0)
    assert [c.azimuth for c in cams] == [10.0 + 45.0 * k for k in range(8)]
    assert [c.polar for c in cams[:4]] == [60.0, 90.0, 120.0, 90.0]


def test_held_out_view_is_seeded():
    assert held_out_view(CameraPose(), 3) == held_out_view(CameraPose(), 3)
    assert 80 <= held_out_view(CameraPose(), 3).polar <= 100


def test_fit_reduces_loss_and_is_deterministic():
    r = small_renderer()
    views = sphere_dataset(r, np.zeros(2), 4, CameraPose(image_size=8), seed=0)
    cfg = FitConfig(steps=150, batch_rays=64, seed=1)
    a = fit_views(PyramidTriGrid.zeros((4, 8), 4), r, np.zeros(2), views, cfg)
    b = fit_views(PyramidTriGrid.zeros((4, 8), 4), r, np.zeros(2), views, cfg)
    assert a.losses == b.losses
    assert np.mean(a.losses[-5:]) < 0.5 * np.mean(a.losses[:5])
    assert a.skipped == 0


def test_fit_validation():
    r = small_renderer()
    views = sphere_dataset(r, np.zeros(2), 2, CameraPose(image_size=4))
    pyr = PyramidTriGrid.zeros((4,), 4)
    with pytest.raises(InvalidInput, match=">= 2 views"):
        fit_views(pyr, r, np.zeros(2), ViewSet(views.cameras[:1], views.images[:1]))
    with pytest.raises(InvalidInput):
        fit_views(pyr, r, np.zeros(2), ViewSet(views.cameras, views.images[:1]))
    with pytest.raises(InvalidInput):
        fit_views(pyr, r, np.zeros(2), ViewSet(views.cameras, [np.zeros((5, 5, 3))] * 2))
