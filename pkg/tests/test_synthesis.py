import numpy as np
import pytest

from pyramid_trigrid.camera import CameraPose
from pyramid_trigrid.grid import InvalidInput
from pyramid_trigrid.render import Renderer
from pyramid_trigrid.synthesis import (SynthesisNetwork, conv3x3, conv3x3_input_grad, invert,
                                       inversion_loss, synthesize)
from scipy.signal import correlate2d


def small_net(seed=0, latent_dim=6):
    return SynthesisNetwork.init((4, 8), channels=4, depth_layers=3, latent_dim=latent_dim, width=6,
                                 head_channels=5, rng=seed)


def test_conv_matches_scipy(rng):
    x = rng.standard_normal((3, 6, 5))
    wt = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = conv3x3(x, wt, b)
    for o in range(4):
        ref = sum(correlate2d(x[i], wt[o, i], mode="same") for i in range(3)) + b[o]
        np.testing.assert_allclose(out[o], ref, atol=1e-12)


def test_conv_input_grad_is_adjoint(rng):
    x = rng.standard_normal((3, 5, 5))
    g = rng.standard_normal((4, 5, 5))
    wt = rng.standard_normal((4, 3, 3, 3))
    lhs = np.sum(conv3x3(x, wt, np.zeros(4)) * g)
    rhs = np.sum(x * conv3x3_input_grad(g, wt))
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_template_shapes():
    net = SynthesisNetwork.init((8, 16, 32), channels=12, latent_dim=16, width=8, head_channels=4, rng=0)
    pyr = synthesize(net, np.zeros(16))
    assert [lv.values.shape for lv in pyr.levels] == [(3, 3, 12, r, r) for r in (8, 16, 32)]
    assert pyr.levels[0].values.dtype == np.float32


def test_invalid_architecture():
    with pytest.raises(InvalidInput):
        SynthesisNetwork.init((8, 24), rng=0)
    with pytest.raises(InvalidInput):
        SynthesisNetwork.init((5,), rng=0)
    with pytest.raises(InvalidInput):
        synthesize(small_net(), np.zeros(3))
    with pytest.raises(InvalidInput):
        synthesize(small_net(), np.full(6, np.nan))


def test_zeroed_network_emits_zero():
    pyr = synthesize(small_net().zeroed(), np.ones(6))
    assert all(np.all(a == 0) for a in pyr.arrays)


def test_latent_changes_output():
    net = small_net()
    a = synthesize(net, np.zeros(6)).arrays
    b = synthesize(net, np.ones(6)).arrays
    assert any(not np.allclose(x, y) for x, y in zip(a, b))


def test_backward_matches_finite_differences(rng):
    net = small_net(1)
    w = 0.5 * rng.standard_normal(6)
    ups = [rng.standard_normal(a.shape) for a in synthesize(net, w, np.float64).arrays]

    def f(latent):
        return sum(np.sum(a * u) for a, u in zip(synthesize(net, latent, np.float64).arrays, ups))

    _, state = net.forward(w, np.float64)
    g = net.backward(state, ups)
    h = 1e-6
    for j in range(6):
        e = np.zeros(6)
        e[j] = h
        fd = (f(w + e) - f(w - e)) / (2 * h)
        assert abs(fd - g[j]) <= 1e-5 * max(1.0, abs(fd))


def scene(latent_dim=6, seed=0):
    net = small_net(seed, latent_dim)
    r = Renderer.init(channels=4, latent_dim=latent_dim, hidden=16, rng=seed, samples_per_ray=12,
                      dtype=np.float64, jitter=False)
    cam = CameraPose(image_size=8)
    return net, r, cam


def test_inversion_fixed_point():
    net, r, cam = scene()
    w_true = 0.3 * np.random.default_rng(3).standard_normal(6)
    target = r.render(synthesize(net, w_true, np.float64), cam, w_true).rgb
    res = invert(net, r, target, cam, iters=20, lr=0.01, w_init=w_true)
    assert res.best_loss == 0.0
    assert res.best_step == 0
    assert np.array_equal(res.w, w_true)


def test_inversion_descends_and_tracks_best():
    net, r, cam = scene()
    w_true = 0.5 * np.random.default_rng(4).standard_normal(6)
    target = r.render(synthesize(net, w_true, np.float64), cam, w_true).rgb
    res = invert(net, r, target, cam, iters=60, lr=0.05)
    assert res.best_loss < 0.5 * res.losses[0]
    assert res.best_so_far == list(np.minimum.accumulate(res.losses))
    assert inversion_loss(net, r, target, cam, res.w) == pytest.approx(res.best_loss)


def test_regulariser_pulls_toward_mean():
    net, r, cam = scene()
    target = np.full((8, 8, 3), 0.5)
    free = invert(net, r, target, cam, iters=40, lr=0.05)
    held = invert(net, r, target, cam, iters=40, lr=0.05, reg=10.0)
    assert np.linalg.norm(held.w) < np.linalg.norm(free.w)


def test_inversion_gradient_matches_finite_differences(rng):
    net, r, cam = scene()
    target = rng.random((8, 8, 3))
    w = 0.3 * rng.standard_normal(6)
    _, g = inversion_loss(net, r, target, cam, w, reg=0.1, with_grad=True)
    h = 1e-6
    for j in range(6):
        e = np.zeros(6)
        e[j] = h
        fd = (inversion_loss(net, r, target, cam, w + e, 0.1)
              - inversion_loss(net, r, target, cam, w - e, 0.1)) / (2 * h)
        assert abs(fd - g[j]) <= 1e-4 * max(abs(fd), 1e-3)


def test_inversion_rejects_bad_target():
    net, r, cam = scene()
    with pytest.raises(InvalidInput):
        invert(net, r, np.zeros((4, 4, 3)), cam)
    with pytest.raises(InvalidInput):
        invert(net, r, np.full((8, 8, 3), 2.0), cam)
