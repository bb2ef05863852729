import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.ndimage import map_coordinates

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# Plane k uses (column axis, row axis, normal axis).
PLANES = ((0, 1, 2), (0, 2, 1), (1, 2, 0))


def reference_query(values, p):
    """Independent tri-grid query via scipy's linear map_coordinates with edge clamping."""
    values = np.asarray(values, np.float64)
    _, d, c, r, _ = values.shape
    p = np.clip(np.asarray(p, np.float64), -1, 1)
    out = np.zeros(c)
    for k, (u, v, n) in enumerate(PLANES):
        col = (p[u] + 1) / 2 * (r - 1)
        row = (p[v] + 1) / 2 * (r - 1)
        lay = (p[n] + 1) / 2 * (d - 1)
        for ch in range(c):
            out[ch] += map_coordinates(values[k, :, ch], [[lay], [row], [col]], order=1,
                                       mode="nearest")[0]
    return out


def reference_composite(sigma, color, delta):
    """Per-ray loop of the emission-absorption sum."""
    n, s = sigma.shape
    feat = np.zeros((n, color.shape[-1]))
    wsum = np.zeros(n)
    for i in range(n):
        t = 1.0
        for j in range(s):
            a = 1.0 - np.exp(-sigma[i, j] * delta[i])
            feat[i] += t * a * color[i, j]
            wsum[i] += t * a
            t *= 1.0 - a
    return feat, wsum


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def explicit_l2_run(pyr, w, renderer, target_fn, cfg, base, steps):
    """Reference descent on 0.5 * omega * lambda * |x - x_tgt|^2 using the same
    per-step camera, timestep and jitter draws as the distillation loop."""
    from pyramid_trigrid.guidance import alpha_sigma, sds_draw
    from pyramid_trigrid.optim import OptimizerState, adam_step, pyramid_multipliers
    from pyramid_trigrid.render import render_backward

    state = OptimizerState.for_params(pyr.arrays, pyramid_multipliers(pyr, cfg.lr_gamma))
    trace = []
    for k in range(steps):
        d = sds_draw(cfg, k, base)
        out = renderer.render(pyr, d.camera, w, seed=d.jitter_seed, record=True)
        a, s = alpha_sigma(d.t)
        coef = cfg.omega(d.t) * a / s
        g = coef * (out.rgb - np.asarray(target_fn(d.camera), out.rgb.dtype))
        grads = render_backward(out.tape, g)
        adam_step(state, pyr.arrays, grads.pyramid, cfg.learning_rate(k))
        trace.append([a.copy() for a in pyr.arrays])
    return trace
