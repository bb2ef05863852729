"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The long optimisation runs (distillation, refinement, ablation, fitting)
take several minutes each on a desktop CPU.  Lines are collected and
repeated in the pytest terminal summary.
"""
import math
import time

import numpy as np
import pytest

from pyramid_trigrid.analysis import artifact_ablation, extract_mesh, psnr
from pyramid_trigrid.camera import POLAR_BANDS, CameraPose, RayBatch, protocol_21_views
from pyramid_trigrid.fitting import FitConfig, SphereField, fit_views, held_out_view, render_field, sphere_dataset
from pyramid_trigrid.grid import PyramidTriGrid
from pyramid_trigrid.guidance import (Conditioning, EchoNoiseProvider, IdentityDenoiser, PointMassOracle,
                                      RefineConfig, SDSConfig, refine, run_sds, sds_step)
from pyramid_trigrid.io import grid_from_bytes, grid_to_bytes
from pyramid_trigrid.optim import OptimizerState, gradcheck, make_gradcheck_scene, pyramid_multipliers
from pyramid_trigrid.remote import ProviderServer, RemoteProvider
from pyramid_trigrid.render import Renderer
from pyramid_trigrid.synthesis import SynthesisNetwork, invert, synthesize

from conftest import ACCEPTANCE_LINES, explicit_l2_run

SEEDS = (0, 1, 2)


def report(number, name, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


def test_01_gradient_correctness():
    t0 = time.perf_counter()
    reps = [gradcheck(make_gradcheck_scene(s, resolutions=(2, 4), image_size=4, samples_per_ray=8,
                                           latent_dim=8)) for s in SEEDS]
    dt = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in reps)
    ok = all(r.passed for r in reps) and all(r.threshold <= 1e-3 for r in reps) and dt < 60
    report(1, "gradient check", ok,
           f"max rel err {worst:.2e} over {sum(r.checked for r in reps)} entries, 3 scenes, {dt:.1f}s")


def test_02_rendering_oracle():
    # constant density with sigma * path length = 2
    r = Renderer.init(channels=4, latent_dim=2, hidden=8, rng=0, samples_per_ray=256, jitter=False)
    r.decoder.w2[:, 0] = 0.0
    r.decoder.b2[0] = math.log(math.expm1(2.0))
    n = 8
    rays = RayBatch(np.zeros((n, 3)), np.tile([1.0, 0, 0], (n, 1)), np.full(n, 0.2), np.full(n, 1.2))
    got = r.render_rays(PyramidTriGrid.zeros((2,), 4), rays, np.zeros(2)).weight_sum
    err = float(np.max(np.abs(got.astype(np.float64) - (1 - math.exp(-2)))))

    rng = np.random.default_rng(0)
    m = 10_000
    d = rng.standard_normal((m, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = rng.uniform(-2, 2, (m, 3))
    near = rng.uniform(0.0, 1.0, m)
    big = Renderer.init(channels=12, latent_dim=8, rng=1, samples_per_ray=64)
    pyr = PyramidTriGrid.random((8, 16, 32), 12, scale=1.0, rng=2)
    out = big.render_rays(pyr, RayBatch(o, d, near, near + rng.uniform(0.5, 4.0, m)), np.zeros(8),
                          seed=3, record=True)
    sums = np.concatenate([c.weights.astype(np.float64).sum(1) for c in out.tape.chunks])
    ok = err <= 1e-3 and sums.max() <= 1 + 1e-6 and sums.size == m
    report(2, "rendering oracle", ok,
           f"|opacity - (1-e^-2)| = {err:.2e} at 256 samples; max weight sum {sums.max():.7f} "
           f"over {m} rays")


def sds_scene(seed, size=24, samples=32):
    rng = np.random.default_rng(seed)
    r = Renderer.init(channels=12, latent_dim=8, rng=rng, samples_per_ray=samples)
    w = np.zeros(8, np.float32)
    tgt = PyramidTriGrid.random((8, 16, 32), 12, scale=0.3, rng=rng)
    return r, w, tgt, CameraPose(image_size=size)


def test_03_distillation_algebra_and_descent():
    # per-step equivalence, float64
    worst = 0.0
    for seed in SEEDS:
        r = Renderer.init(channels=4, latent_dim=3, hidden=16, rng=seed, samples_per_ray=8, dtype=np.float64)
        w = np.zeros(3)
        tgt_pyr = PyramidTriGrid.random((4, 8), 4, scale=0.3, rng=seed + 10, dtype=np.float64)
        target = lambda cam: r.render(tgt_pyr, cam, w).rgb
        oracle = PointMassOracle(lambda c: target(c.camera))
        pyr = PyramidTriGrid.random((4, 8), 4, scale=0.1, rng=seed + 20, dtype=np.float64)
        base = CameraPose(image_size=8)
        cfg = SDSConfig(steps=20, seed=seed)
        ref = explicit_l2_run(pyr.copy(), w, r, target, cfg, base, cfg.steps)
        state = OptimizerState.for_params(pyr.arrays, pyramid_multipliers(pyr, cfg.lr_gamma))
        for k in range(cfg.steps):
            sds_step(pyr, w, r, oracle, cfg, k, state, base)
            worst = max(worst, max(float(np.max(np.abs(a - b))) for a, b in zip(pyr.arrays, ref[k])))

    # 500-step descent toward a view-dependent target
    ratios = []
    t0 = time.perf_counter()
    for seed in SEEDS:
        r, w, tgt, base = sds_scene(seed)
        oracle = PointMassOracle(lambda c: r.render(tgt, c.camera, w).rgb)
        views = protocol_21_views(base, seed)

        def err(p):
            return np.mean([np.sum((r.render(p, c, w).rgb - oracle.target_image(Conditioning(camera=c))) ** 2)
                            for c in views])

        pyr = PyramidTriGrid.zeros((8, 16, 32), 12)
        e0 = err(pyr)
        run_sds(pyr, w, r, oracle, SDSConfig(steps=500, lr=1e-2, lr_final=1e-3, seed=seed), base)
        ratios.append(err(pyr) / e0)
    dt = time.perf_counter() - t0
    ok = worst <= 1e-5 and all(x <= 0.10 for x in ratios) and dt < 600
    report(3, "distillation algebra", ok,
           f"max |SDS - L2 descent| {worst:.1e} over 3x20 steps; 500-step L2 ratios "
           f"{', '.join(f'{x:.3f}' for x in ratios)} (<= 0.10), {dt:.0f}s")


def test_04_refinement_fixed_point_and_descent():
    fixed = []
    decreasing = []
    spans = []
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        r = Renderer.init(channels=12, latent_dim=8, rng=rng, samples_per_ray=24)
        w = np.zeros(8, np.float32)
        pyr = PyramidTriGrid.random((8, 16, 32), 12, scale=0.3, rng=rng)
        tgt = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
        base = CameraPose(image_size=16)
        before = [a.copy() for a in pyr.arrays]
        res = refine(pyr, w, r, IdentityDenoiser(), RefineConfig(noise_level=0.0, steps=3, seed=seed), base)
        fixed.append(all(np.array_equal(a, b) for a, b in zip(res.pyr.arrays, before)))
        res = refine(pyr, w, r, PointMassOracle(tgt), RefineConfig(steps=200, seed=seed), base)
        m = np.array(res.mean_losses)
        decreasing.append(bool(np.all(np.diff(m) < 0)) and len(res.views) == 21)
        spans.append((m[0], m[-1]))
    ok = all(fixed) and all(decreasing)
    report(4, "refinement", ok,
           f"identity fixed point bit-identical {sum(fixed)}/3; strict decrease {sum(decreasing)}/3 "
           f"({'; '.join(f'{a:.4f}->{b:.4f}' for a, b in spans)})")


def test_05_view_protocol():
    ok = True
    for seed in range(5):
        views = protocol_21_views(CameraPose(), seed)
        azs = sorted({v.azimuth for v in views})
        bands = [sum(lo <= v.polar <= hi for v in views) for lo, hi in POLAR_BANDS]
        per_az = all(sorted(next(i for i, (lo, hi) in enumerate(POLAR_BANDS) if lo <= v.polar <= hi)
                            for v in views if v.azimuth == a) == [0, 1, 2] for a in azs)
        ok &= (len(views) == 21 and azs == [k * 360.0 / 7 for k in range(7)] and bands == [7, 7, 7]
               and per_az)
    ok &= POLAR_BANDS == ((55.0, 65.0), (85.0, 95.0), (115.0, 125.0))
    report(5, "21-view protocol", ok, "21 poses, azimuths k*360/7, polar bands 7/7/7 (5 seeds)")


def test_06_artifact_ablation():
    t0 = time.perf_counter()
    reps = [artifact_ablation(seed=s, noise=0.2, steps=1000) for s in SEEDS]
    control = artifact_ablation(seed=0, noise=0.0, steps=1000)
    dt = time.perf_counter() - t0
    wins = sum(r.pyramid_not_worse for r in reps)
    gap = abs(control.single.high_band_ratio - control.pyramid.high_band_ratio)
    ok = wins == 3 and gap <= 0.05
    detail = "; ".join(f"s{r.seed} single {r.single.high_band_ratio:.2e} pyr {r.pyramid.high_band_ratio:.2e}"
                       for r in reps)
    report(6, "artifact ablation", ok, f"{detail}; pyramid <= single {wins}/3; control gap {gap:.1e} "
                                       f"(<= 0.05), {dt:.0f}s")


def test_07_multiview_fitting():
    t0 = time.perf_counter()
    r = Renderer.init(channels=12, latent_dim=8, rng=0, samples_per_ray=64)
    w = np.zeros(8, np.float32)
    base = CameraPose(image_size=32)
    views = sphere_dataset(r, w, 8, base, seed=0)
    pyr = PyramidTriGrid.zeros((8, 16, 32, 64), 12)
    fit_views(pyr, r, w, views, FitConfig(steps=2000, seed=0))
    cam = held_out_view(base, 0)
    truth = render_field(r, SphereField(color_features=8), cam, w).rgb
    value = psnr(r.render(pyr, cam, w).rgb, truth)
    dt = time.perf_counter() - t0
    ok = value >= 25.0 and dt < 900
    report(7, "multi-view fitting", ok, f"held-out PSNR {value:.2f} dB (>= 25) after 2000 steps, {dt:.0f}s")


def test_08_shape_contract_and_inversion_fixed_point():
    res = (8, 16, 32, 64, 128, 256, 512)
    net = SynthesisNetwork.init(res, channels=12, depth_layers=3, latent_dim=64, rng=0)
    pyr = synthesize(net, np.random.default_rng(0).standard_normal(64))
    shapes = [a.shape for a in pyr.arrays]
    shapes_ok = shapes == [(3, 3, 12, r, r) for r in res]

    small = SynthesisNetwork.init((8, 16), channels=12, latent_dim=8, width=8, head_channels=4, rng=1)
    r = Renderer.init(channels=12, latent_dim=8, rng=1, samples_per_ray=16)
    cam = CameraPose(image_size=16)
    w_true = (0.5 * np.random.default_rng(2).standard_normal(8)).astype(np.float32)
    target = r.render(synthesize(small, w_true), cam, w_true).rgb
    inv = invert(small, r, target, cam, iters=10, w_init=w_true)
    fixed_ok = inv.best_loss == 0.0 and np.array_equal(inv.w, w_true)
    report(8, "shape contract", shapes_ok and fixed_ok,
           f"levels {shapes[0]}..{shapes[-1]} match template; inversion at true latent loss "
           f"{inv.best_loss:g}, latent unchanged {fixed_ok}")


def test_09_serialization_and_echo():
    pyr = PyramidTriGrid.random((8, 16, 32, 64), 12, rng=5)
    back = grid_from_bytes(grid_to_bytes(pyr))
    exact = all(a.tobytes() == b.tobytes() and a.shape == b.shape for a, b in zip(pyr.arrays, back.arrays))

    r = Renderer.init(channels=12, latent_dim=8, rng=0, samples_per_ray=16)
    grid = PyramidTriGrid.random((8, 16), 12, scale=0.3, rng=1)
    before = [a.copy() for a in grid.arrays]
    with ProviderServer(EchoNoiseProvider()) as srv:
        _, _, hist = run_sds(grid, np.zeros(8, np.float32), r, RemoteProvider(srv.url, timeout=10),
                             SDSConfig(steps=5), CameraPose(image_size=16))
    zero = all(np.array_equal(a, b) for a, b in zip(grid.arrays, before))
    resid = max(h.residual_rms for h in hist)
    report(9, "serialization and protocol", exact and zero and resid == 0.0,
           f"grid file bit-exact {exact}; remote echo residual {resid:g}, parameters unchanged {zero}")


def test_10_mesh_extraction():
    field = SphereField()
    res = 64
    mesh = extract_mesh(None, None, resolution=res, iso=field.peak / 2, density_fn=field.density)
    cell = 2.0 / (res - 1)
    err = float(np.max(np.abs(np.linalg.norm(mesh.vertices, axis=1) - field.radius)))
    ok = err <= cell and mesh.is_watertight()
    report(10, "mesh extraction", ok,
           f"{len(mesh.vertices)} vertices, max |r - 0.5| {err:.2e} (cell {cell:.4f}); "
           f"watertight {mesh.is_watertight()}")
