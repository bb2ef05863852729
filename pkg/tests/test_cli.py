import json
import subprocess
import sys

import numpy as np
import pytest

from pyramid_trigrid import io as pio
from pyramid_trigrid.cli import main

TINY = """\
[render]
image_size = 8
samples_per_ray = 8

[pyramid]
resolutions = 4, 8
channels = 4

[network]
latent_dim = 4
width = 4
head_channels = 3
hidden = 8

[inversion]
iters = 3

[sds]
steps = 3
prompt = a portrait

[refine]
steps = 2

[fit]
steps = 5
views = 3
batch_rays = 32
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def run(*argv):
    return main([str(a) for a in argv])


def test_generate_writes_views_and_turntable(cfg_path, tmp_path):
    out = tmp_path / "gen"
    assert run("generate", "--config", cfg_path, "--out", out, "--seed", 2) == 0
    assert len(list((out / "views").glob("view_*.png"))) == 21
    assert len(list((out / "turntable").glob("frame_*.png"))) == 36
    for name in ("grid.ptg", "grid_sds.ptg", "grid_inverted.ptg", "latent.ptw", "weights.ptw",
                 "sds_log.csv", "refine_log.csv", "reference.png"):
        assert (out / name).exists(), name


def test_generate_skip_refine_keeps_distilled_grid(cfg_path, tmp_path):
    out = tmp_path / "gen"
    assert run("generate", "--config", cfg_path, "--out", out, "--skip-refine") == 0
    assert (out / "grid.ptg").read_bytes() == (out / "grid_sds.ptg").read_bytes()
    assert not (out / "refine_log.csv").exists()


def test_generate_is_reproducible(cfg_path, tmp_path):
    for d in ("a", "b"):
        assert run("generate", "--config", cfg_path, "--out", tmp_path / d, "--deterministic") == 0
    assert (tmp_path / "a" / "grid.ptg").read_bytes() == (tmp_path / "b" / "grid.ptg").read_bytes()


def test_generate_from_init_grid(cfg_path, tmp_path):
    assert run("generate", "--config", cfg_path, "--out", tmp_path / "a", "--skip-refine") == 0
    init = tmp_path / "a" / "grid_inverted.ptg"
    assert run("generate", "--config", cfg_path, "--out", tmp_path / "b", "--skip-refine",
               "--init-grid", init) == 0
    assert (tmp_path / "a" / "grid_sds.ptg").read_bytes() == (tmp_path / "b" / "grid_sds.ptg").read_bytes()


def test_generate_with_unreachable_remote_fails_cleanly(cfg_path, tmp_path, capsys):
    code = run("generate", "--config", cfg_path, "--out", tmp_path / "x",
               "--provider", "remote:http://127.0.0.1:9")
    assert code == 2
    assert "unavailable" in capsys.readouterr().err


def test_fit_synthetic_and_rerun_identical(cfg_path, tmp_path, capsys):
    for d in ("a", "b"):
        assert run("fit", "--config", cfg_path, "--out", tmp_path / d, "--deterministic") == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["steps"] == 5 and "held_out_psnr" in summary
    a = (tmp_path / "a" / "loss_log.csv").read_text()
    assert a == (tmp_path / "b" / "loss_log.csv").read_text()
    assert len(a.strip().splitlines()) == 6


def write_views(d, n):
    d.mkdir()
    rows = ["file,azimuth,polar"]
    for i in range(n):
        pio.save_image(d / f"v{i}.png", np.full((8, 8, 3), 0.2 * i, np.float32))
        rows.append(f"v{i}.png,{90 * i},90")
    (d / "poses.csv").write_text("\n".join(rows) + "\n")


def test_fit_posed_views(cfg_path, tmp_path):
    write_views(tmp_path / "views", 3)
    assert run("fit", "--config", cfg_path, "--out", tmp_path / "o", "--views", tmp_path / "views") == 0
    assert pio.load_grid(tmp_path / "o" / "grid.ptg").resolutions == [4, 8]


def test_fit_single_view_rejected(cfg_path, tmp_path, capsys):
    write_views(tmp_path / "views", 1)
    code = run("fit", "--config", cfg_path, "--out", tmp_path / "o", "--views", tmp_path / "views")
    assert code == 2
    assert "need >= 2 views" in capsys.readouterr().err


def test_bad_config_reports_line(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("[render]\nimage_size = -3\n")
    assert run("fit", "--config", p) == 2
    assert "line 2" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert run("gradcheck", "--seed", 1) == 0
    assert capsys.readouterr().out.startswith("PASS")


def test_mesh_of_zero_grid_is_empty(cfg_path, tmp_path, capsys):
    assert run("mesh", "--config", cfg_path, "--out", tmp_path, "--resolution", 16) == 0
    assert "empty surface" in capsys.readouterr().out
    assert (tmp_path / "mesh.obj").read_text().startswith("# vertices 0 faces 0")


def test_spectrum_of_constant_image(tmp_path, capsys):
    pio.save_image(tmp_path / "flat.png", np.full((16, 16, 3), 0.4, np.float32))
    assert run("spectrum", "--image", tmp_path / "flat.png", "--out", tmp_path) == 0
    assert "high_band_ratio 0 " in capsys.readouterr().out
    assert (tmp_path / "spectrum.csv").exists()


def test_render_command(cfg_path, tmp_path):
    assert run("generate", "--config", cfg_path, "--out", tmp_path / "g", "--skip-refine") == 0
    assert run("render", "--config", cfg_path, "--out", tmp_path / "r", "--grid", tmp_path / "g" / "grid.ptg",
               "--weights", tmp_path / "g" / "weights.ptw", "--latent", tmp_path / "g" / "latent.ptw",
               "--azimuth", 45) == 0
    assert pio.load_image(tmp_path / "r" / "render.png").shape == (8, 8, 3)


def test_missing_grid_file(cfg_path, tmp_path):
    assert run("render", "--config", cfg_path, "--grid", tmp_path / "nope.ptg") == 2


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "pyramid_trigrid.cli", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0
    for cmd in ("fit", "generate", "ablate", "gradcheck", "mesh", "spectrum", "render"):
        assert cmd in res.stdout


def test_ablate_command_writes_report(tmp_path, capsys):
    assert run("ablate", "--out", tmp_path, "--steps", 2) == 0
    rep = json.loads((tmp_path / "ablation.json").read_text())
    assert rep["single"]["resolutions"] == [64]
    assert rep["pyramid"]["resolutions"] == [8, 16, 32, 64]
    assert "high-band ratio" in capsys.readouterr().out
