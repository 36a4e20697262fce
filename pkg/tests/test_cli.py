import json

import numpy as np
import pytest

from slicesplat.cli import main, read_config_file
from slicesplat.codec import read_container
from slicesplat.core import GaussianSet, read_checkpoint, write_checkpoint
from slicesplat.io import load_volume
from slicesplat.render import SliceImage


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"init_count": 400, "log_interval": 50}))
    assert run("--seed", 0, "phantom", "--size", 20, "--out", d / "vol") == 0
    assert run("--seed", 0, "fit", "--volume", d / "vol", "--config", cfg, "--iterations", 150,
               "--out", d / "fit.gpile") == 0
    assert run("compress", "--ckpt", d / "fit.gpile", "--out", d / "fit.gpilc") == 0
    assert run("decompress", "--in", d / "fit.gpilc", "--out", d / "back.gpile") == 0
    assert run("voxelize", "--ckpt", d / "back.gpile", "--dims", "20,20,20", "--out", d / "pred") == 0
    assert run("eval", "--pred", d / "pred", "--gt", d / "vol", "--ckpt", d / "fit.gpile",
               "--container", d / "fit.gpilc", "--out", d / "metrics.json") == 0
    return d


def test_pipeline_outputs(pipeline):
    d = pipeline
    assert load_volume(d / "vol").dims == (20, 20, 20)
    assert len(read_checkpoint(d / "vol" / "oracle.gpile")) == 5
    fitted = read_checkpoint(d / "fit.gpile")
    info = json.loads((d / "fit.gpile.fit.json").read_text())
    assert info["sigma_z"] == 1.0 and info["count"] == len(fitted)
    assert info["config"]["fit_config"]["init_count"] == 400
    assert info["config"]["fit_config"]["iterations"] == 150
    log = [json.loads(line) for line in (d / "fit.gpile.log.ndjson").read_text().splitlines()]
    assert [r["iter"] for r in log] == [50, 100, 150]
    assert set(log[0]) == {"iter", "loss", "count", "psnr2d"}
    assert read_container(d / "fit.gpilc").count == len(fitted)
    metrics = json.loads((d / "metrics.json").read_text())
    assert set(metrics) == {"psnr2d_mean", "ssim2d_mean", "psnr3d", "ssim3d", "gaussian_count", "checkpoint_bytes",
                            "container_bytes", "ratio_vs_checkpoint", "ratio_vs_voxels", "fit_seconds"}
    assert metrics["gaussian_count"] == len(fitted)
    assert metrics["container_bytes"] == (d / "fit.gpilc").stat().st_size
    assert metrics["ratio_vs_checkpoint"] == pytest.approx(metrics["checkpoint_bytes"] / metrics["container_bytes"])
    assert metrics["fit_seconds"] > 0


def test_render_pgm_and_raw(pipeline):
    d = pipeline
    assert run("render", "--ckpt", d / "fit.gpile", "--slice", 10, "--volume", d / "vol", "--out", d / "s.pgm") == 0
    img = SliceImage.load_pgm(d / "s.pgm")
    assert img.pixels.shape == (20, 20) and img.pixels.max() > 0
    assert run("render", "--ckpt", d / "fit.gpile", "--slice", 10, "--dims", "20,20,20", "--raw",
               "--out", d / "s.raw") == 0
    raw = np.frombuffer((d / "s.raw").read_bytes(), "<f4").reshape(20, 20)
    np.testing.assert_allclose(np.clip(raw, 0, 1), img.pixels, atol=1 / 65535)


def test_resolved_config_is_echoed(pipeline, capsys):
    d = pipeline
    run("voxelize", "--ckpt", d / "fit.gpile", "--dims", "4,4,4", "--support", 2.5, "--out", d / "tiny")
    first = capsys.readouterr().out.splitlines()[0]
    cfg = json.loads(first)["config"]
    assert cfg["command"] == "voxelize" and cfg["support"] == 2.5 and cfg["dims"] == [4, 4, 4]


def test_render_empty_checkpoint_is_black(tmp_path):
    write_checkpoint(GaussianSet.empty([[0, 0, 0], [8, 8, 8]]), tmp_path / "e.gpile")
    assert run("render", "--ckpt", tmp_path / "e.gpile", "--slice", 3, "--out", tmp_path / "e.pgm") == 0
    img = SliceImage.load_pgm(tmp_path / "e.pgm")
    assert img.pixels.shape == (8, 8) and not img.pixels.any()


def test_exit_codes(tmp_path, capsys):
    assert run("bogus") == 1
    assert "usage" in capsys.readouterr().err
    assert run("render", "--ckpt", tmp_path / "x", "--out", tmp_path / "y") == 1
    assert run("voxelize", "--ckpt", tmp_path / "x", "--dims", "1,2", "--out", tmp_path / "y") == 1
    assert run("fit", "--volume", tmp_path / "x", "--out", tmp_path / "y", "--bogus-flag") == 1
    assert run("--help") == 0
    capsys.readouterr()
    assert run("render", "--ckpt", tmp_path / "missing.gpile", "--slice", 0, "--out", tmp_path / "y") == 2
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and err.startswith("error:")
    (tmp_path / "bad.gpilc").write_bytes(b"GPILC" + b"\0" * 10)
    assert run("decompress", "--in", tmp_path / "bad.gpilc", "--out", tmp_path / "o") == 2


def test_config_precedence(tmp_path):
    run("phantom", "--size", 12, "--out", tmp_path / "vol")
    (tmp_path / "cfg.toml").write_text("# fit settings\n[fit]\ninit_count = 50\niterations = 40\n"
                                       "densify_start = 5\ndensify_end = 30\ninit_mode = 'grid'\n")
    assert read_config_file(tmp_path / "cfg.toml") == {"init_count": 50, "iterations": 40, "densify_start": 5,
                                                       "densify_end": 30, "init_mode": "grid"}
    assert run("fit", "--volume", tmp_path / "vol", "--config", tmp_path / "cfg.toml", "--init-count", 60,
               "--sigma-z", 2.5, "--out", tmp_path / "f.gpile") == 0
    info = json.loads((tmp_path / "f.gpile.fit.json").read_text())
    fc = info["config"]["fit_config"]
    assert (fc["init_count"], fc["iterations"], fc["densify_end"], fc["init_mode"]) == (60, 40, 30, "grid")
    assert info["sigma_z"] == 2.5
    (tmp_path / "bad.json").write_text('{"no_such_field": 1}')
    assert run("fit", "--volume", tmp_path / "vol", "--config", tmp_path / "bad.json", "--out",
               tmp_path / "g.gpile") == 2


def test_noisy_phantom_writes_clean_copy(tmp_path):
    assert run("--seed", 5, "phantom", "--size", 12, "--noise", 0.05, "--out", tmp_path / "v") == 0
    noisy = load_volume(tmp_path / "v").data
    clean = load_volume(tmp_path / "v" / "clean").data
    assert not np.array_equal(noisy, clean)
    spec = json.loads((tmp_path / "v" / "phantom_spec.json").read_text())
    assert spec["rng_seed"] == 5 and spec["noise_sigma"] == 0.05


def test_phantom_from_spec_file(tmp_path):
    spec = {"dims": [10, 10, 10], "blobs": [{"center": [5, 5, 5], "scale": [1.5, 1.5, 1.5], "amplitude": 1.0}]}
    (tmp_path / "s.json").write_text(json.dumps(spec))
    assert run("phantom", "--spec", tmp_path / "s.json", "--out", tmp_path / "v") == 0
    assert load_volume(tmp_path / "v").data[5, 5, 5] == pytest.approx(1.0, abs=1e-6)


def test_commands_are_idempotent(tmp_path):
    def once(d):
        assert run("--seed", 1, "phantom", "--size", 12, "--noise", 0.02, "--out", d / "vol") == 0
        assert run("--seed", 1, "fit", "--volume", d / "vol", "--iterations", 60, "--init-count", 100,
                   "--out", d / "f.gpile") == 0
        assert run("compress", "--ckpt", d / "f.gpile", "--out", d / "f.gpilc") == 0
        assert run("decompress", "--in", d / "f.gpilc", "--out", d / "b.gpile") == 0
        assert run("render", "--ckpt", d / "f.gpile", "--slice", 6, "--out", d / "s.pgm") == 0
        assert run("voxelize", "--ckpt", d / "b.gpile", "--dims", "12,12,12", "--out", d / "pred") == 0
        assert run("eval", "--pred", d / "pred", "--gt", d / "vol", "--out", d / "m.json") == 0

    a, b = tmp_path / "a", tmp_path / "b"
    once(a)
    once(b)
    names = ["vol/volume.raw", "vol/oracle.gpile", "vol/clean/volume.raw", "f.gpile", "f.gpile.log.ndjson",
             "f.gpilc", "b.gpile", "s.pgm", "pred/volume.raw", "m.json"]
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_module_entry_point():
    import subprocess
    import sys

    out = subprocess.run([sys.executable, "-m", "slicesplat", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("slicesplat ")
    bad = subprocess.run([sys.executable, "-m", "slicesplat", "nope"], capture_output=True, text=True)
    assert bad.returncode == 1
