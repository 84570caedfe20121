import csv
import subprocess
import sys
import time

import numpy as np
import pytest

from ampdehaze import cli, trainer
from ampdehaze.hazedata import load_tensor, save_image, to_rgb8
from ampdehaze.spectral import dft2


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert cli.main(["synth", "--out", str(root), "--scenes", "6", "--size", "32", "--seed", "3"]) == 0
    return root


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory, toy):
    p = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    p.write_text(f"""toy = true
epochs = 1
batch = 2
patch = 16
base_channels = 4
blocks_per_scale = 1,1
denoiser_hidden = 4
denoiser_blocks = 1
disc_channels = 4
nce_patches = 8
nce_proj_dim = 8
T = 2
data_root = {toy}
""")
    return p


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_synth_cardinality_and_determinism(toy, tmp_path, capsys):
    assert len(list((toy / "hazy").glob("*.png"))) == 6
    assert len(list((toy / "clear").glob("*.png"))) == 6
    assert load_tensor(next((toy / "hazy").glob("*.png"))).shape == (3, 32, 32)
    again = tmp_path / "again"
    cli.main(["synth", "--out", str(again), "--scenes", "6", "--size", "32", "--seed", "3"])
    assert (again / "manifest.json").read_bytes() == (toy / "manifest.json").read_bytes()
    two = tmp_path / "two"
    cli.main(["synth", "--out", str(two), "--scenes", "2", "--size", "8", "--seed", "0"])
    assert len(list((two / "hazy").glob("*.png"))) + len(list((two / "clear").glob("*.png"))) == 4
    assert "# seed = 0" in capsys.readouterr().out


def test_swap(toy, tmp_path):
    hazy = sorted((toy / "hazy").glob("*.png"))
    out = tmp_path / "self.png"
    assert cli.main(["swap", "--content", str(hazy[0]), "--donor", str(hazy[0]), "--out", str(out)]) == 0
    assert np.abs(load_tensor(out) - load_tensor(hazy[0])).max() <= 1 / 255 + 1e-9
    # low-contrast inputs keep the swapped image inside [0, 1], so saving
    # only quantizes and never clips
    rng = np.random.default_rng(0)
    content, donor = tmp_path / "c.png", tmp_path / "d.png"
    save_image(to_rgb8(0.5 + 0.1 * rng.uniform(-1, 1, (3, 32, 32))), content)
    save_image(to_rgb8(0.5 + 0.1 * rng.uniform(-1, 1, (3, 32, 32))), donor)
    out2 = tmp_path / "swap.png"
    assert cli.main(["swap", "--content", str(content), "--donor", str(donor), "--out", str(out2)]) == 0
    got = np.abs(dft2(load_tensor(out2).astype(np.float64)))
    want = np.abs(dft2(load_tensor(donor).astype(np.float64)))
    # per-pixel normalized amplitude (1/HW convention)
    assert np.abs(got - want).max() / (32 * 32) < 1e-3
    small = tmp_path / "small.png"
    save_image(to_rgb8(np.zeros((3, 8, 8))), small)
    assert cli.main(["swap", "--content", str(hazy[0]), "--donor", str(small), "--out", str(tmp_path / "x.png")]) == 2
    assert not (tmp_path / "x.png").exists()


def test_dcstats(toy, tmp_path):
    out = tmp_path / "dc.csv"
    assert cli.main(["dcstats", "--hazy", str(toy / "hazy"), "--clear", str(toy / "gt"),
                     "--synclear", "on", "--out", str(out)]) == 0
    assert len(rows(out)) == 6
    hist = rows(tmp_path / "dc_hist.csv")
    for col in ("hazy", "clear", "synclear"):
        assert sum(int(r[col]) for r in hist) == 6 * 32 * 32
    assert cli.main(["dcstats", "--hazy", str(toy / "hazy"), "--clear", str(toy / "gt"),
                     "--synclear", "off", "--out", str(tmp_path / "off.csv")]) == 0
    assert "synclear_dc" not in rows(tmp_path / "off.csv")[0]
    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli.main(["dcstats", "--hazy", str(empty), "--clear", str(toy / "gt"), "--out", str(out)]) == 2


def test_train_stage2_without_init(cfg_file, tmp_path):
    out = tmp_path / "s2.ckpt"
    assert cli.main(["train", "--stage", "2", "--config", str(cfg_file), "--seed", "0", "--out", str(out)]) == 1
    assert list(tmp_path.iterdir()) == []


def test_seed_is_required(cfg_file, tmp_path):
    assert cli.main(["train", "--stage", "1", "--config", str(cfg_file), "--out", str(tmp_path / "a")]) == 1
    assert cli.main(["dehaze", "--ckpt", "x", "--in", "y", "--out", "z"]) == 1


def test_train_dehaze_eval_pipeline(cfg_file, toy, tmp_path, capsys):
    s1, s2 = tmp_path / "s1.ckpt", tmp_path / "s2.ckpt"
    base = ["--config", str(cfg_file), "--seed", "0"]
    assert cli.main(["train", "--stage", "1", *base, "--out", str(s1)]) == 0
    header = capsys.readouterr().out
    assert "# seed = 0" in header and "# stage = 1" in header
    assert rows(tmp_path / "s1.csv")[0].keys() == {"epoch", "step", "l_gan", "l_nce", "l_diff", "total"}
    assert cli.main(["train", "--stage", "2", *base, "--init", str(s1), "--out", str(s2)]) == 0
    # stage-2 checkpoint is not a valid stage-1 init for another stage 2
    assert cli.main(["train", "--stage", "2", *base, "--init", str(s2), "--out", str(tmp_path / "bad")]) == 2
    # dehaze with a stage-1 checkpoint fails explicitly
    assert cli.main(["dehaze", "--ckpt", str(s1), "--in", str(toy / "hazy"), "--out", str(tmp_path / "o"),
                     "--seed", "1"]) == 2
    o1, o2 = tmp_path / "o1", tmp_path / "o2"
    assert cli.main(["dehaze", "--ckpt", str(s2), "--in", str(toy / "hazy"), "--out", str(o1), "--seed", "1"]) == 0
    assert cli.main(["dehaze", "--ckpt", str(s2), "--in", str(toy / "hazy"), "--out", str(o2), "--seed", "1",
                     "--workers", "3"]) == 0
    for p in o1.iterdir():
        assert p.read_bytes() == (o2 / p.name).read_bytes()
    ev = tmp_path / "ev.csv"
    assert cli.main(["eval", "--pred", str(o1), "--ref", str(toy / "gt"), "--out", str(ev)]) == 0
    assert len(rows(ev)) == 6


def test_eval_identity(toy, tmp_path):
    out = tmp_path / "id.csv"
    assert cli.main(["eval", "--pred", str(toy / "gt"), "--ref", str(toy / "gt"), "--out", str(out)]) == 0
    for r in rows(out):
        assert r["psnr"] == "inf" and float(r["ssim"]) == 1.0


def test_io_errors(tmp_path):
    assert cli.main(["eval", "--pred", str(tmp_path / "nope"), "--ref", str(tmp_path), "--out", "x.csv"]) == 4
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochz = 1\n")
    assert cli.main(["train", "--stage", "1", "--config", str(bad), "--seed", "0", "--out", "x"]) == 1
    garbage = tmp_path / "g.ckpt"
    garbage.write_bytes(b"not a checkpoint")
    assert cli.main(["dehaze", "--ckpt", str(garbage), "--in", str(tmp_path), "--out", "o", "--seed", "0"]) == 2


def test_diverged_run_keeps_last_good(cfg_file, tmp_path, monkeypatch):
    def boom(cfg, dataset, init=None, progress=None):
        raise trainer.TrainingDiverged("nan", trainer.Models(cfg, False).checkpoint(1, {"epoch": 0}))

    monkeypatch.setattr(trainer, "train", boom)
    out = tmp_path / "d.ckpt"
    assert cli.main(["train", "--stage", "1", "--config", str(cfg_file), "--seed", "0", "--out", str(out)]) == 3
    assert not out.exists()
    assert trainer.load_checkpoint(tmp_path / "d.ckpt.last-good").meta["epoch"] == 0


def test_gradcheck_entry_point():
    t = time.time()
    proc = subprocess.run([sys.executable, "-m", "ampdehaze.cli", "gradcheck"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert time.time() - t < 60
    assert "FAIL" not in proc.stdout and proc.stdout.count("PASS") >= 20
