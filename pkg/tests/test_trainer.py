import dataclasses

import numpy as np
import pytest

from ampdehaze import trainer as tr
from ampdehaze.hazedata import load_tensor, make_toy_dataset
from ampdehaze.tensorcore import ShapeError


def tiny(**kw):
    base = dict(epochs=2, batch=2, patch=16, base_channels=4, blocks_per_scale=(1, 1),
                denoiser_hidden=4, denoiser_blocks=1, emb_dim=4, disc_channels=4,
                nce_patches=8, nce_proj_dim=8, T=2)
    base.update(kw)
    return tr.toy_config(**base)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    return make_toy_dataset(tmp_path_factory.mktemp("toy"), seed=0, n_scenes=6, size=24)


@pytest.fixture(scope="module")
def stage1(data):
    return tr.train_stage1(tiny(), data)


@pytest.fixture(scope="module")
def stage2(data, stage1):
    return tr.train_stage2(tiny(), data, stage1.checkpoint)


# ---------------------------------------------------------------- config

def test_config_round_trip():
    cfg = tiny(lambda_gan=0.5, per_channel_stats=True)
    again = tr.parse_config(cfg.to_text())
    assert again == cfg


def test_config_parse_comments_and_toy():
    cfg = tr.parse_config("# comment\ntoy = true\nepochs = 3  # inline\nlambda_nce = 2.5\n")
    assert cfg.toy and cfg.epochs == 3 and cfg.lambda_nce == 2.5 and cfg.patch == 32


@pytest.mark.parametrize("text, match", [
    ("epochz = 3\n", "epochz"),
    ("epochs = three\n", "epochs"),
    ("no equals sign\n", "line 1"),
])
def test_config_errors(text, match):
    with pytest.raises(tr.ConfigError, match=match):
        tr.parse_config(text)


@pytest.mark.parametrize("kw", [dict(patch=31), dict(patch=4, blocks_per_scale=(1,)), dict(nce_patches=10 ** 6),
                                dict(stage=3), dict(batch=0)])
def test_config_validation(kw):
    with pytest.raises(tr.ConfigError):
        tiny(**kw).validate()


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_bytes_stable(stage1, tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    tr.save_checkpoint(stage1.checkpoint, a)
    loaded = tr.load_checkpoint(a)
    tr.save_checkpoint(loaded, b)
    assert a.read_bytes() == b.read_bytes()
    for k, v in stage1.checkpoint.tensors.items():
        np.testing.assert_array_equal(loaded.tensors[k], v)
        assert loaded.tensors[k].dtype == v.dtype
    assert loaded.meta == stage1.checkpoint.meta


def test_checkpoint_errors(stage1, tmp_path):
    raw = stage1.checkpoint.to_bytes()
    p = tmp_path / "t.ckpt"
    p.write_bytes(raw[:len(raw) // 2])
    with pytest.raises(tr.TruncatedCheckpointError, match="tensor '"):
        tr.load_checkpoint(p)
    p.write_bytes(b"PNG!" + raw[4:])
    with pytest.raises(tr.BadMagicError):
        tr.load_checkpoint(p)
    p.write_bytes(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
    with pytest.raises(tr.VersionError):
        tr.load_checkpoint(p)
    p.write_bytes(b"FR")
    with pytest.raises(tr.BadMagicError):
        tr.load_checkpoint(p)


def test_incompatible_init_lists_shapes(stage1, data):
    with pytest.raises(ShapeError, match="model .* vs checkpoint"):
        tr.train_stage2(tiny(base_channels=8), data, stage1.checkpoint)
    with pytest.raises(tr.CheckpointError):
        tr.train_stage2(tiny(), data, None)


# ---------------------------------------------------------------- training

def test_stage1_deterministic(stage1, data):
    again = tr.train_stage1(tiny(), data)
    assert again.checkpoint.to_bytes() == stage1.checkpoint.to_bytes()


def test_stage1_log(stage1, tmp_path):
    assert len(stage1.log) == 2 * 3
    stage1.write_log(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,l_gan,l_nce,l_diff,total"
    assert len(lines) == 7
    for row in stage1.log:
        assert row[4] == 0.0
        assert row[5] == pytest.approx(row[2] + row[3])


def test_stage2_init_copies_weights(stage1, data):
    ckpt = stage1.checkpoint
    cfg = tiny(stage=2)
    models = tr.Models(cfg, with_denoiser=True)
    models.load_weights(ckpt.tensors, ("net.", "disc.", "nce."))
    for name, p in models.all_named_params():
        if not name.startswith("den."):
            np.testing.assert_array_equal(p.value, ckpt.tensors[name])
    # identical dehazing output to the stage-1 model before any stage-2 step
    m1 = tr.Models.from_checkpoint(ckpt)
    x = load_tensor(data.hazy_paths[0])
    np.testing.assert_array_equal(tr.infer_with_residual(x, m1), tr.infer_with_residual(x, models))


def test_stage2_runs(stage2):
    assert stage2.checkpoint.stage == 2
    assert any(k.startswith("den.") for k in stage2.checkpoint.tensors)
    for row in stage2.log:
        assert row[4] > 0
        assert row[5] == pytest.approx(row[2] + row[3] + row[4])


def test_zero_weights_freeze_network(data):
    cfg = tiny(epochs=1, lambda_gan=0.0, lambda_nce=0.0)
    init = tr.Models(cfg, with_denoiser=False).checkpoint(1)
    res = tr.train_stage1(cfg, data)
    for k, v in init.tensors.items():
        if k.startswith(("net.", "nce.")):
            np.testing.assert_array_equal(res.checkpoint.tensors[k], v)


def test_divergence_keeps_last_good(data, monkeypatch):
    real = tr.stage1_loss
    calls = {"n": 0}

    def flaky(*args):
        calls["n"] += 1
        losses, g = real(*args)
        if calls["n"] == 5:
            losses = dataclasses.replace(losses, total=float("nan"))
        return losses, g

    monkeypatch.setattr(tr, "stage1_loss", flaky)
    with pytest.raises(tr.TrainingDiverged) as info:
        tr.train_stage1(tiny(), data)
    assert info.value.last_good.meta["epoch"] == 1


def test_oracle_residual_matches_stage1(stage1, data):
    """Feeding the true residual makes stage 2 behave like more stage-1 training."""
    cfg = tiny(oracle_residual=True)
    s2 = tr.train_stage2(cfg, data, stage1.checkpoint)
    cont = tr.train_stage1(tiny(), data, init=stage1.checkpoint)
    assert all(row[4] == 0.0 for row in s2.log)
    a = np.mean([m["total"] for m in s2.epoch_means])
    b = np.mean([m["total"] for m in cont.epoch_means])
    assert abs(a - b) < 0.25 * b


# ---------------------------------------------------------------- inference

def test_infer_shapes_and_determinism(stage2):
    x = np.random.default_rng(0).random((3, 13, 22)).astype(np.float32)
    a = tr.infer(x, stage2.checkpoint, seed=4)
    b = tr.infer(x, stage2.checkpoint, seed=4)
    assert a.shape == x.shape
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_infer_needs_denoiser(stage1):
    with pytest.raises(tr.MissingDenoiserError, match="no denoiser"):
        tr.infer(np.zeros((3, 8, 8), np.float32), stage1.checkpoint, seed=0)


def test_sweep_dedupes_runs(data):
    rows = tr.lambda_sweep(tiny(epochs=1), data, values=(0.5, 1.0))
    assert len(rows) == 6
    lines = tr.sweep_orderings(rows)
    assert any("lambda_gan" in line for line in lines)
