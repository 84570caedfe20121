import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from ampdehaze import hazedata as hd
from ampdehaze.metrics import dark_channel


@pytest.mark.parametrize("suffix", [".png", ".ppm"])
def test_image_round_trip(tmp_path, rng, suffix):
    img = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    hd.save_image(img, tmp_path / f"a{suffix}")
    np.testing.assert_array_equal(hd.load_image(tmp_path / f"a{suffix}"), img)


def test_white_png(tmp_path):
    Image.new("RGB", (1, 1), (255, 255, 255)).save(tmp_path / "w.png")
    assert hd.load_image(tmp_path / "w.png").tolist() == [[[255, 255, 255]]]


def test_image_errors(tmp_path):
    with pytest.raises(hd.ImageNotFoundError, match="not found"):
        hd.load_image(tmp_path / "missing.png")
    (tmp_path / "x.bmp").write_bytes(b"BM....")
    with pytest.raises(hd.UnsupportedFormatError):
        hd.load_image(tmp_path / "x.bmp")
    hd.save_image(np.zeros((4, 4, 3), np.uint8), tmp_path / "t.ppm")
    data = (tmp_path / "t.ppm").read_bytes()
    (tmp_path / "t.ppm").write_bytes(data[:-5])
    with pytest.raises(hd.TruncatedImageError):
        hd.load_image(tmp_path / "t.ppm")
    hd.save_image(np.zeros((8, 8, 3), np.uint8), tmp_path / "t.png")
    (tmp_path / "t.png").write_bytes((tmp_path / "t.png").read_bytes()[:30])
    with pytest.raises(hd.TruncatedImageError):
        hd.load_image(tmp_path / "t.png")


def test_rgb8_tensor_round_trip(rng):
    img = rng.integers(0, 256, (6, 4, 3), dtype=np.uint8)
    np.testing.assert_array_equal(hd.to_rgb8(hd.to_tensor(img)), img)


def test_haze_examples(rng):
    clear = rng.random((3, 4, 4))
    depth = rng.random((4, 4))
    np.testing.assert_array_equal(hd.synthesize_haze(hd.SceneSpec(clear, depth, (0.9, 0.9, 0.9), 0.0)), clear)
    far = hd.synthesize_haze(hd.SceneSpec(clear, np.full((4, 4), 1e4), (0.7, 0.8, 0.9), 1.0))
    np.testing.assert_allclose(far, np.broadcast_to(np.array([0.7, 0.8, 0.9])[:, None, None], far.shape), atol=1e-6)
    one = hd.synthesize_haze(hd.SceneSpec(np.full((3, 1, 1), 0.2), np.full((1, 1), np.log(2)), (0.8,) * 3, 1.0))
    np.testing.assert_allclose(one, 0.5)


def test_haze_rejects_negative():
    clear = np.zeros((3, 2, 2))
    with pytest.raises(ValueError):
        hd.synthesize_haze(hd.SceneSpec(clear, np.ones((2, 2)), (0.5,) * 3, -0.1))
    with pytest.raises(ValueError):
        hd.synthesize_haze(hd.SceneSpec(clear, -np.ones((2, 2)), (0.5,) * 3, 0.1))


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 3), st.integers(0, 2 ** 16))
def test_haze_within_convex_hull(beta, seed):
    rng = np.random.default_rng(seed)
    clear = rng.random((3, 5, 5))
    air = tuple(rng.random(3))
    out = hd.synthesize_haze(hd.SceneSpec(clear, rng.random((5, 5)) * 3, air, beta))
    a = np.array(air)[:, None, None]
    assert np.all(out >= np.minimum(clear, a) - 1e-12)
    assert np.all(out <= np.maximum(clear, a) + 1e-12)


def test_haze_monotone_in_beta():
    rng = np.random.default_rng(3)
    for _ in range(5):
        spec = hd.toy_scene(rng, 32)
        means = [dark_channel(hd.synthesize_haze(hd.SceneSpec(spec.clear, spec.depth, spec.airlight, b)), 15).mean()
                 for b in np.linspace(0, 2, 6)]
        assert all(b >= a for a, b in zip(means, means[1:]))


def test_toy_dataset(tmp_path):
    a = hd.make_toy_dataset(tmp_path / "a", 7, 2, 32)
    hd.make_toy_dataset(tmp_path / "b", 7, 2, 32)
    assert len(a.hazy_paths) == 2 and len(a.clear_paths) == 2
    assert len(list((tmp_path / "a" / "hazy").iterdir())) + len(list((tmp_path / "a" / "clear").iterdir())) == 4
    for sub in ("hazy", "clear", "gt"):
        for p in sorted((tmp_path / "a" / sub).iterdir()):
            assert p.read_bytes() == (tmp_path / "b" / sub / p.name).read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["n_scenes"] == 2
    assert hd.load_image(a.hazy_paths[0]).shape == (32, 32, 3)
    with pytest.raises(ValueError):
        hd.make_toy_dataset(tmp_path / "c", 0, 1, 32)


def test_toy_hazy_darker_channel_higher(tmp_path):
    ds = hd.make_toy_dataset(tmp_path, 0, 6, 32)
    for h, g in zip(ds.hazy_paths, ds.gt_paths):
        assert dark_channel(ds.tensor(h)).mean() > dark_channel(ds.tensor(g)).mean()


@pytest.fixture
def small_index(tmp_path):
    return hd.make_toy_dataset(tmp_path, 0, 3, 32)


def test_sampling_deterministic(small_index):
    state = np.random.default_rng(5).bit_generator.state
    h1, c1, s1 = hd.sample_unpaired_batch(small_index, 4, 16, state)
    h2, c2, s2 = hd.sample_unpaired_batch(small_index, 4, 16, state)
    np.testing.assert_array_equal(h1, h2)
    np.testing.assert_array_equal(c1, c2)
    assert s1 == s2 and s1 != state
    assert h1.shape == (4, 3, 16, 16)


def test_constant_images_give_constant_patches(tmp_path):
    for sub in ("hazy", "clear"):
        (tmp_path / sub).mkdir()
        hd.save_image(np.full((20, 20, 3), 77, np.uint8), tmp_path / sub / "a.png")
    idx = hd.DatasetIndex.from_root(tmp_path)
    h, c, _ = hd.sample_unpaired_batch(idx, 8, 10, np.random.default_rng(0).bit_generator.state)
    assert np.all(h == h.flat[0]) and np.all(c == h.flat[0])


def test_flip_frequency():
    rng = np.random.default_rng(11)
    img = np.arange(2 * 2 * 3, dtype=float).reshape(3, 2, 2)
    flips = np.array([hd._crop_flip(img, 2, rng)[1:] for _ in range(10000)])
    assert np.all((flips.mean(axis=0) > 0.47) & (flips.mean(axis=0) < 0.53))


def test_patch_too_large(small_index):
    with pytest.raises(ValueError, match="scene_0000"):
        hd.sample_unpaired_batch(small_index, 1, 64, np.random.default_rng(0).bit_generator.state)
