import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ampdehaze import freqdehaze as fd
from ampdehaze.spectral import dft2
from ampdehaze.tensorcore import Conv2d, ShapeError


def spectra(rng, n=3, shape=(4, 8, 8)):
    return [np.abs(dft2(rng.standard_normal(shape))) for _ in range(n)]


@pytest.mark.parametrize("per_channel", [False, True])
def test_alignment_hits_targets(rng, per_channel):
    for ah, ac in zip(spectra(rng, 10), spectra(rng, 10)):
        z = fd.amplitude_residual(ah, ac, per_channel)
        got = fd.amplitude_stats(ah + z, per_channel)
        want = fd.amplitude_stats(ac, per_channel)
        np.testing.assert_allclose(got.mean, want.mean, rtol=1e-10)
        np.testing.assert_allclose(got.std, want.std, rtol=1e-10)


def test_self_alignment_is_zero(rng):
    a = spectra(rng, 1)[0]
    assert np.abs(fd.amplitude_residual(a, a)).max() < 1e-12


def test_hand_alignment():
    ah = np.array([[[1.0, 3.0]]])          # mean 2, std 1
    ac = np.array([[[0.0, 10.0]]])         # mean 5, std 5
    np.testing.assert_allclose(ah + fd.amplitude_residual(ah, ac), [[[0.0, 10.0]]])


def test_degenerate_spectrum(rng):
    flat = np.ones((2, 4, 4))
    with pytest.raises(fd.DegenerateSpectrumError):
        fd.amplitude_residual(flat, spectra(rng, 1, (2, 4, 4))[0])
    batch = np.stack([flat, spectra(rng, 1, (2, 4, 4))[0]])
    z = fd.batch_amplitude_residual(batch, batch[::-1])
    assert np.all(z[0] == 0) and np.any(z[1] != 0)


def test_residual_shape_mismatch():
    with pytest.raises(ShapeError):
        fd.amplitude_residual(np.ones((2, 4, 4)), np.ones((2, 4, 5)))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12), st.data())
def test_sap_shapes_and_constants(h, w, data):
    oh = data.draw(st.integers(1, h))
    ow = data.draw(st.integers(1, w))
    z = np.full((2, h, w), 3.0)
    out = fd.sap_pool(z, oh, ow)
    assert out.shape == (2, oh, ow)
    # average pooling keeps a constant, the area factor rescales it
    np.testing.assert_allclose(out, 3.0 * oh * ow / (h * w))


def test_sap_identity_and_adjoint(rng):
    z = rng.standard_normal((2, 8, 8))
    assert fd.sap_pool(z, 8, 8) is z
    g = rng.standard_normal((2, 3, 5))
    assert np.isclose(np.sum(fd.sap_pool(z, 3, 5) * g), np.sum(z * fd.sap_pool_backward(g, 8, 8)))


def test_fcl_identity_with_zero_residual(rng):
    feats = rng.standard_normal((2, 4, 8, 6))
    conv = Conv2d(4, 4, 1, init="zero").astype(np.float64)
    out, cache = fd.fcl_forward(feats, np.zeros_like(feats), conv)
    np.testing.assert_allclose(out, feats, atol=1e-12)
    assert cache[-1] < 1e-12


def test_fcl_amplitude_edit(rng):
    feats = rng.standard_normal((1, 2, 8, 8))
    conv = Conv2d(2, 2, 1, init="zero").astype(np.float64)
    z = np.abs(rng.standard_normal(feats.shape))
    # a Hermitian-symmetric residual keeps the output real: compare amplitudes
    zs = 0.5 * (z + np.roll(z[..., ::-1, ::-1], 1, axis=(-2, -1)))
    out, cache = fd.fcl_forward(feats, zs, conv)
    np.testing.assert_allclose(np.abs(dft2(out)), np.abs(dft2(feats)) + zs, atol=1e-9)


def test_pcm_zero_conv_keeps_phase(rng):
    ph = rng.uniform(-np.pi, np.pi, (1, 3, 4, 4))
    conv = Conv2d(3, 3, 1, init="zero").astype(np.float64)
    out, _ = fd.pcm_forward(ph, rng.standard_normal(ph.shape), conv)
    np.testing.assert_array_equal(out, ph)


def small_cfg():
    return fd.NetworkConfig(base_channels=4, blocks_per_scale=(2, 1, 1), dec_blocks=1)


def test_network_identity_at_init(rng):
    net = fd.DehazeNet(small_cfg(), rng)
    x = rng.random((2, 3, 16, 12)).astype(np.float32)
    (_, f1), _ = net.encode(x)
    out, _ = net.forward(x, np.zeros_like(f1))
    np.testing.assert_allclose(out, x, atol=1e-6)


def test_network_shape_errors(rng):
    net = fd.DehazeNet(small_cfg(), rng)
    with pytest.raises(ShapeError, match="multiples of 4"):
        net.forward(np.zeros((1, 3, 10, 8), np.float32), np.zeros((1, 4, 10, 8), np.float32))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 3, 8, 8), np.float32), np.zeros((1, 4, 4, 4), np.float32))
    with pytest.raises(ValueError):
        fd.NetworkConfig(blocks_per_scale=()).validate()


def test_encode_features_and_wrapper(rng):
    net = fd.DehazeNet(small_cfg(), rng)
    img = rng.random((3, 8, 8)).astype(np.float32)
    feats, (amp, ph) = fd.encode_features(img, net)
    assert feats.shape == amp.shape == ph.shape == (4, 8, 8)
    out = fd.dehaze_forward(img, np.zeros_like(feats), net)
    assert out.shape == img.shape


def test_network_gradients():
    from ampdehaze.gradsuite import _dehaze_net
    assert _dehaze_net(np.random.default_rng(2)) < 1e-5


def test_zero_residual_equals_bypassed_network(rng):
    net = fd.DehazeNet(small_cfg(), rng)
    for name, p in net.named_params():
        if not name.startswith("pcm"):
            p.value = (0.1 * rng.standard_normal(p.value.shape)).astype(p.value.dtype)
    x = rng.random((1, 3, 16, 16)).astype(np.float32)
    (_, f1), _ = net.encode(x)
    with_fcl, _ = net.forward(x, np.zeros_like(f1))
    bypass, _ = net.forward(x, np.zeros_like(f1), use_fcl=False)
    assert not np.allclose(with_fcl, x)
    np.testing.assert_allclose(with_fcl, bypass, atol=1e-5)
