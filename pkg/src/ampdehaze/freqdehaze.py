"""Frequency-compensated UNet dehazer.

The amplitude residual encoder (ARE) aligns the mean/std of a hazy feature
amplitude spectrum to that of a clear one; the residual ``z`` is then added
back to feature amplitudes inside a frequency compensation layer (FCL) at
every contracting scale, while the phase correction module (PCM) nudges the
phase with a softmax channel weighting driven by ``z``.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .spectral import dft2, phase_angle, real_idft2
from .tensorcore import (
    Conv2d,
    Module,
    ResBlock,
    ShapeError,
    adaptive_avg_pool,
    adaptive_avg_pool_backward,
    gap,
    gap_backward,
    softmax,
    softmax_backward,
    upsample2x,
    upsample2x_backward,
)

SIGMA_FLOOR = 1e-8


class DegenerateSpectrumError(ValueError):
    """Amplitude spread too small to normalise."""


# ---------------------------------------------------------------- ARE

class AmplitudeStats(NamedTuple):
    mean: np.ndarray
    std: np.ndarray


def amplitude_stats(amp, per_channel=False):
    """Population mean/std over (C, H, W), or over (H, W) per channel.

    Leading batch axes are kept; the reduced axes stay as size-1 dims so the
    stats broadcast against ``amp``.
    """
    amp = np.asarray(amp)
    if amp.size == 0:
        raise ValueError("empty amplitude array")
    axes = (-2, -1) if per_channel else (-3, -2, -1)
    mu = amp.mean(axis=axes, keepdims=True)
    sigma = np.sqrt(((amp - mu) ** 2).mean(axis=axes, keepdims=True))
    return AmplitudeStats(mu, sigma)


def align_amplitude(amp_h, stats_h, stats_c):
    """Affine map of ``amp_h`` onto the target mean/std."""
    if np.any(np.asarray(stats_h.std) <= SIGMA_FLOOR):
        raise DegenerateSpectrumError("hazy amplitude spread is below the floor (constant spectrum)")
    scale = stats_c.std / np.maximum(stats_h.std, SIGMA_FLOOR)
    return scale * (amp_h - stats_h.mean) + stats_c.mean


def amplitude_residual(amp_h, amp_c, per_channel=False):
    """``z`` such that ``amp_h + z`` carries the clear amplitude statistics."""
    amp_h = np.asarray(amp_h)
    amp_c = np.asarray(amp_c)
    if amp_h.shape != amp_c.shape:
        raise ShapeError(f"amplitude shapes differ: {amp_h.shape} vs {amp_c.shape}")
    sh = amplitude_stats(amp_h, per_channel)
    sc = amplitude_stats(amp_c, per_channel)
    return align_amplitude(amp_h, sh, sc) - amp_h


def batch_amplitude_residual(amp_h, amp_c, per_channel=False):
    """Per-sample residuals for a batch; degenerate samples get ``z = 0``."""
    z = np.zeros_like(amp_h)
    for i in range(amp_h.shape[0]):
        try:
            z[i] = amplitude_residual(amp_h[i], amp_c[i], per_channel)
        except DegenerateSpectrumError:
            pass
    return z


# ---------------------------------------------------------------- SAP

def sap_pool(z, out_h, out_w):
    """Pool a full-resolution residual to a coarser spectral grid.

    Pooling happens in the centred (fftshifted) layout so low frequencies
    map to low frequencies, and the result is scaled by the area ratio
    because DFT magnitudes grow with the number of pixels.
    """
    h, w = z.shape[-2:]
    if (out_h, out_w) == (h, w):
        return z
    centred = np.fft.fftshift(z, axes=(-2, -1))
    pooled = adaptive_avg_pool(centred, out_h, out_w) * ((out_h * out_w) / (h * w))
    return np.fft.ifftshift(pooled, axes=(-2, -1))


def sap_pool_backward(g, in_h, in_w):
    out_h, out_w = g.shape[-2:]
    if (out_h, out_w) == (in_h, in_w):
        return g
    gc = np.fft.fftshift(g, axes=(-2, -1)) * ((out_h * out_w) / (in_h * in_w))
    return np.fft.ifftshift(adaptive_avg_pool_backward(gc, in_h, in_w), axes=(-2, -1))


# ---------------------------------------------------------------- PCM / FCL

def pcm_forward(phase, z, conv):
    """``phase + conv(softmax(gap(z)) * phase)``."""
    if phase.shape[-3] != z.shape[-3]:
        raise ShapeError(f"channel mismatch: phase {phase.shape} vs residual {z.shape}")
    omega = softmax(gap(z), axis=-1)
    weighted = omega[..., None, None] * phase
    p_res, ccache = conv.forward(weighted)
    return phase + p_res, (omega, phase, ccache, z.shape)


def pcm_backward(g, cache, conv):
    """Returns ``(grad_phase, grad_z)``; conv gradients accumulate in place."""
    omega, phase, ccache, zshape = cache
    gw = conv.backward(g, ccache)
    g_phase = g + omega[..., None, None] * gw
    g_omega = (gw * phase).sum(axis=(-2, -1))
    g_z = gap_backward(softmax_backward(g_omega, omega, axis=-1), zshape)
    return g_phase, g_z


def fcl_forward(features, z, conv):
    """Add ``z`` to the feature amplitude, correct the phase, return to the spatial domain.

    The edited spectrum is generally no longer Hermitian; the real part of
    the inverse transform (equivalently, the inverse of the spectrum averaged
    with its conjugate mirror) is returned and the discarded imaginary
    residue is kept in the cache as a diagnostic.
    """
    if features.shape != z.shape:
        raise ShapeError(f"residual {z.shape} does not match features {features.shape}")
    spec = dft2(features)
    amp = np.abs(spec)
    phase = phase_angle(spec)
    pre = amp + z
    mask = pre > 0
    amp_out = np.where(mask, pre, 0).astype(amp.dtype)
    phase_out, pcache = pcm_forward(phase, z, conv)
    rot = np.exp(1j * phase_out)
    out, resid = real_idft2(amp_out * rot)
    return out.astype(features.dtype), (spec, amp, mask, amp_out, rot, pcache, resid)


def fcl_backward(g, cache, conv):
    """Returns ``(grad_features, grad_z)``."""
    spec, amp, mask, amp_out, rot, pcache, _ = cache
    h, w = g.shape[-2:]
    g_spec_out = np.fft.fft2(g, axes=(-2, -1)) / (h * w)
    t = g_spec_out * np.conj(rot)
    g_amp_out = t.real
    g_phase_out = amp_out * t.imag
    g_amp = np.where(mask, g_amp_out, 0)
    g_phase, g_z_pcm = pcm_backward(g_phase_out, pcache, conv)
    safe = np.where(amp > 0, amp, 1)
    unit = np.where(amp > 0, spec / safe, 0)
    g_spec = g_amp * unit + 1j * np.where(amp > 0, g_phase / safe, 0) * unit
    g_feat = (np.fft.ifft2(g_spec, axes=(-2, -1)).real * (h * w)).astype(g.dtype)
    return g_feat, (g_amp + g_z_pcm).astype(g.dtype)


# ---------------------------------------------------------------- network

@dataclass
class NetworkConfig:
    base_channels: int = 64
    blocks_per_scale: tuple = (4, 4, 6, 10)
    dec_blocks: int = 1
    pcm_kernel: int = 1
    per_channel_stats: bool = False

    @property
    def scales(self):
        return len(self.blocks_per_scale)

    def validate(self):
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if not self.blocks_per_scale or min(self.blocks_per_scale) < 1:
            raise ValueError("every scale needs at least one block")
        if self.pcm_kernel % 2 != 1:
            raise ValueError("pcm_kernel must be odd")


class DehazeNet(Module):
    """UNet with one FCL per contracting scale and a global input skip."""

    def __init__(self, cfg, rng):
        cfg.validate()
        self.cfg = cfg
        c, s = cfg.base_channels, cfg.scales
        self.conv_in = Conv2d(3, c, 3, pad=1, rng=rng)
        self.enc = [[ResBlock(c, rng) for _ in range(n)] for n in cfg.blocks_per_scale]
        self.pcm = [Conv2d(c, c, cfg.pcm_kernel, pad=cfg.pcm_kernel // 2, init="zero") for _ in range(s)]
        self.down = [Conv2d(c, c, 2, stride=2, rng=rng) for _ in range(s - 1)]
        self.up = [Conv2d(c, c, 1, rng=rng) for _ in range(s - 1)]
        self.dec = [[ResBlock(c, rng) for _ in range(cfg.dec_blocks)] for _ in range(s - 1)]
        self.conv_out = Conv2d(c, 3, 3, pad=1, init="zero")

    @property
    def multiple(self):
        return 2 ** (self.cfg.scales - 1)

    # -- encoder head shared by ARE, NCE and the main path
    def encode(self, x):
        f0, c0 = self.conv_in.forward(x)
        f1, c1 = self.enc[0][0].forward(f0)
        return (f0, f1), (c0, c1)

    def encode_backward(self, g0, g1, cache):
        c0, c1 = cache
        g0 = g0 + self.enc[0][0].backward(g1, c1)
        return self.conv_in.backward(g0, c0)

    def forward(self, x, z, encoded=None, use_fcl=True):
        """Dehaze ``x`` (N,3,H,W) with the full-resolution residual ``z`` (N,C,H,W)."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (N,3,H,W) input, got {x.shape}")
        m = self.multiple
        if x.shape[2] % m or x.shape[3] % m:
            raise ShapeError(f"spatial dims {x.shape[2:]} must be multiples of {m}")
        if encoded is None:
            encoded = self.encode(x)
        (f0, f1), ecache = encoded
        if use_fcl and z.shape != f1.shape:
            raise ShapeError(f"residual {z.shape} does not match features {f1.shape}")
        H, W = f1.shape[-2:]
        h = f1
        skips, caches = [], []
        for s in range(self.cfg.scales):
            sc = {}
            if s > 0:
                h, sc["down"] = self.down[s - 1].forward(h)
                h, sc["first"] = self.enc[s][0].forward(h)
            if use_fcl:
                zs = sap_pool(z, h.shape[-2], h.shape[-1])
                h, sc["fcl"] = fcl_forward(h, zs, self.pcm[s])
            sc["rest"] = []
            for blk in self.enc[s][1:]:
                h, bc = blk.forward(h)
                sc["rest"].append(bc)
            skips.append(h)
            caches.append(sc)
        dcaches = []
        for s in reversed(range(self.cfg.scales - 1)):
            u, uc = self.up[s].forward(upsample2x(h))
            h = u + skips[s]
            bcs = []
            for blk in self.dec[s]:
                h, bc = blk.forward(h)
                bcs.append(bc)
            dcaches.append((uc, bcs))
        r, oc = self.conv_out.forward(h)
        pre = x + r
        out = np.clip(pre, 0.0, 1.0)
        cache = dict(ecache=ecache, enc=caches, dec=dcaches, out=oc, pre=pre,
                     use_fcl=use_fcl, H=H, W=W)
        return out, cache

    def backward(self, g, cache):
        """Returns ``(grad_input, grad_z)``; ``grad_z`` is None without FCLs."""
        # the clamp passes gradients that pull saturated pixels back into
        # range, so a network pushed out of range can still recover
        pre = cache["pre"]
        live = ((pre > 0) & (pre < 1)) | ((pre >= 1) & (g > 0)) | ((pre <= 0) & (g < 0))
        g = np.where(live, g, 0).astype(g.dtype)
        g_x = g.copy()
        gh = self.conv_out.backward(g, cache["out"])
        g_skips = [None] * self.cfg.scales
        for s, (uc, bcs) in zip(range(self.cfg.scales - 1), reversed(cache["dec"])):
            for blk, bc in zip(reversed(self.dec[s]), reversed(bcs)):
                gh = blk.backward(gh, bc)
            g_skips[s] = gh
            gh = upsample2x_backward(self.up[s].backward(gh, uc))
        g_z = None
        for s in reversed(range(self.cfg.scales)):
            sc = cache["enc"][s]
            if g_skips[s] is not None:
                gh = gh + g_skips[s]
            for blk, bc in zip(reversed(self.enc[s][1:]), reversed(sc["rest"])):
                gh = blk.backward(gh, bc)
            if cache["use_fcl"]:
                gh, gzs = fcl_backward(gh, sc["fcl"], self.pcm[s])
                gz = sap_pool_backward(gzs, cache["H"], cache["W"])
                g_z = gz if g_z is None else g_z + gz
            if s > 0:
                gh = self.enc[s][0].backward(gh, sc["first"])
                gh = self.down[s - 1].backward(gh, sc["down"])
        g_x = g_x + self.encode_backward(np.zeros_like(gh), gh, cache["ecache"])
        return g_x, g_z


def encode_features(image, net):
    """Features after the input conv and first block, plus their amplitude/phase."""
    x = image[None] if image.ndim == 3 else image
    (_, f1), _ = net.encode(x)
    spec = dft2(f1)
    feats = f1[0] if image.ndim == 3 else f1
    amp, ph = np.abs(spec), phase_angle(spec)
    if image.ndim == 3:
        amp, ph = amp[0], ph[0]
    return feats, (amp, ph)


def dehaze_forward(hazy, z, net):
    """Single-image convenience wrapper: (3,H,W) + (C,H,W) -> (3,H,W)."""
    out, _ = net.forward(hazy[None], z[None])
    return out[0]
