"""Per-channel 2-D Fourier transforms and amplitude/phase bookkeeping.

Convention: unnormalised forward transform, ``1/(H*W)`` on the inverse, DC
at index ``(0, 0)``.  Spectra are plain complex numpy arrays shaped like the
real tensor they came from.  The same functions serve both raw RGB images
and multi-channel feature maps.
"""

from typing import NamedTuple

import numpy as np


class SpectrumError(ValueError):
    """A spectrum that cannot correspond to a real signal, or bad amplitudes."""


class AmpPhase(NamedTuple):
    amplitude: np.ndarray
    phase: np.ndarray


def dft2(x):
    x = np.asarray(x)
    spec = np.fft.fft2(x, axes=(-2, -1))
    if not np.iscomplexobj(x):
        _zero_self_conjugate_imag(spec)
    return spec


def _zero_self_conjugate_imag(spec):
    # bins equal to their own mirror are exactly real for real input; remove
    # rounding residue so their phase is a stable 0 or +pi
    h, w = spec.shape[-2:]
    rows = [0] + ([h // 2] if h % 2 == 0 else [])
    cols = [0] + ([w // 2] if w % 2 == 0 else [])
    for r in rows:
        for c in cols:
            spec[..., r, c] = spec[..., r, c].real


def idft2(spec, rel_tol=1e-3, abs_tol=1e-5):
    """Inverse transform returning a real tensor.

    Imaginary residue is dropped when it is negligible; a residue that is both
    above ``abs_tol`` and above ``rel_tol`` of the signal norm means the
    spectrum lost conjugate symmetry and is rejected.
    """
    out = np.fft.ifft2(spec, axes=(-2, -1))
    resid = np.abs(out.imag).max(initial=0.0)
    if resid > abs_tol and np.linalg.norm(out.imag) > rel_tol * np.linalg.norm(out.real):
        raise SpectrumError(f"inverse transform has imaginary residue {resid:.3g}; spectrum is not Hermitian")
    return out.real


def real_idft2(spec):
    """Inverse transform of the Hermitian part of ``spec``.

    Averaging a spectrum with its conjugate mirror and inverting equals
    taking the real part of the plain inverse, which is what this does.
    Returns ``(real_output, max_imaginary_residue)``.
    """
    out = np.fft.ifft2(spec, axes=(-2, -1))
    return out.real, float(np.abs(out.imag).max(initial=0.0))


def phase_angle(spec):
    # +0.0 normalises negative zeros so real negative bins sit at +pi, not -pi
    return np.arctan2(spec.imag + 0.0, spec.real)


def decompose(spec):
    return AmpPhase(np.abs(spec), phase_angle(spec))


def recompose(ap):
    amplitude, phase = ap
    if np.any(amplitude < 0):
        raise SpectrumError(f"negative amplitude (min {np.min(amplitude):.3g})")
    return amplitude * np.cos(phase) + 1j * (amplitude * np.sin(phase))


def swap_amplitude(content, amplitude_donor):
    """Image with the donor's amplitude spectrum and the content's phase spectrum."""
    content = np.asarray(content)
    amplitude_donor = np.asarray(amplitude_donor)
    if content.shape != amplitude_donor.shape:
        raise ValueError(f"shape mismatch: content {content.shape} vs donor {amplitude_donor.shape}")
    amp = np.abs(dft2(amplitude_donor))
    phase = phase_angle(dft2(content))
    out, _ = real_idft2(recompose(AmpPhase(amp, phase)))
    return out.astype(content.dtype, copy=False)
