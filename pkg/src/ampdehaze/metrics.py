"""PSNR, SSIM, dark channels and the amplitude-swap dark-channel experiment."""

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .hazedata import write_text_atomic
from .spectral import swap_amplitude

PSNR_INF = math.inf
REC601 = np.array([0.299, 0.587, 0.114])


def psnr(x, y, peak=1.0):
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=1) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=0) @ g


def _luma(x):
    x = np.asarray(x, np.float64)
    if x.ndim == 3 and x.shape[0] == 3:
        return np.tensordot(REC601, x, axes=1)
    if x.ndim == 3 and x.shape[0] == 1:
        return x[0]
    if x.ndim == 2:
        return x
    raise ValueError(f"expected (3,H,W), (1,H,W) or (H,W), got {x.shape}")


def ssim(x, y, peak=1.0, window=11, sigma=1.5):
    """Mean SSIM of the Rec.601 luma over valid 11x11 Gaussian windows."""
    a, b = _luma(x), _luma(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    g = _gaussian_window(window, sigma)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def dark_channel(image, patch=15):
    """Minimum over colour channels and a ``patch x patch`` window (replicated borders)."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected (C,H,W), got {image.shape}")
    if patch % 2 != 1 or patch < 1:
        raise ValueError(f"patch must be odd and positive, got {patch}")
    if patch > min(image.shape[1:]):
        raise ValueError(f"patch {patch} larger than image {image.shape[1:]}")
    return kernels.min_filter2d(np.ascontiguousarray(image.min(axis=0)), patch)


# ---------------------------------------------------------------- swap experiment

HIST_BINS = 16  # 16 intensity levels per bin on the 0..255 scale


def dc_histogram(maps):
    counts = np.zeros(HIST_BINS, np.int64)
    for m in maps:
        levels = np.floor(np.clip(m, 0, 1) * 255 + 0.5).astype(np.int64)
        counts += np.bincount(np.minimum(levels // 16, HIST_BINS - 1).ravel(), minlength=HIST_BINS)
    return counts


def below_mass(maps, threshold=25):
    total = sum(m.size for m in maps)
    below = sum(int(np.count_nonzero(np.floor(np.clip(m, 0, 1) * 255 + 0.5) < threshold)) for m in maps)
    return below / total


@dataclass
class SwapExperimentReport:
    names: list
    hazy_mean: np.ndarray
    clear_mean: np.ndarray
    synclear_mean: np.ndarray
    histograms: dict           # population -> counts per 16-level bin
    below25: dict              # population -> fraction of pixels below 25/255
    closeness: float           # fraction of pairs where SynClear is strictly closer to Clear than Hazy is

    def write_csv(self, path, hist_path, synclear=True):
        """Per-pair mean dark channels and pooled histograms, each written atomically."""
        pops = ["hazy", "clear"] + (["synclear"] if synclear else [])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name"] + [f"{p}_dc" for p in pops])
        cols = [self.hazy_mean, self.clear_mean, self.synclear_mean][:len(pops)]
        for name, *vals in zip(self.names, *cols):
            w.writerow([name] + [f"{v:.6f}" for v in vals])
        write_text_atomic(path, buf.getvalue())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin"] + pops)
        for b in range(HIST_BINS):
            w.writerow([b] + [int(self.histograms[p][b]) for p in pops])
        write_text_atomic(hist_path, buf.getvalue())


def swap_experiment(hazy_set, clear_set, patch=15, names=None):
    """Dark-channel statistics of Hazy, Clear and SynClear (hazy phase + clear amplitude)."""
    if len(hazy_set) == 0 or len(hazy_set) != len(clear_set):
        raise ValueError("need equally sized, non-empty hazy and clear sets")
    names = list(names) if names is not None else [str(i) for i in range(len(hazy_set))]
    maps = {"hazy": [], "clear": [], "synclear": []}
    for h, c in zip(hazy_set, clear_set):
        h = np.asarray(h, np.float64)
        c = np.asarray(c, np.float64)
        syn = np.clip(swap_amplitude(h, c), 0.0, 1.0)
        maps["hazy"].append(dark_channel(h, patch))
        maps["clear"].append(dark_channel(c, patch))
        maps["synclear"].append(dark_channel(syn, patch))
    means = {k: np.array([m.mean() for m in v]) for k, v in maps.items()}
    closer = np.abs(means["synclear"] - means["clear"]) < np.abs(means["hazy"] - means["clear"])
    # identical sets leave both gaps at zero; SynClear then coincides with Clear
    same = (np.abs(means["synclear"] - means["clear"]) < 1e-9) & (np.abs(means["hazy"] - means["clear"]) < 1e-9)
    closeness = float(np.mean(closer | same))
    return SwapExperimentReport(
        names, means["hazy"], means["clear"], means["synclear"],
        {k: dc_histogram(v) for k, v in maps.items()},
        {k: below_mass(v) for k, v in maps.items()},
        closeness,
    )
