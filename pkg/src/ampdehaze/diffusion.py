"""Conditional DDPM over amplitude residuals.

The reverse chain is differentiable end to end: ``reverse_chain`` keeps the
per-step caches and ``reverse_chain_backward`` pushes a gradient on the final
sample back through every denoising step into the denoiser parameters.
"""

from dataclasses import dataclass

import numpy as np

from .tensorcore import Conv2d, Module, ResBlock, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray

    @property
    def T(self):
        return len(self.beta)

    @property
    def alpha(self):
        return 1.0 - self.beta

    @property
    def alpha_bar(self):
        return np.cumprod(self.alpha)

    def ab(self, t):
        """``alpha_bar_t`` with the ``alpha_bar_0 = 1`` convention (t is 1-based)."""
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


def build_schedule(T=8, beta_start=0.1, beta_end=0.8):
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def forward_diffuse(z, schedule, noise, t=None):
    """Closed-form ``q(z_t | z)``; ``t`` defaults to ``T``."""
    t = schedule.T if t is None else t
    if np.shape(noise) != np.shape(z):
        raise ShapeError(f"noise {np.shape(noise)} vs residual {np.shape(z)}")
    ab = schedule.ab(t)
    return np.sqrt(ab) * z + np.sqrt(1.0 - ab) * noise


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / max(half, 1))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])[:dim]


class DenoiserNet(Module):
    """Residual conv stack estimating the noise in ``z_t`` given the conditioning amplitude.

    Input is ``concat(z_t, cond)`` along channels; the sinusoidal timestep
    embedding enters every block through its own learned projection.  The
    output conv starts at zero so a fresh net predicts no noise.
    """

    def __init__(self, channels, hidden=32, n_blocks=5, T=8, emb_dim=16, rng=None):
        self.channels, self.T, self.emb_dim = channels, T, emb_dim
        self.conv_in = Conv2d(2 * channels, hidden, 3, pad=1, rng=rng)
        self.blocks = [ResBlock(hidden, rng, emb_dim=emb_dim) for _ in range(n_blocks)]
        self.conv_out = Conv2d(hidden, channels, 3, pad=1, init="zero")

    def forward(self, z_t, cond, t):
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        if z_t.shape != cond.shape or z_t.shape[1] != self.channels:
            raise ShapeError(f"z_t {z_t.shape} / cond {cond.shape} vs {self.channels} channels")
        emb = np.broadcast_to(timestep_embedding(t, self.emb_dim).astype(z_t.dtype),
                              (z_t.shape[0], self.emb_dim))
        h, c_in = self.conv_in.forward(np.concatenate([z_t, cond], axis=1))
        bcs = []
        for blk in self.blocks:
            h, bc = blk.forward(h, emb)
            bcs.append(bc)
        eps, c_out = self.conv_out.forward(h)
        return eps, (c_in, bcs, c_out)

    def backward(self, g, cache):
        """Gradient with respect to ``z_t`` (the conditioning input is treated as constant)."""
        c_in, bcs, c_out = cache
        gh = self.conv_out.backward(g, c_out)
        for blk, bc in zip(reversed(self.blocks), reversed(bcs)):
            gh = blk.backward(gh, bc)
        gx = self.conv_in.backward(gh, c_in)
        return gx[:, :self.channels]


def denoiser_forward(z_t, cond, t, net):
    eps, _ = net.forward(z_t, cond, t)
    return eps


def _step_coeffs(schedule, t):
    a = float(schedule.alpha[t - 1])
    c = (1.0 - a) / np.sqrt(1.0 - schedule.ab(t))
    return 1.0 / np.sqrt(a), c, np.sqrt(1.0 - a)


def denoise_step(z_t, cond, t, schedule, net, step_noise, keep_cache=False):
    """One reverse update ``z_t -> z_{t-1}``; the noise term is dropped at ``t = 1``."""
    if step_noise is not None and np.shape(step_noise) != np.shape(z_t):
        raise ShapeError(f"step noise {np.shape(step_noise)} vs z_t {np.shape(z_t)}")
    inv_sqrt_a, c, sigma = _step_coeffs(schedule, t)
    eps, cache = net.forward(z_t, cond, t)
    out = inv_sqrt_a * (z_t - c * eps)
    if t > 1 and step_noise is not None:
        out = out + sigma * step_noise
    out = out.astype(z_t.dtype, copy=False)
    return (out, cache) if keep_cache else out


def reverse_chain(z_T, cond, schedule, net, step_noises):
    """Run ``t = T .. 1``; ``step_noises[t-1]`` is the noise injected at step ``t``."""
    z = z_T
    caches = []
    for t in range(schedule.T, 0, -1):
        z, cache = denoise_step(z, cond, t, schedule, net, step_noises[t - 1], keep_cache=True)
        caches.append((t, cache))
    return z, caches


def reverse_chain_backward(g, caches, schedule, net):
    """Backpropagate ``dL/dz_0`` through the chain; returns ``dL/dz_T``."""
    for t, cache in reversed(caches):
        inv_sqrt_a, c, _ = _step_coeffs(schedule, t)
        g_out = inv_sqrt_a * g
        g = (g_out + net.backward(-c * g_out, cache)).astype(g.dtype, copy=False)
    return g


def draw_chain_noise(rng, shape, schedule, dtype=np.float32):
    z_T = rng.standard_normal(shape).astype(dtype)
    steps = [None] + [rng.standard_normal(shape).astype(dtype) for _ in range(1, schedule.T)]
    return z_T, steps


def sample(cond, schedule, net, rng):
    """Reverse-sample a residual from pure Gaussian noise."""
    z_T, steps = draw_chain_noise(rng, cond.shape, schedule, cond.dtype)
    z, _ = reverse_chain(z_T, cond, schedule, net, steps)
    return z


def diffusion_loss(z, z_hat):
    """Mean absolute error and its gradient with respect to ``z_hat``."""
    z = np.asarray(z)
    z_hat = np.asarray(z_hat)
    if z.shape != z_hat.shape:
        raise ShapeError(f"{z.shape} vs {z_hat.shape}")
    d = z_hat - z
    return float(np.mean(np.abs(d))), (np.sign(d) / d.size).astype(z_hat.dtype)
