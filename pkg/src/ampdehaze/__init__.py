"""Unpaired image dehazing in the frequency domain.

Haze mostly changes the amplitude spectrum of an image; this package learns
an amplitude residual with a small conditional diffusion model and applies it
inside a UNet through Fourier-domain compensation layers.
"""

from .kernels import BACKEND
from .spectral import decompose, dft2, idft2, recompose, swap_amplitude
from .freqdehaze import DehazeNet, NetworkConfig, amplitude_residual, align_amplitude
from .diffusion import build_schedule, forward_diffuse, reverse_chain
from .metrics import dark_channel, psnr, ssim
from .trainer import TrainConfig, infer, load_checkpoint, save_checkpoint, toy_config, train_stage1, train_stage2

__version__ = "0.1.0"
