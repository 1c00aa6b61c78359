"""Self-normalizing deep convolutional GANs on a small numpy autodiff core."""

from .estimator import HDCGAN
from .layers import SELU_ALPHA, SELU_LAMBDA, MomentPair, SeluParams, moment_map, selu
from .metrics import MsSsimConfig, MetricReport, frechet_distance, ms_ssim, msssim_protocol
from .model import NetworkConfig, build_discriminator, build_generator, layer_count
from .tensor import Tensor
from .training import TrainConfig, d_loss, g_loss, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "HDCGAN",
    "MetricReport",
    "MomentPair",
    "MsSsimConfig",
    "NetworkConfig",
    "SELU_ALPHA",
    "SELU_LAMBDA",
    "SeluParams",
    "Tensor",
    "TrainConfig",
    "build_discriminator",
    "build_generator",
    "d_loss",
    "frechet_distance",
    "g_loss",
    "layer_count",
    "load_checkpoint",
    "moment_map",
    "ms_ssim",
    "msssim_protocol",
    "save_checkpoint",
    "selu",
]
