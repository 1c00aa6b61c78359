"""scikit-learn style front end for training and sampling."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .model import NetworkConfig, apply_glasses
from .rng import RngStream
from .tensor import Tensor, no_grad
from .training import TrainConfig, generate, init_state, load_checkpoint, run_training, save_checkpoint
from .validation import check_images, check_power_of_two, check_telescope


class HDCGAN(BaseEstimator):
    """SELU+BatchNorm GAN whose depth follows the (telescoped) image size.

    Parameters mirror :class:`NetworkConfig` and :class:`TrainConfig`.
    ``image_size`` is the size of the images passed to :meth:`fit`; the
    networks work at ``image_size * telescope``.

    Fitted attributes: ``state_`` (the full training state),
    ``network_config_`` and ``history_``.
    """

    def __init__(
        self,
        image_size: int = 64,
        telescope=(1, 1),
        latent_dim: int = 100,
        n_filters: int = 64,
        channels: int = 3,
        learning_rate: float = 0.0002,
        batch_size: int = 32,
        beta1: float = 0.5,
        beta2: float = 0.999,
        noise_amplitude: float = 0.1,
        epochs: int = 1,
        max_steps: int | None = None,
        bs_order: str = "selu_bn",
        interpolation: str = "bilinear",
        dtype: str = "float32",
        random_state: int = 0,
    ):
        self.image_size = image_size
        self.telescope = telescope
        self.latent_dim = latent_dim
        self.n_filters = n_filters
        self.channels = channels
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.beta1 = beta1
        self.beta2 = beta2
        self.noise_amplitude = noise_amplitude
        self.epochs = epochs
        self.max_steps = max_steps
        self.bs_order = bs_order
        self.interpolation = interpolation
        self.dtype = dtype
        self.random_state = random_state

    def _configs(self) -> tuple[NetworkConfig, TrainConfig]:
        z = check_telescope(self.telescope)
        net = NetworkConfig(
            base_size=self.image_size, telescope=z, latent_dim=self.latent_dim,
            n_filters=self.n_filters, channels=self.channels,
        )
        check_power_of_two(net.effective_size, "effective size")
        train = TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size, beta1=self.beta1, beta2=self.beta2,
            noise_amplitude=self.noise_amplitude, epochs=self.epochs, seed=self.random_state,
            dtype=self.dtype, bs_order=self.bs_order,
        )
        return net, train

    def _prepare(self, X) -> np.ndarray:
        X = check_images(X, channels=self.channels, size=self.image_size, dtype=np.dtype(self.dtype))
        z = check_telescope(self.telescope)
        if z != (1, 1):
            X = np.clip(apply_glasses(X, z, self.interpolation), -1.0, 1.0)
        return X

    def fit(self, X, y=None):
        """Train from scratch on images X of shape (n, channels, image_size, image_size)."""
        net_cfg, train_cfg = self._configs()
        self.state_ = init_state(net_cfg, train_cfg)
        self.network_config_ = net_cfg
        return self.partial_fit(X)

    def partial_fit(self, X, y=None, steps: int | None = None):
        """Continue training; ``steps`` extra steps, else up to ``epochs`` / ``max_steps``."""
        if not hasattr(self, "state_"):
            net_cfg, train_cfg = self._configs()
            self.state_ = init_state(net_cfg, train_cfg)
            self.network_config_ = net_cfg
        X = self._prepare(X)
        if len(X) < self.batch_size:
            raise ValueError(f"need at least batch_size={self.batch_size} images, got {len(X)}")
        if steps is not None:
            run_training(self.state_, X, steps=self.state_.step + steps)
        elif self.max_steps is not None:
            run_training(self.state_, X, steps=self.max_steps)
        else:
            run_training(self.state_, X, epochs=self.epochs)
        return self

    @property
    def history_(self):
        check_is_fitted(self, "state_")
        return list(self.state_.history)

    def sample(self, n_samples: int = 1, random_state: int | None = None) -> np.ndarray:
        """Generate images in [-1, 1] at the effective (telescoped) size."""
        check_is_fitted(self, "state_")
        seed = self.random_state if random_state is None else random_state
        return generate(self.state_.generator, n_samples, RngStream(seed, 5))

    def predict_proba(self, X) -> np.ndarray:
        """Discriminator probability that each image is real (inference mode)."""
        check_is_fitted(self, "state_")
        X = self._prepare(X)
        disc = self.state_.discriminator
        with no_grad():
            return disc(Tensor(X, dtype=disc.dtype), training=False).data.copy()

    def save(self, path) -> None:
        check_is_fitted(self, "state_")
        save_checkpoint(self.state_, path)

    @classmethod
    def load(cls, path) -> "HDCGAN":
        state = load_checkpoint(path)
        net, train = state.network_config, state.train_config
        est = cls(
            image_size=net.base_size[0], telescope=net.telescope, latent_dim=net.latent_dim,
            n_filters=net.n_filters, channels=net.channels, learning_rate=train.learning_rate,
            batch_size=train.batch_size, beta1=train.beta1, beta2=train.beta2,
            noise_amplitude=train.noise_amplitude, epochs=train.epochs, bs_order=train.bs_order,
            dtype=train.dtype, random_state=train.seed,
        )
        est.state_ = state
        est.network_config_ = net
        return est
