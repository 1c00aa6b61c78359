"""Generator and discriminator stacks whose depth follows the image size.

Every convolution uses a 4x4 kernel. Apart from the 1x1 <-> 4x4 end layers
(stride 1, no padding) all of them have stride 2 and padding 1, so each
block doubles (generator) or halves (discriminator) the spatial size.
Enlarging the input with a telescope therefore deepens the network without
touching any kernel.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .imageops import resize
from .layers import BS_ORDERS, BatchNormState, ConvParams, SeluParams, bs_block
from .rng import RngStream, as_stream
from .tensor import Tensor, TensorError, sigmoid, tanh

KERNEL = 4
MAX_WIDTH_FACTOR = 8


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def layer_count(effective_size: int) -> int:
    """Number of blocks for a square input of ``effective_size`` pixels."""
    if not isinstance(effective_size, (int, np.integer)) or not _is_pow2(int(effective_size)) or effective_size < 8:
        raise ValueError(f"effective size must be a power of two >= 8, got {effective_size!r}")
    return int(effective_size).bit_length() - 2


def _as_pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


@dataclass
class NetworkConfig:
    base_size: tuple[int, int] = (64, 64)
    telescope: tuple[int, int] = (1, 1)
    latent_dim: int = 100
    n_filters: int = 64
    channels: int = 3

    def __post_init__(self):
        self.base_size = _as_pair(self.base_size)
        self.telescope = _as_pair(self.telescope)
        if min(self.telescope) < 1:
            raise ValueError(f"telescope factors must be >= 1, got {self.telescope}")
        if self.latent_dim < 1 or self.n_filters < 1 or self.channels < 1:
            raise ValueError("latent_dim, n_filters and channels must be positive")
        h, w = self.effective_shape
        for n in (h, w):
            if not _is_pow2(n) or n < 8:
                raise ValueError(f"effective size {h}x{w} must be powers of two >= 8")
        if h != w:
            raise ValueError(f"effective size {h}x{w} is not square")

    @property
    def effective_shape(self) -> tuple[int, int]:
        return self.base_size[0] * self.telescope[0], self.base_size[1] * self.telescope[1]

    @property
    def effective_size(self) -> int:
        return self.effective_shape[0]

    @property
    def n_layers(self) -> int:
        return layer_count(self.effective_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base_size"] = list(self.base_size)
        d["telescope"] = list(self.telescope)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(
            base_size=tuple(d["base_size"]),
            telescope=tuple(d["telescope"]),
            latent_dim=int(d["latent_dim"]),
            n_filters=int(d["n_filters"]),
            channels=int(d["channels"]),
        )


def apply_glasses(images, telescope, method: str = "bilinear"):
    """Enlarge images by integer factors (zeta1, zeta2) along H and W."""
    z1, z2 = _as_pair(telescope)
    if z1 < 1 or z2 < 1:
        raise ValueError(f"telescope factors must be >= 1, got {(z1, z2)}")
    as_tensor_out = isinstance(images, Tensor)
    arr = images.data if as_tensor_out else np.asarray(images)
    h, w = arr.shape[-2] * z1, arr.shape[-1] * z2
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ValueError(f"telescope {(z1, z2)} gives {h}x{w}, not a power of two")
    out = arr.copy() if (z1, z2) == (1, 1) else resize(arr, (h, w), method)
    return Tensor(out) if as_tensor_out else out


@dataclass
class Block:
    conv: ConvParams
    bn: BatchNormState | None = None
    activation: str = "bs"  # "bs" | "tanh" | "sigmoid"
    selu: SeluParams = field(default_factory=SeluParams)
    order: str = "selu_bn"

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        if self.activation == "bs":
            return bs_block(x, self.conv, self.bn, self.selu, self.order, training)
        y = self.conv(x)
        if self.activation == "tanh":
            return tanh(y)
        if self.activation == "sigmoid":
            return sigmoid(y)
        raise ValueError(f"unknown activation {self.activation!r}")


class Network:
    """An ordered stack of blocks with a role tag."""

    def __init__(self, role: str, config: NetworkConfig, blocks: list[Block]):
        if role not in ("generator", "discriminator"):
            raise ValueError(f"unknown role {role!r}")
        self.role = role
        self.config = config
        self.blocks = blocks

    def __len__(self) -> int:
        return len(self.blocks)

    def __repr__(self) -> str:
        return f"Network(role={self.role!r}, blocks={len(self.blocks)}, size={self.config.effective_size})"

    @property
    def dtype(self):
        return self.blocks[0].conv.weight.dtype

    def forward(self, x, training: bool = True) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
        cfg = self.config
        if self.role == "generator":
            x = x.reshape(x.shape[0], cfg.latent_dim, 1, 1)
        else:
            expect = (cfg.channels, *cfg.effective_shape)
            if tuple(x.shape[1:]) != expect:
                raise TensorError(f"discriminator expects (N, {expect[0]}, {expect[1]}, {expect[2]}), got {x.shape}")
        for block in self.blocks:
            x = block(x, training)
        if self.role == "discriminator":
            x = x.reshape(x.shape[0])
        return x

    __call__ = forward

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, b in enumerate(self.blocks):
            out[f"blocks.{i}.weight"] = b.conv.weight
            if b.conv.bias is not None:
                out[f"blocks.{i}.bias"] = b.conv.bias
            if b.bn is not None:
                out[f"blocks.{i}.bn.gamma"] = b.bn.gamma
                out[f"blocks.{i}.bn.beta"] = b.bn.beta
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, b in enumerate(self.blocks):
            if b.bn is not None:
                out[f"blocks.{i}.bn.running_mean"] = b.bn.running_mean
                out[f"blocks.{i}.bn.running_var"] = b.bn.running_var
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        _, i, _, attr = name.split(".")
        setattr(self.blocks[int(i)].bn, attr, np.array(value))

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def kernel_sizes(self) -> set[tuple[int, int]]:
        return {b.conv.kernel_size for b in self.blocks}


def _init_weight(rng: RngStream, shape: tuple[int, ...], fan_in: float, dtype) -> Tensor:
    # variance 1/fan_in keeps sum(w) ~ 0 and sum(w^2) ~ 1 per output unit
    w = rng.normal(shape) / np.sqrt(fan_in)
    return Tensor(w, requires_grad=True, dtype=dtype)


def _widths(cfg: NetworkConfig) -> list[int]:
    """Generator block widths from the 4x4 end outward; capped at 8 * n_filters."""
    n = cfg.n_layers
    return [cfg.n_filters * min(2 ** (n - 2 - i), MAX_WIDTH_FACTOR) for i in range(n - 1)]


def build_generator(
    cfg: NetworkConfig,
    rng: RngStream | int | None = None,
    dtype=np.float32,
    bs_order: str = "selu_bn",
    selu_params: SeluParams | None = None,
) -> Network:
    """latent (latent_dim, 1, 1) -> 4x4 -> ... -> (channels, s, s) with tanh output."""
    if bs_order not in BS_ORDERS:
        raise ValueError(f"unknown BS order {bs_order!r}")
    rng = as_stream(rng)
    p = selu_params or SeluParams()
    widths = _widths(cfg)
    blocks: list[Block] = []
    in_ch = cfg.latent_dim
    for i, out_ch in enumerate(widths):
        stride, pad = (1, 0) if i == 0 else (2, 1)
        fan_in = in_ch * KERNEL * KERNEL / stride**2
        w = _init_weight(rng, (in_ch, out_ch, KERNEL, KERNEL), fan_in, dtype)
        conv = ConvParams(w, stride, pad, transpose=True)
        blocks.append(Block(conv, BatchNormState.create(out_ch, dtype), "bs", p, bs_order))
        in_ch = out_ch
    w = _init_weight(rng, (in_ch, cfg.channels, KERNEL, KERNEL), in_ch * KERNEL * KERNEL / 4, dtype)
    bias = Tensor(np.zeros(cfg.channels), requires_grad=True, dtype=dtype)
    blocks.append(Block(ConvParams(w, 2, 1, transpose=True, bias=bias), None, "tanh", p, bs_order))
    return Network("generator", cfg, blocks)


def build_discriminator(
    cfg: NetworkConfig,
    rng: RngStream | int | None = None,
    dtype=np.float32,
    bs_order: str = "selu_bn",
    selu_params: SeluParams | None = None,
) -> Network:
    """(channels, s, s) -> halving BS blocks down to 4x4 -> 1x1 sigmoid score."""
    if bs_order not in BS_ORDERS:
        raise ValueError(f"unknown BS order {bs_order!r}")
    rng = as_stream(rng)
    p = selu_params or SeluParams()
    widths = _widths(cfg)[::-1]
    blocks: list[Block] = []
    in_ch = cfg.channels
    for out_ch in widths:
        w = _init_weight(rng, (out_ch, in_ch, KERNEL, KERNEL), in_ch * KERNEL * KERNEL, dtype)
        blocks.append(Block(ConvParams(w, 2, 1), BatchNormState.create(out_ch, dtype), "bs", p, bs_order))
        in_ch = out_ch
    w = _init_weight(rng, (1, in_ch, KERNEL, KERNEL), in_ch * KERNEL * KERNEL, dtype)
    bias = Tensor(np.zeros(1), requires_grad=True, dtype=dtype)
    blocks.append(Block(ConvParams(w, 1, 0, bias=bias), None, "sigmoid", p, bs_order))
    return Network("discriminator", cfg, blocks)
