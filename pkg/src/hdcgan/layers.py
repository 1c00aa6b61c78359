"""SELU, BatchNorm and the composite BS (SELU + BatchNorm) block.

Also holds the moment diagnostics used to check the self-normalising
property: ``weight_moments`` and a Monte-Carlo estimate of the map from
input (mean, variance) to SELU output (mean, variance).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .rng import RngStream, as_stream
from .tensor import Tensor, TensorError, conv2d, conv_transpose2d


def _std_normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def solve_selu_constants() -> tuple[float, float]:
    """(lambda, alpha) making (0, 1) a fixed point of the SELU moment map.

    For z ~ N(0, 1) the two conditions E[selu(z)] = 0 and E[selu(z)^2] = 1
    have closed-form Gaussian integrals:

        E[z; z>0]              = 1/sqrt(2 pi)
        E[e^z - 1; z<=0]       = e^{1/2} Phi(-1) - 1/2
        E[z^2; z>0]            = 1/2
        E[(e^z - 1)^2; z<=0]   = e^2 Phi(-2) - 2 e^{1/2} Phi(-1) + 1/2

    The first condition fixes alpha, the second then fixes lambda.
    """
    e_neg = math.exp(0.5) * _std_normal_cdf(-1.0) - 0.5
    alpha = (1.0 / math.sqrt(2.0 * math.pi)) / -e_neg
    e_sq = math.exp(2.0) * _std_normal_cdf(-2.0) - 2.0 * math.exp(0.5) * _std_normal_cdf(-1.0) + 0.5
    lam = 1.0 / math.sqrt(0.5 + alpha * alpha * e_sq)
    return lam, alpha


SELU_LAMBDA, SELU_ALPHA = solve_selu_constants()


@dataclass(frozen=True)
class SeluParams:
    lam: float = SELU_LAMBDA
    alpha: float = SELU_ALPHA

    def __post_init__(self):
        if not self.lam > 1.0:
            raise ValueError(f"SELU lambda must exceed 1, got {self.lam}")
        if not self.alpha > 0.0:
            raise ValueError(f"SELU alpha must be positive, got {self.alpha}")


def selu_array(x: np.ndarray, p: SeluParams = SeluParams()) -> np.ndarray:
    lam = np.asarray(p.lam, dtype=x.dtype)
    la = np.asarray(p.lam * p.alpha, dtype=x.dtype)
    return np.where(x > 0, lam * x, la * np.expm1(np.minimum(x, 0)))


def selu(x: Tensor, p: SeluParams = SeluParams()) -> Tensor:
    """Scaled ELU; at 0 the backward pass uses the right derivative lambda."""
    data = selu_array(x.data, p)
    out = Tensor._result(data, (x,), "selu")
    if out.requires_grad:
        lam = np.asarray(p.lam, dtype=x.dtype)
        la = np.asarray(p.lam * p.alpha, dtype=x.dtype)

        def _backward():
            d = np.where(x.data >= 0, lam, la * np.exp(np.minimum(x.data, 0)))
            x._accum(out.grad * d)
        out._backward = _backward
    return out


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics.

    Normalisation uses the biased (population) batch variance; the running
    variance tracks the same quantity.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("BatchNorm epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("BatchNorm momentum must lie in (0, 1)")

    @classmethod
    def create(cls, channels: int, dtype=np.float32, eps: float = 1e-5, momentum: float = 0.1) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True, dtype=dtype),
            beta=Tensor(np.zeros(channels), requires_grad=True, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm2d(x: Tensor, s: BatchNormState, training: bool = True) -> Tensor:
    """Normalise (N, C, H, W) per channel, then scale by gamma and shift by beta."""
    if x.ndim != 4 or x.shape[1] != s.channels:
        raise TensorError(f"batchnorm2d expects (N, {s.channels}, H, W), got {x.shape}")
    n, c, h, w = x.shape
    axes = (0, 2, 3)
    gamma = s.gamma.data.reshape(1, c, 1, 1)
    beta = s.beta.data.reshape(1, c, 1, 1)
    eps = np.asarray(s.eps, dtype=x.dtype)
    if training:
        if n * h * w < 2:
            raise TensorError("batchnorm2d in training mode needs at least 2 values per channel")
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        m = np.asarray(s.momentum, dtype=x.dtype)
        s.running_mean = (1 - m) * s.running_mean + m * mu.reshape(c)
        s.running_var = (1 - m) * s.running_var + m * var.reshape(c)
    else:
        mu = s.running_mean.reshape(1, c, 1, 1).astype(x.dtype)
        centered = x.data - mu
        var = s.running_var.reshape(1, c, 1, 1).astype(x.dtype)
    inv_std = 1 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = Tensor._result(gamma * xhat + beta, (x, s.gamma, s.beta), "batchnorm2d")
    if out.requires_grad:
        count = n * h * w

        def _backward():
            g = out.grad
            if s.beta.requires_grad:
                s.beta._accum(g.sum(axis=axes))
            if s.gamma.requires_grad:
                s.gamma._accum((g * xhat).sum(axis=axes))
            if x.requires_grad:
                gx = g * gamma
                if training:
                    mean_g = gx.sum(axis=axes, keepdims=True) / count
                    mean_gx = (gx * xhat).sum(axis=axes, keepdims=True) / count
                    x._accum(inv_std * (gx - mean_g - xhat * mean_gx))
                else:
                    x._accum(gx * inv_std)
        out._backward = _backward
    return out


@dataclass
class ConvParams:
    """Weights and geometry of one (transposed) convolution.

    ``weight`` always uses the conv2d layout (out, in, kh, kw) of the forward
    convolution; for a transposed convolution that means (in, out, kh, kw).
    """

    weight: Tensor
    stride: int = 2
    padding: int = 1
    transpose: bool = False
    bias: Tensor | None = None

    def __call__(self, x: Tensor, output_size=None) -> Tensor:
        if self.transpose:
            y = conv_transpose2d(x, self.weight, self.stride, self.padding, output_size)
        else:
            y = conv2d(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            y = y + self.bias.reshape(1, -1, 1, 1)
        return y

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1] if self.transpose else self.weight.shape[0]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return tuple(self.weight.shape[2:])


BS_ORDERS = ("selu_bn", "bn_selu")


def bs_block(
    x: Tensor,
    conv: ConvParams,
    bn: BatchNormState,
    p: SeluParams = SeluParams(),
    order: str = "selu_bn",
    training: bool = True,
) -> Tensor:
    """Convolution followed by SELU and BatchNorm (in ``order``)."""
    y = conv(x)
    if order == "selu_bn":
        return batchnorm2d(selu(y, p), bn, training)
    if order == "bn_selu":
        return selu(batchnorm2d(y, bn, training), p)
    raise ValueError(f"unknown BS order {order!r}; expected one of {BS_ORDERS}")


@dataclass(frozen=True)
class MomentPair:
    mean: float
    variance: float

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError(f"variance must be non-negative, got {self.variance}")

    def distance(self, other: "MomentPair") -> float:
        return math.hypot(self.mean - other.mean, self.variance - other.variance)


def weight_moments(w) -> tuple[float, float]:
    """Return (omega, tau) = (sum w, sum w^2) over a flattened weight vector."""
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size == 0:
        raise ValueError("weight_moments needs at least one weight")
    return float(w.sum()), float(np.dot(w, w))


@dataclass(frozen=True)
class MomentEstimate:
    moments: MomentPair
    stderr_mean: float
    stderr_variance: float


def moment_map(
    inp: MomentPair,
    omega: float,
    tau: float,
    p: SeluParams = SeluParams(),
    samples: int = 100_000,
    rng: RngStream | int | None = None,
    return_stderr: bool = False,
    sampling: str = "stratified",
):
    """Monte-Carlo estimate of the moments of ``selu(w . x)``.

    Under the Gaussian approximation the pre-activation has mean
    ``mean * omega`` and variance ``variance * tau``. Passing the same integer
    seed to repeated calls reuses one set of normal draws, which makes the
    iterated map a deterministic function of its input.

    ``sampling="stratified"`` draws one uniform point per probability bin
    ``[i/n, (i+1)/n)`` and maps it through the normal quantile function;
    ``"iid"`` uses plain normal draws. The reported standard errors use the
    iid formula in both cases, so they are conservative for stratified runs.
    """
    if samples < 10_000:
        raise ValueError("moment_map needs at least 10^4 samples")
    if tau < 0:
        raise ValueError("tau must be non-negative")
    stream = as_stream(rng)
    if sampling == "stratified":
        eps = ndtri((np.arange(samples) + stream.uniform(samples)) / samples)
    elif sampling == "iid":
        eps = stream.normal(samples)
    else:
        raise ValueError(f"unknown sampling scheme {sampling!r}")
    z = inp.mean * omega + math.sqrt(inp.variance * tau) * eps
    y = selu_array(z, p)
    m = float(y.mean())
    d = y - m
    v = float(np.mean(d * d))
    result = MomentPair(m, max(v, 0.0))
    if not return_stderr:
        return result
    se_m = math.sqrt(v / samples)
    se_v = math.sqrt(max(float(np.mean(d**4)) - v * v, 0.0) / samples)
    return MomentEstimate(result, se_m, se_v)


def iterate_moment_map(
    start: MomentPair,
    omega: float,
    tau: float,
    steps: int,
    p: SeluParams = SeluParams(),
    samples: int = 100_000,
    seed: int = 0,
) -> list[MomentPair]:
    """Trajectory ``[start, g(start), g(g(start)), ...]`` with common random numbers."""
    path = [start]
    for _ in range(steps):
        path.append(moment_map(path[-1], omega, tau, p, samples, seed))
    return path
