"""Adversarial training: losses, noise injection, Adam, checkpoints.

One ``train_step`` performs a discriminator update on a real batch and a
generated batch, then a generator update on a freshly sampled latent batch.
The generator minimises the non-saturating ``-log D(G(z))``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .model import Network, NetworkConfig, build_discriminator, build_generator
from .rng import RngStream, as_stream
from .tensor import Tensor, TensorError, clip, is_checked, log, matmul, mean, no_grad, scale, sigmoid, tanh

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.0002
    batch_size: int = 32
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    noise_amplitude: float = 0.1
    noise_on_discriminator: bool = True
    noise_on_generator: bool = True
    epochs: int = 1
    seed: int = 0
    checkpoint_every: int = 1
    dtype: str = "float32"
    bs_order: str = "selu_bn"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.noise_amplitude < 0:
            raise ValueError("noise_amplitude must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# --- losses -------------------------------------------------------------------


def _clamped_log(p: Tensor) -> Tensor:
    return log(clip(p, PROB_EPS, 1.0 - PROB_EPS))


def d_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """-1/2 E[log D(x)] - 1/2 E[log(1 - D(G(z)))]."""
    if d_real.size == 0 or d_fake.size == 0:
        raise ValueError("d_loss needs non-empty batches")
    real_term = mean(_clamped_log(d_real))
    fake_term = mean(_clamped_log(1.0 - d_fake))
    return scale(real_term + fake_term, -0.5)


def g_loss(d_fake: Tensor) -> Tensor:
    """Non-saturating generator loss -E[log D(G(z))]."""
    if d_fake.size == 0:
        raise ValueError("g_loss needs a non-empty batch")
    return scale(mean(_clamped_log(d_fake)), -1.0)


def inject_noise(x, sigma: float, rng: RngStream | int | None):
    """Add ``sigma * N(0, 1)`` elementwise; gradients pass through to ``x``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    is_tensor = isinstance(x, Tensor)
    arr = x.data if is_tensor else np.asarray(x)
    if sigma == 0:
        return x
    eps = as_stream(rng).normal(arr.shape, dtype=arr.dtype if arr.dtype.kind == "f" else np.float64)
    noise = (eps * np.asarray(sigma, dtype=eps.dtype)).astype(eps.dtype)
    if is_tensor:
        return x + Tensor(noise, dtype=x.dtype)
    return arr + noise


def optimal_discriminator(p_data_at_x: float, p_g_at_x: float) -> float:
    """Pointwise optimum p_data / (p_data + p_g) of the discriminator loss."""
    if p_data_at_x < 0 or p_g_at_x < 0:
        raise ValueError("densities must be non-negative")
    total = p_data_at_x + p_g_at_x
    if total == 0:
        raise ValueError("optimal discriminator undefined where both densities vanish")
    return p_data_at_x / total


# --- Adam -----------------------------------------------------------------------


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    m: Sequence[np.ndarray],
    v: Sequence[np.ndarray],
    t: int,
    lr: float = 0.0002,
    beta1: float = 0.5,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
    """One bias-corrected Adam update; returns new (params, m, v) arrays."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    if not (len(params) == len(grads) == len(m) == len(v)):
        raise ValueError("params, grads and moments must have equal length")
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, mi, vi in zip(params, grads, m, v):
        if not (p.shape == g.shape == mi.shape == vi.shape):
            raise ValueError(f"shape mismatch in adam_step: {p.shape}, {g.shape}, {mi.shape}, {vi.shape}")
        if is_checked() and not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient passed to adam_step")
        dt = p.dtype
        mi = (beta1 * mi + (1.0 - beta1) * g).astype(dt)
        vi = (beta2 * vi + (1.0 - beta2) * (g * g)).astype(dt)
        m_hat = mi / c1
        v_hat = vi / c2
        new_p.append((p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(dt))
        new_m.append(mi)
        new_v.append(vi)
    return new_p, new_m, new_v


class Adam:
    """Adam moments for a named parameter set."""

    def __init__(self, params: dict[str, Tensor], lr=0.0002, beta1=0.5, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, params: dict[str, Tensor]) -> None:
        names = list(params)
        grads = [params[k].grad if params[k].grad is not None else np.zeros_like(params[k].data) for k in names]
        self.t += 1
        new_p, new_m, new_v = adam_step(
            [params[k].data for k in names], grads,
            [self.m[k] for k in names], [self.v[k] for k in names],
            self.t, self.lr, self.beta1, self.beta2, self.eps,
        )
        for k, p, mi, vi in zip(names, new_p, new_m, new_v):
            p.flags.writeable = False
            params[k].data = p
            self.m[k], self.v[k] = mi, vi


# --- training state -------------------------------------------------------------


@dataclass
class TrainState:
    generator: Network
    discriminator: Network
    opt_g: Adam
    opt_d: Adam
    rng: RngStream
    train_config: TrainConfig
    step: int = 0
    epoch: int = 0
    history: list[tuple[int, int, float, float]] = field(default_factory=list)

    @property
    def network_config(self) -> NetworkConfig:
        return self.generator.config


def init_state(net_cfg: NetworkConfig, cfg: TrainConfig) -> TrainState:
    dtype = np.dtype(cfg.dtype)
    gen = build_generator(net_cfg, RngStream(cfg.seed, 2), dtype, cfg.bs_order)
    disc = build_discriminator(net_cfg, RngStream(cfg.seed, 3), dtype, cfg.bs_order)
    opts = dict(lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    return TrainState(
        generator=gen,
        discriminator=disc,
        opt_g=Adam(gen.parameters(), **opts),
        opt_d=Adam(disc.parameters(), **opts),
        rng=RngStream(cfg.seed, 1),
        train_config=cfg,
    )


def _sample_latent(state: TrainState, n: int, cfg: TrainConfig) -> Tensor:
    dtype = state.generator.dtype
    z = state.rng.normal((n, state.network_config.latent_dim), dtype=dtype)
    if cfg.noise_on_generator:
        z = inject_noise(z, cfg.noise_amplitude, state.rng)
    return Tensor(z, dtype=dtype)


def _to_disc(x, state: TrainState, cfg: TrainConfig):
    if cfg.noise_on_discriminator:
        return inject_noise(x, cfg.noise_amplitude, state.rng)
    return x


def _finite_or_raise(value: float, who: str, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingDivergedError(f"{who} loss became non-finite ({value}) at step {step}")


def train_step(state: TrainState, real_batch, cfg: TrainConfig | None = None):
    """One discriminator update then one generator update.

    Returns ``(state, d_loss_value, g_loss_value)``; ``state`` is updated in place.
    """
    cfg = cfg or state.train_config
    gen, disc = state.generator, state.discriminator
    real = np.asarray(real_batch.data if isinstance(real_batch, Tensor) else real_batch, dtype=gen.dtype)
    expect = (state.network_config.channels, *state.network_config.effective_shape)
    if real.ndim != 4 or tuple(real.shape[1:]) != expect:
        raise ValueError(f"real batch must be (N, {expect[0]}, {expect[1]}, {expect[2]}), got {real.shape}")
    n = real.shape[0]

    try:
        with no_grad():
            fake = gen(_sample_latent(state, n, cfg)).data
        disc.zero_grad()
        loss_d = d_loss(disc(_to_disc(real, state, cfg)), disc(_to_disc(fake, state, cfg)))
        d_value = loss_d.item()
        _finite_or_raise(d_value, "discriminator", state.step)
        loss_d.backward()
        state.opt_d.step(disc.parameters())
    except TensorError as exc:
        raise TrainingDivergedError(f"discriminator update failed at step {state.step}: {exc}") from exc

    try:
        gen.zero_grad()
        disc.zero_grad()
        fake = gen(_sample_latent(state, n, cfg))
        loss_g = g_loss(disc(_to_disc(fake, state, cfg)))
        g_value = loss_g.item()
        _finite_or_raise(g_value, "generator", state.step)
        loss_g.backward()
        state.opt_g.step(gen.parameters())
        disc.zero_grad()
    except TensorError as exc:
        raise TrainingDivergedError(f"generator update failed at step {state.step}: {exc}") from exc

    state.history.append((state.step, state.epoch, d_value, g_value))
    state.step += 1
    return state, d_value, g_value


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffled sample order for one epoch, a pure function of (seed, epoch)."""
    return RngStream(seed, 1000 + epoch).permutation(n)


def run_training(
    state: TrainState,
    images: np.ndarray,
    steps: int | None = None,
    epochs: int | None = None,
    on_epoch_end: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Train on ``images`` (N, C, s, s) in [-1, 1] from wherever ``state`` stands.

    Batches come from :func:`epoch_order` with the last partial batch dropped,
    so a run resumed from a checkpoint sees the same batches as an
    uninterrupted one. Stops after ``steps`` total steps or ``epochs`` total
    epochs, whichever is given (defaults to ``train_config.epochs``).
    """
    cfg = state.train_config
    images = np.asarray(images, dtype=state.generator.dtype)
    per_epoch = len(images) // cfg.batch_size
    if per_epoch < 1:
        raise ValueError(f"need at least {cfg.batch_size} images for one batch, got {len(images)}")
    if steps is None:
        steps = (epochs if epochs is not None else cfg.epochs) * per_epoch
    while state.step < steps:
        epoch, pos = divmod(state.step, per_epoch)
        state.epoch = epoch
        idx = epoch_order(len(images), cfg.seed, epoch)[pos * cfg.batch_size : (pos + 1) * cfg.batch_size]
        train_step(state, images[idx], cfg)
        if state.step % per_epoch == 0:
            state.epoch = state.step // per_epoch
            logger.info("epoch %d done: d_loss=%.4f g_loss=%.4f", epoch, *state.history[-1][2:])
            if on_epoch_end is not None:
                on_epoch_end(state)
    return state


def generate(gen: Network, n: int, rng: RngStream | int | None = None, training: bool = False) -> np.ndarray:
    """Sample ``n`` images from the generator (no noise injection)."""
    rng = as_stream(rng)
    z = rng.normal((n, gen.config.latent_dim), dtype=gen.dtype)
    with no_grad():
        return gen(Tensor(z, dtype=gen.dtype), training=training).data.copy()


def write_loss_log(history: Iterable[tuple[int, int, float, float]], path: str | Path) -> None:
    """CSV ``step,epoch,d_loss,g_loss`` with round-trip float precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "epoch", "d_loss", "g_loss"])
        for step, epoch, d, g in history:
            w.writerow([int(step), int(epoch), repr(float(d)), repr(float(g))])


def read_loss_log(path: str | Path) -> list[tuple[int, int, float, float]]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["step", "epoch", "d_loss", "g_loss"]:
            raise ValueError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                s, e, d, g = row
                rows.append((int(s), int(e), float(d), float(g)))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}") from exc
    return rows


# --- toy rig for the optimal discriminator ---------------------------------------


@dataclass
class ToyDistribution:
    """``discrete`` over support points, or a 1-D/2-D Gaussian mixture."""

    kind: str
    points: np.ndarray | None = None
    probs: np.ndarray | None = None
    means: np.ndarray | None = None
    variances: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "discrete":
            self.points = np.asarray(self.points, dtype=np.float64)
            self.probs = np.asarray(self.probs, dtype=np.float64)
            if len(self.points) != len(self.probs):
                raise ValueError("points and probs differ in length")
            if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-12:
                raise ValueError("probabilities must be non-negative and sum to 1")
        elif self.kind in ("gaussian-mixture-1d", "gaussian-mixture-2d"):
            dim = 1 if self.kind.endswith("1d") else 2
            self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, dim)
            self.variances = np.asarray(self.variances, dtype=np.float64).reshape(-1, dim)
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if np.any(self.variances <= 0):
                raise ValueError("variances must be positive")
            if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights < 0):
                raise ValueError("mixture weights must be non-negative and sum to 1")
        else:
            raise ValueError(f"unknown toy distribution kind {self.kind!r}")

    @classmethod
    def discrete(cls, probs, points=None) -> "ToyDistribution":
        probs = np.asarray(probs, dtype=np.float64)
        pts = np.arange(len(probs), dtype=np.float64) if points is None else points
        return cls("discrete", points=pts, probs=probs)

    def sample(self, rng: RngStream, n: int) -> np.ndarray:
        """Discrete: support indices. Mixtures: (n, dim) coordinates."""
        if self.kind == "discrete":
            return rng.choice(len(self.probs), size=n, p=self.probs)
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        eps = rng.normal((n, self.means.shape[1]))
        return self.means[comp] + np.sqrt(self.variances[comp]) * eps

    def pdf(self, x) -> np.ndarray:
        if self.kind == "discrete":
            return self.probs[np.asarray(x, dtype=int)]
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.means.shape[1])
        diff = x[:, None, :] - self.means[None]
        dens = np.exp(-0.5 * np.sum(diff**2 / self.variances, axis=2)) / np.sqrt(
            np.prod(2 * np.pi * self.variances, axis=1)
        )
        return dens @ self.weights


class ToyDiscriminator:
    """Two-layer tanh MLP with a sigmoid output."""

    def __init__(self, in_dim: int, hidden: int = 16, rng: RngStream | int | None = None):
        rng = as_stream(rng)
        self.params = {
            "w1": Tensor(rng.normal((in_dim, hidden)) / np.sqrt(in_dim), requires_grad=True),
            "b1": Tensor(np.zeros(hidden), requires_grad=True),
            "w2": Tensor(rng.normal((hidden, 1)) / np.sqrt(hidden), requires_grad=True),
            "b2": Tensor(np.zeros(1), requires_grad=True),
        }

    def __call__(self, x) -> Tensor:
        p = self.params
        h = tanh(matmul(Tensor(x), p["w1"]) + p["b1"])
        return sigmoid(matmul(h, p["w2"]) + p["b2"]).reshape(-1)


def _encode(dist: ToyDistribution, samples: np.ndarray) -> np.ndarray:
    if dist.kind == "discrete":
        return np.eye(len(dist.probs))[samples]
    return samples


def train_toy_discriminator(
    p_data: ToyDistribution,
    p_g: ToyDistribution,
    steps: int = 3000,
    batch_size: int = 4096,
    lr: float = 0.003,
    hidden: int = 16,
    seed: int = 0,
) -> ToyDiscriminator:
    """Fit a discriminator between samples of ``p_data`` and a frozen ``p_g``."""
    if p_data.kind != p_g.kind:
        raise ValueError("p_data and p_g must be of the same kind")
    rng = RngStream(seed, 0)
    in_dim = len(p_data.probs) if p_data.kind == "discrete" else p_data.means.shape[1]
    disc = ToyDiscriminator(in_dim, hidden, RngStream(seed, 1))
    opt = Adam(disc.params, lr=lr, beta1=0.5, beta2=0.999)
    for _ in range(steps):
        real = _encode(p_data, p_data.sample(rng, batch_size))
        fake = _encode(p_g, p_g.sample(rng, batch_size))
        for p in disc.params.values():
            p.zero_grad()
        d_loss(disc(real), disc(fake)).backward()
        opt.step(disc.params)
    return disc


# --- checkpoints ------------------------------------------------------------------

MAGIC = b"HDCK"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _tensor_entries(state: TrainState) -> list[tuple[str, np.ndarray]]:
    entries: list[tuple[str, np.ndarray]] = []
    for role, net, opt in (("generator", state.generator, state.opt_g), ("discriminator", state.discriminator, state.opt_d)):
        for name, p in net.parameters().items():
            entries.append((f"{role}/{name}", p.data))
        for name, b in net.buffers().items():
            entries.append((f"{role}/{name}", b))
        for name in net.parameters():
            entries.append((f"{role}/adam_m/{name}", opt.m[name]))
            entries.append((f"{role}/adam_v/{name}", opt.v[name]))
    hist = np.array(state.history, dtype=np.float64).reshape(-1, 4)
    entries.append(("history", hist))
    return entries


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Write the full training state; the file is replaced atomically."""
    header = {
        "network": state.network_config.to_dict(),
        "train": state.train_config.to_dict(),
        "layer_count": state.network_config.n_layers,
        "step": state.step,
        "epoch": state.epoch,
        "adam_t": {"generator": state.opt_g.t, "discriminator": state.opt_d.t},
        "rng": state.rng.get_state(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    entries = _tensor_entries(state)
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(blob)), blob, struct.pack("<I", len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        if le not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", _DTYPE_CODES[le], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=le).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    return _read_header(r)


def _read_header(r: _Reader) -> dict:
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    try:
        return json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc


def load_checkpoint(path: str | Path) -> TrainState:
    """Rebuild a :class:`TrainState`; raises :class:`CheckpointError` on any defect."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    header = _read_header(r)
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        code, rank = r.unpack("<BI")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{rank}Q")
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after last checkpoint entry")

    net_cfg = NetworkConfig.from_dict(header["network"])
    cfg = TrainConfig.from_dict(header["train"])
    if header.get("layer_count") != net_cfg.n_layers:
        raise CheckpointError("header layer_count disagrees with its network config")
    state = init_state(net_cfg, cfg)

    def fetch(key: str, like: np.ndarray) -> np.ndarray:
        if key not in arrays:
            raise CheckpointError(f"missing tensor {key}")
        arr = arrays.pop(key)
        if arr.shape != like.shape:
            raise CheckpointError(f"{key}: stored shape {arr.shape} disagrees with config shape {like.shape}")
        return arr.astype(like.dtype)

    for role, net, opt in (("generator", state.generator, state.opt_g), ("discriminator", state.discriminator, state.opt_d)):
        for name, p in net.parameters().items():
            data = fetch(f"{role}/{name}", p.data)
            data.flags.writeable = False
            p.data = data
            opt.m[name] = fetch(f"{role}/adam_m/{name}", opt.m[name])
            opt.v[name] = fetch(f"{role}/adam_v/{name}", opt.v[name])
        for name, b in net.buffers().items():
            net.set_buffer(name, fetch(f"{role}/{name}", b))
    hist = arrays.pop("history", np.zeros((0, 4)))
    if arrays:
        raise CheckpointError(f"unexpected tensors in checkpoint: {sorted(arrays)[:3]}")
    state.history = [(int(s), int(e), float(d), float(g)) for s, e, d, g in hist]
    state.step = int(header["step"])
    state.epoch = int(header["epoch"])
    state.opt_g.t = int(header["adam_t"]["generator"])
    state.opt_d.t = int(header["adam_t"]["discriminator"])
    state.rng = RngStream.from_state(header["rng"])
    return state
