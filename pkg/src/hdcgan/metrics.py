"""Sample-quality metrics: MS-SSIM, Frechet distance, nearest neighbours.

MS-SSIM follows the multi-scale construction used for GAN diversity
studies: grayscale luma, an 11x11 Gaussian window (sigma 1.5) applied in
"valid" mode, 2x2 average downsampling between scales, contrast-structure
terms at every scale but the last and the full SSIM at the last. When a
scale is smaller than the window, the window shrinks to the scale and its
sigma shrinks proportionally, so 128x128 inputs work with 5 scales.

Scale terms are combined as ``prod sign(t) * |t| ** w``; a negative term
(anti-correlated structure) therefore keeps its sign instead of producing
NaN, and the result stays in [-1, 1].

The Frechet distance is exact; features come from a pluggable extractor.
Standard FID numbers need Inception features supplied through a
feature file.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin

from .imageops import resize, to_grayscale
from .rng import RngStream, as_stream

STANDARD_MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MSSSIM_PAIRS = 10_000
MSSSIM_RESIZE = 128
FD_RESIZE = 64
NN_K = 5


def _normalized(weights) -> tuple[float, ...]:
    w = np.asarray(weights, dtype=np.float64)
    return tuple(float(x) for x in w / w.sum())


@dataclass(frozen=True)
class MsSsimConfig:
    """Defaults: 5 scales with the standard weights rescaled to sum to 1."""

    scale_weights: tuple[float, ...] = field(default_factory=lambda: _normalized(STANDARD_MSSSIM_WEIGHTS))
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    value_range: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        if abs(sum(self.scale_weights) - 1.0) > 1e-9:
            raise ValueError(f"scale weights must sum to 1, got {sum(self.scale_weights)}")
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError("window size must be odd and positive")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("stability constants must be positive")
        if not self.value_range[1] > self.value_range[0]:
            raise ValueError("value_range must be increasing")

    @property
    def scales(self) -> int:
        return len(self.scale_weights)

    @property
    def dynamic_range(self) -> float:
        return float(self.value_range[1] - self.value_range[0])

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def gaussian_window_1d(size: int, sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian taps centred on the window (half-pixel for even sizes)."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable "valid" correlation with g along both axes
    rows = sliding_window_view(img, g.size, axis=1) @ g
    return sliding_window_view(rows, g.size, axis=0) @ g


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    if h % 2 or w % 2:
        img = np.pad(img, ((0, h % 2), (0, w % 2)), mode="edge")
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _ssim_terms(a: np.ndarray, b: np.ndarray, cfg: MsSsimConfig) -> tuple[float, float]:
    size = min(cfg.window_size, *a.shape)
    g = gaussian_window_1d(size, cfg.window_sigma * size / cfg.window_size)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    s_aa = _filter_valid(a * a, g) - mu_a * mu_a
    s_bb = _filter_valid(b * b, g) - mu_b * mu_b
    s_ab = _filter_valid(a * b, g) - mu_a * mu_b
    cs_map = (2.0 * s_ab + cfg.c2) / (s_aa + s_bb + cfg.c2)
    lum = (2.0 * mu_a * mu_b + cfg.c1) / (mu_a * mu_a + mu_b * mu_b + cfg.c1)
    return float(np.mean(lum * cs_map)), float(np.mean(cs_map))


def _signed_pow(x: float, w: float) -> float:
    return math.copysign(abs(x) ** w, x)


def ms_ssim(a: np.ndarray, b: np.ndarray, cfg: MsSsimConfig | None = None) -> float:
    """Multi-scale SSIM between two images ((C, H, W) or (H, W))."""
    cfg = cfg or MsSsimConfig()
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    lo = cfg.value_range[0]
    x, y = to_grayscale(a) - lo, to_grayscale(b) - lo
    if min(x.shape) < 2 ** (cfg.scales - 1):
        raise ValueError(f"{x.shape[0]}x{x.shape[1]} image too small for {cfg.scales} scales")
    result = 1.0
    for j, w in enumerate(cfg.scale_weights):
        ssim, cs = _ssim_terms(x, y, cfg)
        if j == cfg.scales - 1:
            result *= _signed_pow(ssim, w)
        else:
            result *= _signed_pow(cs, w)
            x, y = _downsample(x), _downsample(y)
    return result


@dataclass
class MetricReport:
    metric: str
    value: float
    pairs: int | None = None
    resize: int | None = None
    seed: int | None = None
    protocol: dict = field(default_factory=dict)
    per_pair: list[float] | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_row(self) -> list:
        return [self.metric, repr(float(self.value)), self.pairs if self.pairs is not None else "",
                self.resize if self.resize is not None else "", self.seed if self.seed is not None else ""]

    def write(self, json_path: str | Path | None = None, csv_path: str | Path | None = None) -> None:
        if json_path is not None:
            Path(json_path).write_text(self.to_json() + "\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["metric", "value", "pairs", "resize", "seed"])
                w.writerow(self.csv_row())


def _prepare(images, size: int | None) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) images, got shape {arr.shape}")
    if size is not None and arr.shape[-2:] != (size, size):
        arr = resize(arr, (size, size)).astype(np.float64)
    return arr


def sample_pairs(n: int, pairs: int, rng: RngStream) -> np.ndarray:
    """``pairs`` index pairs (i, j), i != j, each uniform over unordered pairs."""
    i = rng.integers(0, n, size=pairs)
    j = rng.integers(0, n - 1, size=pairs)
    j = j + (j >= i)
    return np.stack([i, j], axis=1)


def msssim_protocol(
    images,
    pairs: int = MSSSIM_PAIRS,
    resize_to: int = MSSSIM_RESIZE,
    seed: int = 0,
    cfg: MsSsimConfig | None = None,
    keep_per_pair: bool = True,
) -> MetricReport:
    """Average MS-SSIM over randomly drawn pairs of distinct images."""
    arr = _prepare(images, resize_to)
    if len(arr) < 2:
        raise ValueError("msssim_protocol needs at least 2 images")
    if pairs < 1:
        raise ValueError("pairs must be positive")
    idx = sample_pairs(len(arr), pairs, RngStream(seed, 0))
    gray = np.stack([to_grayscale(im) for im in arr])
    values = [ms_ssim(gray[i], gray[j], cfg) for i, j in idx]
    return MetricReport(
        metric="ms-ssim",
        value=float(np.mean(values)),
        pairs=pairs,
        resize=resize_to,
        seed=seed,
        protocol={"images": len(arr), "aggregation": "mean"},
        per_pair=[float(v) for v in values] if keep_per_pair else None,
    )


# --- Frechet distance ------------------------------------------------------------


@dataclass
class GaussianSummary:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        d = self.mean.size
        if self.covariance.shape != (d, d):
            raise ValueError(f"covariance shape {self.covariance.shape} does not match mean of size {d}")

    @property
    def dim(self) -> int:
        return self.mean.size


def fit_gaussian(features) -> GaussianSummary:
    """Sample mean and unbiased (n-1) covariance, symmetrised."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be a 2-D (n, d) array, got shape {x.shape}")
    if x.shape[0] < 2:
        raise ValueError("fit_gaussian needs at least 2 vectors")
    mu = x.mean(axis=0)
    d = x - mu
    cov = d.T @ d / (x.shape[0] - 1)
    return GaussianSummary(mu, 0.5 * (cov + cov.T))


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _check_psd(c: np.ndarray, tol: float) -> None:
    if np.max(np.abs(c - c.T), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(c), initial=0.0)):
        raise ValueError("covariance is not symmetric")
    vals = np.linalg.eigvalsh(c)
    if vals.size and vals.min() < -tol * max(1.0, abs(vals).max()):
        raise ValueError(f"covariance is not positive semidefinite (min eigenvalue {vals.min():.3e})")


def frechet_distance(g1: GaussianSummary, g2: GaussianSummary, psd_tol: float = 1e-8) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2}).

    The trace of the cross term is taken from the symmetric matrix
    S2^{1/2} S1 S2^{1/2}, which has the same eigenvalues as S1 S2;
    tiny negative eigenvalues are clamped to zero.
    """
    if g1.dim != g2.dim:
        raise ValueError(f"dimension mismatch: {g1.dim} vs {g2.dim}")
    _check_psd(g1.covariance, psd_tol)
    _check_psd(g2.covariance, psd_tol)
    diff = g1.mean - g2.mean
    root2 = _sqrt_psd(g2.covariance)
    m = root2 @ g1.covariance @ root2
    vals = np.linalg.eigvalsh(0.5 * (m + m.T))
    cross = float(np.sum(np.sqrt(np.clip(vals, 0.0, None))))
    fd = float(diff @ diff) + float(np.trace(g1.covariance) + np.trace(g2.covariance)) - 2.0 * cross
    return max(fd, 0.0)


# --- feature extraction --------------------------------------------------------


class DownsampleExtractor(TransformerMixin, BaseEstimator):
    """Resize to ``size`` x ``size`` and flatten (C * size * size features)."""

    def __init__(self, size: int = 8):
        self.size = size

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        arr = _prepare(X, None)
        return resize(arr, (self.size, self.size)).reshape(len(arr), -1).astype(np.float64)


class RandomProjectionExtractor(TransformerMixin, BaseEstimator):
    """Project flattened pixels with a fixed-seed Gaussian matrix."""

    def __init__(self, n_components: int = 64, seed: int = 0):
        self.n_components = n_components
        self.seed = seed

    def fit(self, X=None, y=None):
        return self

    def _matrix(self, d_in: int) -> np.ndarray:
        rng = RngStream(self.seed, 7)
        return rng.normal((d_in, self.n_components)) / math.sqrt(self.n_components)

    def transform(self, X):
        arr = _prepare(X, None).reshape(len(X), -1)
        return arr @ self._matrix(arr.shape[1])


class FeatureFileExtractor(TransformerMixin, BaseEstimator):
    """Pass through precomputed features (e.g. Inception pool3) from a feature file."""

    def __init__(self, path: str | None = None):
        self.path = path

    def fit(self, X=None, y=None):
        return self

    def transform(self, X=None):
        feats = read_feature_file(self.path)
        if X is not None and len(X) != len(feats):
            raise ValueError(f"feature file has {len(feats)} rows for {len(X)} images")
        return feats


def make_extractor(extractor: str):
    """Parse ``downsample[:size]``, ``random-projection[:dim[:seed]]`` or ``file:path``."""
    name, _, rest = extractor.partition(":")
    if name == "downsample":
        return DownsampleExtractor(int(rest) if rest else 8)
    if name == "random-projection":
        parts = [int(p) for p in rest.split(":") if p] if rest else []
        return RandomProjectionExtractor(*parts)
    if name == "file":
        if not rest:
            raise ValueError("file extractor needs a path: file:<path>")
        return FeatureFileExtractor(rest)
    raise ValueError(f"unknown feature extractor {extractor!r}")


def extract_features(images, extractor: str = "downsample:8") -> np.ndarray:
    return make_extractor(extractor).fit_transform(images)


def write_feature_file(path: str | Path, features: np.ndarray, binary: bool | None = None) -> None:
    """Header line ``n d`` followed by CSV rows, or raw little-endian float64."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError("features must be 2-D")
    path = Path(path)
    binary = path.suffix.lower() not in (".csv", ".txt") if binary is None else binary
    header = f"{feats.shape[0]} {feats.shape[1]}\n".encode("ascii")
    if binary:
        path.write_bytes(header + feats.astype("<f8").tobytes())
    else:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows([[repr(float(v)) for v in row] for row in feats])
        path.write_bytes(header + buf.getvalue().encode("ascii"))


def read_feature_file(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n")
    try:
        n, d = (int(t) for t in head.split())
    except ValueError:
        raise ValueError(f"{path}: first line must be 'n d'") from None
    if Path(path).suffix.lower() in (".csv", ".txt"):
        rows = list(csv.reader(io.StringIO(body.decode("ascii"))))
        rows = [r for r in rows if r]
        if len(rows) != n:
            raise ValueError(f"{path}: header says {n} rows, found {len(rows)}")
        for i, r in enumerate(rows):
            if len(r) != d:
                raise ValueError(f"{path}: row {i + 1} has {len(r)} values, header says {d}")
        return np.array(rows, dtype=np.float64).reshape(n, d)
    if len(body) != n * d * 8:
        raise ValueError(f"{path}: expected {n * d * 8} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f8").reshape(n, d).astype(np.float64)


def frechet_protocol(
    real_images,
    generated,
    extractor: str = "downsample:8",
    resize_to: int = FD_RESIZE,
    mode: str = "pooled",
    seed: int = 0,
) -> MetricReport:
    """Frechet distance between real and generated sets after protocol resize.

    ``generated`` is one image array or a list of arrays (e.g. one per
    epoch). ``mode="pooled"`` concatenates them into one sample;
    ``"per-epoch"`` averages the distance of each set.
    """
    sets = generated if isinstance(generated, (list, tuple)) else [generated]
    if mode not in ("pooled", "per-epoch"):
        raise ValueError(f"unknown mode {mode!r}")
    ext = make_extractor(extractor)
    real = fit_gaussian(ext.fit_transform(_prepare(real_images, resize_to)))
    if mode == "pooled":
        pooled = np.concatenate([_prepare(s, resize_to) for s in sets])
        values = [frechet_distance(real, fit_gaussian(ext.transform(pooled)))]
    else:
        values = [frechet_distance(real, fit_gaussian(ext.transform(_prepare(s, resize_to)))) for s in sets]
    return MetricReport(
        metric="frechet-distance",
        value=float(np.mean(values)),
        resize=resize_to,
        seed=seed,
        protocol={"extractor": extractor, "mode": mode, "sets": len(sets)},
        per_pair=[float(v) for v in values] if mode == "per-epoch" else None,
    )


def frechet_from_features(real_features, fake_features) -> MetricReport:
    value = frechet_distance(fit_gaussian(real_features), fit_gaussian(fake_features))
    return MetricReport(metric="frechet-distance", value=value, protocol={"extractor": "features"})


def nearest_neighbors(query, corpus, k: int = NN_K) -> list[tuple[int, float]]:
    """The ``k`` corpus images closest to ``query`` in pixel L2, nearest first.

    Ties keep corpus order.
    """
    corpus = np.asarray(corpus, dtype=np.float64)
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    if not 1 <= k <= len(corpus):
        raise ValueError(f"k={k} must be between 1 and corpus size {len(corpus)}")
    q = np.asarray(query, dtype=np.float64)
    if corpus.shape[1:] != q.shape:
        raise ValueError(f"query shape {q.shape} differs from corpus images {corpus.shape[1:]}")
    flat = corpus.reshape(len(corpus), -1) - q.reshape(1, -1)
    dist = np.sqrt(np.einsum("ij,ij->i", flat, flat))
    order = np.argsort(dist, kind="stable")[:k]
    return [(int(i), float(dist[i])) for i in order]
