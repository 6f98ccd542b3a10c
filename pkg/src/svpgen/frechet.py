"""Fréchet distance between feature distributions of image sets.

The distance is computed between Gaussian fits (mean, covariance) of image
embeddings. Inception weights are deliberately not bundled; scores from the
built-in extractors are comparable within this toolkit only, and externally
computed embeddings can be imported to reproduce standard FID. All linear
algebra runs in float64 regardless of model precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from svpgen import imageio
from svpgen.imageio import DatasetManifest, ImageTensor

EXTRACTOR_KINDS = ("pixel_stats", "small_cnn", "imported_embeddings")

_PIXEL_STATS_SIZE = 16
# Fixed affine standardization constants for pixel features.
_PIXEL_MEAN, _PIXEL_STD = 0.5, 0.25

# The small CNN's weights are generated once from this pinned seed and never
# retrained; same name+version implies identical features for identical input.
_SMALL_CNN_SEED = 618033988
_SMALL_CNN_CHANNELS = (8, 16, 32)


@dataclass(frozen=True)
class FeatureExtractor:
    name: str
    dim: int | None
    kind: str
    source: Path | None = None

    def __post_init__(self):
        if self.kind not in EXTRACTOR_KINDS:
            raise ValueError(f"unknown extractor kind {self.kind!r}")


@dataclass(frozen=True)
class FeatureStats:
    """Gaussian fit of an embedded image set: mean vector and covariance."""

    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"need at least 2 samples for covariance, got {self.n}")
        dim = self.mu.shape[0]
        if self.sigma.shape != (dim, dim):
            raise ValueError(f"sigma shape {self.sigma.shape} does not match mu dim {dim}")
        asym = np.abs(self.sigma - self.sigma.T).max() if dim else 0.0
        if asym >= 1e-8:
            raise ValueError(f"sigma not symmetric (max asymmetry {asym:.3g})")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class FidReport:
    extractor: str
    n_real: int
    n_gen: int
    fid: float

    def csv_row(self) -> str:
        return f"{self.extractor},{self.n_real},{self.n_gen},{self.fid:.8f}"


def get_extractor(name: str, source=None, dim: int | None = None) -> FeatureExtractor:
    if name == "pixel_stats":
        return FeatureExtractor("pixel_stats", 3 * _PIXEL_STATS_SIZE**2, "pixel_stats")
    if name == "small_cnn":
        return FeatureExtractor("small_cnn", _SMALL_CNN_CHANNELS[-1], "small_cnn")
    if name in ("imported", "imported_embeddings"):
        if source is None:
            raise ValueError("imported embeddings need a source file")
        return FeatureExtractor("imported_embeddings", dim, "imported_embeddings", Path(source))
    raise ValueError(f"unknown extractor {name!r}; choose from pixel_stats, small_cnn, imported")


def _as_batch(images) -> np.ndarray:
    if isinstance(images, ImageTensor):
        if images.value_range != "unit":
            raise ValueError("feature extraction expects unit-range images")
        return images.data.astype(np.float64)
    return np.asarray(images, dtype=np.float64)


def _pixel_stats_features(batch: np.ndarray) -> np.ndarray:
    n = batch.shape[0]
    feats = np.empty((n, 3 * _PIXEL_STATS_SIZE**2))
    for i in range(n):
        hwc = imageio.bilinear_resize(
            batch[i].transpose(1, 2, 0), _PIXEL_STATS_SIZE, _PIXEL_STATS_SIZE
        )
        feats[i] = ((hwc - _PIXEL_MEAN) / _PIXEL_STD).reshape(-1)
    return feats


def _small_cnn_weights():
    rng = np.random.default_rng(_SMALL_CNN_SEED)
    weights = []
    c_in = 3
    for c_out in _SMALL_CNN_CHANNELS:
        fan_in = c_in * 9
        weights.append(
            (
                rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, 3, 3)),
                rng.normal(0.0, 0.05, size=c_out),
            )
        )
        c_in = c_out
    return weights


def _conv_s2_relu(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 stride-2 same-padded convolution + ReLU on a (C, H, W) array."""
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    windows = windows[:, ::2, ::2]
    out = np.einsum("chwij,ocij->ohw", windows, w) + b[:, None, None]
    return np.maximum(out, 0.0)


def _small_cnn_features(batch: np.ndarray) -> np.ndarray:
    weights = _small_cnn_weights()
    feats = np.empty((batch.shape[0], _SMALL_CNN_CHANNELS[-1]))
    for i in range(batch.shape[0]):
        h = batch[i] - _PIXEL_MEAN
        for w, b in weights:
            h = _conv_s2_relu(h, w, b)
        feats[i] = h.mean(axis=(1, 2))
    return feats


def load_imported_embeddings(source: Path, expected_dim: int | None = None) -> np.ndarray:
    """Read a precomputed feature matrix (CSV, or raw f32-LE with JSON sidecar)."""
    source = Path(source)
    if source.suffix.lower() == ".csv":
        feats = np.loadtxt(source, delimiter=",", dtype=np.float64, ndmin=2)
    else:
        sidecar = source.with_suffix(".json")
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        n, dim = int(meta["n"]), int(meta["dim"])
        raw = np.fromfile(source, dtype="<f4")
        if raw.size != n * dim:
            raise ValueError(
                f"{source}: payload holds {raw.size} floats, sidecar declares {n}x{dim}"
            )
        feats = raw.astype(np.float64).reshape(n, dim)
    if expected_dim is not None and feats.shape[1] != expected_dim:
        raise ValueError(
            f"{source}: expected feature dim {expected_dim}, file has {feats.shape[1]}"
        )
    return feats


def save_imported_embeddings(features: np.ndarray, source: Path, extractor_name: str) -> None:
    """Write features in the raw f32-LE + JSON sidecar interchange format."""
    source = Path(source)
    arr = np.ascontiguousarray(features, dtype="<f4")
    arr.tofile(source)
    sidecar = source.with_suffix(".json")
    sidecar.write_text(
        json.dumps({"n": arr.shape[0], "dim": arr.shape[1], "extractor_name": extractor_name}),
        encoding="utf-8",
    )


def extract_features(images, extractor: FeatureExtractor) -> np.ndarray:
    """Embed a unit-range image batch as an (n, dim) float64 matrix.

    ``imported_embeddings`` extractors read rows from their source file and
    ignore ``images`` entirely.
    """
    if extractor.kind == "imported_embeddings":
        return load_imported_embeddings(extractor.source, extractor.dim)
    batch = _as_batch(images)
    if batch.ndim != 4:
        raise ValueError(f"expected N x C x H x W images, got shape {batch.shape}")
    if extractor.kind == "pixel_stats":
        return _pixel_stats_features(batch)
    return _small_cnn_features(batch)


def gaussian_stats(features: np.ndarray) -> FeatureStats:
    """Column mean and unbiased (n-1) covariance, explicitly symmetrized."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 feature rows, got {n}")
    mu = features.mean(axis=0)
    centered = features - mu
    sigma = centered.T @ centered / (n - 1)
    sigma = (sigma + sigma.T) / 2.0
    return FeatureStats(mu=mu, sigma=sigma, n=n)


def _psd_eigh(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition with PSD clamping; rejects genuinely negative spectra.

    The rejection threshold is -1e-8 scaled by the spectral radius so large,
    well-conditioned covariances are not tripped by float64 roundoff.
    """
    vals, vecs = np.linalg.eigh((matrix + matrix.T) / 2.0)
    tol = 1e-8 * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol:
        raise ValueError(f"matrix is not PSD (eigenvalue {vals.min():.3g} below -{tol:.3g})")
    return np.clip(vals, 0.0, None), vecs


def sqrtm_product(sigma1: np.ndarray, sigma2: np.ndarray) -> np.ndarray:
    """(sigma1 @ sigma2)^(1/2) via R (R S2 R)^(1/2) R^-1 with R = sigma1^(1/2).

    The middle factor is symmetric PSD, so its root comes from a symmetric
    eigendecomposition instead of a general (unstable) matrix square root.
    """
    v1, q1 = _psd_eigh(np.asarray(sigma1, dtype=np.float64))
    _psd_eigh(np.asarray(sigma2, dtype=np.float64))  # validate the second factor
    root1 = (q1 * np.sqrt(v1)) @ q1.T
    cutoff = v1.max(initial=0.0) * 1e-12
    inv_sqrt = np.where(v1 > cutoff, 1.0 / np.sqrt(np.where(v1 > cutoff, v1, 1.0)), 0.0)
    root1_inv = (q1 * inv_sqrt) @ q1.T
    middle = root1 @ np.asarray(sigma2, dtype=np.float64) @ root1
    vm, qm = _psd_eigh(middle)
    middle_root = (qm * np.sqrt(vm)) @ qm.T
    return root1 @ middle_root @ root1_inv


def _trace_sqrt_product(sigma1: np.ndarray, sigma2: np.ndarray) -> float:
    """Tr((sigma1 sigma2)^(1/2)), stable even for rank-deficient covariances."""
    v1, q1 = _psd_eigh(sigma1)
    root1 = (q1 * np.sqrt(v1)) @ q1.T
    vm, _ = _psd_eigh(root1 @ sigma2 @ root1)
    return float(np.sqrt(vm).sum())


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))."""
    if a.dim != b.dim:
        raise ValueError(f"feature dims differ: {a.dim} vs {b.dim}")
    if np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma, b.sigma):
        return 0.0
    mean_term = float(((a.mu - b.mu) ** 2).sum())
    trace_term = float(np.trace(a.sigma) + np.trace(b.sigma)) - 2.0 * _trace_sqrt_product(
        a.sigma, b.sigma
    )
    d2 = mean_term + trace_term
    if d2 < 0.0:
        if d2 <= -1e-6:
            raise ValueError(f"Fréchet distance {d2:.3g} is negative beyond rounding tolerance")
        d2 = 0.0
    return d2


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"image directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in (".png", ".tif", ".tiff"))


def fid_protocol(
    real: DatasetManifest,
    generated_dir,
    extractor: FeatureExtractor,
    n_gen: int = 100,
) -> FidReport:
    """Fréchet distance of n_gen generated images against all real images.

    Generated images are taken in sorted filename order so the protocol is
    deterministic; both sets pass through the standard 64x64 pipeline before
    feature extraction (imported extractors skip images entirely).
    """
    if n_gen < 2:
        raise ValueError("n_gen must be >= 2")
    if len(real) == 0:
        raise ValueError("real manifest is empty")
    if extractor.kind == "imported_embeddings":
        raise ValueError(
            "fid_protocol embeds image sets; for precomputed features use fid_from_features"
        )
    real_stats = gaussian_stats(extract_features(imageio.load_standardized(real.paths()), extractor))
    paths = list_images(generated_dir)
    if len(paths) < n_gen:
        raise ValueError(f"{generated_dir}: need {n_gen} generated images, found {len(paths)}")
    gen_features = extract_features(imageio.load_standardized(paths[:n_gen]), extractor)
    gen_stats = gaussian_stats(gen_features)
    return FidReport(
        extractor=extractor.name,
        n_real=real_stats.n,
        n_gen=gen_stats.n,
        fid=frechet_distance(real_stats, gen_stats),
    )


def fid_from_features(
    real_features: np.ndarray, gen_features: np.ndarray, extractor_name: str
) -> FidReport:
    """Fréchet distance between two precomputed feature matrices."""
    real_stats = gaussian_stats(real_features)
    gen_stats = gaussian_stats(gen_features)
    return FidReport(
        extractor=extractor_name,
        n_real=real_stats.n,
        n_gen=gen_stats.n,
        fid=frechet_distance(real_stats, gen_stats),
    )
