"""Image ingestion, standardization, and dataset manifests.

All flow-imaging micrographs enter the pipeline through this module: files
are decoded to :class:`RawImage`, standardized to the 64x64 model format
(smallest edge resized to 64 with bilinear interpolation, then center
cropped), and tracked through CSV manifests that realize the Real-n/Mixed-n
training-set presets. A procedural corpus generator provides a desk-scale
stand-in for instrument data.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

LABELS = ("silicone_oil", "air_bubble", "protein")
MINORITY_LABELS = ("silicone_oil", "air_bubble")
PROVENANCES = ("real", "generated")

STANDARD_SIZE = 64

_RANGE_BOUNDS = {"unit": (0.0, 1.0), "model": (-1.0, 1.0)}

# PIL modes decodable as 8-bit grayscale or RGB.
_SUPPORTED_MODES = {"L": 1, "RGB": 3}


class ImageDecodeError(ValueError):
    """Raised when a file cannot be decoded to 8-bit grayscale or RGB."""


class PoolShortfallError(ValueError):
    """Raised when a sampling pool cannot cover a requested split count."""


@dataclass(frozen=True)
class RawImage:
    """Decoded image exactly as stored on disk: H x W x C uint8."""

    pixels: np.ndarray
    width: int
    height: int
    channels: int

    def __post_init__(self):
        if self.pixels.dtype != np.uint8:
            raise ValueError(f"RawImage requires uint8 pixels, got {self.pixels.dtype}")
        if self.pixels.shape != (self.height, self.width, self.channels):
            raise ValueError(
                f"pixel shape {self.pixels.shape} does not match "
                f"(height={self.height}, width={self.width}, channels={self.channels})"
            )
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.channels not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {self.channels}")


@dataclass(frozen=True)
class ImageTensor:
    """N x C x H x W float batch tagged with its declared value range.

    ``value_range`` is either ``"unit"`` ([0, 1], storage/display convention)
    or ``"model"`` ([-1, 1], the range the denoiser operates in).
    """

    data: np.ndarray
    value_range: str

    def __post_init__(self):
        if self.value_range not in _RANGE_BOUNDS:
            raise ValueError(f"unknown value range {self.value_range!r}")
        if self.data.ndim != 4:
            raise ValueError(f"ImageTensor data must be N x C x H x W, got shape {self.data.shape}")
        lo, hi = _RANGE_BOUNDS[self.value_range]
        if self.data.size and (self.data.min() < lo or self.data.max() > hi):
            raise ValueError(
                f"values [{self.data.min():.4g}, {self.data.max():.4g}] outside "
                f"declared {self.value_range} range [{lo}, {hi}]"
            )

    def __len__(self):
        return self.data.shape[0]


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: str
    provenance: str


@dataclass(frozen=True)
class DatasetManifest:
    """Labeled image records forming one training or evaluation split."""

    records: tuple[ManifestRecord, ...]
    split_name: str = ""

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.label not in LABELS:
                raise ValueError(f"unknown label {rec.label!r} for {rec.path}")
            if rec.provenance not in PROVENANCES:
                raise ValueError(f"unknown provenance {rec.provenance!r} for {rec.path}")
            if rec.provenance == "generated" and rec.label not in MINORITY_LABELS:
                raise ValueError(f"generated provenance is restricted to minority classes: {rec.path}")
            if rec.path in seen:
                raise ValueError(f"duplicate path in manifest: {rec.path}")
            seen.add(rec.path)

    def __len__(self):
        return len(self.records)

    def paths(self) -> list[str]:
        return [rec.path for rec in self.records]

    def labels(self) -> set[str]:
        return {rec.label for rec in self.records}

    def count(self, label: str, provenance: str | None = None) -> int:
        return sum(
            1
            for rec in self.records
            if rec.label == label and (provenance is None or rec.provenance == provenance)
        )

    def filter(self, label: str | None = None, provenance: str | None = None) -> list[ManifestRecord]:
        return [
            rec
            for rec in self.records
            if (label is None or rec.label == label)
            and (provenance is None or rec.provenance == provenance)
        ]


def save_manifest(manifest: DatasetManifest, path) -> None:
    """Write a manifest as UTF-8 CSV with header ``path,label,provenance``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "provenance"])
        for rec in manifest.records:
            writer.writerow([rec.path, rec.label, rec.provenance])


def load_manifest(path, split_name: str | None = None) -> DatasetManifest:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "label", "provenance"]:
            raise ValueError(f"{path}: expected header path,label,provenance, got {header}")
        records = tuple(ManifestRecord(row[0], row[1], row[2]) for row in reader if row)
    return DatasetManifest(records, split_name if split_name is not None else path.stem)


def load_image(path) -> RawImage:
    """Decode an 8-bit grayscale or RGB PNG/TIFF at its stored dimensions."""
    path = Path(path)
    # Let a missing file surface as FileNotFoundError with the path attached.
    with open(path, "rb") as fh:
        try:
            img = Image.open(fh)
            img.load()
        except Exception as exc:
            raise ImageDecodeError(f"{path}: cannot decode image ({exc})") from exc
    if img.mode not in _SUPPORTED_MODES:
        raise ImageDecodeError(
            f"{path}: unsupported image mode {img.mode!r}; expected 8-bit grayscale (L) or RGB"
        )
    pixels = np.asarray(img, dtype=np.uint8)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    h, w, c = pixels.shape
    return RawImage(pixels=pixels, width=w, height=h, channels=c)


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample an H x W x C array with half-pixel-center bilinear interpolation.

    Pure interpolation (no antialias prefilter) so the sampling convention is
    exactly reproducible by an independent resampler.
    """
    in_h, in_w = image.shape[:2]
    out = np.asarray(image, dtype=np.float64)
    if (in_h, in_w) == (out_h, out_w):
        return out.copy()

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(in_h, out_h)
    x0, x1, fx = axis_coords(in_w, out_w)
    fy = fy[:, None, None] if out.ndim == 3 else fy[:, None]
    fx = fx[None, :, None] if out.ndim == 3 else fx[None, :]

    top = out[y0][:, x0] * (1 - fx) + out[y0][:, x1] * fx
    bottom = out[y1][:, x0] * (1 - fx) + out[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def standardize(img: RawImage) -> ImageTensor:
    """Standardize one decoded image to a 1 x 3 x 64 x 64 unit-range tensor.

    The smallest edge is resized to 64 (bilinear, aspect ratio preserved,
    upscaling allowed), the result is center-cropped to 64 x 64, grayscale is
    replicated to three channels, and values are scaled to [0, 1].
    """
    h, w = img.height, img.width
    size = STANDARD_SIZE
    pixels = img.pixels.astype(np.float64)
    if min(h, w) != size:
        scale = size / min(h, w)
        new_h = size if h <= w else int(round(h * scale))
        new_w = size if w <= h else int(round(w * scale))
        # Rounding on the long edge must never undershoot the crop size.
        new_h, new_w = max(new_h, size), max(new_w, size)
        pixels = bilinear_resize(pixels, new_h, new_w)
        h, w = new_h, new_w
    top = (h - size) // 2
    left = (w - size) // 2
    pixels = pixels[top : top + size, left : left + size]
    if pixels.shape[2] == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    data = np.clip(pixels / 255.0, 0.0, 1.0).astype(np.float32)
    return ImageTensor(data.transpose(2, 0, 1)[None], "unit")


def load_standardized(paths) -> ImageTensor:
    """Load and standardize a batch of image files into one unit-range tensor."""
    batches = [standardize(load_image(p)).data for p in paths]
    if not batches:
        raise ValueError("no paths given")
    return ImageTensor(np.concatenate(batches, axis=0), "unit")


def to_uint8(chw: np.ndarray) -> np.ndarray:
    """Convert one C x H x W unit-range image to H x W x C uint8."""
    return np.clip(np.round(chw.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def save_png(chw: np.ndarray, path) -> None:
    """Write one C x H x W unit-range image as an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(chw)
    if arr.shape[2] == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def save_png_grid(images: ImageTensor, path, ncol: int = 8, pad: int = 2) -> None:
    """Tile a unit-range batch into one PNG grid, row-major, padded with white."""
    if images.value_range != "unit":
        raise ValueError("grids are rendered from unit-range tensors")
    n, c, h, w = images.data.shape
    ncol = min(ncol, n)
    nrow = (n + ncol - 1) // ncol
    canvas = np.ones((c, nrow * (h + pad) - pad, ncol * (w + pad) - pad), dtype=np.float32)
    for i in range(n):
        r, col = divmod(i, ncol)
        canvas[:, r * (h + pad) : r * (h + pad) + h, col * (w + pad) : col * (w + pad) + w] = (
            images.data[i]
        )
    save_png(canvas, path)


def to_model_range(img: ImageTensor) -> ImageTensor:
    """Map a unit-range tensor to model range via x -> 2x - 1."""
    if img.value_range != "unit":
        raise ValueError(f"expected unit-range tensor, got {img.value_range!r}")
    return ImageTensor(img.data * 2.0 - 1.0, "model")


def from_model_range(img: ImageTensor) -> ImageTensor:
    """Inverse of :func:`to_model_range`: x -> (x + 1) / 2."""
    if img.value_range != "model":
        raise ValueError(f"expected model-range tensor, got {img.value_range!r}")
    return ImageTensor((img.data + 1.0) / 2.0, "unit")


@dataclass(frozen=True)
class SplitSpec:
    """Per-class real and generated image counts for one training split."""

    name: str
    real: dict[str, int] = field(default_factory=dict)
    generated: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for counts in (self.real, self.generated):
            for label, n in counts.items():
                if label not in LABELS:
                    raise ValueError(f"unknown label {label!r} in split spec")
                if n < 0:
                    raise ValueError(f"negative count for {label}")
        if self.generated.get("protein", 0) != 0:
            raise ValueError("protein images are never generated; generated count must be 0")

    def real_count(self, label: str) -> int:
        return self.real.get(label, 0)

    def generated_count(self, label: str) -> int:
        return self.generated.get(label, 0)


def _table_split(name: str, protein_real: int, minority_generated: int) -> SplitSpec:
    return SplitSpec(
        name=name,
        real={"silicone_oil": 1000, "air_bubble": 1000, "protein": protein_real},
        generated={"silicone_oil": minority_generated, "air_bubble": minority_generated, "protein": 0},
    )


#: The nine named training-set presets. Real-n splits hold only real images
#: (protein count growing 1K..20K); each Mixed-n split mirrors its Real-n
#: counterpart and tops the minority classes up to the protein count with
#: generated images.
SPLIT_PRESETS = {
    "Real-0": _table_split("Real-0", 1000, 0),
    "Real-1": _table_split("Real-1", 2000, 0),
    "Real-2": _table_split("Real-2", 5000, 0),
    "Real-3": _table_split("Real-3", 10000, 0),
    "Real-4": _table_split("Real-4", 20000, 0),
    "Mixed-1": _table_split("Mixed-1", 2000, 1000),
    "Mixed-2": _table_split("Mixed-2", 5000, 4000),
    "Mixed-3": _table_split("Mixed-3", 10000, 9000),
    "Mixed-4": _table_split("Mixed-4", 20000, 19000),
}


def split_preset(name: str) -> SplitSpec:
    try:
        return SPLIT_PRESETS[name]
    except KeyError:
        valid = ", ".join(SPLIT_PRESETS)
        raise KeyError(f"unknown split preset {name!r}; valid presets: {valid}") from None


def build_split(
    spec: SplitSpec,
    real_pool: DatasetManifest,
    generated_pool: DatasetManifest | None,
    seed: int,
) -> DatasetManifest:
    """Sample a split from candidate pools, without replacement, deterministically.

    One PCG64 stream is derived per (split name, class, provenance) so the
    selection for one class is independent of the others. The same seed always
    yields a byte-identical manifest.
    """
    records: list[ManifestRecord] = []
    for class_idx, label in enumerate(LABELS):
        for prov_idx, (provenance, pool, count) in enumerate(
            [
                ("real", real_pool, spec.real_count(label)),
                ("generated", generated_pool, spec.generated_count(label)),
            ]
        ):
            if count == 0:
                continue
            candidates = pool.filter(label=label, provenance=provenance) if pool else []
            if len(candidates) < count:
                raise PoolShortfallError(
                    f"{spec.name}: need {count} {provenance} images of class {label}, "
                    f"pool has {len(candidates)} (short {count - len(candidates)})"
                )
            rng = np.random.default_rng(
                [int(seed), zlib.crc32(spec.name.encode("utf-8")), class_idx, prov_idx]
            )
            chosen = rng.choice(len(candidates), size=count, replace=False)
            records.extend(candidates[i] for i in chosen)
    return DatasetManifest(tuple(records), split_name=spec.name)


# ---------------------------------------------------------------------------
# Procedural desk-scale corpus
# ---------------------------------------------------------------------------

#: Rendering style per class: anti-aliased rings mimic the bright-centered
#: halo of air bubbles, filled discs with a specular highlight mimic silicone
#: oil droplets, and random-walk blobs mimic irregular protein aggregates.
STYLE_FOR_LABEL = {
    "air_bubble": "ring",
    "silicone_oil": "disc",
    "protein": "blob",
}

_BACKGROUND = 215.0
_NOISE_STD = 5.0


def _canvas(size: int, rng: np.random.Generator | None) -> np.ndarray:
    img = np.full((size, size), _BACKGROUND, dtype=np.float64)
    if rng is not None:
        img += rng.normal(0.0, _NOISE_STD, size=img.shape)
    return img


def _radius_grid(size: int, center) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return np.hypot(yy - center[0], xx - center[1])


def draw_ring(
    size: int,
    radius: float,
    thickness: float = 2.0,
    center=None,
    amplitude: float = 150.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Render a dark anti-aliased ring whose darkest band sits at ``radius``."""
    center = (size / 2.0, size / 2.0) if center is None else center
    img = _canvas(size, rng)
    d = _radius_grid(size, center)
    img -= amplitude * np.exp(-((d - radius) ** 2) / (2.0 * thickness**2))
    # Faint interior brightening: bubbles image lighter than the background.
    img += 25.0 * np.exp(-(d**2) / (2.0 * (0.6 * radius) ** 2))
    return np.clip(img, 0, 255).astype(np.uint8)


def draw_disc(
    size: int,
    radius: float,
    center=None,
    amplitude: float = 130.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Render a filled dark disc with a bright off-center highlight."""
    center = (size / 2.0, size / 2.0) if center is None else center
    img = _canvas(size, rng)
    d = _radius_grid(size, center)
    img -= amplitude * (0.5 + 0.5 * np.tanh(radius - d))
    hl = (center[0] - 0.35 * radius, center[1] - 0.35 * radius)
    dh = _radius_grid(size, hl)
    img += 90.0 * np.exp(-(dh**2) / (2.0 * (0.3 * radius) ** 2))
    return np.clip(img, 0, 255).astype(np.uint8)


def draw_blob(
    size: int,
    n_steps: int = 12,
    center=None,
    amplitude: float = 90.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Render an irregular aggregate as overlapping stamps along a random walk."""
    rng = np.random.default_rng(0) if rng is None else rng
    center = (size / 2.0, size / 2.0) if center is None else center
    img = _canvas(size, rng)
    pos = np.array(center, dtype=np.float64)
    dark = np.zeros((size, size))
    for _ in range(n_steps):
        pos += rng.normal(0.0, 2.5, size=2)
        pos = np.clip(pos, size * 0.2, size * 0.8)
        r = rng.uniform(2.0, 5.0)
        d = _radius_grid(size, pos)
        dark = np.maximum(dark, amplitude * np.exp(-(d**2) / (2.0 * r**2)))
    return np.clip(img - dark, 0, 255).astype(np.uint8)


def _render(label: str, size: int, rng: np.random.Generator) -> np.ndarray:
    style = STYLE_FOR_LABEL[label]
    jitter = rng.normal(0.0, 2.0, size=2) + size / 2.0
    if style == "ring":
        return draw_ring(size, radius=rng.uniform(12.0, 22.0), thickness=rng.uniform(1.5, 3.0), center=jitter, rng=rng)
    if style == "disc":
        return draw_disc(size, radius=rng.uniform(10.0, 20.0), center=jitter, rng=rng)
    return draw_blob(size, n_steps=int(rng.integers(8, 16)), center=jitter, rng=rng)


def generate_procedural_corpus(
    class_styles,
    n_per_class: int,
    seed: int,
    out_dir,
    size: int = STANDARD_SIZE,
) -> DatasetManifest:
    """Write a seeded corpus of parametric particle images and its manifest.

    ``class_styles`` lists the class labels to render (each label has a fixed
    style, see :data:`STYLE_FOR_LABEL`). Files land under ``out_dir/<label>/``
    as 8-bit grayscale PNGs; the returned manifest marks them as real since
    they stand in for instrument data.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    out_dir = Path(out_dir)
    records = []
    for label in class_styles:
        if label not in STYLE_FOR_LABEL:
            raise ValueError(f"no procedural style for label {label!r}")
        class_idx = LABELS.index(label)
        class_dir = out_dir / label
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            rng = np.random.default_rng([int(seed), class_idx, i])
            img = _render(label, size, rng)
            path = class_dir / f"{label}_{i:05d}.png"
            Image.fromarray(img, mode="L").save(path)
            records.append(ManifestRecord(str(path), label, "real"))
    return DatasetManifest(tuple(records), split_name="procedural")
