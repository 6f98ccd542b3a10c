import numpy as np
import pytest
from PIL import Image

from svpgen import imageio


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Small procedural corpus shared by read-only tests."""
    root = tmp_path_factory.mktemp("corpus")
    manifest = imageio.generate_procedural_corpus(list(imageio.LABELS), 10, seed=7, out_dir=root)
    imageio.save_manifest(manifest, root / "manifest.csv")
    return manifest


def make_ramp_png(path, height, width, mode="RGB"):
    """Linear horizontal luminance ramp; smooth content for resampler checks."""
    x = np.linspace(0, 255, width)
    img = np.tile(x, (height, 1)).astype(np.uint8)
    if mode == "RGB":
        img = np.stack([img, img[:, ::-1], np.full_like(img, 128)], axis=-1)
    Image.fromarray(img, mode=mode).save(path)
    return img


def write_png(path, array):
    mode = "L" if array.ndim == 2 else "RGB"
    Image.fromarray(array.astype(np.uint8), mode=mode).save(path)
