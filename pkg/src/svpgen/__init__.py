"""Generative augmentation toolkit for sub-visible particle micrographs.

Trains per-class denoising diffusion models on minority-class particle
images, synthesizes balanced training corpora, and measures the downstream
effect with an imbalance-robust classification and evaluation harness
(Fréchet distance, per-class/macro precision, AUPRC).
"""

__version__ = "0.1.0"

from svpgen.imageio import LABELS

__all__ = ["LABELS", "__version__"]
