"""Hand-crafted patch descriptors and the learnable affine feature extractor.

Each non-overlapping stride x stride patch yields a 14-channel raw
descriptor: mean RGB (3), per-channel standard deviation (3), and an 8-bin
orientation histogram of central-difference luminance gradients weighted by
gradient magnitude.  The extractor maps raw descriptors through a learned
affine transform, so feature maps are linear in the weights and gradients
have a closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Camera

RAW_CHANNELS = 14
_HIST_BINS = 8


@dataclass
class ExtractorWeights:
    """Affine map from raw descriptors to feature channels: f = w @ d + b."""

    w: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        self.w = np.asarray(self.w, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.w.ndim != 2:
            raise ValueError(f"w must be (channels, raw), got shape {self.w.shape}")
        if self.b.shape != (self.w.shape[0],):
            raise ValueError(f"b shape {self.b.shape} does not match w {self.w.shape}")
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.b))):
            raise ValueError("weights must be finite")

    @property
    def channels(self) -> int:
        return int(self.w.shape[0])


def init_weights(channels: int = 32, seed: int = 0,
                 raw_channels: int = RAW_CHANNELS) -> ExtractorWeights:
    """Seeded uniform init in [-1/sqrt(D), 1/sqrt(D)] with zero bias."""
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(raw_channels)
    w = rng.uniform(-bound, bound, size=(channels, raw_channels))
    return ExtractorWeights(w=w, b=np.zeros(channels))


def _validate_image(image: np.ndarray, stride: int) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image entries must be finite")
    height, width = image.shape[:2]
    if height % stride or width % stride:
        raise ValueError(
            f"image size {height}x{width} is not divisible by stride {stride}")
    return image


def compute_raw_descriptors(image: np.ndarray, stride: int) -> np.ndarray:
    """Per-patch raw descriptor map of shape (H/stride, W/stride, 14)."""
    stride = int(stride)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    image = _validate_image(image, stride)
    height, width = image.shape[:2]
    rows, cols = height // stride, width // stride

    patches = image.reshape(rows, stride, cols, stride, 3)
    means = patches.mean(axis=(1, 3))
    stds = patches.std(axis=(1, 3))

    luminance = image.mean(axis=2)
    gy, gx = np.gradient(luminance)
    magnitude = np.hypot(gx, gy)
    angle = np.arctan2(gy, gx)
    bins = np.floor((angle + np.pi) / (np.pi / 4.0)).astype(np.int64) % _HIST_BINS
    hist = np.zeros((rows, cols, _HIST_BINS))
    for b in range(_HIST_BINS):
        weighted = np.where(bins == b, magnitude, 0.0)
        hist[:, :, b] = weighted.reshape(rows, stride, cols, stride).sum(axis=(1, 3))

    return np.concatenate([means, stds, hist], axis=2)


def extract_from_raw(raw: np.ndarray, weights: ExtractorWeights) -> np.ndarray:
    """Apply the affine transform cell-wise to a raw descriptor map."""
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 3 or raw.shape[2] != weights.w.shape[1]:
        raise ValueError(
            f"raw descriptor map shape {raw.shape} does not match weights "
            f"expecting {weights.w.shape[1]} channels")
    return np.einsum("hwd,cd->hwc", raw, weights.w) + weights.b


def extract(image: np.ndarray, weights: ExtractorWeights, camera: Camera) -> np.ndarray:
    """Feature map of an image: descriptors at the camera's stride, then affine."""
    return extract_from_raw(
        compute_raw_descriptors(image, camera.feature_stride), weights)


def backprop_weights(raw: np.ndarray, grad_output: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Accumulate loss gradients w.r.t. (w, b) from a feature-map gradient.

    With f = w @ d + b per cell, dL/dw is the sum over cells of the outer
    product grad x descriptor, and dL/db the plain sum of the gradient.
    """
    raw = np.asarray(raw, dtype=float)
    grad_output = np.asarray(grad_output, dtype=float)
    if raw.shape[:2] != grad_output.shape[:2]:
        raise ValueError(
            f"raw map {raw.shape} and gradient {grad_output.shape} disagree on grid")
    grad_w = np.einsum("hwc,hwd->cd", grad_output, raw)
    grad_b = grad_output.sum(axis=(0, 1))
    return grad_w, grad_b
