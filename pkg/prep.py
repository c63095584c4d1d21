"""
Tensor preprocessing: per-channel normalization and training-time
augmentation (random crop, horizontal flip, brightness, contrast).

Tensors are channels-first (C, H, W). Plain feature vectors are treated as
(D, 1, 1) tensors, so normalization becomes per-feature standardization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from errors import ConfigError, DataError, DimensionError

log = logging.getLogger(__name__)

STDDEV_EPSILON = 1e-8


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ChannelStats:
    mean: np.ndarray
    stddev: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.stddev, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise DimensionError(f"mean has {mean.size} channels, stddev has {std.size}")
        if np.any(std <= 0):
            raise DataError("stddev must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "stddev", std)

    @property
    def channels(self) -> int:
        return self.mean.size


def compute_channel_stats(images: Sequence[np.ndarray]) -> ChannelStats:
    """Per-channel mean and population stddev over every pixel of every image."""
    if len(images) == 0:
        raise DataError("cannot compute channel stats of an empty image set")
    channels = {np.asarray(img).shape[0] for img in images}
    if len(channels) != 1:
        raise DimensionError(f"images disagree on channel count: {sorted(channels)}")
    c = channels.pop()
    pixels = np.concatenate([np.asarray(img, dtype=np.float64).reshape(c, -1) for img in images], axis=1)
    mean = pixels.mean(axis=1)
    std = pixels.std(axis=1)
    flat = std < STDDEV_EPSILON
    if np.any(flat):
        log.warning(f"Zero-variance channels {np.flatnonzero(flat).tolist()}; "
                    f"clamping stddev to {STDDEV_EPSILON}")
        std = np.where(flat, STDDEV_EPSILON, std)
    return ChannelStats(mean, std)


def _check_channels(image: np.ndarray, stats: ChannelStats) -> None:
    if image.shape[0] != stats.channels:
        raise DimensionError(f"image has {image.shape[0]} channels, stats have {stats.channels}")


def _broadcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (ndim - 1))


def normalize(image: np.ndarray, stats: ChannelStats) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    _check_channels(image, stats)
    return (image - _broadcast(stats.mean, image.ndim)) / _broadcast(stats.stddev, image.ndim)


def denormalize(image: np.ndarray, stats: ChannelStats) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    _check_channels(image, stats)
    return image * _broadcast(stats.stddev, image.ndim) + _broadcast(stats.mean, image.ndim)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentSpec:
    crop_size: tuple[int, int] = (224, 224)
    flip_probability: float = 0.5
    brightness_delta_range: tuple[float, float] = (-0.1, 0.1)
    contrast_factor_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.crop_size) != 2 or min(self.crop_size) < 1:
            raise ConfigError("crop_size", f"must be two positive ints, got {self.crop_size}")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigError("flip_probability", f"must be in [0, 1], got {self.flip_probability}")
        lo, hi = self.brightness_delta_range
        if lo > hi:
            raise ConfigError("brightness_delta_range", f"{lo} > {hi}")
        lo, hi = self.contrast_factor_range
        if lo > hi:
            raise ConfigError("contrast_factor_range", f"{lo} > {hi}")


def hflip(image: np.ndarray) -> np.ndarray:
    return np.asarray(image)[..., ::-1]


def center_crop(image: np.ndarray, crop_size: tuple[int, int]) -> np.ndarray:
    h, w = crop_size
    H, W = image.shape[-2:]
    if h > H or w > W:
        raise DimensionError(f"crop {crop_size} larger than image {(H, W)}")
    top, left = (H - h) // 2, (W - w) // 2
    return image[..., top:top + h, left:left + w]


def augment(image: np.ndarray, spec: AugmentSpec, draw: np.random.Generator) -> np.ndarray:
    """crop -> flip -> brightness (additive) -> contrast (about the image mean).

    Every random quantity is drawn on every call, so the generator advances
    identically whatever the spec.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = spec.crop_size
    H, W = image.shape[-2:]
    if h > H or w > W:
        raise DimensionError(f"crop {spec.crop_size} larger than image {(H, W)}")

    top = int(draw.integers(0, H - h + 1))
    left = int(draw.integers(0, W - w + 1))
    flip = draw.random() < spec.flip_probability
    delta = draw.uniform(*spec.brightness_delta_range)
    factor = draw.uniform(*spec.contrast_factor_range)

    out = image[..., top:top + h, left:left + w]
    if flip:
        out = hflip(out)
    out = out + delta
    mean = out.mean()
    return mean + factor * (out - mean)


# ---------------------------------------------------------------------------
# Feature pipeline used by training and evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FeaturePipeline:
    """Normalization (and optional augmentation) applied to flat feature rows."""
    stats: ChannelStats
    shape: tuple[int, ...]
    augment_spec: AugmentSpec | None = None

    @classmethod
    def fit(cls, features: np.ndarray, shape: Sequence[int] | None = None,
            augment_spec: AugmentSpec | None = None) -> FeaturePipeline:
        features = np.asarray(features, dtype=np.float64)
        shape = tuple(shape) if shape else (features.shape[1], 1, 1)
        if int(np.prod(shape)) != features.shape[1]:
            raise DimensionError(f"feature_shape {shape} does not match {features.shape[1]} features")
        if augment_spec is not None and len(shape) != 3:
            raise ConfigError("feature_shape", "augmentation needs a (C, H, W) feature_shape")
        stats = compute_channel_stats(list(features.reshape((-1,) + shape)))
        return cls(stats, shape, augment_spec)

    @property
    def output_dim(self) -> int:
        if self.augment_spec is None:
            return int(np.prod(self.shape))
        h, w = self.augment_spec.crop_size
        return self.shape[0] * h * w

    def _normalized(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != int(np.prod(self.shape)):
            raise DimensionError(f"expected (n, {int(np.prod(self.shape))}) features, got {x.shape}")
        x = x.reshape(len(x), self.shape[0], -1)
        x = (x - self.stats.mean[None, :, None]) / self.stats.stddev[None, :, None]
        return x.reshape((-1,) + self.shape)

    def transform(self, features: np.ndarray) -> np.ndarray:
        """Evaluation path: normalize, center crop if augmenting, flatten."""
        x = self._normalized(features)
        if self.augment_spec is not None:
            x = center_crop(x, self.augment_spec.crop_size)
        return x.reshape(len(x), -1)

    def transform_train(self, features: np.ndarray, draw: np.random.Generator) -> np.ndarray:
        if self.augment_spec is None:
            return self.transform(features)
        x = self._normalized(features)
        return np.stack([augment(img, self.augment_spec, draw).reshape(-1) for img in x])

    def to_json(self) -> dict[str, Any]:
        spec = self.augment_spec
        return {
            "mean": self.stats.mean.tolist(),
            "stddev": self.stats.stddev.tolist(),
            "shape": list(self.shape),
            "augment": None if spec is None else {
                "crop_size": list(spec.crop_size),
                "flip_probability": spec.flip_probability,
                "brightness_delta_range": list(spec.brightness_delta_range),
                "contrast_factor_range": list(spec.contrast_factor_range),
                "seed": spec.seed,
            },
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> FeaturePipeline:
        aug = data.get("augment")
        spec = None if aug is None else AugmentSpec(
            crop_size=tuple(aug["crop_size"]),
            flip_probability=aug["flip_probability"],
            brightness_delta_range=tuple(aug["brightness_delta_range"]),
            contrast_factor_range=tuple(aug["contrast_factor_range"]),
            seed=aug["seed"],
        )
        return cls(ChannelStats(data["mean"], data["stddev"]), tuple(data["shape"]), spec)
