"""
Synthetic landscapes and label corruption.

A landscape is a box-blurred white-noise field thresholded at its median,
which gives spatially coherent plantation blobs covering half the scene.
Spectra are a per-class mean vector plus Gaussian noise. Corruption mimics
a coarse historical product: majority-vote coarsening followed by
class-conditional random flips.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ArgumentError, ConfigError
from .raster import BINARY_CLASSES, DEFAULT_GEOTRANSFORM, Raster


def default_class_means(bands: int) -> List[List[float]]:
    """Two distinct reflectance-like spectra: a rising one for 'other', a shifted falling one for plantation."""
    other = np.linspace(0.05, 0.25, bands)
    plantation = other[::-1] + 0.05
    return [other.round(6).tolist(), plantation.round(6).tolist()]


@dataclass(frozen=True)
class LandscapeSpec:
    height: int = 512
    width: int = 512
    bands: int = 10
    blob_scale: int = 8
    class_means: Optional[List[List[float]]] = None
    noise_sigma: Union[float, List[List[float]]] = 0.05
    seed: int = 0
    geotransform: Tuple[float, ...] = DEFAULT_GEOTRANSFORM

    def __post_init__(self) -> None:
        def set_attr(name, val):
            object.__setattr__(self, name, val)

        if self.height < 1 or self.width < 1:
            raise ConfigError(f"Landscape dims must be positive, got {self.height}x{self.width}")
        if self.bands < 1:
            raise ConfigError(f"bands must be >= 1, got {self.bands}")
        if self.blob_scale < 1:
            raise ConfigError(f"blob_scale must be >= 1, got {self.blob_scale}")
        means = self.class_means if self.class_means is not None else default_class_means(self.bands)
        means = [[float(v) for v in row] for row in means]
        if len(means) != 2 or any(len(row) != self.bands for row in means):
            raise ConfigError(f"class_means must be 2 rows of {self.bands} values")
        if means[0] == means[1]:
            raise ConfigError("class_means must differ between classes")
        set_attr('class_means', means)
        set_attr('noise_sigma', self._sigma_table())
        set_attr('geotransform', tuple(float(v) for v in self.geotransform))

    def _sigma_table(self) -> List[List[float]]:
        """Noise sigma per class and band; a scalar applies to every entry."""
        try:
            sigma = np.asarray(self.noise_sigma, dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"noise_sigma must be a number or a table of numbers, got {self.noise_sigma!r}") from e
        if sigma.ndim == 0:
            sigma = np.full((2, self.bands), float(sigma))
        if sigma.shape != (2, self.bands):
            raise ConfigError(f"noise_sigma must be a scalar or 2 rows of {self.bands} values, got shape {sigma.shape}")
        if (sigma < 0).any() or np.isnan(sigma).any():
            raise ConfigError(f"noise_sigma must be >= 0, got {sigma.tolist()}")
        return sigma.tolist()

    @property
    def dims(self) -> Tuple[int, int]:
        return self.height, self.width

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LandscapeSpec":
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"Unknown landscape keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "LandscapeSpec":
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_dict(json.load(f))

    def as_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['geotransform'] = list(self.geotransform)
        return data


@dataclass(frozen=True)
class SynthConfig:
    """Landscape plus the corruption applied to produce training labels."""

    landscape: LandscapeSpec = field(default_factory=LandscapeSpec)
    coarsen_factor: int = 8
    r01: float = 0.3
    r10: float = 0.1
    noise_seed: int = 1
    points: int = 500
    point_seed: int = 2
    years: Tuple[int, ...] = (2020, 2022, 2024)

    def __post_init__(self) -> None:
        if isinstance(self.landscape, dict):
            object.__setattr__(self, 'landscape', LandscapeSpec.from_dict(self.landscape))
        object.__setattr__(self, 'years', tuple(int(y) for y in self.years))
        if self.coarsen_factor < 1:
            raise ConfigError(f"coarsen_factor must be >= 1, got {self.coarsen_factor}")
        for name in ('r01', 'r10'):
            if not 0 <= getattr(self, name) < 0.5:
                raise ConfigError(f"{name} must lie in [0, 0.5), got {getattr(self, name)}")
        if self.points < 1:
            raise ConfigError(f"points must be >= 1, got {self.points}")
        if not self.years:
            raise ConfigError("years must not be empty")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SynthConfig":
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"Unknown synth keys: {', '.join(unknown)}")
        return cls(**data)

    def as_dict(self) -> Dict[str, Any]:
        return {
            'landscape': self.landscape.as_dict(),
            'coarsen_factor': self.coarsen_factor,
            'r01': self.r01,
            'r10': self.r10,
            'noise_seed': self.noise_seed,
            'points': self.points,
            'point_seed': self.point_seed,
            'years': list(self.years),
        }


def generate(spec: LandscapeSpec) -> Tuple[Raster, Raster]:
    """Seeded (image, truth) pair; truth is 1 where the smoothed field exceeds its median."""
    rng = np.random.default_rng(spec.seed)
    noise_field = rng.standard_normal(spec.dims)
    smoothed = uniform_filter(noise_field, size=2 * spec.blob_scale + 1, mode='reflect')
    truth = (smoothed > np.median(smoothed)).astype(np.uint8)

    means = np.asarray(spec.class_means, dtype=np.float64)
    image = means[truth].transpose(2, 0, 1)
    sigma = np.asarray(spec.noise_sigma, dtype=np.float64)
    if (sigma > 0).any():
        image = image + sigma[truth].transpose(2, 0, 1) * rng.standard_normal((spec.bands,) + spec.dims)

    logging.info("Generated %sx%s landscape with %s bands (%.1f%% plantation)",
                 spec.height, spec.width, spec.bands, 100.0 * truth.mean())
    return (
        Raster(data=image.astype(np.float32), geotransform=spec.geotransform),
        Raster(data=truth, geotransform=spec.geotransform, classes=BINARY_CLASSES),
    )


def coarsen_labels(truth: Raster, factor: int) -> Raster:
    """Majority vote over factor x factor blocks (ties go to 0), re-expanded to the original dims."""
    if factor < 1:
        raise ArgumentError(f"Coarsening factor must be >= 1, got {factor}")
    height, width = truth.dims
    if height % factor or width % factor:
        raise ArgumentError(f"Raster dims {height}x{width} are not divisible by {factor}")
    if factor == 1:
        return truth

    ones = (truth.band(0) == 1).astype(np.int64)
    counts = ones.reshape(height // factor, factor, width // factor, factor).sum(axis=(1, 3))
    coarse = (2 * counts > factor * factor).astype(np.uint8)
    expanded = np.repeat(np.repeat(coarse, factor, axis=0), factor, axis=1)
    return replace(truth, data=expanded[np.newaxis])


def flip_noise(labels: Raster, r01: float, r10: float, seed: int) -> Raster:
    """Flip 0 -> 1 with probability r01 and 1 -> 0 with probability r10, independently per pixel."""
    for name, rate in (('r01', r01), ('r10', r10)):
        if not 0 <= rate < 0.5:
            raise ArgumentError(f"{name} must lie in [0, 0.5), got {rate}")

    values = labels.band(0)
    draws = np.random.default_rng(seed).random(values.shape)
    flips = ((values == 0) & (draws < r01)) | ((values == 1) & (draws < r10))
    noisy = np.where(flips, 1 - values, values).astype(values.dtype)
    logging.info("Flipped %s of %s label pixels (r01=%s, r10=%s)", int(flips.sum()), values.size, r01, r10)
    return replace(labels, data=noisy[np.newaxis])


def corrupt_labels(truth: Raster, factor: int, r01: float, r10: float, seed: int) -> Raster:
    """Coarsening followed by flip noise."""
    return flip_noise(coarsen_labels(truth, factor), r01, r10, seed)


def nearest_mean_classify(image: Raster, class_means: Sequence[Sequence[float]]) -> np.ndarray:
    """Per-pixel index of the closest class spectrum."""
    means = np.asarray(class_means, dtype=np.float64)
    pixels = image.data.astype(np.float64).reshape(image.bands, -1).T
    distances = ((pixels[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return distances.argmin(axis=1).reshape(image.dims).astype(np.uint8)
