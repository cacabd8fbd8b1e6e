"""
Training corpus construction: patch extraction, class balancing,
train/validation split and per-patch z-score normalisation.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from .errors import AlignmentError, ArgumentError, ConfigError, DegenerateCorpusError
from .raster import Raster, read_raster, write_raster


@dataclass(frozen=True, eq=False)
class PatchPair:
    """An image patch (bands, tile, tile) with its binary label patch (tile, tile)."""

    image: np.ndarray
    label: np.ndarray
    anchor: Tuple[int, int]
    positive: bool = False

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.label.ndim != 2:
            raise ArgumentError(
                f"Patch image must be (bands, h, w) and label (h, w), got {self.image.shape} and {self.label.shape}"
            )
        if self.image.shape[1:] != self.label.shape:
            raise AlignmentError(f"Patch image {self.image.shape[1:]} and label {self.label.shape} dims differ")
        if self.label.size and self.label.max(initial=0) > 1:
            raise ArgumentError(f"Patch labels must be 0/1, found {int(self.label.max())} at {self.anchor}")

    @property
    def patch_id(self) -> str:
        return f"{self.anchor[0]}_{self.anchor[1]}"


@dataclass(frozen=True)
class SplitManifest:
    """Disjoint train/validation patch ids."""

    train: List[str]
    val: List[str]
    seed: int
    ratio: float

    def __post_init__(self) -> None:
        overlap = set(self.train) & set(self.val)
        if overlap:
            raise ArgumentError(f"Patch ids appear in both train and val: {sorted(overlap)[:5]}")

    def as_dict(self) -> Dict:
        return {'seed': self.seed, 'ratio': self.ratio, 'train': list(self.train), 'val': list(self.val)}

    @classmethod
    def from_dict(cls, data: Dict) -> "SplitManifest":
        return cls(train=list(data['train']), val=list(data['val']), seed=int(data['seed']), ratio=float(data['ratio']))


def extract_patches(image: Raster, labels: Raster, tile: int) -> List[PatchPair]:
    """Cut non-overlapping tile x tile patches covering the shared extent.

    Partial tiles at the right and bottom edges are discarded.
    """
    if tile < 1:
        raise ArgumentError(f"Tile size must be positive, got {tile}")
    if not image.aligned_with(labels):
        raise AlignmentError(
            f"Image {image.dims} and labels {labels.dims} are not aligned "
            f"(geotransforms {image.geotransform} vs {labels.geotransform})"
        )

    label_band = labels.band(0)
    patches = []
    for row in range(0, image.height - tile + 1, tile):
        for col in range(0, image.width - tile + 1, tile):
            label = np.ascontiguousarray(label_band[row:row + tile, col:col + tile])
            patches.append(PatchPair(
                image=np.ascontiguousarray(image.data[:, row:row + tile, col:col + tile]),
                label=label,
                anchor=(row, col),
                positive=bool((label == 1).any()),
            ))

    positives = sum(p.positive for p in patches)
    logging.info("Extracted %s patches of %s px (%s positive, %s negative)",
                 len(patches), tile, positives, len(patches) - positives)
    return patches


def balance_indices(positive: Sequence[bool], seed: int) -> np.ndarray:
    """Indices kept by random undersampling of the majority class, in input order."""
    flags = np.asarray(positive, dtype=bool)
    pos_idx = np.flatnonzero(flags)
    neg_idx = np.flatnonzero(~flags)
    if pos_idx.size == 0 or neg_idx.size == 0:
        raise DegenerateCorpusError(
            f"Cannot balance a corpus with {pos_idx.size} positive and {neg_idx.size} negative patches"
        )

    minority, majority = (pos_idx, neg_idx) if pos_idx.size <= neg_idx.size else (neg_idx, pos_idx)
    rng = np.random.default_rng(seed)
    sampled = rng.choice(majority, size=minority.size, replace=False)
    return np.sort(np.concatenate([minority, sampled]))


def balance_undersample(patches: Sequence[PatchPair], seed: int) -> List[PatchPair]:
    """Keep every minority-class patch and an equal-sized seeded sample of the majority."""
    keep = balance_indices([p.positive for p in patches], seed)
    logging.info("Balanced %s patches down to %s", len(patches), keep.size)
    return [patches[i] for i in keep]


def split(patches: Sequence[Union[PatchPair, str]], ratio: float, seed: int) -> SplitManifest:
    """Seeded shuffle then prefix split; the remainder goes to validation."""
    if not 0 < ratio < 1:
        raise ArgumentError(f"Split ratio must be in (0, 1), got {ratio}")
    ids = [p.patch_id if isinstance(p, PatchPair) else str(p) for p in patches]
    if not ids:
        raise DegenerateCorpusError("Cannot split an empty corpus")

    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(math.floor(ratio * len(ids) + 1e-9))
    shuffled = [ids[i] for i in order]
    manifest = SplitManifest(train=shuffled[:n_train], val=shuffled[n_train:], seed=seed, ratio=ratio)
    logging.info("Split %s patches into %s train / %s val", len(ids), len(manifest.train), len(manifest.val))
    return manifest


def zscore_normalize(image: np.ndarray) -> np.ndarray:
    """Per-band z-score using the population statistics of this patch; constant bands map to 0."""
    values = np.asarray(image, dtype=np.float64)
    axes = tuple(range(1, values.ndim))
    mean = values.mean(axis=axes, keepdims=True)
    std = values.std(axis=axes, keepdims=True)
    safe = np.where(std > 0, std, 1.0)
    out = np.where(std > 0, (values - mean) / safe, 0.0)
    return out.astype(np.float32)


def save_patches(patches: Iterable[PatchPair], directory: Union[str, Path], geotransform=None) -> List[str]:
    """Store patches as ``image/<row>_<col>.rst`` and ``label/<row>_<col>.rst``."""
    directory = Path(directory)
    ids = []
    for patch in patches:
        kwargs = {} if geotransform is None else {'geotransform': geotransform}
        write_raster(Raster(data=patch.image.astype(np.float32), **kwargs), directory / 'image' / f"{patch.patch_id}.rst")
        write_raster(Raster(data=patch.label.astype(np.uint8), **kwargs), directory / 'label' / f"{patch.patch_id}.rst")
        ids.append(patch.patch_id)
    logging.info("Saved %s patches to %s", len(ids), directory)
    return ids


def load_patches(directory: Union[str, Path], ids: Iterable[str]) -> Dict[str, PatchPair]:
    directory = Path(directory)
    patches = {}
    for patch_id in ids:
        row, col = (int(v) for v in patch_id.split('_'))
        image = read_raster(directory / 'image' / f"{patch_id}.rst")
        label = read_raster(directory / 'label' / f"{patch_id}.rst").band(0)
        patches[patch_id] = PatchPair(image=image.data, label=label, anchor=(row, col), positive=bool((label == 1).any()))
    return patches


def save_manifest(manifest: SplitManifest, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.as_dict(), indent=2), encoding='utf-8')


def load_manifest(path: Union[str, Path]) -> SplitManifest:
    with open(path, 'r', encoding='utf-8') as f:
        return SplitManifest.from_dict(json.load(f))


@dataclass(frozen=True)
class DatasetConfig:
    """Patch size, split ratio and seed for ``prepare``; desk-scale default tile is 64."""

    tile: int = 64
    ratio: float = 0.7
    seed: int = 0
    balance: bool = True

    def __post_init__(self) -> None:
        if self.tile < 1:
            raise ConfigError(f"tile must be >= 1, got {self.tile}")
        if not 0 < self.ratio < 1:
            raise ConfigError(f"ratio must lie in (0, 1), got {self.ratio}")

    @classmethod
    def from_dict(cls, data: Dict) -> "DatasetConfig":
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"Unknown dataset keys: {', '.join(unknown)}")
        return cls(**data)

    def as_dict(self) -> Dict:
        return asdict(self)


def prepare_corpus(image: Raster, labels: Raster, config: DatasetConfig) -> Tuple[List[PatchPair], SplitManifest]:
    """extract -> (balance) -> split, as run by the ``prepare`` stage.

    Balancing is skipped with a warning when every patch falls in one class.
    """
    patches = extract_patches(image, labels, config.tile)
    if not patches:
        raise DegenerateCorpusError(f"Source {image.dims} holds no full {config.tile} px tile")
    if config.balance:
        positive = sum(p.positive for p in patches)
        if 0 < positive < len(patches):
            patches = balance_undersample(patches, config.seed)
        else:
            logging.warning("All %s patches are %s; skipping balancing", len(patches),
                            "positive" if positive else "negative")
    return patches, split(patches, config.ratio, config.seed)
