"""
Training loop and overlapped-tile inference.
"""

import concurrent.futures
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np
import pyarrow as pa
import pyarrow.csv as pcsv

from . import tensor as T
from .dataset import PatchPair, SplitManifest, zscore_normalize
from .errors import ConfigError, DegenerateCorpusError
from .loss import bce_loss, dmi_loss, flatten_pixels, one_hot
from .model import UNet
from .raster import BINARY_CLASSES, Raster, crop_tile, mosaic, plan_tiles
from .tables import write_csv
from .tensor import Tensor


LOSSES = ("DMI", "BCE")
THRESHOLD = 0.5


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser settings; defaults follow the published training setup (lr 0.001, momentum 0.9, 5 epochs)."""

    lr: float = 0.001
    momentum: float = 0.9
    epochs: int = 5
    batch_size: int = 8
    loss: str = "DMI"
    seed: int = 0

    def __post_init__(self) -> None:
        def set_attr(name, val):
            object.__setattr__(self, name, val)

        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        loss = str(self.loss).upper()
        if loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        set_attr('loss', loss)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"Unknown train config keys: {', '.join(unknown)}")
        return cls(**data)

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


def _check_compatible(model: UNet, bands: int, tile: int) -> None:
    if bands != model.config.in_bands:
        raise ConfigError(f"Image has {bands} bands but the model expects {model.config.in_bands}")
    model.config.check_tile(tile)


def _batch_arrays(patches: Sequence[PatchPair], dtype) -> Tuple[np.ndarray, np.ndarray]:
    images = np.stack([zscore_normalize(p.image) for p in patches]).astype(dtype, copy=False)
    labels = np.stack([p.label for p in patches]).reshape(-1)
    return images, labels


def batch_loss(model: UNet, patches: Sequence[PatchPair], loss: str, mode: str) -> Tensor:
    """Forward a batch of patches and score it with ``loss``."""
    images, labels = _batch_arrays(patches, model.dtype)
    logits = model.forward(Tensor(images), mode=mode)
    probs = flatten_pixels(T.softmax(logits, axis=1))
    if loss == "DMI":
        return dmi_loss(probs, labels)
    return bce_loss(T.slice_(probs, (slice(None), 1)), labels)


def _batches(items: Sequence, size: int):
    for start in range(0, len(items), size):
        yield items[start:start + size]


def evaluate_loss(model: UNet, patches: Sequence[PatchPair], loss: str, batch_size: int) -> float:
    """Mean batch loss in eval mode; NaN for an empty set."""
    if not patches:
        return float('nan')
    losses = []
    with T.no_grad():
        for batch in _batches(list(patches), batch_size):
            losses.append(batch_loss(model, batch, loss, mode="eval").item())
    return float(np.mean(losses))


def train_joint_determinant(model: UNet, patches: Sequence[PatchPair], batch_size: int) -> float:
    """det of the joint matrix accumulated over ``patches`` in eval mode."""
    total = np.zeros((2, 2), dtype=np.float64)
    count = 0
    with T.no_grad():
        for batch in _batches(list(patches), batch_size):
            images, labels = _batch_arrays(batch, model.dtype)
            probs = flatten_pixels(T.softmax(model.forward(Tensor(images), mode="eval"), axis=1)).data
            total += probs.astype(np.float64).T @ one_hot(labels, 2, dtype=np.float64)
            count += probs.shape[0]
    return float(np.linalg.det(total / count))


def orient_head(model: UNet, patches: Sequence[PatchPair], batch_size: int) -> bool:
    """Swap the output classes when they anti-correlate with the training labels.

    |det U| cannot tell class 1 from class 0, so a DMI-trained network may
    converge to either labelling. Returns True when the head was swapped.
    """
    det = train_joint_determinant(model, patches, batch_size)
    if det < 0:
        logging.warning("Joint matrix determinant over the training split is %.3g; swapping output classes", det)
        model.swap_classes()
        return True
    return False


def train(
    config: TrainConfig,
    model: UNet,
    manifest: SplitManifest,
    patches: Mapping[str, PatchPair],
) -> Tuple[UNet, List[EpochRecord]]:
    """Mini-batch SGD with momentum, reshuffling the training split every epoch."""
    missing = [pid for pid in list(manifest.train) + list(manifest.val) if pid not in patches]
    if missing:
        raise DegenerateCorpusError(f"Manifest references {len(missing)} missing patches, e.g. {missing[:3]}")
    train_set = [patches[pid] for pid in manifest.train]
    val_set = [patches[pid] for pid in manifest.val]
    if not train_set:
        raise DegenerateCorpusError("Training split is empty")
    first = train_set[0]
    _check_compatible(model, first.image.shape[0], first.label.shape[0])
    if model.config.classes != 2:
        raise ConfigError(f"Binary training needs a 2-class model, got {model.config.classes}")

    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    history: List[EpochRecord] = []

    logging.info("Training %s epochs on %s patches (%s val) with %s loss, lr=%s momentum=%s batch=%s",
                 config.epochs, len(train_set), len(val_set), config.loss, config.lr, config.momentum, config.batch_size)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        shuffled = [train_set[i] for i in order]
        losses = []
        for batch in _batches(shuffled, config.batch_size):
            T.zero_grads(params)
            loss = batch_loss(model, batch, config.loss, mode="train")
            loss.backward()
            T.sgd_step(params, config.lr, config.momentum)
            losses.append(loss.item())

        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            val_loss=evaluate_loss(model, val_set, config.loss, config.batch_size),
        )
        history.append(record)
        logging.info("Epoch %s/%s: train_loss=%.6f val_loss=%.6f",
                     epoch, config.epochs, record.train_loss, record.val_loss)

    T.zero_grads(params)
    if config.loss == "DMI":
        orient_head(model, train_set, config.batch_size)
    return model, history


def write_history(history: Sequence[EpochRecord], path: Union[str, Path]) -> None:
    """history.csv with columns epoch, train_loss, val_loss."""
    table = pa.table({
        'epoch': pa.array([r.epoch for r in history], type=pa.int64()),
        'train_loss': pa.array([r.train_loss for r in history], type=pa.float64()),
        'val_loss': pa.array([r.val_loss for r in history], type=pa.float64()),
    })
    path = write_csv(table, path)
    logging.info("Wrote training history to %s", path)


def read_history(path: Union[str, Path]) -> List[EpochRecord]:
    table = pcsv.read_csv(path)
    return [
        EpochRecord(epoch=int(e), train_loss=float(t), val_loss=float('nan') if v is None else float(v))
        for e, t, v in zip(table['epoch'].to_pylist(), table['train_loss'].to_pylist(), table['val_loss'].to_pylist())
    ]


def _predict_tile(model: UNet, tile: Raster, normalize: bool) -> Raster:
    values = zscore_normalize(tile.data) if normalize else tile.data
    # no_grad is per thread, so each worker enters it itself
    with T.no_grad():
        logits = model.forward(Tensor(values[np.newaxis].astype(model.dtype, copy=False)), mode="eval")
        probs = T.softmax(logits, axis=1).data[0, 1]
    return Raster(data=probs.astype(np.float32), geotransform=tile.geotransform)


def predict_map(
    model: UNet,
    image: Raster,
    tile: int,
    overlap: int,
    workers: int = 1,
    normalize: bool = True,
) -> Tuple[Raster, Raster]:
    """Positive-class probability map and its 0.5-threshold hard map.

    Tiles are z-scored individually (when ``normalize``), run through the
    model in eval mode and stitched with the nearest-centre rule.
    """
    _check_compatible(model, image.bands, tile)
    grid = plan_tiles(image.dims, tile, overlap)
    anchors = grid.origins
    worker_count = max(1, int(workers))
    logging.info("Predicting %s tiles of %s px (overlap %s) with %s worker(s)", len(anchors), tile, overlap, worker_count)

    if worker_count == 1:
        results = [_predict_tile(model, crop_tile(image, anchor, tile), normalize) for anchor in anchors]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=worker_count) as executor:
            futures = [
                executor.submit(_predict_tile, model, crop_tile(image, anchor, tile), normalize)
                for anchor in anchors
            ]
            results = [future.result() for future in futures]

    prob = mosaic(list(zip(anchors, results)), grid, geotransform=image.geotransform)
    hard = Raster(
        data=(prob.data >= THRESHOLD).astype(np.uint8),
        geotransform=image.geotransform,
        classes=BINARY_CLASSES,
    )
    positive = int(hard.data.sum())
    logging.info("Predicted %s of %s pixels as plantation", positive, hard.data.size)
    if math.isnan(float(prob.data.mean())):
        logging.warning("Probability map contains NaN values")
    return prob, hard


@dataclass(frozen=True)
class TilingConfig:
    """Inference tiling; NOISEMAP_THREADS caps ``workers`` when set."""

    tile: int = 64
    overlap: int = 8
    workers: int = 1

    def __post_init__(self) -> None:
        if self.overlap < 0 or self.tile <= self.overlap:
            raise ConfigError(f"tile must exceed overlap >= 0, got tile={self.tile}, overlap={self.overlap}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TilingConfig":
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"Unknown tiling keys: {', '.join(unknown)}")
        return cls(**data)

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)
