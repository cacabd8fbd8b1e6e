"""
Geo-referenced raster container and the RSTv1 file format.

Also hosts the tiling helpers used for patch extraction and overlapped
inference: ``plan_tiles`` lays out clamped anchors, ``crop_tile`` cuts one
tile out of a raster and ``mosaic`` stitches tiles back together, resolving
overlaps by nearest tile centre.

RSTv1 layout (little-endian):
    magic "RST1" | version u32 | dtype u8 | bands u32 | height u64 | width u64
    | nodata-present u8 | nodata f64 | geotransform 6 x f64 | payload
The payload is band-sequential, row-major.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    ArgumentError,
    IncompleteMosaicError,
    RasterCorruptionError,
    RasterFormatError,
    RasterValidationError,
    UnsupportedRasterError,
)


MAGIC = b"RST1"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIBIQQBd6d")
HEADER_SIZE = HEADER.size

DTYPE_CODES = {0: np.dtype("<u1"), 1: np.dtype("<f4")}
CODE_FOR_DTYPE = {np.dtype(np.uint8): 0, np.dtype(np.float32): 1}

DEFAULT_GEOTRANSFORM = (0.0, 10.0, 0.0, 0.0, 0.0, -10.0)

# class table of the binary plantation maps
BINARY_CLASSES = {0: "other", 1: "plantation"}

Anchor = Tuple[int, int]


@dataclass(frozen=True, eq=False)
class Raster:
    """Multi-band grid with an affine geotransform.

    ``data`` has shape (bands, height, width) and dtype uint8 (categorical)
    or float32 (continuous). ``classes`` optionally maps class codes to names
    for categorical rasters.
    """

    data: np.ndarray
    geotransform: Tuple[float, ...] = DEFAULT_GEOTRANSFORM
    nodata: Optional[float] = None
    classes: Optional[Dict[int, str]] = None

    def __post_init__(self) -> None:
        def set_attr(name, val):
            object.__setattr__(self, name, val)

        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[np.newaxis]
        if data.ndim != 3:
            raise RasterValidationError(f"Raster data must be (bands, height, width), got shape {data.shape}")
        if data.dtype not in CODE_FOR_DTYPE:
            raise RasterValidationError(f"Raster dtype must be uint8 or float32, got {data.dtype}")
        if data.shape[0] == 0:
            raise RasterValidationError("Raster must have at least one band")
        set_attr('data', np.ascontiguousarray(data))

        geotransform = tuple(float(v) for v in self.geotransform)
        if len(geotransform) != 6:
            raise RasterValidationError(f"Geotransform must have 6 values, got {len(geotransform)}")
        if not geotransform[1] > 0:
            raise RasterValidationError(f"Pixel width must be positive, got {geotransform[1]}")
        if geotransform[5] == 0:
            raise RasterValidationError("Pixel height must be non-zero")
        set_attr('geotransform', geotransform)

        if self.nodata is not None:
            set_attr('nodata', float(self.nodata))

        if self.classes is not None:
            classes = {int(code): str(name) for code, name in self.classes.items()}
            set_attr('classes', classes)
            if self.dtype == np.uint8:
                values = np.unique(self.data)
                allowed = set(classes)
                if self.nodata is not None:
                    allowed.add(int(self.nodata))
                unknown = sorted(int(v) for v in values if int(v) not in allowed)
                if unknown:
                    raise RasterValidationError(f"Raster values {unknown} are not in the class table")

    @property
    def bands(self) -> int:
        return int(self.data.shape[0])

    @property
    def height(self) -> int:
        return int(self.data.shape[1])

    @property
    def width(self) -> int:
        return int(self.data.shape[2])

    @property
    def dims(self) -> Tuple[int, int]:
        return self.height, self.width

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def pixel_size(self) -> Tuple[float, float]:
        return self.geotransform[1], self.geotransform[5]

    def band(self, index: int = 0) -> np.ndarray:
        return self.data[index]

    def aligned_with(self, other: "Raster") -> bool:
        return self.dims == other.dims and np.allclose(self.geotransform, other.geotransform)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Raster):
            return NotImplemented
        same_nodata = (
            self.nodata == other.nodata
            or (self.nodata is not None and other.nodata is not None
                and math.isnan(self.nodata) and math.isnan(other.nodata))
        )
        return (
            self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and self.geotransform == other.geotransform
            and same_nodata
            and self.classes == other.classes
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


def _sidecar_path(path: Path) -> Path:
    return Path(f"{path}.meta.json")


def write_raster(raster: Raster, path: Union[str, Path]) -> None:
    """Write ``raster`` as RSTv1, plus a class-table sidecar when it has one."""
    path = Path(path)
    header = HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        CODE_FOR_DTYPE[raster.dtype],
        raster.bands,
        raster.height,
        raster.width,
        1 if raster.nodata is not None else 0,
        raster.nodata if raster.nodata is not None else 0.0,
        *raster.geotransform,
    )
    payload = raster.data.astype(DTYPE_CODES[CODE_FOR_DTYPE[raster.dtype]], copy=False).tobytes()

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as f:
            f.write(header)
            f.write(payload)
        sidecar = _sidecar_path(path)
        if raster.classes is not None:
            meta = {'classes': {str(code): name for code, name in sorted(raster.classes.items())}}
            sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True), encoding='utf-8')
        elif sidecar.exists():
            sidecar.unlink()
    except OSError as e:
        logging.error("Error writing raster %s: %s", path, e)
        raise

    logging.debug("Wrote raster %s (%s bands, %sx%s, %s)", path, raster.bands, raster.height, raster.width, raster.dtype)


def read_raster(path: Union[str, Path]) -> Raster:
    """Read an RSTv1 file written by ``write_raster``."""
    path = Path(path)
    with open(path, 'rb') as f:
        blob = f.read()

    if blob[:4] != MAGIC:
        raise RasterFormatError(f"{path} is not an RSTv1 raster (bad magic {blob[:4]!r})")
    if len(blob) < HEADER_SIZE:
        raise RasterCorruptionError(f"{path} is truncated: {len(blob)} bytes is shorter than the header")

    (_, version, dtype_code, bands, height, width,
     has_nodata, nodata, *geotransform) = HEADER.unpack_from(blob)

    if version != FORMAT_VERSION:
        raise UnsupportedRasterError(f"{path} has unsupported format version {version}")
    if dtype_code not in DTYPE_CODES:
        raise UnsupportedRasterError(f"{path} has unknown dtype code {dtype_code}")

    dtype = DTYPE_CODES[dtype_code]
    expected = bands * height * width * dtype.itemsize
    actual = len(blob) - HEADER_SIZE
    if actual != expected:
        raise RasterCorruptionError(
            f"{path} payload is {actual} bytes, header declares {bands}x{height}x{width} {dtype} = {expected} bytes"
        )

    data = np.frombuffer(blob, dtype=dtype, offset=HEADER_SIZE).reshape(bands, height, width)
    data = data.astype(dtype.newbyteorder('='))

    classes = None
    sidecar = _sidecar_path(path)
    if sidecar.exists():
        try:
            meta = json.loads(sidecar.read_text(encoding='utf-8'))
            classes = {int(code): name for code, name in meta.get('classes', {}).items()}
        except (json.JSONDecodeError, ValueError, AttributeError) as e:
            logging.error("Error reading raster sidecar %s: %s", sidecar, e)
            raise RasterFormatError(f"Invalid raster sidecar {sidecar}: {e}") from e

    return Raster(
        data=data,
        geotransform=tuple(geotransform),
        nodata=nodata if has_nodata else None,
        classes=classes,
    )


def resample_nearest(raster: Raster, factor: int) -> Raster:
    """Upsample by an integer factor, copying each value into a factor x factor block."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ArgumentError(f"Resampling factor must be a positive integer, got {factor}")
    if factor == 1:
        return raster

    data = np.repeat(np.repeat(raster.data, factor, axis=1), factor, axis=2)
    x0, px, rx, y0, ry, py = raster.geotransform
    geotransform = (x0, px / factor, rx / factor, y0, ry / factor, py / factor)
    return replace(raster, data=data, geotransform=geotransform)


def world_to_pixel(geotransform: Sequence[float], x, y):
    """Map world coordinates (scalars or arrays) to (row, col); boundary points belong to the floor pixel."""
    x0, px, rx, y0, ry, py = geotransform
    det = px * py - rx * ry
    dx = np.asarray(x, dtype=np.float64) - x0
    dy = np.asarray(y, dtype=np.float64) - y0
    col = np.floor((py * dx - rx * dy) / det).astype(np.int64)
    row = np.floor((px * dy - ry * dx) / det).astype(np.int64)
    if row.ndim == 0:
        return int(row), int(col)
    return row, col


def pixel_to_world(geotransform: Sequence[float], row: float, col: float) -> Tuple[float, float]:
    """World coordinates of a pixel-space position (use +0.5 for pixel centres)."""
    x0, px, rx, y0, ry, py = geotransform
    return x0 + col * px + row * rx, y0 + col * ry + row * py


def pixel_area(raster: Raster) -> float:
    """Area of one pixel in squared map units."""
    _, px, rx, _, ry, py = raster.geotransform
    return abs(px * py - rx * ry)


@dataclass(frozen=True)
class TileGrid:
    """Anchors of overlapping square tiles over a (height, width) source."""

    tile_size: int
    overlap: int
    source_dims: Tuple[int, int]
    row_anchors: Tuple[int, ...] = field(default=())
    col_anchors: Tuple[int, ...] = field(default=())

    @property
    def origins(self) -> List[Anchor]:
        return [(r, c) for r in self.row_anchors for c in self.col_anchors]

    @property
    def padded(self) -> bool:
        height, width = self.source_dims
        return height < self.tile_size or width < self.tile_size

    def __len__(self) -> int:
        return len(self.row_anchors) * len(self.col_anchors)


def _axis_anchors(dim: int, tile: int, stride: int) -> Tuple[int, ...]:
    if dim <= tile:
        return (0,)
    anchors = [0]
    while anchors[-1] + tile < dim:
        anchors.append(min(anchors[-1] + stride, dim - tile))
    return tuple(anchors)


def plan_tiles(dims: Tuple[int, int], tile: int, overlap: int) -> TileGrid:
    """Lay out tiles with stride ``tile - overlap``; the last anchor per axis is clamped to the edge."""
    if overlap < 0 or tile <= overlap:
        raise ArgumentError(f"Tile size must exceed overlap >= 0, got tile={tile}, overlap={overlap}")
    height, width = (int(d) for d in dims)
    if height < 1 or width < 1:
        raise ArgumentError(f"Source dims must be positive, got {dims}")

    stride = tile - overlap
    grid = TileGrid(
        tile_size=tile,
        overlap=overlap,
        source_dims=(height, width),
        row_anchors=_axis_anchors(height, tile, stride),
        col_anchors=_axis_anchors(width, tile, stride),
    )
    logging.debug("Planned %s tiles of %s px over %sx%s (overlap %s)", len(grid), tile, height, width, overlap)
    return grid


def crop_tile(raster: Raster, anchor: Anchor, tile: int) -> Raster:
    """Cut a tile x tile window at ``anchor``, zero-padding past the source edge."""
    row, col = anchor
    window = raster.data[:, row:row + tile, col:col + tile]
    if window.shape[1:] != (tile, tile):
        padded = np.zeros((raster.bands, tile, tile), dtype=raster.dtype)
        padded[:, :window.shape[1], :window.shape[2]] = window
        window = padded
    x, y = pixel_to_world(raster.geotransform, row, col)
    _, px, rx, _, ry, py = raster.geotransform
    return Raster(
        data=window.copy(),
        geotransform=(x, px, rx, y, ry, py),
        nodata=raster.nodata,
        classes=raster.classes,
    )


def _axis_owners(dim: int, anchors: Sequence[int], tile: int) -> np.ndarray:
    # Compare doubled coordinates so pixel and tile centres stay integral.
    centres2 = 2 * np.arange(dim)[:, None] + 1
    starts = np.asarray(anchors)[None, :]
    distance = np.abs(centres2 - (2 * starts + tile)).astype(np.float64)
    covers = (np.arange(dim)[:, None] >= starts) & (np.arange(dim)[:, None] < starts + tile)
    distance[~covers] = np.inf
    # argmin returns the first minimum, so the earlier anchor wins ties.
    return np.argmin(distance, axis=1)


def mosaic(tiles: Sequence[Tuple[Anchor, Raster]], grid: TileGrid, geotransform: Optional[Sequence[float]] = None) -> Raster:
    """Stitch tiles back into a raster of ``grid.source_dims``.

    Each output pixel is taken from the covering tile whose centre is nearest;
    padding beyond the source extent is dropped.
    """
    by_anchor: Dict[Anchor, Raster] = {}
    for anchor, tile_raster in tiles:
        by_anchor[(int(anchor[0]), int(anchor[1]))] = tile_raster

    missing = [anchor for anchor in grid.origins if anchor not in by_anchor]
    if missing:
        raise IncompleteMosaicError(f"Mosaic is missing tiles for anchors {missing}")

    first = by_anchor[grid.origins[0]]
    for anchor in grid.origins:
        tile_raster = by_anchor[anchor]
        if tile_raster.dtype != first.dtype or tile_raster.bands != first.bands:
            raise RasterValidationError(f"Tile at {anchor} does not match dtype/bands of the first tile")
        if tile_raster.dims != (grid.tile_size, grid.tile_size):
            raise RasterValidationError(f"Tile at {anchor} has dims {tile_raster.dims}, expected {grid.tile_size}")

    height, width = grid.source_dims
    row_owner = _axis_owners(height, grid.row_anchors, grid.tile_size)
    col_owner = _axis_owners(width, grid.col_anchors, grid.tile_size)

    out = np.zeros((first.bands, height, width), dtype=first.dtype)
    for ri, r in enumerate(grid.row_anchors):
        rows = np.flatnonzero(row_owner == ri)
        if rows.size == 0:
            continue
        for ci, c in enumerate(grid.col_anchors):
            cols = np.flatnonzero(col_owner == ci)
            if cols.size == 0:
                continue
            source = by_anchor[(r, c)].data
            out[:, rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] = \
                source[:, rows[0] - r:rows[-1] + 1 - r, cols[0] - c:cols[-1] + 1 - c]

    if geotransform is None:
        # the (0, 0) tile shares the source origin
        geotransform = first.geotransform

    return Raster(data=out, geotransform=tuple(geotransform), nodata=first.nodata, classes=first.classes)
