"""
Land-cover transition accounting between two categorical maps.
"""

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pyarrow as pa

from .errors import AlignmentError, ArgumentError
from .evaluation import percent_change
from .raster import Raster
from .tables import write_csv


UNKNOWN = "unknown"
SQUARE_METRES_PER_HECTARE = 10_000.0

ClassTable = Union[Mapping[int, str], Sequence[int]]


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """Pixel counts from epoch-A classes (rows) to epoch-B classes (columns).

    ``codes`` holds the class code per row/column, with None for the unknown
    bucket (present only when some pixel falls outside the class table).
    """

    codes: Tuple[Optional[int], ...]
    names: Tuple[str, ...]
    counts: np.ndarray

    def __post_init__(self) -> None:
        k = len(self.codes)
        if len(self.names) != k or self.counts.shape != (k, k):
            raise ArgumentError(f"Transition matrix with {k} classes needs a {k}x{k} count table")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def col_sums(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def transpose(self) -> "TransitionMatrix":
        return TransitionMatrix(codes=self.codes, names=self.names, counts=self.counts.T.copy())

    def hectares(self, pixel_area: float) -> np.ndarray:
        """Counts converted to hectares given the area of one pixel in square metres."""
        return self.counts * (pixel_area / SQUARE_METRES_PER_HECTARE)

    def flows(self) -> List[Tuple[str, str, int]]:
        """Non-zero (from, to, pixels) triples in class order."""
        rows, cols = np.nonzero(self.counts)
        return [(self.names[r], self.names[c], int(self.counts[r, c])) for r, c in zip(rows.tolist(), cols.tolist())]

    def class_change(self) -> List[Dict]:
        """Pixels per class in epoch A and epoch B with the percent change (None when absent from A)."""
        changes = []
        for code, name, before, after in zip(self.codes, self.names, self.row_sums().tolist(), self.col_sums().tolist()):
            change = percent_change(before, after)
            changes.append({
                'code': code,
                'name': name,
                'pixels_a': int(before),
                'pixels_b': int(after),
                'percent_change': None if math.isnan(change) else change,
            })
        return changes

    def as_dict(self) -> Dict:
        return {
            'classes': [{'code': code, 'name': name} for code, name in zip(self.codes, self.names)],
            'counts': self.counts.tolist(),
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TransitionMatrix):
            return NotImplemented
        return self.codes == other.codes and self.names == other.names and np.array_equal(self.counts, other.counts)

    __hash__ = None


def _class_table(classes: Optional[ClassTable], fallback: Raster) -> Dict[int, str]:
    if classes is None:
        classes = fallback.classes
    if classes is None:
        raise ArgumentError("transition_matrix needs a class table (argument or raster sidecar)")
    if isinstance(classes, Mapping):
        return {int(code): str(name) for code, name in classes.items()}
    return {int(code): str(code) for code in classes}


def transition_matrix(map_a: Raster, map_b: Raster, classes: Optional[ClassTable] = None) -> TransitionMatrix:
    """Joint histogram of class membership; nodata in either map is excluded."""
    if not map_a.aligned_with(map_b):
        raise AlignmentError(
            f"Maps are not aligned: {map_a.dims} {map_a.geotransform} vs {map_b.dims} {map_b.geotransform}"
        )
    table = _class_table(classes, map_a)
    codes = sorted(table)
    k = len(codes)

    a = map_a.band(0).astype(np.int64)
    b = map_b.band(0).astype(np.int64)
    valid = np.ones(a.shape, dtype=bool)
    for raster, values in ((map_a, a), (map_b, b)):
        if raster.nodata is not None:
            valid &= values != int(raster.nodata)

    # codes outside the table go to index k
    lookup = np.full(max(256, int(max(a.max(initial=0), b.max(initial=0))) + 1), k, dtype=np.int64)
    for index, code in enumerate(codes):
        lookup[code] = index
    ia = lookup[a[valid]]
    ib = lookup[b[valid]]
    counts = np.bincount(ia * (k + 1) + ib, minlength=(k + 1) ** 2).reshape(k + 1, k + 1)

    out_codes: List[Optional[int]] = list(codes)
    names = [table[code] for code in codes]
    if counts[k].any() or counts[:, k].any():
        logging.warning("%s pixel transitions involve values outside the class table",
                        int(counts[k].sum() + counts[:, k].sum() - counts[k, k]))
        out_codes.append(None)
        names.append(UNKNOWN)
    else:
        counts = counts[:k, :k]

    tm = TransitionMatrix(codes=tuple(out_codes), names=tuple(names), counts=counts.astype(np.int64))
    logging.info("Transition matrix over %s valid pixels, %s classes", tm.total, len(names))
    return tm


def overlay_palm(landcover: Raster, palm: Raster, palm_code: int, palm_name: str = "plantation") -> Raster:
    """Burn plantation pixels (palm == 1) into a land-cover map; plantation wins where both claim a pixel."""
    if not landcover.aligned_with(palm):
        raise AlignmentError(f"Land cover {landcover.dims} and plantation map {palm.dims} are not aligned")
    values = palm.band(0)
    hit = values == 1
    if palm.nodata is not None:
        hit &= values != int(palm.nodata)
    out = np.where(hit, np.uint8(palm_code), landcover.band(0)).astype(np.uint8)
    classes = dict(landcover.classes or {})
    classes[int(palm_code)] = palm_name
    return replace(landcover, data=out[np.newaxis], classes=classes)


def export_flows(tm: TransitionMatrix, path: Union[str, Path], pixel_area: Optional[float] = None) -> None:
    """flows.csv with ``from,to,pixels`` (plus ``hectares`` when ``pixel_area`` is given); zero flows omitted."""
    flows = tm.flows()
    columns = {
        'from': pa.array([f for f, _, _ in flows], type=pa.string()),
        'to': pa.array([t for _, t, _ in flows], type=pa.string()),
        'pixels': pa.array([n for _, _, n in flows], type=pa.int64()),
    }
    if pixel_area is not None:
        columns['hectares'] = pa.array([n * pixel_area / SQUARE_METRES_PER_HECTARE for _, _, n in flows], type=pa.float64())
    write_csv(pa.table(columns), path)
    logging.info("Wrote %s flows to %s", len(flows), path)


def write_matrix(tm: TransitionMatrix, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = dict(tm.as_dict(), change=tm.class_change())
    path.write_text(json.dumps(document, indent=2) + "\n", encoding='utf-8')
    for row in document['change']:
        logging.info("%s: %s -> %s pixels", row['name'], row['pixels_a'], row['pixels_b'])
