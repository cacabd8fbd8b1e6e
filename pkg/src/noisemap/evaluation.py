"""
Point-based accuracy assessment and regional rank-correlation agreement.

Accuracy figures follow the usual remote-sensing conventions:
    UA = 100 * TP / (TP + FP)            (user's accuracy, precision)
    PA = 100 * TP / (TP + FN)            (producer's accuracy, recall)
    F1 = 2 * precision * recall / (precision + recall)
    OA = 100 * (TP + TN) / total
A zero denominator makes a metric undefined: it is reported as NaN in
memory, null in JSON and "n/a" in the text table, and listed in
``EvalReport.undefined``.
"""

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pyarrow as pa
import pyarrow.csv as pcsv
from scipy.stats import rankdata

from .errors import AlignmentError, ArgumentError, ConfigError, EmptyEvaluationError, StageInputError
from .raster import Raster, pixel_area, pixel_to_world, world_to_pixel
from .tables import write_csv


TRUTH_COLUMN = re.compile(r"^truth_(\d+)$")
MIN_PERMUTATIONS = 100
SQUARE_METRES_PER_HECTARE = 10_000.0


@dataclass(frozen=True)
class ValidationPoint:
    """A reference location with its interpreted class per year (None where not interpreted)."""

    lon: float
    lat: float
    truth: Dict[int, Optional[int]] = field(default_factory=dict)


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    skipped: int = 0

    def __post_init__(self) -> None:
        for name in ('tp', 'fp', 'tn', 'fn', 'skipped'):
            if getattr(self, name) < 0:
                raise ArgumentError(f"Confusion count {name} must be >= 0")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def as_dict(self) -> Dict[str, int]:
        return {'tp': self.tp, 'fp': self.fp, 'tn': self.tn, 'fn': self.fn, 'skipped': self.skipped}


@dataclass(frozen=True)
class EvalReport:
    f1: float
    ua: float
    pa: float
    oa: float
    confusion: Confusion
    undefined: Tuple[str, ...] = ()

    def as_dict(self) -> Dict:
        def value(name):
            return None if name in self.undefined else getattr(self, name)

        return {
            'f1': value('f1'),
            'ua': value('ua'),
            'pa': value('pa'),
            'oa': self.oa,
            'confusion': self.confusion.as_dict(),
            'undefined': list(self.undefined),
        }


@dataclass(frozen=True)
class AgreementResult:
    """Spearman agreement between mapped and reference regional areas."""

    rho: float
    p_value: float
    n: int
    permutations: int

    def as_dict(self) -> Dict:
        def finite(v):
            return None if math.isnan(v) else v

        return {'rho': finite(self.rho), 'p_value': finite(self.p_value), 'n': self.n, 'permutations': self.permutations}


# --- points ---------------------------------------------------------------

def read_points(path: Union[str, Path]) -> Tuple[List[ValidationPoint], List[int]]:
    """Read a points CSV (``lon,lat,truth_<year>...``); returns the points and their years."""
    path = Path(path)
    if not path.exists():
        raise StageInputError(f"Points file not found: {path}", path=path)
    table = pcsv.read_csv(path)
    names = table.column_names
    if names[:2] != ['lon', 'lat']:
        raise ConfigError(f"{path}: points CSV must start with lon,lat columns, got {names}")

    years = []
    for name in names[2:]:
        match = TRUTH_COLUMN.match(name)
        if not match:
            raise ConfigError(f"{path}: unexpected column {name!r}; expected truth_<year>")
        years.append(int(match.group(1)))

    lon = table['lon'].to_pylist()
    lat = table['lat'].to_pylist()
    truth_columns = {year: table[f"truth_{year}"].to_pylist() for year in years}
    points = [
        ValidationPoint(
            lon=float(lon[i]),
            lat=float(lat[i]),
            truth={year: None if truth_columns[year][i] is None else int(truth_columns[year][i]) for year in years},
        )
        for i in range(table.num_rows)
    ]
    logging.info("Read %s validation points for years %s from %s", len(points), years, path)
    return points, years


def write_points(points: Sequence[ValidationPoint], path: Union[str, Path], years: Sequence[int]) -> None:
    columns = {
        'lon': pa.array([p.lon for p in points], type=pa.float64()),
        'lat': pa.array([p.lat for p in points], type=pa.float64()),
    }
    for year in years:
        columns[f"truth_{year}"] = pa.array([p.truth.get(year) for p in points], type=pa.int64())
    write_csv(pa.table(columns), path)
    logging.info("Wrote %s validation points to %s", len(points), path)


def sample_points(truth: Raster, n: int, seed: int, years: Sequence[int]) -> List[ValidationPoint]:
    """Seeded simple random sample of pixel centres, without replacement, labelled from ``truth``."""
    total = truth.height * truth.width
    if not 1 <= n <= total:
        raise ArgumentError(f"Cannot sample {n} points from {total} pixels")
    flat = np.random.default_rng(seed).choice(total, size=n, replace=False)
    rows, cols = np.divmod(flat, truth.width)
    band = truth.band(0)
    points = []
    for row, col in zip(rows.tolist(), cols.tolist()):
        lon, lat = pixel_to_world(truth.geotransform, row + 0.5, col + 0.5)
        value = int(band[row, col])
        points.append(ValidationPoint(lon=lon, lat=lat, truth={int(year): value for year in years}))
    return points


# --- accuracy -------------------------------------------------------------

def confusion_at_points(hard: Raster, points: Sequence[ValidationPoint], year: int) -> Confusion:
    """Count agreement between ``hard`` (1 = plantation) and the year's truth at every point.

    A point maps to the pixel holding the floor of its inverse-geotransform
    coordinates. Points outside the raster, on nodata, or without a truth
    value for ``year`` are skipped.
    """
    usable = [p for p in points if p.truth.get(year) is not None]
    skipped = len(points) - len(usable)
    if not usable:
        raise EmptyEvaluationError(f"No points carry a truth value for {year}")

    lon = np.array([p.lon for p in usable], dtype=np.float64)
    lat = np.array([p.lat for p in usable], dtype=np.float64)
    truth = np.array([p.truth[year] for p in usable], dtype=np.int64)
    row, col = world_to_pixel(hard.geotransform, lon, lat)

    inside = (row >= 0) & (row < hard.height) & (col >= 0) & (col < hard.width)
    predicted = np.full(len(usable), -1, dtype=np.int64)
    predicted[inside] = hard.band(0)[row[inside], col[inside]]
    valid = inside.copy()
    if hard.nodata is not None:
        valid &= predicted != int(hard.nodata)

    outside = int((~inside).sum())
    if outside:
        logging.warning("%s of %s points fall outside the map extent and were skipped", outside, len(usable))
    skipped += int((~valid).sum())
    if not valid.any():
        raise EmptyEvaluationError(f"None of the {len(points)} points fall on valid map pixels")

    p = predicted[valid] == 1
    t = truth[valid] == 1
    return Confusion(
        tp=int((p & t).sum()),
        fp=int((p & ~t).sum()),
        tn=int((~p & ~t).sum()),
        fn=int((~p & t).sum()),
        skipped=skipped,
    )


def metrics(confusion: Confusion) -> EvalReport:
    c = confusion
    if c.total == 0:
        raise EmptyEvaluationError("Confusion matrix is empty")

    undefined = []
    nan = float('nan')
    ua = 100.0 * c.tp / (c.tp + c.fp) if c.tp + c.fp else nan
    pa = 100.0 * c.tp / (c.tp + c.fn) if c.tp + c.fn else nan
    if math.isnan(ua):
        undefined.append('ua')
    if math.isnan(pa):
        undefined.append('pa')
    # 2PR/(P+R) written on counts
    if math.isnan(ua) or math.isnan(pa) or c.tp == 0:
        f1 = nan
        undefined.append('f1')
    else:
        f1 = 2.0 * c.tp / (2 * c.tp + c.fp + c.fn)
    oa = 100.0 * (c.tp + c.tn) / c.total

    if undefined:
        logging.warning("Undefined metrics for confusion %s: %s", c.as_dict(), ', '.join(undefined))
    return EvalReport(f1=f1, ua=ua, pa=pa, oa=oa, confusion=c, undefined=tuple(undefined))


def evaluate_years(hard: Raster, points: Sequence[ValidationPoint], years: Iterable[int]) -> Dict[int, EvalReport]:
    """One report per year, reusing the same point locations."""
    reports = {}
    for year in years:
        confusion = confusion_at_points(hard, points, year)
        reports[int(year)] = metrics(confusion)
        logging.info("%s: %s OA=%.2f", year, confusion.as_dict(), reports[int(year)].oa)
    return reports


# --- rank correlation -----------------------------------------------------

def _check_pair(x: Sequence[float], y: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.size != y.size:
        raise ArgumentError(f"spearman needs two vectors of equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ArgumentError("spearman needs at least two observations")
    return x, y


def _pearson_rows(rx: np.ndarray, ry: np.ndarray) -> np.ndarray:
    """Pearson correlation of ``rx`` with every row of ``ry`` (2-D)."""
    dx = rx - rx.mean()
    dy = ry - ry.mean(axis=-1, keepdims=True)
    numerator = (dy * dx).sum(axis=-1)
    denominator = np.sqrt((dx * dx).sum() * (dy * dy).sum(axis=-1))
    return np.clip(numerator / denominator, -1.0, 1.0)


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman's rho: Pearson correlation of average ranks. NaN (with a warning) for a constant vector."""
    x, y = _check_pair(x, y)
    rx, ry = rankdata(x), rankdata(y)
    if np.all(rx == rx[0]) or np.all(ry == ry[0]):
        logging.warning("spearman is undefined for a constant vector")
        return float('nan')
    return float(_pearson_rows(rx, ry[np.newaxis])[0])


def spearman_significance(x: Sequence[float], y: Sequence[float], permutations: int = 10_000, seed: int = 0) -> float:
    """Two-sided permutation p-value, (1 + #{|rho_perm| >= |rho_obs|}) / (1 + permutations)."""
    if permutations < MIN_PERMUTATIONS:
        raise ArgumentError(f"permutations must be >= {MIN_PERMUTATIONS}, got {permutations}")
    observed = spearman(x, y)
    if math.isnan(observed):
        return float('nan')

    x, y = _check_pair(x, y)
    rx, ry = rankdata(x), rankdata(y)
    rng = np.random.default_rng(seed)
    exceed = 0
    chunk = max(1, min(permutations, 1_000_000 // max(1, ry.size)))
    done = 0
    while done < permutations:
        count = min(chunk, permutations - done)
        shuffled = rng.permuted(np.tile(ry, (count, 1)), axis=1)
        rho = _pearson_rows(rx, shuffled)
        exceed += int((np.abs(rho) >= abs(observed) - 1e-12).sum())
        done += count
    return (1 + exceed) / (1 + permutations)


# --- regional statistics --------------------------------------------------

def region_areas(hard: Raster, regions: Raster, names: Mapping[int, str]) -> Dict[str, float]:
    """Mapped plantation area per region in hectares (map units assumed metres)."""
    if not hard.aligned_with(regions):
        raise AlignmentError(f"Map {hard.dims} and region raster {regions.dims} are not aligned")
    codes = regions.band(0).astype(np.int64)
    positive = hard.band(0) == 1
    counts = np.bincount(codes[positive], minlength=max(names, default=0) + 1)
    hectares = pixel_area(hard) / SQUARE_METRES_PER_HECTARE
    return {name: float(counts[code] * hectares) if code < counts.size else 0.0 for code, name in sorted(names.items())}


def percent_change(before: float, after: float) -> float:
    """100 * (after - before) / before; NaN when ``before`` is zero."""
    if before == 0:
        return float('nan')
    return 100.0 * (after - before) / before


def read_region_statistics(path: Union[str, Path]) -> Dict[str, float]:
    """Reference areas from a CSV with columns ``region,area_ha``."""
    path = Path(path)
    if not path.exists():
        raise StageInputError(f"Regional statistics file not found: {path}", path=path)
    table = pcsv.read_csv(path, convert_options=pcsv.ConvertOptions(column_types={'region': pa.string()}))
    if table.column_names[:2] != ['region', 'area_ha']:
        raise ConfigError(f"{path}: expected columns region,area_ha, got {table.column_names}")
    return {str(r): float(a) for r, a in zip(table['region'].to_pylist(), table['area_ha'].to_pylist())}


def regional_agreement(
    mapped: Mapping[str, float],
    reference: Mapping[str, float],
    permutations: int = 10_000,
    seed: int = 0,
) -> AgreementResult:
    """Spearman rho and permutation p-value between mapped and reference areas over shared regions."""
    shared = sorted(set(mapped) & set(reference))
    dropped = sorted(set(mapped) ^ set(reference))
    if dropped:
        logging.warning("Regions without a counterpart are ignored: %s", ', '.join(dropped))
    x = [mapped[r] for r in shared]
    y = [reference[r] for r in shared]
    rho = spearman(x, y)
    p_value = spearman_significance(x, y, permutations=permutations, seed=seed)
    logging.info("Regional agreement over %s regions: rho=%.4f p=%.4g", len(shared), rho, p_value)
    return AgreementResult(rho=rho, p_value=p_value, n=len(shared), permutations=permutations)


# --- reports --------------------------------------------------------------

def _cell(report: EvalReport, name: str, digits: int) -> str:
    if name in report.undefined:
        return "n/a"
    return f"{getattr(report, name):.{digits}f}"


def format_table(reports: Mapping[int, EvalReport]) -> str:
    """Plain-text table with F1, UA, PA and OA per year."""
    lines = [f"{'Year':<6}{'F1':>8}{'UA':>8}{'PA':>8}{'OA':>8}"]
    for year, report in sorted(reports.items()):
        lines.append(
            f"{year:<6}{_cell(report, 'f1', 4):>8}{_cell(report, 'ua', 2):>8}"
            f"{_cell(report, 'pa', 2):>8}{_cell(report, 'oa', 2):>8}"
        )
    return "\n".join(lines) + "\n"


def write_report(
    reports: Mapping[int, EvalReport],
    json_path: Union[str, Path],
    text_path: Optional[Union[str, Path]] = None,
    agreement: Optional[AgreementResult] = None,
) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    document = {'years': {str(year): report.as_dict() for year, report in sorted(reports.items())}}
    if agreement is not None:
        document['regional_agreement'] = agreement.as_dict()
    json_path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding='utf-8')
    if text_path is not None:
        text = format_table(reports)
        if agreement is not None:
            text += f"\nSpearman rho {agreement.rho:.4f} (p = {agreement.p_value:.4g}, n = {agreement.n})\n"
        Path(text_path).write_text(text, encoding='utf-8')
    logging.info("Wrote evaluation report to %s", json_path)
