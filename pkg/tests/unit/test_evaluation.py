import json
import math
from pathlib import Path
import pytest

import numpy as np

import sys
sys.path.insert(0, str(Path(__file__).parent.parent.parent / 'src'))
sys.path.insert(0, str(Path(__file__).parent))

from unit_helpers import UnitTestHelpers
from noisemap.errors import AlignmentError, ArgumentError, ConfigError, EmptyEvaluationError, StageInputError
from noisemap.evaluation import (
    AgreementResult,
    Confusion,
    ValidationPoint,
    confusion_at_points,
    evaluate_years,
    format_table,
    metrics,
    percent_change,
    read_points,
    read_region_statistics,
    region_areas,
    regional_agreement,
    sample_points,
    spearman,
    spearman_significance,
    write_points,
    write_report,
)
from noisemap.raster import pixel_to_world


class TestMetrics:
    """F1 / UA / PA / OA from a confusion matrix."""

    def test_reference_case(self):
        report = metrics(Confusion(tp=3, fp=1, tn=5, fn=1))
        assert report.f1 == 0.75
        assert report.ua == 75.0
        assert report.pa == 75.0
        assert report.oa == 80.0
        assert report.undefined == ()

    def test_no_positive_predictions(self):
        report = metrics(Confusion(tp=0, fp=0, tn=4, fn=2))
        assert set(report.undefined) == {'ua', 'f1'}
        assert math.isnan(report.ua)
        assert report.pa == 0.0
        assert report.oa == pytest.approx(400 / 6)
        assert report.as_dict()['ua'] is None

    def test_empty_confusion(self):
        with pytest.raises(EmptyEvaluationError):
            metrics(Confusion(skipped=3))

    def test_negative_counts(self):
        with pytest.raises(ArgumentError):
            Confusion(tp=-1)


class TestConfusionAtPoints:
    """Point sampling of the hard map."""

    def test_counts_and_skips(self, binary_map):
        cells = [(0, 0), (1, 1), (4, 4), (5, 7), (2, 3), (0, 5)]
        truth = [1, 0, 0, 1, None, 0]
        points = UnitTestHelpers.points_at_pixels(binary_map, cells, truth, 2020)
        points.append(ValidationPoint(lon=-50.0, lat=5.0, truth={2020: 1}))

        confusion = confusion_at_points(binary_map, points, 2020)
        assert confusion == Confusion(tp=1, fp=1, tn=2, fn=1, skipped=2)

    def test_nodata_pixels_are_skipped(self, binary_map):
        values = binary_map.data.copy()
        values[0, 0, 0] = 255
        raster = UnitTestHelpers.make_raster(values, nodata=255)
        points = UnitTestHelpers.points_at_pixels(raster, [(0, 0), (0, 1)], [1, 1], 2020)
        assert confusion_at_points(raster, points, 2020) == Confusion(tp=1, skipped=1)

    def test_matches_brute_force(self, rng):
        for _ in range(50):
            height, width = (int(v) for v in rng.integers(1, 20, size=2))
            size = float(rng.choice([0.5, 10.0, 30.0]))
            geotransform = (float(rng.integers(-1000, 1000)), size, 0.0, float(rng.integers(-1000, 1000)), 0.0, -size)
            nodata = 255 if rng.random() < 0.5 else None
            values = rng.choice([0, 1, 255] if nodata else [0, 1], size=(height, width)).astype(np.uint8)
            raster = UnitTestHelpers.make_raster(values, geotransform=geotransform, nodata=nodata)

            points = []
            for _ in range(int(rng.integers(5, 40))):
                # positions strictly inside a pixel, some of them beyond the extent
                row = int(rng.integers(-2, height + 2)) + rng.uniform(0.1, 0.9)
                col = int(rng.integers(-2, width + 2)) + rng.uniform(0.1, 0.9)
                lon, lat = pixel_to_world(geotransform, row, col)
                truth = None if rng.random() < 0.1 else int(rng.integers(0, 2))
                points.append(ValidationPoint(lon=lon, lat=lat, truth={2020: truth}))

            expected = UnitTestHelpers.brute_force_confusion(raster, points, 2020)
            if expected.total == 0:
                with pytest.raises(EmptyEvaluationError):
                    confusion_at_points(raster, points, 2020)
            else:
                assert confusion_at_points(raster, points, 2020) == expected

    def test_no_truth_for_year(self, binary_map):
        points = UnitTestHelpers.points_at_pixels(binary_map, [(0, 0)], [1], 2020)
        with pytest.raises(EmptyEvaluationError, match="2024"):
            confusion_at_points(binary_map, points, 2024)

    def test_every_year_reuses_the_points(self, binary_map):
        lon, lat = pixel_to_world(binary_map.geotransform, 0.5, 0.5)
        points = [ValidationPoint(lon=lon, lat=lat, truth={2020: 1, 2022: 0})]
        points += UnitTestHelpers.points_at_pixels(binary_map, [(5, 5)], [0], 2020)
        reports = evaluate_years(binary_map, points, [2020, 2022])

        assert reports[2020].oa == 100.0
        assert reports[2022].confusion == Confusion(fp=1, skipped=1)


class TestPoints:
    """Points CSV and seeded point design."""

    def test_csv_round_trip(self, tmp_path):
        points = [
            ValidationPoint(lon=1.5, lat=-2.25, truth={2020: 1, 2022: None}),
            ValidationPoint(lon=3.0, lat=4.0, truth={2020: 0, 2022: 1}),
        ]
        path = tmp_path / 'points.csv'
        write_points(points, path, [2020, 2022])

        assert path.read_text().splitlines()[0] == "lon,lat,truth_2020,truth_2022"
        loaded, years = read_points(path)
        assert years == [2020, 2022]
        assert loaded == points

    def test_unexpected_column(self, tmp_path):
        path = tmp_path / 'points.csv'
        path.write_text("lon,lat,label\n1,2,1\n")
        with pytest.raises(ConfigError, match="label"):
            read_points(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(StageInputError):
            read_points(tmp_path / 'absent.csv')

    def test_sample_points_hit_pixel_centres(self, binary_map):
        points = sample_points(binary_map, 10, seed=4, years=[2020, 2022])

        assert len({(p.lon, p.lat) for p in points}) == 10
        assert points == sample_points(binary_map, 10, seed=4, years=[2020, 2022])
        report = metrics(confusion_at_points(binary_map, points, 2022))
        assert report.oa == 100.0

    def test_sample_too_many(self, binary_map):
        with pytest.raises(ArgumentError):
            sample_points(binary_map, 49, seed=0, years=[2020])


class TestSpearman:
    """Rank correlation and its permutation test."""

    def test_identity_and_reversal(self, rng):
        x = rng.random(12)
        assert spearman(x, x) == pytest.approx(1.0)
        assert spearman(x, -x) == pytest.approx(-1.0)

    def test_tied_ranks(self):
        assert spearman([1, 2, 2, 3], [1, 3, 2, 4]) == pytest.approx(0.948683, abs=1e-6)

    def test_constant_vector_is_undefined(self):
        assert math.isnan(spearman([1, 1, 1], [1, 2, 3]))

    def test_length_mismatch(self):
        with pytest.raises(ArgumentError):
            spearman([1, 2, 3], [1, 2])

    def test_perfect_correlation_is_significant(self):
        x = np.arange(10.0)
        assert spearman_significance(x, x * 2 + 1, permutations=10_000, seed=0) <= 0.001

    def test_unrelated_series_is_not_significant(self):
        assert spearman_significance([1, 2, 3, 4, 5], [3, 1, 5, 2, 4], permutations=1000, seed=1) > 0.1

    def test_too_few_permutations(self):
        with pytest.raises(ArgumentError, match="100"):
            spearman_significance([1, 2, 3], [1, 2, 3], permutations=99)


class TestRegionalStatistics:
    """Per-region areas and agreement."""

    def test_region_areas_in_hectares(self, binary_map):
        regions = UnitTestHelpers.make_raster(np.repeat([[1] * 2 + [2] * 6], 6, axis=0).astype(np.uint8))
        areas = region_areas(binary_map, regions, {1: "west", 2: "east", 3: "empty"})
        # 10 m pixels are 0.01 ha; the plantation block covers 6 west and 6 east pixels
        assert areas == {"west": pytest.approx(0.06), "east": pytest.approx(0.06), "empty": 0.0}

    def test_region_areas_need_alignment(self, binary_map):
        regions = UnitTestHelpers.make_raster(np.ones((3, 3), dtype=np.uint8))
        with pytest.raises(AlignmentError):
            region_areas(binary_map, regions, {1: "all"})

    def test_percent_change(self):
        assert percent_change(200.0, 250.0) == 25.0
        assert math.isnan(percent_change(0.0, 5.0))

    def test_statistics_csv(self, tmp_path):
        path = tmp_path / 'stats.csv'
        path.write_text("region,area_ha\n01,10.5\nriau,3\n")
        assert read_region_statistics(path) == {"01": 10.5, "riau": 3.0}

    def test_agreement_over_shared_regions(self):
        mapped = {"a": 1.0, "b": 5.0, "c": 3.0, "d": 8.0, "extra": 2.0}
        reference = {"a": 2.0, "b": 6.0, "c": 4.0, "d": 9.0}
        result = regional_agreement(mapped, reference, permutations=200, seed=0)

        assert result.n == 4
        assert result.rho == pytest.approx(1.0)
        assert 0 < result.p_value <= 1


class TestReports:
    """JSON and text output."""

    def test_write_report(self, tmp_path):
        reports = {
            2022: metrics(Confusion(tp=0, fp=0, tn=4, fn=2)),
            2020: metrics(Confusion(tp=3, fp=1, tn=5, fn=1)),
        }
        agreement = AgreementResult(rho=0.9, p_value=0.01, n=5, permutations=1000)
        write_report(reports, tmp_path / 'report.json', tmp_path / 'report.txt', agreement=agreement)

        document = json.loads((tmp_path / 'report.json').read_text())
        assert list(document['years']) == ['2020', '2022']
        assert document['years']['2020']['oa'] == 80.0
        assert document['years']['2022']['ua'] is None
        assert document['regional_agreement']['rho'] == 0.9

        text = (tmp_path / 'report.txt').read_text()
        assert "n/a" in text
        assert "Spearman rho 0.9000" in text

    def test_table_layout(self):
        table = format_table({2020: metrics(Confusion(tp=3, fp=1, tn=5, fn=1))})
        assert table.splitlines()[1].split() == ["2020", "0.7500", "75.00", "75.00", "80.00"]
