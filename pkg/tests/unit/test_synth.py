from pathlib import Path
import pytest

import numpy as np

import sys
sys.path.insert(0, str(Path(__file__).parent.parent.parent / 'src'))
sys.path.insert(0, str(Path(__file__).parent))

from unit_helpers import UnitTestHelpers
from noisemap.errors import ArgumentError, ConfigError
from noisemap.synth import (
    LandscapeSpec,
    SynthConfig,
    coarsen_labels,
    corrupt_labels,
    flip_noise,
    generate,
    nearest_mean_classify,
)


class TestGenerate:
    """Seeded landscapes."""

    def test_deterministic(self):
        spec = LandscapeSpec(height=24, width=16, bands=4, blob_scale=2, seed=9)
        first = generate(spec)
        second = generate(spec)
        assert first[0] == second[0] and first[1] == second[1]

    def test_seed_changes_scene(self):
        a = generate(LandscapeSpec(height=16, width=16, bands=2, seed=1))[1]
        b = generate(LandscapeSpec(height=16, width=16, bands=2, seed=2))[1]
        assert not np.array_equal(a.data, b.data)

    def test_shapes_and_balance(self, small_landscape):
        image, truth = small_landscape
        assert image.bands == 3 and image.dtype == np.float32
        assert truth.dims == image.dims and truth.classes == {0: "other", 1: "plantation"}
        # median threshold splits the scene roughly in half
        assert 0.4 < truth.data.mean() < 0.6

    def test_spectra_follow_the_truth(self, small_landscape):
        image, truth = small_landscape
        spec = LandscapeSpec(bands=3)
        assert np.array_equal(nearest_mean_classify(image, spec.class_means), truth.band(0))

    def test_spec_validation(self):
        with pytest.raises(ConfigError, match="class_means"):
            LandscapeSpec(bands=2, class_means=[[0.1, 0.1], [0.1, 0.1]])
        with pytest.raises(ConfigError, match="class_means"):
            LandscapeSpec(bands=3, class_means=[[0.1, 0.2], [0.3, 0.4]])
        with pytest.raises(ConfigError, match="blob_scale"):
            LandscapeSpec(blob_scale=0)

    def test_scalar_sigma_fills_the_table(self):
        spec = LandscapeSpec(bands=3, noise_sigma=0.1)
        assert spec.noise_sigma == [[0.1, 0.1, 0.1], [0.1, 0.1, 0.1]]
        assert LandscapeSpec.from_dict(spec.as_dict()) == spec

    @pytest.mark.parametrize("sigma", [-0.1, [[0.1, 0.1], [0.1, 0.1]], [[0.1, 0.1, 0.1], [0.1, -0.2, 0.1]], "wide"])
    def test_bad_sigma(self, sigma):
        with pytest.raises(ConfigError, match="noise_sigma"):
            LandscapeSpec(bands=3, noise_sigma=sigma)

    def test_sigma_per_class_and_band(self):
        # band 0 of 'other' and band 1 of plantation stay exactly at their means
        sigma = [[0.0, 0.2], [0.2, 0.0]]
        spec = LandscapeSpec(height=32, width=32, bands=2, blob_scale=2, noise_sigma=sigma, seed=4)
        image, truth = generate(spec)
        means = np.asarray(spec.class_means, dtype=np.float32)
        other, palm = truth.band(0) == 0, truth.band(0) == 1

        assert np.all(image.band(0)[other] == means[0, 0])
        assert np.all(image.band(1)[palm] == means[1, 1])
        assert image.band(1)[other].std() > 0.1
        assert image.band(0)[palm].std() > 0.1


class TestCoarsen:
    """Majority-vote block aggregation."""

    def test_majority_and_ties(self):
        values = np.array([
            [1, 1, 1, 0],
            [1, 0, 0, 1],
            [0, 0, 1, 1],
            [0, 0, 1, 1],
        ], dtype=np.uint8)
        coarse = coarsen_labels(UnitTestHelpers.make_raster(values), 2)
        # top-left 3 of 4, top-right a 2-2 tie, bottom-left none, bottom-right all
        assert coarse.band(0).tolist() == [
            [1, 1, 0, 0],
            [1, 1, 0, 0],
            [0, 0, 1, 1],
            [0, 0, 1, 1],
        ]

    def test_factor_one_is_identity(self, binary_map):
        assert coarsen_labels(binary_map, 1) == binary_map

    def test_keeps_georeferencing(self, binary_map):
        coarse = coarsen_labels(binary_map, 2)
        assert coarse.geotransform == binary_map.geotransform
        assert coarse.classes == binary_map.classes

    @pytest.mark.parametrize("factor", [0, 4])
    def test_bad_factor(self, binary_map, factor):
        with pytest.raises(ArgumentError):
            coarsen_labels(binary_map, factor)


class TestFlipNoise:
    """Class-conditional flips."""

    def test_rates(self):
        values = np.zeros((200, 200), dtype=np.uint8)
        values[100:] = 1
        noisy = flip_noise(UnitTestHelpers.make_raster(values), r01=0.3, r10=0.1, seed=5).band(0)

        assert noisy[:100].mean() == pytest.approx(0.3, abs=0.02)
        assert 1 - noisy[100:].mean() == pytest.approx(0.1, abs=0.02)

    def test_zero_rates_are_identity(self, binary_map):
        assert flip_noise(binary_map, 0.0, 0.0, seed=1) == binary_map

    @pytest.mark.parametrize("r01, r10", [(0.5, 0.1), (0.1, -0.1)])
    def test_rates_below_half(self, binary_map, r01, r10):
        with pytest.raises(ArgumentError):
            flip_noise(binary_map, r01, r10, seed=0)

    def test_corrupt_is_seeded(self, small_landscape):
        _, truth = small_landscape
        first = corrupt_labels(truth, 4, 0.3, 0.1, seed=2)
        assert first == corrupt_labels(truth, 4, 0.3, 0.1, seed=2)
        assert first != corrupt_labels(truth, 4, 0.3, 0.1, seed=3)


class TestSynthConfig:
    """Corruption settings."""

    def test_nested_landscape(self):
        config = SynthConfig.from_dict({'landscape': {'height': 64, 'width': 32}, 'years': [2019]})
        assert config.landscape.dims == (64, 32)
        assert config.years == (2019,)
        assert SynthConfig.from_dict(config.as_dict()) == config

    def test_unknown_landscape_key(self):
        with pytest.raises(ConfigError, match="octaves"):
            SynthConfig.from_dict({'landscape': {'octaves': 3}})

    def test_rate_bounds(self):
        with pytest.raises(ConfigError, match="r01"):
            SynthConfig(r01=0.6)
