import logging
from pathlib import Path
import pytest

import numpy as np

import sys
sys.path.insert(0, str(Path(__file__).parent.parent.parent / 'src'))
sys.path.insert(0, str(Path(__file__).parent))

from unit_helpers import UnitTestHelpers
from noisemap.dataset import (
    DatasetConfig,
    PatchPair,
    balance_indices,
    balance_undersample,
    extract_patches,
    load_manifest,
    load_patches,
    prepare_corpus,
    save_manifest,
    save_patches,
    split,
    zscore_normalize,
)
from noisemap.errors import AlignmentError, ArgumentError, ConfigError, DegenerateCorpusError
from noisemap.raster import Raster


def _image_and_labels(height, width, positive_cells=()):
    image = Raster(data=np.arange(2 * height * width, dtype=np.float32).reshape(2, height, width))
    labels = np.zeros((height, width), dtype=np.uint8)
    for row, col in positive_cells:
        labels[row, col] = 1
    return image, Raster(data=labels)


class TestExtractPatches:
    """Non-overlapping patch extraction."""

    def test_partial_edge_tiles_are_dropped(self):
        image, labels = _image_and_labels(10, 9, positive_cells=[(5, 1)])
        patches = extract_patches(image, labels, tile=4)

        assert [p.anchor for p in patches] == [(0, 0), (0, 4), (4, 0), (4, 4)]
        assert [p.positive for p in patches] == [False, False, True, False]
        assert np.array_equal(patches[3].image, image.data[:, 4:8, 4:8])

    def test_misaligned_inputs(self):
        image, _ = _image_and_labels(8, 8)
        _, labels = _image_and_labels(8, 6)
        with pytest.raises(AlignmentError):
            extract_patches(image, labels, tile=4)

    def test_patch_labels_must_be_binary(self):
        with pytest.raises(ArgumentError, match="0/1"):
            PatchPair(image=np.zeros((1, 2, 2)), label=np.full((2, 2), 2, dtype=np.uint8), anchor=(0, 0))


class TestBalancing:
    """Random undersampling of the majority class."""

    def test_reproduces_published_arithmetic(self):
        flags = np.zeros(29_568 + 161_668, dtype=bool)
        flags[:29_568] = True
        keep = balance_indices(flags, seed=0)

        assert keep.size == 59_136
        assert flags[keep].sum() == 29_568
        assert np.all(np.diff(keep) > 0)

    def test_minority_negatives_are_all_kept(self):
        flags = [True] * 7 + [False] * 3
        keep = balance_indices(flags, seed=1)
        assert keep.size == 6
        assert set(range(7, 10)) <= set(keep.tolist())

    def test_seeded(self):
        flags = [True] * 5 + [False] * 50
        assert np.array_equal(balance_indices(flags, seed=4), balance_indices(flags, seed=4))

    def test_single_class_corpus(self):
        with pytest.raises(DegenerateCorpusError):
            balance_indices([True, True, True], seed=0)

    def test_undersample_patches(self):
        image, labels = _image_and_labels(8, 16, positive_cells=[(0, 0)])
        patches = extract_patches(image, labels, tile=4)
        kept = balance_undersample(patches, seed=0)

        assert len(kept) == 2
        assert sum(p.positive for p in kept) == 1


class TestSplit:
    """Seeded train/validation split."""

    def test_prefix_split_of_shuffled_ids(self):
        ids = [f"id{i}" for i in range(10)]
        manifest = split(ids, ratio=0.7, seed=3)

        assert len(manifest.train) == 7
        assert len(manifest.val) == 3
        assert sorted(manifest.train + manifest.val) == sorted(ids)
        assert manifest == split(ids, ratio=0.7, seed=3)

    @pytest.mark.parametrize("ratio", [0.0, 1.0, 1.5])
    def test_ratio_bounds(self, ratio):
        with pytest.raises(ArgumentError):
            split(["a", "b"], ratio=ratio, seed=0)

    def test_empty_corpus(self):
        with pytest.raises(DegenerateCorpusError):
            split([], ratio=0.5, seed=0)


class TestNormalisation:
    """Per-band z-score."""

    def test_zero_mean_unit_std(self, rng):
        image = rng.normal(5.0, 3.0, size=(3, 16, 16))
        out = zscore_normalize(image)

        assert out.dtype == np.float32
        assert np.allclose(out.mean(axis=(1, 2)), 0.0, atol=1e-5)
        assert np.allclose(out.std(axis=(1, 2)), 1.0, atol=1e-4)

    def test_constant_band_maps_to_zero(self):
        image = np.stack([np.full((4, 4), 7.0), np.arange(16.0).reshape(4, 4)])
        out = zscore_normalize(image)
        assert np.all(out[0] == 0)


class TestPersistence:
    """Patch and manifest files."""

    def test_patches_and_manifest_round_trip(self, tmp_path, small_landscape):
        image, truth = small_landscape
        patches, manifest = prepare_corpus(image, truth, DatasetConfig(tile=8, ratio=0.5, balance=False))
        save_patches(patches, tmp_path / 'patches')
        save_manifest(manifest, tmp_path / 'patches' / 'manifest.json')

        loaded_manifest = load_manifest(tmp_path / 'patches' / 'manifest.json')
        loaded = load_patches(tmp_path / 'patches', loaded_manifest.train)

        assert loaded_manifest == manifest
        for patch_id in manifest.train:
            original = next(p for p in patches if p.patch_id == patch_id)
            assert np.array_equal(loaded[patch_id].image, original.image)
            assert np.array_equal(loaded[patch_id].label, original.label)
            assert loaded[patch_id].positive == original.positive


class TestPrepareCorpus:
    """extract, balance and split in one step."""

    def test_balanced_corpus(self):
        image, labels = _image_and_labels(16, 16, positive_cells=[(1, 1), (9, 9)])
        patches, manifest = prepare_corpus(image, labels, DatasetConfig(tile=4, ratio=0.5, seed=2))

        assert len(patches) == 4
        assert len(manifest.train) == 2 and len(manifest.val) == 2

    def test_single_class_corpus_skips_balancing(self, small_landscape, caplog):
        image, _ = small_landscape
        labels = Raster(data=np.ones(image.dims, dtype=np.uint8))
        with caplog.at_level(logging.WARNING):
            patches, manifest = prepare_corpus(image, labels, DatasetConfig(tile=8))

        assert len(patches) == 16 and all(p.positive for p in patches)
        assert len(manifest.train) + len(manifest.val) == 16
        assert "skipping balancing" in caplog.text

    def test_balance_undersample_still_rejects_a_missing_class(self, small_landscape):
        image, _ = small_landscape
        labels = Raster(data=np.ones(image.dims, dtype=np.uint8))
        with pytest.raises(DegenerateCorpusError):
            balance_undersample(extract_patches(image, labels, 8), seed=0)

    def test_no_full_tile(self):
        image, labels = _image_and_labels(3, 3)
        with pytest.raises(DegenerateCorpusError, match="no full"):
            prepare_corpus(image, labels, DatasetConfig(tile=4))

    def test_config_rejects_unknown_keys(self):
        with pytest.raises(ConfigError, match="stride"):
            DatasetConfig.from_dict({'tile': 8, 'stride': 4})

    def test_config_round_trip(self):
        config = DatasetConfig(tile=32, ratio=0.8, seed=5, balance=False)
        assert DatasetConfig.from_dict(config.as_dict()) == config
