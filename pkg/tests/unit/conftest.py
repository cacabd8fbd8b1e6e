#!/usr/bin/env python3
"""
Shared pytest fixtures and configuration.
This file is automatically discovered by pytest.
"""

import pytest
from pathlib import Path

import numpy as np

import sys
sys.path.insert(0, str(Path(__file__).parent.parent.parent / 'src'))
sys.path.insert(0, str(Path(__file__).parent.parent))
sys.path.insert(0, str(Path(__file__).parent))

from helpers import TestHelpers
from unit_helpers import UnitTestHelpers

from noisemap.synth import LandscapeSpec, generate


@pytest.fixture(scope="function")
def rng():
    """Seeded generator so every test sees the same draws."""
    return np.random.default_rng(42)


@pytest.fixture(scope="function")
def small_landscape():
    """A 32x32, 3-band synthetic (image, truth) pair."""
    return generate(LandscapeSpec(height=32, width=32, bands=3, blob_scale=2, noise_sigma=0.02, seed=3))


@pytest.fixture(scope="function")
def pipeline_config_data(tmp_path):
    """The small pipeline config with its workdir moved under tmp_path."""
    config = TestHelpers.load_config('pipeline.json')
    config['paths']['workdir'] = str(tmp_path / 'work')
    return config


@pytest.fixture(scope="function")
def pipeline_config_path(tmp_path, pipeline_config_data):
    return TestHelpers.write_config(pipeline_config_data, tmp_path / 'pipeline.json')


@pytest.fixture(scope="function")
def binary_map():
    """A 6x8 binary hard map with a 'plantation' block in the top-left corner."""
    values = np.zeros((6, 8), dtype=np.uint8)
    values[:3, :4] = 1
    return UnitTestHelpers.make_raster(values, classes={0: "other", 1: "plantation"})


def pytest_collection_modifyitems(config, items):
    """Modify test collection to add markers automatically."""
    for item in items:
        item.add_marker(pytest.mark.unit)
