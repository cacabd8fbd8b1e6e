#!/usr/bin/env python3
"""
Command-line pipeline for plantation mapping from noisy labels.

Each subcommand is one stage. Stages hand over through files in the
configured working directory, so any stage can be re-run on its own:

    synth        image, truth and corrupted labels, plus validation points
    prepare      patches and the train/val manifest
    train        network checkpoint and loss history
    predict      probability and hard maps
    fuse         posterior map from the prediction and the ancillary labels
    evaluate     accuracy report per year (plus optional regional agreement)
    transitions  transition matrix and flows between two maps
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from importlib.metadata import PackageNotFoundError, version as get_distribution_version
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pyarrow as pa
import pyarrow.csv as pcsv

from . import model as unet
from .config import PipelineConfig
from .dataset import load_manifest, load_patches, prepare_corpus, save_manifest, save_patches
from .errors import ConfigError, NoisemapError, StageInputError, StageOutputError
from .evaluation import (
    evaluate_years,
    read_points,
    read_region_statistics,
    region_areas,
    regional_agreement,
    sample_points,
    write_points,
    write_report,
)
from .fusion import SensorModel, fuse
from .raster import BINARY_CLASSES, Raster, pixel_area, read_raster, write_raster
from .synth import corrupt_labels, generate
from .trainer import THRESHOLD, predict_map, train, write_history
from .transitions import export_flows, overlay_palm, transition_matrix, write_matrix


logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s [%(levelname)s] %(message)s',
    datefmt='%Y-%m-%d %H:%M:%S'
)

ENV_CONFIG_PATH = 'NOISEMAP_CONFIG'
ENV_THREADS = 'NOISEMAP_THREADS'


@dataclass(frozen=True)
class Workdir:
    """Artifact locations under the pipeline working directory."""

    root: Path

    @property
    def image(self) -> Path:
        return self.root / 'synth' / 'image.rst'

    @property
    def truth(self) -> Path:
        return self.root / 'synth' / 'truth.rst'

    @property
    def labels(self) -> Path:
        return self.root / 'synth' / 'labels.rst'

    @property
    def points(self) -> Path:
        return self.root / 'synth' / 'points.csv'

    @property
    def patches(self) -> Path:
        return self.root / 'patches'

    @property
    def manifest(self) -> Path:
        return self.root / 'patches' / 'manifest.json'

    @property
    def checkpoint(self) -> Path:
        return self.root / 'model' / 'checkpoint.nnw'

    @property
    def history(self) -> Path:
        return self.root / 'model' / 'history.csv'

    @property
    def prob(self) -> Path:
        return self.root / 'predict' / 'prob.rst'

    @property
    def hard(self) -> Path:
        return self.root / 'predict' / 'hard.rst'

    @property
    def posterior(self) -> Path:
        return self.root / 'fuse' / 'posterior.rst'

    @property
    def fused_hard(self) -> Path:
        return self.root / 'fuse' / 'hard.rst'

    @property
    def report(self) -> Path:
        return self.root / 'evaluate' / 'report.json'

    @property
    def report_text(self) -> Path:
        return self.root / 'evaluate' / 'report.txt'

    @property
    def flows(self) -> Path:
        return self.root / 'transitions' / 'flows.csv'

    @property
    def matrix(self) -> Path:
        return self.root / 'transitions' / 'matrix.json'


def _workdir(config: PipelineConfig) -> Workdir:
    return Workdir(Path(config.paths.workdir))


def _input(override: Optional[str], default: Path) -> Path:
    path = Path(override) if override else default
    if not path.exists():
        raise StageInputError(f"Missing stage input: {path}", path=str(path))
    return path


def _read_input(override: Optional[str], default: Path) -> Raster:
    path = _input(override, default)
    logging.info("Reading %s", path)
    return read_raster(path)


def resolve_workers(configured: int, requested: Optional[int] = None) -> int:
    """Worker count: an explicit flag wins, otherwise the config value capped by $NOISEMAP_THREADS."""
    if requested is not None:
        workers = requested
    elif os.environ.get(ENV_THREADS):
        try:
            cap = int(os.environ[ENV_THREADS])
        except ValueError as e:
            raise ConfigError(f"${ENV_THREADS} must be an integer, got {os.environ[ENV_THREADS]!r}") from e
        if cap < 1:
            raise ConfigError(f"${ENV_THREADS} must be >= 1, got {cap}")
        workers = min(configured, cap)
    else:
        workers = configured
    if workers < 1:
        raise ConfigError(f"Worker count must be >= 1, got {workers}")
    return workers


# --- stages ---------------------------------------------------------------

def run_synth(config: PipelineConfig, seed: Optional[int] = None) -> List[Path]:
    synth = config.synth
    landscape = synth.landscape if seed is None else replace(synth.landscape, seed=seed)
    wd = _workdir(config)

    image, truth = generate(landscape)
    labels = corrupt_labels(truth, synth.coarsen_factor, synth.r01, synth.r10, seed=synth.noise_seed)
    points = sample_points(truth, synth.points, seed=synth.point_seed, years=synth.years)

    write_raster(image, wd.image)
    write_raster(truth, wd.truth)
    write_raster(labels, wd.labels)
    write_points(points, wd.points, synth.years)
    agreement = float((labels.band(0) == truth.band(0)).mean())
    logging.info("Synth outputs in %s (label agreement with truth %.2f%%)", wd.root / 'synth', 100.0 * agreement)
    return [wd.image, wd.truth, wd.labels, wd.points]


def run_prepare(config: PipelineConfig) -> List[Path]:
    wd = _workdir(config)
    image = _read_input(config.paths.image, wd.image)
    labels = _read_input(config.paths.labels, wd.labels)

    patches, manifest = prepare_corpus(image, labels, config.dataset)
    ids = save_patches(patches, wd.patches)
    save_manifest(manifest, wd.manifest)
    logging.info("Prepared %s train / %s val patches in %s", len(manifest.train), len(manifest.val), wd.patches)
    return [wd.manifest] + [wd.patches / kind / f"{patch_id}.rst" for patch_id in ids for kind in ('image', 'label')]


def run_train(config: PipelineConfig) -> List[Path]:
    wd = _workdir(config)
    manifest = load_manifest(_input(None, wd.manifest))
    patches = load_patches(wd.patches, list(manifest.train) + list(manifest.val))

    network, history = train(config.train, unet.build(config.model), manifest, patches)
    wd.checkpoint.parent.mkdir(parents=True, exist_ok=True)
    unet.save_model(network, wd.checkpoint)
    write_history(history, wd.history)
    return [wd.checkpoint, wd.history]


def run_predict(config: PipelineConfig, workers: Optional[int] = None) -> List[Path]:
    wd = _workdir(config)
    network = unet.load_model(_input(None, wd.checkpoint))
    image = _read_input(config.paths.image, wd.image)

    prob, hard = predict_map(
        network,
        image,
        config.tiling.tile,
        config.tiling.overlap,
        workers=resolve_workers(config.tiling.workers, workers),
    )
    write_raster(prob, wd.prob)
    write_raster(hard, wd.hard)
    logging.info("Wrote %s and %s", wd.prob, wd.hard)
    return [wd.prob, wd.hard]


def run_fuse(
    config: PipelineConfig,
    evidence: Optional[Sequence[str]] = None,
    sensor_l1: Optional[float] = None,
    sensor_l0: Optional[float] = None,
    neighborhood: Optional[str] = None,
) -> List[Path]:
    wd = _workdir(config)
    fusion = config.fusion
    sensor = SensorModel(
        p_obs1_given_palm=fusion.sensor.p_obs1_given_palm if sensor_l1 is None else sensor_l1,
        p_obs1_given_not=fusion.sensor.p_obs1_given_not if sensor_l0 is None else sensor_l0,
    )
    prior = _read_input(None, wd.prob)
    if evidence:
        layers = [_read_input(path, Path(path)) for path in evidence]
    else:
        layers = [_read_input(config.paths.labels, wd.labels)]

    posterior = fuse(prior, layers, sensor, neighborhood=neighborhood or fusion.neighborhood, block=fusion.block)
    hard = Raster(
        data=(posterior.data >= THRESHOLD).astype(np.uint8),
        geotransform=posterior.geotransform,
        classes=BINARY_CLASSES,
    )
    write_raster(posterior, wd.posterior)
    write_raster(hard, wd.fused_hard)
    logging.info("Wrote %s and %s", wd.posterior, wd.fused_hard)
    return [wd.posterior, wd.fused_hard]


def _region_names(configured: Dict[int, str], regions: Raster) -> Dict[int, str]:
    names = configured or regions.classes
    if not names:
        raise ConfigError("Regional agreement needs evaluate.region_names or a class table on the region raster")
    return dict(names)


def run_evaluate(
    config: PipelineConfig,
    regions: Optional[str] = None,
    statistics: Optional[str] = None,
    source: Optional[str] = None,
) -> List[Path]:
    wd = _workdir(config)
    settings = config.evaluate
    source = source or settings.source
    hard = _read_input(None, wd.fused_hard if source == 'fuse' else wd.hard)
    points, years = read_points(_input(config.paths.points, wd.points))

    reports = evaluate_years(hard, points, years)
    for year, report in sorted(reports.items()):
        logging.info("%s: OA %.2f, confusion %s", year, report.oa, report.confusion.as_dict())

    agreement = None
    regions = regions or settings.regions
    statistics = statistics or settings.statistics
    if regions or statistics:
        if not (regions and statistics):
            raise ConfigError("Regional agreement needs both a region raster and a statistics CSV")
        region_raster = _read_input(regions, Path(regions))
        mapped = region_areas(hard, region_raster, _region_names(settings.region_names, region_raster))
        reference = read_region_statistics(_input(statistics, Path(statistics)))
        agreement = regional_agreement(mapped, reference, permutations=settings.permutations, seed=settings.seed)

    write_report(reports, wd.report, wd.report_text, agreement=agreement)
    return [wd.report, wd.report_text]


def run_transitions(
    config: PipelineConfig,
    map_a: Optional[str] = None,
    map_b: Optional[str] = None,
    hectares: Optional[bool] = None,
) -> List[Path]:
    wd = _workdir(config)
    settings = config.transitions
    a = _read_input(map_a or settings.map_a or config.paths.truth, wd.truth)
    b = _read_input(map_b or settings.map_b, wd.hard)

    classes = dict(settings.classes)
    if settings.palm_a:
        a = overlay_palm(a, _read_input(settings.palm_a, Path(settings.palm_a)), settings.palm_code)
    if settings.palm_b:
        b = overlay_palm(b, _read_input(settings.palm_b, Path(settings.palm_b)), settings.palm_code)
    if settings.palm_a or settings.palm_b:
        classes.setdefault(settings.palm_code, "plantation")

    tm = transition_matrix(a, b, classes)
    use_hectares = settings.hectares if hectares is None else hectares
    export_flows(tm, wd.flows, pixel_area=pixel_area(a) if use_hectares else None)
    write_matrix(tm, wd.matrix)
    return [wd.flows, wd.matrix]


def show_version():
    """Print application version from installed package metadata."""
    logging.info("Running 'version' command...")

    try:
        print(f"Version: {get_distribution_version('noisemap')}")
        return
    except PackageNotFoundError as e:
        raise RuntimeError(
            "Version metadata not found. Install the package to use the 'version' command."
        ) from e


# --- command line ---------------------------------------------------------

def parse_arguments(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """Parse command line arguments with subcommands."""
    parser = argparse.ArgumentParser(
        description="Plantation mapping from noisy labels: run one pipeline stage."
    )
    subparsers = parser.add_subparsers(dest='command', required=True, help="Available commands")

    stage_parsers = {}
    for stage, help_text in (
        ('synth', "Generate a synthetic landscape, corrupted labels and validation points"),
        ('prepare', "Extract, balance and split training patches"),
        ('train', "Train the segmentation network"),
        ('predict', "Predict probability and hard maps with overlapped tiles"),
        ('fuse', "Fuse the prediction with ancillary evidence"),
        ('evaluate', "Assess a hard map at the validation points"),
        ('transitions', "Count class transitions between two maps"),
    ):
        stage_parser = subparsers.add_parser(stage, help=help_text)
        stage_parser.add_argument(
            "--config", "-c",
            required=False,
            help=f"Pipeline JSON configuration (falls back to ${ENV_CONFIG_PATH})"
        )
        stage_parsers[stage] = stage_parser

    stage_parsers['synth'].add_argument("--seed", type=int, help="Override synth.landscape.seed")
    stage_parsers['predict'].add_argument(
        "--workers", "-w",
        type=int,
        help=f"Tile worker threads (default: ${ENV_THREADS}, then tiling.workers)"
    )
    fuse_parser = stage_parsers['fuse']
    fuse_parser.add_argument("--evidence", nargs='+', help="Evidence rasters (default: the synth labels)")
    fuse_parser.add_argument("--sensor-l1", type=float, help="P(evidence = 1 | plantation)")
    fuse_parser.add_argument("--sensor-l0", type=float, help="P(evidence = 1 | other)")
    fuse_parser.add_argument("--neighborhood", choices=['single', 'block'])
    evaluate_parser = stage_parsers['evaluate']
    evaluate_parser.add_argument("--regions", help="U8 raster of region codes")
    evaluate_parser.add_argument("--statistics", help="CSV of reference areas (region,area_ha)")
    evaluate_parser.add_argument("--source", choices=['predict', 'fuse'], help="Which hard map to assess")
    transitions_parser = stage_parsers['transitions']
    transitions_parser.add_argument("--map-a", help="Epoch A map")
    transitions_parser.add_argument("--map-b", help="Epoch B map")
    transitions_parser.add_argument("--hectares", action='store_true', default=None, help="Add hectares to flows.csv")

    subparsers.add_parser('version', help="Show the application version")

    return parser.parse_args(argv)


def get_config_path(args: argparse.Namespace) -> Path:
    """--config, then $NOISEMAP_CONFIG."""
    config_path = args.config if args.config else os.environ.get(ENV_CONFIG_PATH)
    if config_path is None:
        raise ConfigError(f"Missing pipeline config. Provide --config or ${ENV_CONFIG_PATH}.")
    return Path(config_path)


def verify_outputs(paths: Sequence[Path]) -> None:
    """Re-open every artifact a stage wrote; raises unless all of them read back."""
    for path in paths:
        if not path.is_file():
            raise StageOutputError(f"Stage output was not written: {path}", path=str(path))
        suffix = path.suffix
        try:
            if suffix == '.rst':
                read_raster(path)
            elif suffix == '.csv':
                pcsv.read_csv(path)
            elif suffix == '.json':
                json.loads(path.read_text(encoding='utf-8'))
            elif suffix == '.nnw':
                unet.load_model(path)
            elif path.stat().st_size == 0:
                raise StageOutputError(f"Stage output is empty: {path}", path=str(path))
        except (pa.ArrowInvalid, json.JSONDecodeError) as e:
            logging.error("Cannot read back %s: %s", path, e)
            raise StageOutputError(f"Stage output does not read back: {path}", path=str(path)) from e
    logging.info("Verified %s output(s)", len(paths))


def run_stage(args: argparse.Namespace) -> List[Path]:
    config = PipelineConfig.from_json(get_config_path(args))
    logging.info("Running '%s' with workdir %s", args.command, config.paths.workdir)
    if args.command == 'synth':
        outputs = run_synth(config, seed=args.seed)
    elif args.command == 'prepare':
        outputs = run_prepare(config)
    elif args.command == 'train':
        outputs = run_train(config)
    elif args.command == 'predict':
        outputs = run_predict(config, workers=args.workers)
    elif args.command == 'fuse':
        outputs = run_fuse(config, args.evidence, args.sensor_l1, args.sensor_l0, args.neighborhood)
    elif args.command == 'evaluate':
        outputs = run_evaluate(config, args.regions, args.statistics, args.source)
    elif args.command == 'transitions':
        outputs = run_transitions(config, args.map_a, args.map_b, args.hectares)
    verify_outputs(outputs)
    return outputs


def error_document(error: BaseException, stage: str) -> Dict[str, Any]:
    """Machine-readable description of a failed stage."""
    if isinstance(error, NoisemapError):
        code = error.code
    elif isinstance(error, FileNotFoundError):
        code = StageInputError.code
    else:
        code = "internal"
    path = getattr(error, 'path', None) or getattr(error, 'filename', None)
    return {
        'error': code,
        'type': type(error).__name__,
        'message': str(error),
        'stage': stage,
        'path': None if path is None else str(path),
    }


def main(argv: Optional[List[str]] = None):
    """Parses arguments and calls the appropriate function."""
    args = parse_arguments(argv)

    try:
        if args.command == 'version':
            show_version()
        else:
            run_stage(args)
    except Exception as e:
        logging.error("Error: %s", e)
        print(json.dumps(error_document(e, args.command), sort_keys=True), file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
