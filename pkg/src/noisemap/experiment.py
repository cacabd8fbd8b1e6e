"""
DMI-vs-BCE ablation on a synthetic landscape with corrupted labels.

Each seed generates a landscape, degrades its labels by coarsening and
class-conditional flips, trains one network per loss on the same corpus and
scores both predicted maps against the clean truth at seeded points.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Sequence

from . import model as unet
from .config import PipelineConfig
from .dataset import prepare_corpus
from .evaluation import EvalReport, confusion_at_points, metrics, sample_points
from .synth import corrupt_labels, generate
from .trainer import predict_map, train


@dataclass(frozen=True)
class AblationResult:
    seed: int
    dmi: EvalReport
    bce: EvalReport

    @property
    def oa_gap(self) -> float:
        """DMI OA minus BCE OA, in percentage points."""
        return self.dmi.oa - self.bce.oa

    def as_dict(self) -> Dict:
        return {'seed': self.seed, 'dmi': self.dmi.as_dict(), 'bce': self.bce.as_dict(), 'oa_gap': self.oa_gap}


def run_seed(config: PipelineConfig, seed: int) -> AblationResult:
    synth = config.synth
    image, truth = generate(replace(synth.landscape, seed=seed))
    labels = corrupt_labels(truth, synth.coarsen_factor, synth.r01, synth.r10, seed=synth.noise_seed + seed)
    patch_list, manifest = prepare_corpus(image, labels, replace(config.dataset, seed=seed))
    patches = {p.patch_id: p for p in patch_list}

    year = synth.years[0]
    points = sample_points(truth, synth.points, seed=synth.point_seed + seed, years=[year])

    reports = {}
    for loss in ("DMI", "BCE"):
        network = unet.build(replace(config.model, seed=seed))
        network, _ = train(replace(config.train, loss=loss, seed=seed), network, manifest, patches)
        _, hard = predict_map(network, image, config.tiling.tile, config.tiling.overlap, workers=config.tiling.workers)
        reports[loss] = metrics(confusion_at_points(hard, points, year))
        logging.info("Seed %s, %s loss: OA %.2f", seed, loss, reports[loss].oa)

    result = AblationResult(seed=seed, dmi=reports["DMI"], bce=reports["BCE"])
    logging.info("Seed %s: DMI OA exceeds BCE OA by %.2f points", seed, result.oa_gap)
    return result


def run_ablation(config: PipelineConfig, seeds: Sequence[int]) -> List[AblationResult]:
    """One result per seed, in the order given."""
    if not seeds:
        raise ValueError("run_ablation needs at least one seed")
    return [run_seed(config, int(seed)) for seed in seeds]
