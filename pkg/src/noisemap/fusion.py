"""
Bayesian fusion of the network probability (prior) with an ancillary
categorical map (evidence).

Evidence pixels are modelled as independent Bernoulli observations with
P(obs = 1 | plantation) = l1 and P(obs = 1 | other) = l0. For k observed ones
and m observed zeros the posterior log-odds are

    logit(p) + k log(l1 / l0) + m log((1 - l1) / (1 - l0))

so several evidence layers (or the pixels of a neighbourhood block) simply
add to k and m.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logit

from .errors import AlignmentError, ConfigError, DomainError
from .raster import Raster, resample_nearest


NEIGHBORHOODS = ("single", "block")
ACCURACY_KEYS = ("ua", "pa", "prevalence")


@dataclass(frozen=True)
class SensorModel:
    """Likelihood of the ancillary map reporting plantation, given the true class."""

    p_obs1_given_palm: float = 0.8
    p_obs1_given_not: float = 0.2

    def __post_init__(self) -> None:
        for name in ('p_obs1_given_palm', 'p_obs1_given_not'):
            value = float(getattr(self, name))
            if not 0 < value < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {value}")
            object.__setattr__(self, name, value)

    @property
    def informative(self) -> bool:
        return self.p_obs1_given_palm != self.p_obs1_given_not

    @classmethod
    def from_accuracy(cls, ua: float, pa: float, prevalence: float) -> "SensorModel":
        """Calibrate from the ancillary map's user's and producer's accuracy (fractions).

        l1 is the producer's accuracy; l0 follows from Bayes' rule given the
        plantation prevalence.
        """
        if not (0 < ua <= 1 and 0 < pa <= 1):
            raise ConfigError(f"ua and pa must lie in (0, 1], got ua={ua}, pa={pa}")
        if not 0 < prevalence < 1:
            raise ConfigError(f"prevalence must lie in (0, 1), got {prevalence}")
        l0 = prevalence * pa * (1 - ua) / (ua * (1 - prevalence))
        if not 0 < l0 < 1:
            raise ConfigError(
                f"ua={ua}, pa={pa}, prevalence={prevalence} imply P(obs=1 | other) = {l0:.4g}, outside (0, 1)"
            )
        return cls(p_obs1_given_palm=pa, p_obs1_given_not=l0)

    @classmethod
    def from_config(cls, data: Dict[str, Any]) -> "SensorModel":
        """Either the likelihood pair or ``{ua, pa, prevalence}`` of the ancillary map."""
        if set(data) & set(ACCURACY_KEYS):
            missing = sorted(set(ACCURACY_KEYS) - set(data))
            unknown = sorted(set(data) - set(ACCURACY_KEYS))
            if missing or unknown:
                raise ConfigError(f"Sensor calibration needs exactly {', '.join(ACCURACY_KEYS)}; "
                                  f"missing {missing}, unexpected {unknown}")
            return cls.from_accuracy(**{key: float(data[key]) for key in ACCURACY_KEYS})
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SensorModel":
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"Unknown sensor model keys: {', '.join(unknown)}")
        return cls(**data)

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


def posterior(prior, ones, zeros, sensor: SensorModel) -> np.ndarray:
    """Posterior plantation probability (float64) given counts of evidence ones and zeros.

    Evaluated in log-odds, so large counts never underflow the likelihoods.
    """
    p = np.asarray(prior, dtype=np.float64)
    k = np.asarray(ones, dtype=np.float64)
    m = np.asarray(zeros, dtype=np.float64)
    l1, l0 = sensor.p_obs1_given_palm, sensor.p_obs1_given_not
    if not sensor.informative:
        return np.broadcast_to(p, np.broadcast(p, k, m).shape).copy()

    with np.errstate(divide='ignore'):
        prior_odds = logit(p)
    log_odds = prior_odds + k * math.log(l1 / l0) + m * math.log((1 - l1) / (1 - l0))
    # pixels without evidence keep the prior bit for bit
    return np.where((k == 0) & (m == 0), p, expit(log_odds))


def _match_evidence(evidence: Raster, prior: Raster) -> Raster:
    if evidence.aligned_with(prior):
        return evidence
    eh, ew = evidence.dims
    ph, pw = prior.dims
    factor = ph // eh if eh else 0
    if (
        factor > 1
        and ph == eh * factor
        and pw == ew * factor
        and np.allclose(evidence.geotransform[::3], prior.geotransform[::3])
        and np.isclose(evidence.pixel_size[0], prior.pixel_size[0] * factor)
    ):
        logging.info("Resampling evidence %sx%s by factor %s to match the prior", eh, ew, factor)
        return resample_nearest(evidence, factor)
    raise AlignmentError(
        f"Evidence {evidence.dims} ({evidence.geotransform}) is not aligned with prior {prior.dims} ({prior.geotransform})"
    )


def _block_sum(values: np.ndarray, block: int) -> np.ndarray:
    height, width = values.shape
    rows = -(-height // block)
    cols = -(-width // block)
    padded = np.zeros((rows * block, cols * block), dtype=np.int64)
    padded[:height, :width] = values
    sums = padded.reshape(rows, block, cols, block).sum(axis=(1, 3))
    return np.repeat(np.repeat(sums, block, axis=0), block, axis=1)[:height, :width]


def evidence_counts(
    layers: Sequence[Raster],
    neighborhood: str = "single",
    block: int = 10,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel counts of evidence ones and zeros over all layers; nodata pixels count as neither."""
    if neighborhood not in NEIGHBORHOODS:
        raise ConfigError(f"neighborhood must be one of {NEIGHBORHOODS}, got {neighborhood!r}")
    if block < 1:
        raise ConfigError(f"block must be >= 1, got {block}")

    ones = np.zeros(layers[0].dims, dtype=np.int64)
    zeros = np.zeros(layers[0].dims, dtype=np.int64)
    for layer in layers:
        values = layer.band(0)
        valid = np.ones(values.shape, dtype=bool) if layer.nodata is None else values != layer.nodata
        invalid = valid & (values > 1)
        if invalid.any():
            raise DomainError(f"Evidence values must be 0/1, found {sorted(set(np.unique(values[invalid]).tolist()))}")
        layer_ones = (valid & (values == 1)).astype(np.int64)
        layer_zeros = (valid & (values == 0)).astype(np.int64)
        if neighborhood == "block":
            layer_ones = _block_sum(layer_ones, block)
            layer_zeros = _block_sum(layer_zeros, block)
        ones += layer_ones
        zeros += layer_zeros
    return ones, zeros


def fuse(
    prior: Raster,
    evidence: Union[Raster, Sequence[Raster]],
    sensor: SensorModel,
    neighborhood: str = "single",
    block: int = 10,
) -> Raster:
    """Posterior probability raster (float32) aligned with ``prior``."""
    layers = [evidence] if isinstance(evidence, Raster) else list(evidence)
    if not layers:
        raise ConfigError("fuse needs at least one evidence layer")
    values = prior.band(0)
    if np.isnan(values).any() or values.min() < 0 or values.max() > 1:
        raise DomainError("Prior probabilities must lie in [0, 1]")
    if not sensor.informative:
        logging.warning("Sensor model is uninformative (l1 == l0 == %s); posterior equals prior", sensor.p_obs1_given_palm)

    layers = [_match_evidence(layer, prior) for layer in layers]
    ones, zeros = evidence_counts(layers, neighborhood=neighborhood, block=block)
    fused = posterior(values, ones, zeros, sensor).astype(np.float32)

    logging.info("Fused %s evidence layer(s) (%s mode): mean probability %.4f -> %.4f",
                 len(layers), neighborhood, float(values.mean()), float(fused.mean()))
    return Raster(data=fused, geotransform=prior.geotransform)


@dataclass(frozen=True)
class FusionConfig:
    sensor: SensorModel = field(default_factory=SensorModel)
    neighborhood: str = "single"
    block: int = 10

    def __post_init__(self) -> None:
        if isinstance(self.sensor, dict):
            object.__setattr__(self, 'sensor', SensorModel.from_config(self.sensor))
        if self.neighborhood not in NEIGHBORHOODS:
            raise ConfigError(f"neighborhood must be one of {NEIGHBORHOODS}, got {self.neighborhood!r}")
        if self.block < 1:
            raise ConfigError(f"block must be >= 1, got {self.block}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FusionConfig":
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"Unknown fusion keys: {', '.join(unknown)}")
        return cls(**data)

    def as_dict(self) -> Dict[str, Any]:
        return {'sensor': self.sensor.as_dict(), 'neighborhood': self.neighborhood, 'block': self.block}
