"""Reproducible Monte-Carlo RMSE experiments with bound overlays.

Every trial draws from its own substream of the master seed, keyed by
(k index, sigma^2 index, trial index), so results do not depend on the
number of worker threads.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Sequence

import numpy as np
from numpy.typing import ArrayLike

from irs_vlp.bounds import BoundReport, bounds_at
from irs_vlp.channel import OrientationSet, orientation_set
from irs_vlp.errors import BoundsError, ConfigError, EstimationError, GeometryError
from irs_vlp.estimation import EstimatorConfig, estimate_position, pseudo_true, simulate_measurements
from irs_vlp.scene import (
    Box,
    Scene,
    Vec3,
    as_vec3,
    perturb_wall_orientations,
    unit_to_spherical,
    wall_assumed_angles,
)
from irs_vlp.utils.rng import derive_trial_rng, mismatch_rng, random_guess_rng

logger = logging.getLogger(__name__)

RANDOM_GUESS_SAMPLES = 100_000


class MismatchMode(str, Enum):
    REDRAW_PER_TRIAL = "redraw-per-trial"
    FIXED_SEEDED = "fixed-seeded"


@dataclass(frozen=True)
class ExperimentConfig:
    scene: Scene
    receiver: Vec3
    k_values: tuple[float, ...]
    sigma2_values: tuple[float, ...]
    trials: int
    mode: MismatchMode
    master_seed: int
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    threads: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if not self.k_values:
            raise ConfigError("k_values must not be empty")
        if any(k < 0 for k in self.k_values):
            raise ConfigError(f"k values must be >= 0, got {list(self.k_values)}")
        if not self.sigma2_values:
            raise ConfigError("sigma2_values must not be empty")
        if any(not s > 0 for s in self.sigma2_values):
            raise ConfigError(f"sigma2 values must be > 0, got {list(self.sigma2_values)}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError(f"master seed must be a 64-bit unsigned integer, got {self.master_seed}")


@dataclass(frozen=True)
class TrialOutcome:
    mml: Vec3
    ml: Vec3
    converged: bool


@dataclass(frozen=True)
class ExperimentPoint:
    k: float
    sigma2: float
    mml_rmse: float
    ml_rmse: float
    trials: int
    nonconverged: int
    bounds: BoundReport | None = None
    random_guess: float | None = None

    @property
    def inv_sigma2_db(self) -> float:
        return 10 * math.log10(1 / self.sigma2)

    def series(self) -> list[tuple[str, float]]:
        values = [("mml", self.mml_rmse), ("ml", self.ml_rmse)]
        if self.bounds is not None:
            values += [
                ("mcrb", self.bounds.mcrb_rmse),
                ("lb", self.bounds.lb_rmse),
                ("crb", self.bounds.crb_rmse),
                ("bias", self.bounds.bias_norm),
            ]
        if self.random_guess is not None:
            values.append(("random_guess", self.random_guess))
        return values


@dataclass(frozen=True)
class ExperimentResult:
    points: tuple[ExperimentPoint, ...]
    mode: MismatchMode
    seed: int
    receiver: Vec3
    # k -> per-wall true orientation vectors, fixed-seeded mode only
    realized_orientations: dict[float, list[Vec3]] = field(default_factory=dict)

    def to_csv_rows(self) -> list[dict[str, Any]]:
        rows = []
        for point in self.points:
            for name, value in point.series():
                rows.append({
                    "k": float(point.k),
                    "sigma2": float(point.sigma2),
                    "inv_sigma2_db": point.inv_sigma2_db,
                    "series": name,
                    "value_m": float(value),
                    "trials": point.trials,
                    "seed": self.seed,
                })
        return rows

    def to_dict(self) -> dict[str, Any]:
        points = []
        for point in self.points:
            entry = {
                "k": point.k,
                "sigma2": point.sigma2,
                "inv_sigma2_db": point.inv_sigma2_db,
                "trials": point.trials,
                "nonconverged": point.nonconverged,
                "rmse": {"mml": point.mml_rmse, "ml": point.ml_rmse},
            }
            if point.bounds is not None:
                entry["bounds"] = point.bounds.to_dict()
            if point.random_guess is not None:
                entry["rmse"]["random_guess"] = point.random_guess
            points.append(entry)
        realized = {}
        for k, vectors in self.realized_orientations.items():
            realized[repr(float(k))] = [
                {
                    "wall": wall,
                    "vector": v.tolist(),
                    "theta": unit_to_spherical(v).theta,
                    "phi": unit_to_spherical(v).phi,
                }
                for wall, v in enumerate(vectors, start=1)
            ]
        return {
            "mode": self.mode.value,
            "seed": self.seed,
            "receiver": self.receiver.tolist(),
            "points": points,
            "realized_orientations": realized,
        }


def rmse(estimates: Sequence[ArrayLike], x_true: ArrayLike) -> float:
    """Root mean squared Euclidean error of ``estimates`` about ``x_true``.

    Raises:
        EstimationError: If there are no estimates
    """
    if len(estimates) == 0:
        raise EstimationError("Cannot compute RMSE of an empty estimate list")
    errors = np.asarray(estimates, dtype=float).reshape(-1, 3) - as_vec3(x_true)
    return float(np.sqrt(np.mean(np.sum(errors**2, axis=1))))


def random_guess_rmse(
    region: Box, x_true: ArrayLike, n_samples: int, rng: np.random.Generator
) -> float:
    """RMSE of guesses drawn uniformly over ``region``; the no-information floor."""
    if n_samples < 1:
        raise EstimationError(f"n_samples must be >= 1, got {n_samples}")
    guesses = rng.uniform(region.lower_array, region.upper_array, size=(n_samples, 3))
    return rmse(guesses, x_true)


def _run_trial(
    config: ExperimentConfig,
    k_index: int,
    sigma_index: int,
    trial: int,
    fixed_scene: Scene | None,
) -> TrialOutcome:
    rng = derive_trial_rng(config.master_seed, k_index, sigma_index, trial)
    if fixed_scene is None:
        # Perturbation first, then noise, from the same substream.
        walls = perturb_wall_orientations(wall_assumed_angles(), config.k_values[k_index], rng)
        scene = config.scene.with_true_wall_orientations(walls)
    else:
        scene = fixed_scene
    scene = scene.with_noise_variance(config.sigma2_values[sigma_index])
    true, assumed = orientation_sets(scene)
    estimator = config.estimator

    p_rx = simulate_measurements(scene, config.receiver, true, rng, estimator.quadrature)
    # Grid tie-breaks draw after the noise.
    mml = estimate_position(p_rx, scene, assumed, estimator, rng=rng)
    ml = estimate_position(p_rx, scene, true, estimator, rng=rng)
    return TrialOutcome(mml=mml.position, ml=ml.position, converged=mml.converged and ml.converged)


def _run_point(
    config: ExperimentConfig,
    pool: ThreadPoolExecutor,
    k_index: int,
    sigma_index: int,
    fixed_scene: Scene | None,
) -> tuple[float, float, int]:
    outcomes = list(pool.map(
        lambda t: _run_trial(config, k_index, sigma_index, t, fixed_scene),
        range(config.trials),
    ))
    nonconverged = sum(not o.converged for o in outcomes)
    mml = rmse([o.mml for o in outcomes], config.receiver)
    ml = rmse([o.ml for o in outcomes], config.receiver)
    logger.info(
        f"k={config.k_values[k_index]} sigma2={config.sigma2_values[sigma_index]:.1e}: "
        f"MML {mml:.4g} m, ML {ml:.4g} m ({nonconverged} not converged)"
    )
    return mml, ml, nonconverged


def fixed_mismatch_scene(config: ExperimentConfig, k_index: int) -> tuple[Scene, list[Vec3]]:
    """Scene whose true orientations are the one seeded draw for ``k_index``."""
    walls = perturb_wall_orientations(
        wall_assumed_angles(), config.k_values[k_index], mismatch_rng(config.master_seed, k_index)
    )
    return config.scene.with_true_wall_orientations(walls), walls


def _point_bounds(config: ExperimentConfig, scene: Scene, x0: Vec3) -> BoundReport:
    """Bounds at one sweep point, or an all-NaN report when they cannot be evaluated there."""
    try:
        return bounds_at(
            scene, config.receiver, x0, *orientation_sets(scene),
            quadrature=config.estimator.quadrature,
        )
    except (GeometryError, BoundsError) as e:
        logger.warning(f"No bounds at sigma2={scene.noise_variances[0]:.1e}, x0={x0.tolist()}: {e}")
        return BoundReport.unavailable(config.receiver, x0)


def _run(config: ExperimentConfig, with_bounds: bool) -> ExperimentResult:
    fixed = config.mode is MismatchMode.FIXED_SEEDED
    points = []
    realized: dict[float, list[Vec3]] = {}
    guess = None
    if with_bounds:
        guess = random_guess_rmse(
            config.scene.search_region, config.receiver, RANDOM_GUESS_SAMPLES,
            random_guess_rng(config.master_seed),
        )

    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        for k_index, k in enumerate(config.k_values):
            fixed_scene = None
            x0 = None
            if fixed:
                fixed_scene, walls = fixed_mismatch_scene(config, k_index)
                realized[k] = walls
            if with_bounds:
                # x0 does not depend on a common noise level.
                reference = fixed_scene.with_noise_variance(config.sigma2_values[0])
                true_set, assumed_set = orientation_sets(reference)
                x0 = pseudo_true(reference, config.receiver, true_set, assumed_set, config.estimator)

            for sigma_index, sigma2 in enumerate(config.sigma2_values):
                mml, ml, nonconverged = _run_point(config, pool, k_index, sigma_index, fixed_scene)
                report = None
                if with_bounds:
                    report = _point_bounds(config, fixed_scene.with_noise_variance(sigma2), x0)
                points.append(ExperimentPoint(
                    k=k, sigma2=sigma2, mml_rmse=mml, ml_rmse=ml, trials=config.trials,
                    nonconverged=nonconverged, bounds=report, random_guess=guess,
                ))

    return ExperimentResult(
        points=tuple(points),
        mode=config.mode,
        seed=config.master_seed,
        receiver=as_vec3(config.receiver),
        realized_orientations=realized,
    )


def run_rmse_vs_k(config: ExperimentConfig) -> ExperimentResult:
    """MML and ML RMSE for every (k, sigma^2) point, honoring the configured mismatch mode."""
    return _run(config, with_bounds=False)


def run_rmse_vs_noise(config: ExperimentConfig) -> ExperimentResult:
    """RMSEs plus MCRB, LB and CRB overlays for a fixed mismatch realization per k.

    Raises:
        ConfigError: If the mode is not fixed-seeded
    """
    if config.mode is not MismatchMode.FIXED_SEEDED:
        raise ConfigError(
            f"rmse-vs-noise needs mode '{MismatchMode.FIXED_SEEDED.value}', got '{config.mode.value}'"
        )
    return _run(config, with_bounds=True)


def orientation_sets(scene: Scene) -> tuple[OrientationSet, OrientationSet]:
    """(true, assumed) orientation sets of a scene."""
    return orientation_set(scene, "true"), orientation_set(scene, "assumed")
