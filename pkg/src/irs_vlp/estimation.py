"""Measurement simulation and matched / mismatched ML position estimation."""

from __future__ import annotations

import dataclasses
import logging
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import least_squares

from irs_vlp.calculus import gain_jet
from irs_vlp.channel import OrientationSet, mean_powers, mean_powers_batch
from irs_vlp.errors import ConfigError, GeometryError
from irs_vlp.scene import Box, Scene, Vec3, as_vec3

logger = logging.getLogger(__name__)

ModelTag = Literal["matched", "mismatched"]

# Pseudo-true points feed the bounds, whose B matrix is sensitive to how
# well the first-order condition holds there.
PSEUDO_TRUE_TOLERANCE = 1e-10


@dataclass(frozen=True)
class EstimatorConfig:
    """Grid search and refinement settings.

    ``grid_resolution`` is the grid spacing in metres. ``tolerance`` is the
    refinement step tolerance in metres. ``least_squares`` only takes a
    relative ``xtol`` (stop once a step is shorter than xtol * (xtol + |x|)),
    so it is divided by the search region's radius; see ``step_tolerance``.
    ``max_iterations`` bounds function evaluations.
    """

    grid_resolution: float = 0.10
    tolerance: float = 1e-6
    max_iterations: int = 100
    multistart: int = 5
    quadrature: int = 1

    def __post_init__(self):
        if not self.grid_resolution > 0:
            raise ConfigError(f"grid_resolution must be > 0, got {self.grid_resolution}")
        if not self.tolerance > 0:
            raise ConfigError(f"tolerance must be > 0, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.multistart < 1:
            raise ConfigError(f"multistart must be >= 1, got {self.multistart}")
        if self.quadrature < 1:
            raise ConfigError(f"quadrature must be >= 1, got {self.quadrature}")


@dataclass(frozen=True)
class Estimate:
    """Result of one position estimate plus search diagnostics."""

    position: Vec3
    objective: float
    model: ModelTag
    grid_minimum: float
    grid_position: Vec3
    refinement_steps: int
    converged: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "position": self.position.tolist(),
            "objective": self.objective,
            "model": self.model,
            "diagnostics": {
                "grid_minimum": self.grid_minimum,
                "grid_position": self.grid_position.tolist(),
                "refinement_steps": self.refinement_steps,
                "converged": self.converged,
            },
        }


def model_tag(orientations: OrientationSet) -> ModelTag:
    return "matched" if orientations.tag == "true" else "mismatched"


def simulate_measurements(
    scene: Scene,
    x_true: ArrayLike,
    true_orientations: OrientationSet,
    rng: np.random.Generator,
    quadrature: int = 1,
    add_noise: bool = True,
) -> NDArray[np.float64]:
    """Noisy received powers P_RX,i = P_TX,i h_i(x) + eta_i, eta_i ~ N(0, sigma_i^2).

    Negative powers are kept as drawn.
    """
    powers = mean_powers(scene, x_true, true_orientations, quadrature)
    if not add_noise:
        return powers
    return powers + np.sqrt(scene.noise_array) * rng.standard_normal(scene.num_leds)


def nls_objective(
    p_rx: ArrayLike,
    scene: Scene,
    x: ArrayLike,
    orientations: OrientationSet,
    quadrature: int = 1,
) -> float:
    """Weighted squared residual sum_i (P_RX,i - P_TX,i h_i(x))^2 / sigma_i^2."""
    residual = np.asarray(p_rx, dtype=float) - mean_powers(scene, x, orientations, quadrature)
    return float(np.sum(residual**2 / scene.noise_array))


def log_likelihood(
    p_rx: ArrayLike,
    scene: Scene,
    x: ArrayLike,
    orientations: OrientationSet,
    quadrature: int = 1,
) -> float:
    """Gaussian log-likelihood of the measurements at position x."""
    normalizer = -0.5 * float(np.sum(np.log(2 * math.pi * scene.noise_array)))
    return normalizer - 0.5 * nls_objective(p_rx, scene, x, orientations, quadrature)


def score(
    p_rx: ArrayLike,
    scene: Scene,
    x: ArrayLike,
    orientations: OrientationSet,
    quadrature: int = 1,
) -> Vec3:
    """Position gradient of log_likelihood."""
    jet = gain_jet(scene, x, orientations, quadrature, order=1, check_boundary=False)
    power = scene.led_arrays["power"]
    residual = np.asarray(p_rx, dtype=float) - power * jet.values
    return (residual * power / scene.noise_array) @ jet.gradients


def search_grid(region: Box, resolution: float) -> NDArray[np.float64]:
    """Cell centers of a regular grid covering ``region``, in lexicographic (x, y, z) order.

    Each axis is split into ceil(size / resolution) equal cells, so no point
    lies on the region boundary.
    """
    if not resolution > 0:
        raise ConfigError(f"grid_resolution must be > 0, got {resolution}")
    lo, size = region.lower_array, region.size
    axes = []
    for axis in range(3):
        cells = max(1, int(math.ceil(size[axis] / resolution - 1e-9)))
        axes.append(lo[axis] + (np.arange(cells) + 0.5) * size[axis] / cells)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


class GridTableCache:
    """Mean powers of every search-grid cell, keyed by scene layout and orientation set.

    Tables do not depend on noise variances, so one table serves every
    sigma^2 and every trial that shares an orientation set.
    """

    def __init__(self, max_entries: int = 32):
        self._max_entries = max_entries
        self._tables: OrderedDict[tuple, tuple[NDArray[np.float64], NDArray[np.float64]]] = OrderedDict()
        self._lock = threading.Lock()

    def _get_cached(self, key: tuple):
        with self._lock:
            if key in self._tables:
                self._tables.move_to_end(key)
                return self._tables[key]
            return None

    def _set_cached(self, key: tuple, value) -> None:
        with self._lock:
            self._tables[key] = value
            self._tables.move_to_end(key)
            while len(self._tables) > self._max_entries:
                self._tables.popitem(last=False)

    def invalidate_cache(self) -> None:
        with self._lock:
            self._tables.clear()

    def __len__(self) -> int:
        with self._lock:
            return len(self._tables)

    def table(
        self, scene: Scene, orientations: OrientationSet, config: EstimatorConfig
    ) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """(grid points, mean powers) for the scene's search region."""
        key = (scene.layout_digest, orientations.digest, config.grid_resolution, config.quadrature)
        cached = self._get_cached(key)
        if cached is not None:
            return cached
        grid = search_grid(scene.search_region, config.grid_resolution)
        logger.debug(f"Building grid table: {grid.shape[0]} cells, {orientations.tag} orientations")
        powers = mean_powers_batch(scene, grid, orientations, config.quadrature)
        self._set_cached(key, (grid, powers))
        return grid, powers


GRID_TABLES = GridTableCache()


def step_tolerance(config: EstimatorConfig, region: Box) -> float:
    """Relative ``xtol`` giving steps no longer than ``config.tolerance`` metres inside ``region``."""
    radius = max(float(np.linalg.norm(region.lower_array)), float(np.linalg.norm(region.upper_array)), 1.0)
    return config.tolerance / radius


def _refine(
    p_rx: NDArray[np.float64],
    scene: Scene,
    orientations: OrientationSet,
    start: Vec3,
    config: EstimatorConfig,
):
    sigma = np.sqrt(scene.noise_array)
    weights = scene.led_arrays["power"] / sigma
    region = scene.search_region

    def residuals(x):
        return (p_rx - mean_powers(scene, x, orientations, config.quadrature)) / sigma

    def jacobian(x):
        jet = gain_jet(scene, x, orientations, config.quadrature, order=1, check_boundary=False)
        return -weights[:, None] * jet.gradients

    return least_squares(
        residuals,
        start,
        jac=jacobian,
        bounds=(region.lower_array, region.upper_array),
        method="trf",
        xtol=step_tolerance(config, region),
        ftol=None,
        gtol=1e-14,
        max_nfev=config.max_iterations,
    )


def _grid_starts(
    objectives: NDArray[np.float64], count: int, rng: np.random.Generator | None
) -> NDArray[np.intp]:
    """Indices of the ``count`` lowest grid objectives, best first.

    Cells tied exactly at the minimum (e.g. a region where no LED or element
    is visible) are drawn from uniformly with ``rng``; without one the
    lowest index wins.
    """
    order = np.argsort(objectives, kind="stable")
    if rng is None:
        return order[:count]
    tied = np.flatnonzero(objectives == objectives[order[0]])
    if tied.size == 1:
        return order[:count]
    chosen = tied[rng.integers(tied.size)]
    rest = order[order != chosen]
    return np.concatenate(([chosen], rest[: count - 1]))


def estimate_position(
    p_rx: ArrayLike,
    scene: Scene,
    orientations: OrientationSet,
    config: EstimatorConfig | None = None,
    cache: GridTableCache | None = None,
    rng: np.random.Generator | None = None,
) -> Estimate:
    """Minimize nls_objective over the search region.

    A coarse exhaustive grid picks the best cells; exact ties for the
    minimum are broken uniformly with ``rng`` when given, otherwise the
    first cell wins. Each of the best ``multistart`` cells seeds a bounded
    Gauss-Newton refinement using the analytic gradients. The refined point
    replaces the grid point only when it lowers the objective.
    """
    config = config or EstimatorConfig()
    cache = cache or GRID_TABLES
    p_rx = np.asarray(p_rx, dtype=float)
    if p_rx.shape != (scene.num_leds,):
        raise ValueError(f"Expected {scene.num_leds} measurements, got shape {p_rx.shape}")

    grid, table = cache.table(scene, orientations, config)
    objectives = np.sum((p_rx - table) ** 2 / scene.noise_array, axis=1)
    starts = _grid_starts(objectives, config.multistart, rng)
    grid_index = int(starts[0])
    grid_position = grid[grid_index].copy()
    grid_minimum = nls_objective(p_rx, scene, grid_position, orientations, config.quadrature)

    best_position, best_objective = grid_position, grid_minimum
    steps, converged, any_converged, attempted = 0, False, False, 0
    for index in starts:
        try:
            result = _refine(p_rx, scene, orientations, grid[index], config)
        except GeometryError as e:
            logger.warning(f"Skipping refinement start {grid[index].tolist()}: {e}")
            continue
        attempted += 1
        start_converged = result.status > 0
        any_converged |= start_converged
        candidate = np.clip(result.x, scene.search_region.lower_array, scene.search_region.upper_array)
        try:
            candidate_objective = nls_objective(p_rx, scene, candidate, orientations, config.quadrature)
        except GeometryError:
            continue
        if candidate_objective < best_objective:
            best_position, best_objective = candidate, candidate_objective
            steps, converged = int(result.nfev), start_converged

    if best_position is grid_position:
        converged = any_converged
    if attempted == 0:
        logger.warning("Every refinement start failed; returning the grid minimum")
    elif not converged:
        logger.warning(f"Refinement did not converge within {config.max_iterations} evaluations")

    return Estimate(
        position=best_position,
        objective=best_objective,
        model=model_tag(orientations),
        grid_minimum=grid_minimum,
        grid_position=grid_position,
        refinement_steps=steps,
        converged=converged,
    )


def pseudo_true_estimate(
    scene: Scene,
    x_true: ArrayLike,
    true_orientations: OrientationSet,
    assumed_orientations: OrientationSet,
    config: EstimatorConfig | None = None,
    cache: GridTableCache | None = None,
) -> Estimate:
    """Estimate from the noiseless true-model powers under the assumed model."""
    config = config or EstimatorConfig()
    config = dataclasses.replace(config, tolerance=min(config.tolerance, PSEUDO_TRUE_TOLERANCE))
    expected = mean_powers(scene, as_vec3(x_true), true_orientations, config.quadrature)
    return estimate_position(expected, scene, assumed_orientations, config, cache)


def pseudo_true(
    scene: Scene,
    x_true: ArrayLike,
    true_orientations: OrientationSet,
    assumed_orientations: OrientationSet,
    config: EstimatorConfig | None = None,
    cache: GridTableCache | None = None,
) -> Vec3:
    """KL-minimizing position x0 of the assumed model (see pseudo_true_estimate)."""
    return pseudo_true_estimate(
        scene, x_true, true_orientations, assumed_orientations, config, cache
    ).position
