"""Misspecified and matched Cramer-Rao type bounds on receiver position error."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from irs_vlp.calculus import gain_jet
from irs_vlp.channel import OrientationSet, mean_powers
from irs_vlp.errors import BoundsError
from irs_vlp.estimation import EstimatorConfig, GridTableCache, pseudo_true
from irs_vlp.scene import Scene, Vec3, as_vec3

logger = logging.getLogger(__name__)

Matrix3 = NDArray[np.float64]

MAX_CONDITION = 1e12


def _checked_inverse(matrix: Matrix3, what: str) -> Matrix3:
    condition = float(np.linalg.cond(matrix))
    if not math.isfinite(condition) or condition > MAX_CONDITION:
        raise BoundsError(f"{what} is singular or ill-conditioned", condition)
    return np.linalg.inv(matrix)


def _symmetrize(matrix: Matrix3) -> Matrix3:
    return 0.5 * (matrix + matrix.T)


def matrix_a(
    scene: Scene,
    x0: ArrayLike,
    assumed_orientations: OrientationSet,
    *,
    x_true: ArrayLike,
    true_orientations: OrientationSet,
    quadrature: int = 1,
) -> Matrix3:
    """Expected Hessian of the assumed log-likelihood at x0 under the true model.

    A = sum_i P_i / sigma_i^2 [(E_p P_RX,i - P_i h_i(x0)) grad^2 h_i - P_i grad h_i grad h_i^T]
    with E_p P_RX,i = P_i h_i(x_true) under the true orientations.
    """
    power = scene.led_arrays["power"]
    expected = mean_powers(scene, x_true, true_orientations, quadrature)
    jet = gain_jet(scene, x0, assumed_orientations, quadrature, order=2)
    discrepancy = expected - power * jet.values
    weight = power / scene.noise_array
    curvature = np.einsum("i,imn->mn", weight * discrepancy, jet.hessians)
    outer = np.einsum("i,im,in->mn", weight * power, jet.gradients, jet.gradients)
    return _symmetrize(curvature - outer)


def matrix_b(
    scene: Scene,
    x_true: ArrayLike,
    x0: ArrayLike,
    true_orientations: OrientationSet,
    assumed_orientations: OrientationSet,
    quadrature: int = 1,
) -> Matrix3:
    """Expected outer product of the assumed-model score at x0 under the true model.

    Diagonal LED terms carry sigma_i^2 + delta_i^2, cross terms delta_i delta_j,
    where delta_i is the mean discrepancy between the two models.
    """
    power = scene.led_arrays["power"]
    expected = mean_powers(scene, x_true, true_orientations, quadrature)
    jet = gain_jet(scene, x0, assumed_orientations, quadrature, order=1)
    discrepancy = expected - power * jet.values
    weighted = (power / scene.noise_array)[:, None] * jet.gradients
    noise_part = np.einsum("i,im,in->mn", scene.noise_array, weighted, weighted)
    bias_score = discrepancy @ weighted
    return _symmetrize(noise_part + np.outer(bias_score, bias_score))


def mcrb(a: Matrix3, b: Matrix3) -> Matrix3:
    """A^-1 B A^-1.

    Raises:
        BoundsError: If A has condition number above MAX_CONDITION
    """
    a_inv = _checked_inverse(np.asarray(a, dtype=float), "Matrix A")
    return _symmetrize(a_inv @ np.asarray(b, dtype=float) @ a_inv.T)


def lower_bound(mcrb_matrix: Matrix3, x_true: ArrayLike, x0: ArrayLike) -> Matrix3:
    """MCRB plus the bias outer product (x_true - x0)(x_true - x0)^T."""
    bias = as_vec3(x_true) - as_vec3(x0)
    return np.asarray(mcrb_matrix, dtype=float) + np.outer(bias, bias)


def fim(scene: Scene, x: ArrayLike, orientations: OrientationSet, quadrature: int = 1) -> Matrix3:
    """Gaussian Fisher information sum_i (P_i^2 / sigma_i^2) grad h_i grad h_i^T."""
    power = scene.led_arrays["power"]
    jet = gain_jet(scene, x, orientations, quadrature, order=1)
    return np.einsum("i,im,in->mn", power**2 / scene.noise_array, jet.gradients, jet.gradients)


def fim_crb(
    scene: Scene, x_true: ArrayLike, true_orientations: OrientationSet, quadrature: int = 1
) -> Matrix3:
    """Matched-model CRB, the inverse FIM at the true position.

    Raises:
        BoundsError: If the FIM is singular
    """
    return _symmetrize(_checked_inverse(fim(scene, x_true, true_orientations, quadrature), "FIM"))


def kl_divergence(
    scene: Scene,
    x: ArrayLike,
    x_true: ArrayLike,
    true_orientations: OrientationSet,
    assumed_orientations: OrientationSet,
    quadrature: int = 1,
) -> float:
    """KL divergence from the true measurement law to the assumed model at x."""
    expected = mean_powers(scene, x_true, true_orientations, quadrature)
    model = mean_powers(scene, x, assumed_orientations, quadrature)
    return float(np.sum((expected - model) ** 2 / (2 * scene.noise_array)))


@dataclass(frozen=True)
class BoundReport:
    x0: Vec3
    bias: Vec3
    mcrb: Matrix3
    lb: Matrix3
    crb: Matrix3
    kl_divergence: float

    @classmethod
    def unavailable(cls, x_true: ArrayLike, x0: ArrayLike) -> BoundReport:
        """Report for a point where the bound matrices could not be evaluated (all NaN)."""
        x_true, x0 = as_vec3(x_true), as_vec3(x0)
        missing = np.full((3, 3), np.nan)
        return cls(
            x0=x0, bias=x_true - x0, mcrb=missing, lb=missing.copy(), crb=missing.copy(),
            kl_divergence=math.nan,
        )

    @property
    def bias_norm(self) -> float:
        return float(np.linalg.norm(self.bias))

    @property
    def mcrb_rmse(self) -> float:
        return math.sqrt(max(float(np.trace(self.mcrb)), 0.0))

    @property
    def lb_rmse(self) -> float:
        return math.sqrt(max(float(np.trace(self.lb)), 0.0))

    @property
    def crb_rmse(self) -> float:
        return math.sqrt(max(float(np.trace(self.crb)), 0.0))

    def to_dict(self) -> dict[str, Any]:
        return {
            "x0": self.x0.tolist(),
            "bias": self.bias.tolist(),
            "bias_norm": self.bias_norm,
            "kl_divergence": self.kl_divergence,
            "mcrb": self.mcrb.tolist(),
            "lb": self.lb.tolist(),
            "crb": self.crb.tolist(),
            "rmse": {"mcrb": self.mcrb_rmse, "lb": self.lb_rmse, "crb": self.crb_rmse},
        }


def bounds_at(
    scene: Scene,
    x_true: ArrayLike,
    x0: ArrayLike,
    true_orientations: OrientationSet,
    assumed_orientations: OrientationSet,
    quadrature: int = 1,
) -> BoundReport:
    """All bounds for a known pseudo-true point x0."""
    x_true, x0 = as_vec3(x_true), as_vec3(x0)
    a = matrix_a(
        scene, x0, assumed_orientations,
        x_true=x_true, true_orientations=true_orientations, quadrature=quadrature,
    )
    b = matrix_b(scene, x_true, x0, true_orientations, assumed_orientations, quadrature)
    mcrb_matrix = mcrb(a, b)
    return BoundReport(
        x0=x0,
        bias=x_true - x0,
        mcrb=mcrb_matrix,
        lb=lower_bound(mcrb_matrix, x_true, x0),
        crb=fim_crb(scene, x_true, true_orientations, quadrature),
        kl_divergence=kl_divergence(
            scene, x0, x_true, true_orientations, assumed_orientations, quadrature
        ),
    )


def compute_bounds(
    scene: Scene,
    x_true: ArrayLike,
    true_orientations: OrientationSet,
    assumed_orientations: OrientationSet,
    config: EstimatorConfig | None = None,
    cache: GridTableCache | None = None,
) -> BoundReport:
    """Locate the pseudo-true point, then evaluate every bound there."""
    config = config or EstimatorConfig()
    x0 = pseudo_true(scene, x_true, true_orientations, assumed_orientations, config, cache)
    logger.info(f"Pseudo-true point {x0.tolist()}, bias {np.linalg.norm(as_vec3(x_true) - x0):.3e} m")
    return bounds_at(scene, x_true, x0, true_orientations, assumed_orientations, config.quadrature)
