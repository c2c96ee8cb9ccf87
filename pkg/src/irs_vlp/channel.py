"""LOS and IRS-reflected channel gains and noiseless mean received powers.

All gains are dimensionless and clamped to be non-negative: every
visibility dot product and cos(beta - alpha) is clipped at zero before it
is raised to a power.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

from irs_vlp.errors import GeometryError
from irs_vlp.scene import IrsElement, Led, Scene, Vec3, as_vec3

OrientationTag = Literal["assumed", "true"]

# Upper bound on (positions x quadrature nodes) held in memory per chunk.
BATCH_BUDGET = 250_000


@dataclass(frozen=True, eq=False)
class OrientationSet:
    """One orientation vector per IRS element, tagged by which model it belongs to."""

    vectors: NDArray[np.float64]
    tag: OrientationTag

    def __post_init__(self):
        if self.tag not in ("assumed", "true"):
            raise ValueError(f"Orientation tag must be 'assumed' or 'true', got {self.tag!r}")
        if self.vectors.ndim != 2 or self.vectors.shape[1] != 3:
            raise ValueError(f"Orientation vectors must have shape (n, 3), got {self.vectors.shape}")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.vectors).tobytes()).hexdigest()


def orientation_set(scene: Scene, tag: OrientationTag) -> OrientationSet:
    """The assumed or true orientation set of a scene."""
    if scene.num_elements == 0:
        return OrientationSet(vectors=np.zeros((0, 3)), tag=tag)
    return OrientationSet(vectors=scene.element_arrays[tag], tag=tag)


@dataclass(frozen=True)
class GainBreakdown:
    los_gain: float
    per_element_gains: NDArray[np.float64]
    los_blocked: bool
    total: float


@dataclass(frozen=True)
class QuadratureNodes:
    """Midpoint nodes of every element footprint, element-major."""

    points: NDArray[np.float64]
    weights: NDArray[np.float64]
    element_index: NDArray[np.int64]
    per_element: int


def quadrature_nodes(scene: Scene, quadrature: int) -> QuadratureNodes:
    """Q x Q midpoint-rule nodes over each element footprint, cached per scene."""
    if quadrature < 1:
        raise ValueError(f"Quadrature order must be >= 1, got {quadrature}")
    cache = scene.quadrature_cache
    if quadrature in cache:
        return cache[quadrature]

    n = scene.num_elements
    if n == 0:
        nodes = QuadratureNodes(np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=int), quadrature**2)
        cache[quadrature] = nodes
        return nodes

    arrays = scene.element_arrays
    frac = (np.arange(quadrature) + 0.5) / quadrature - 0.5
    fu, fv = np.meshgrid(frac, frac, indexing="ij")
    fu, fv = fu.ravel(), fv.ravel()
    offsets_u = arrays["width"][:, None] * fu[None, :]
    offsets_v = arrays["height"][:, None] * fv[None, :]
    points = (
        arrays["center"][:, None, :]
        + offsets_u[..., None] * arrays["tangent_u"][:, None, :]
        + offsets_v[..., None] * arrays["tangent_v"][:, None, :]
    ).reshape(-1, 3)
    area = arrays["width"] * arrays["height"]
    weights = np.repeat(area / quadrature**2, quadrature**2)
    nodes = QuadratureNodes(
        points=points,
        weights=weights,
        element_index=np.repeat(np.arange(n), quadrature**2),
        per_element=quadrature**2,
    )
    cache[quadrature] = nodes
    return nodes


def _check_positions(positions: NDArray[np.float64]) -> NDArray[np.float64]:
    positions = np.asarray(positions, dtype=float)
    if positions.ndim == 1:
        positions = positions[None, :]
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise GeometryError(f"Positions must have shape (n, 3), got {positions.shape}")
    return positions


# ---------------------------------------------------------------------------
# Scalar reference formulas
# ---------------------------------------------------------------------------


def los_gain(scene: Scene, led_index: int, x: ArrayLike) -> float:
    """Lambertian LOS gain from LED ``led_index`` to a receiver at ``x``.

    Raises:
        GeometryError: If x coincides with the LED
    """
    led = scene.leds[led_index]
    x = as_vec3(x)
    d = x - led.position
    dist = float(np.linalg.norm(d))
    if dist == 0.0:
        raise GeometryError(f"Receiver coincides with LED {led_index} at {x}")
    emit = max(float(d @ led.orientation), 0.0)
    receive = max(float(-d @ scene.receiver_orientation), 0.0)
    m = led.lambertian_order
    return (m + 1) * scene.pd_area * emit**m * receive / (2 * math.pi * dist ** (m + 3))


def cos_beta_minus_alpha(
    element: IrsElement,
    led: Led,
    x: ArrayLike,
    orientation: ArrayLike | None = None,
    surface_point: ArrayLike | None = None,
) -> float:
    """cos(beta - alpha) = cos(alpha) cos(beta) + sin(alpha) sin(beta) at a reflecting point.

    alpha is the incidence angle of the LED ray and beta the irradiance angle
    towards the receiver, both measured from the element orientation
    (defaults: the element's true orientation and its center).
    """
    n = element.true_orientation if orientation is None else as_vec3(orientation)
    p = element.center if surface_point is None else as_vec3(surface_point)
    x = as_vec3(x)
    to_rx = x - p
    to_led = led.position - p
    dist_rx = float(np.linalg.norm(to_rx))
    dist_led = float(np.linalg.norm(to_led))
    if dist_rx == 0.0 or dist_led == 0.0:
        raise GeometryError(f"Degenerate reflection geometry at surface point {p}")
    cos_alpha = float(to_led @ n) / dist_led
    sin_alpha = float(np.linalg.norm(np.cross(to_led, n))) / dist_led
    cos_beta = float(to_rx @ n) / dist_rx
    sin_beta = float(np.linalg.norm(np.cross(to_rx, n))) / dist_rx
    return float(np.clip(cos_alpha * cos_beta + sin_alpha * sin_beta, -1.0, 1.0))


def reflected_gain_density(
    scene: Scene,
    element: IrsElement,
    led_index: int,
    x: ArrayLike,
    orientation: ArrayLike,
    surface_point: ArrayLike,
) -> float:
    """Reflected gain per unit mirror area through ``surface_point`` (1/m^2)."""
    led = scene.leds[led_index]
    n = as_vec3(orientation)
    p = as_vec3(surface_point)
    x = as_vec3(x)
    to_led = led.position - p
    to_rx = x - p
    dist_led = float(np.linalg.norm(to_led))
    dist_rx = float(np.linalg.norm(to_rx))
    if dist_led == 0.0 or dist_rx == 0.0:
        raise GeometryError(f"Degenerate reflection geometry at surface point {p}")

    m = led.lambertian_order
    emit = max(float(-to_led @ led.orientation), 0.0)
    incident = max(float(to_led @ n), 0.0)
    receive = max(float(-to_rx @ scene.receiver_orientation), 0.0)
    source = (m + 1) * emit**m * incident / (4 * math.pi**2 * dist_led ** (m + 3) * dist_rx**3)

    diffuse = 2 * element.diffuse_fraction * max(float(to_rx @ n), 0.0) / dist_rx
    lobe = max(cos_beta_minus_alpha(element, led, x, orientation=n, surface_point=p), 0.0)
    specular = (1 - element.diffuse_fraction) * (element.directivity + 1) * lobe**element.directivity
    return source * scene.pd_area * element.reflectance * receive * (diffuse + specular)


def element_gain(
    scene: Scene,
    element_index: int,
    led_index: int,
    x: ArrayLike,
    orientation: ArrayLike,
    quadrature: int = 1,
) -> float:
    """Midpoint-rule integral of the reflected density over one element footprint."""
    if quadrature < 1:
        raise ValueError(f"Quadrature order must be >= 1, got {quadrature}")
    element = scene.irs[element_index]
    frac = (np.arange(quadrature) + 0.5) / quadrature - 0.5
    cell_area = element.area / quadrature**2
    total = 0.0
    for fu in frac:
        for fv in frac:
            point = (
                element.center
                + fu * element.width * element.tangent_u
                + fv * element.height * element.tangent_v
            )
            total += reflected_gain_density(scene, element, led_index, x, orientation, point) * cell_area
    return total


# ---------------------------------------------------------------------------
# Vectorized kernels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SourceTerms:
    """Receiver-independent factors of the reflected path for one LED, per node."""

    coefficient: NDArray[np.float64]
    cos_alpha: NDArray[np.float64]
    sin_alpha: NDArray[np.float64]


def source_terms(
    scene: Scene, led_index: int, normals: NDArray[np.float64], nodes: QuadratureNodes
) -> SourceTerms:
    led = scene.leds[led_index]
    arrays = scene.element_arrays
    idx = nodes.element_index
    to_led = led.position - nodes.points
    dist = np.linalg.norm(to_led, axis=1)
    if np.any(dist == 0.0):
        raise GeometryError(f"LED {led_index} coincides with an IRS surface point")
    m = led.lambertian_order
    emit = np.clip(-(to_led @ led.orientation), 0.0, None)
    incident = np.einsum("kj,kj->k", to_led, normals)
    cos_alpha = incident / dist
    sin_alpha = np.sqrt(np.clip(1.0 - cos_alpha**2, 0.0, None))
    coefficient = (
        (m + 1) * emit**m * np.clip(incident, 0.0, None)
        / (4 * math.pi**2 * dist ** (m + 3))
        * scene.pd_area * arrays["reflectance"][idx] * nodes.weights
    )
    return SourceTerms(coefficient=coefficient, cos_alpha=cos_alpha, sin_alpha=sin_alpha)


def _node_normals(orientations: OrientationSet, nodes: QuadratureNodes) -> NDArray[np.float64]:
    return np.repeat(orientations.vectors, nodes.per_element, axis=0)


def _los_batch(scene: Scene, led_index: int, positions: NDArray[np.float64]) -> NDArray[np.float64]:
    led = scene.leds[led_index]
    d = positions - led.position
    dist = np.linalg.norm(d, axis=1)
    if np.any(dist == 0.0):
        raise GeometryError(f"Receiver coincides with LED {led_index}")
    m = led.lambertian_order
    emit = np.clip(d @ led.orientation, 0.0, None)
    receive = np.clip(-(d @ scene.receiver_orientation), 0.0, None)
    return (m + 1) * scene.pd_area * emit**m * receive / (2 * math.pi * dist ** (m + 3))


def _reflected_node_gains(
    scene: Scene,
    positions: NDArray[np.float64],
    normals: NDArray[np.float64],
    nodes: QuadratureNodes,
    sources: list[SourceTerms],
) -> list[NDArray[np.float64]]:
    """Per-LED (positions x nodes) reflected gains."""
    arrays = scene.element_arrays
    idx = nodes.element_index
    diffuse_fraction = arrays["diffuse_fraction"][idx]
    directivity = arrays["directivity"][idx]

    d = positions[:, None, :] - nodes.points[None, :, :]
    dist = np.linalg.norm(d, axis=2)
    if np.any(dist == 0.0):
        raise GeometryError("Receiver coincides with an IRS surface point")
    receive = np.clip(-(d @ scene.receiver_orientation), 0.0, None)
    cos_beta = np.einsum("nkj,kj->nk", d, normals) / dist
    sin_beta = np.sqrt(np.clip(1.0 - cos_beta**2, 0.0, None))
    weight = receive / dist**3
    diffuse = 2 * diffuse_fraction * np.clip(cos_beta, 0.0, None)

    gains = []
    for src in sources:
        lobe = np.clip(src.cos_alpha * cos_beta + src.sin_alpha * sin_beta, 0.0, None)
        specular = (1 - diffuse_fraction) * (directivity + 1) * lobe**directivity
        gains.append(src.coefficient * weight * (diffuse + specular))
    return gains


def channel_gains_batch(
    scene: Scene,
    positions: ArrayLike,
    orientations: OrientationSet,
    quadrature: int = 1,
) -> NDArray[np.float64]:
    """Total gains h_i for many positions at once, shape (n_positions, n_leds)."""
    positions = _check_positions(positions)
    if len(orientations) != scene.num_elements:
        raise ValueError(
            f"Orientation set has {len(orientations)} vectors for {scene.num_elements} elements"
        )
    result = np.zeros((positions.shape[0], scene.num_leds))
    if not scene.los_blocked:
        for i in range(scene.num_leds):
            result[:, i] = _los_batch(scene, i, positions)
    if scene.num_elements == 0:
        return result

    nodes = quadrature_nodes(scene, quadrature)
    normals = _node_normals(orientations, nodes)
    sources = [source_terms(scene, i, normals, nodes) for i in range(scene.num_leds)]
    chunk = max(1, BATCH_BUDGET // nodes.points.shape[0])
    for start in range(0, positions.shape[0], chunk):
        block = positions[start:start + chunk]
        for i, node_gains in enumerate(_reflected_node_gains(scene, block, normals, nodes, sources)):
            result[start:start + chunk, i] += np.sum(node_gains, axis=1)
    return result


def mean_powers_batch(
    scene: Scene,
    positions: ArrayLike,
    orientations: OrientationSet,
    quadrature: int = 1,
) -> NDArray[np.float64]:
    """P_TX,i * h_i for many positions, shape (n_positions, n_leds)."""
    return channel_gains_batch(scene, positions, orientations, quadrature) * scene.led_arrays["power"]


def total_gain(
    scene: Scene,
    led_index: int,
    x: ArrayLike,
    orientations: OrientationSet,
    quadrature: int = 1,
) -> GainBreakdown:
    """LOS term (zeroed when the scene is LOS-blocked) plus every element's gain."""
    x = as_vec3(x)
    los = float(_los_batch(scene, led_index, x[None, :])[0])
    per_element = np.zeros(scene.num_elements)
    if scene.num_elements:
        nodes = quadrature_nodes(scene, quadrature)
        normals = _node_normals(orientations, nodes)
        src = source_terms(scene, led_index, normals, nodes)
        (node_gains,) = _reflected_node_gains(scene, x[None, :], normals, nodes, [src])
        per_element = node_gains[0].reshape(scene.num_elements, nodes.per_element).sum(axis=1)
    total = (0.0 if scene.los_blocked else los) + float(np.sum(per_element))
    return GainBreakdown(
        los_gain=los, per_element_gains=per_element, los_blocked=scene.los_blocked, total=total
    )


def mean_powers(
    scene: Scene,
    x: ArrayLike,
    orientations: OrientationSet,
    quadrature: int = 1,
) -> Vec3:
    """Noiseless received powers P_TX,i * h_i(x) in watts, one per LED."""
    return mean_powers_batch(scene, as_vec3(x)[None, :], orientations, quadrature)[0]
