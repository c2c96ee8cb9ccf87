"""Geometric world description: LEDs, receiver, walls and IRS element grids."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from irs_vlp.errors import GeometryError

logger = logging.getLogger(__name__)

Vec3 = NDArray[np.float64]

UNIT_TOLERANCE = 1e-12

# Inward unit normals of the four walls, indexed by wall id.
# 1: y = y_min, 2: y = y_max, 3: x = x_min, 4: x = x_max
WALL_NORMALS: dict[int, tuple[float, float, float]] = {
    1: (0.0, 1.0, 0.0),
    2: (0.0, -1.0, 0.0),
    3: (1.0, 0.0, 0.0),
    4: (-1.0, 0.0, 0.0),
}


def as_vec3(value: ArrayLike) -> Vec3:
    """Coerce a 3-sequence to a float array, rejecting non-finite components."""
    vec = np.asarray(value, dtype=float)
    if vec.shape != (3,):
        raise GeometryError(f"Expected a 3-vector, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise GeometryError(f"Vector has non-finite components: {vec}")
    return vec


def is_unit(vec: ArrayLike, tol: float = UNIT_TOLERANCE) -> bool:
    return abs(float(np.linalg.norm(vec)) - 1.0) <= tol


@dataclass(frozen=True)
class SphericalAngles:
    """Polar angle from +z and azimuth from +x, in radians."""

    theta: float
    phi: float


def spherical_to_unit(angles: SphericalAngles) -> Vec3:
    """Return [cos(phi) sin(theta), sin(phi) sin(theta), cos(theta)]."""
    sin_theta = math.sin(angles.theta)
    return np.array(
        [
            math.cos(angles.phi) * sin_theta,
            math.sin(angles.phi) * sin_theta,
            math.cos(angles.theta),
        ]
    )


def unit_to_spherical(vec: ArrayLike) -> SphericalAngles:
    """Inverse of spherical_to_unit. At the poles phi is canonicalized to 0."""
    x, y, z = (float(c) for c in vec)
    rho = math.hypot(x, y)
    theta = math.atan2(rho, z)
    if rho == 0.0:
        return SphericalAngles(theta=theta, phi=0.0)
    phi = math.atan2(y, x)
    if phi == -math.pi:
        phi = math.pi
    return SphericalAngles(theta=theta, phi=phi)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in meters."""

    lower: tuple[float, float, float]
    upper: tuple[float, float, float]

    @property
    def lower_array(self) -> Vec3:
        return np.asarray(self.lower, dtype=float)

    @property
    def upper_array(self) -> Vec3:
        return np.asarray(self.upper, dtype=float)

    @property
    def size(self) -> Vec3:
        return self.upper_array - self.lower_array

    @property
    def center(self) -> Vec3:
        return 0.5 * (self.lower_array + self.upper_array)

    @property
    def volume(self) -> float:
        return float(np.prod(np.clip(self.size, 0.0, None)))

    def contains(self, point: ArrayLike) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= self.lower_array) and np.all(p <= self.upper_array))


@dataclass(frozen=True)
class PhongParameters:
    """Glossy reflection parameters shared by every element of a layout."""

    reflectance: float = 0.95
    diffuse_fraction: float = 0.0
    directivity: float = 5.0


@dataclass(frozen=True, eq=False)
class Led:
    position: Vec3
    orientation: Vec3
    lambertian_order: float = 1.0
    tx_power: float = 5.0


@dataclass(frozen=True, eq=False)
class IrsElement:
    """One rectangular mirror mounted on a wall.

    The footprint spans ``width`` along ``tangent_u`` and ``height`` along
    ``tangent_v``; both tangents lie in the wall plane.
    """

    center: Vec3
    assumed_orientation: Vec3
    true_orientation: Vec3
    width: float
    height: float
    tangent_u: Vec3
    tangent_v: Vec3
    reflectance: float
    diffuse_fraction: float
    directivity: float
    wall_id: int

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True, eq=False)
class Scene:
    """Immutable world description shared by every computation."""

    leds: tuple[Led, ...]
    irs: tuple[IrsElement, ...]
    receiver_orientation: Vec3
    pd_area: float
    noise_variances: tuple[float, ...]
    room: Box
    search_region: Box
    los_blocked: bool = True

    @property
    def num_leds(self) -> int:
        return len(self.leds)

    @property
    def num_elements(self) -> int:
        return len(self.irs)

    @cached_property
    def led_arrays(self) -> dict[str, NDArray[np.float64]]:
        return {
            "position": np.array([led.position for led in self.leds], dtype=float).reshape(-1, 3),
            "orientation": np.array([led.orientation for led in self.leds], dtype=float).reshape(-1, 3),
            "order": np.array([led.lambertian_order for led in self.leds], dtype=float),
            "power": np.array([led.tx_power for led in self.leds], dtype=float),
        }

    @cached_property
    def element_arrays(self) -> dict[str, NDArray[np.float64]]:
        elements = self.irs

        def stack(name: str) -> NDArray[np.float64]:
            return np.array([getattr(e, name) for e in elements], dtype=float).reshape(len(elements), 3)

        def column(name: str) -> NDArray[np.float64]:
            return np.array([getattr(e, name) for e in elements], dtype=float)

        return {
            "center": stack("center"),
            "assumed": stack("assumed_orientation"),
            "true": stack("true_orientation"),
            "tangent_u": stack("tangent_u"),
            "tangent_v": stack("tangent_v"),
            "width": column("width"),
            "height": column("height"),
            "reflectance": column("reflectance"),
            "diffuse_fraction": column("diffuse_fraction"),
            "directivity": column("directivity"),
            "wall_id": np.array([e.wall_id for e in elements], dtype=int),
        }

    @cached_property
    def noise_array(self) -> NDArray[np.float64]:
        return np.asarray(self.noise_variances, dtype=float)

    @cached_property
    def quadrature_cache(self) -> dict:
        return {}

    @cached_property
    def layout_digest(self) -> str:
        """Digest of everything that shapes mean powers, except IRS orientations and noise."""
        digest = hashlib.sha256()
        for arr in self.led_arrays.values():
            digest.update(np.ascontiguousarray(arr).tobytes())
        arrays = self.element_arrays
        for key in ("center", "tangent_u", "tangent_v", "width", "height",
                    "reflectance", "diffuse_fraction", "directivity"):
            digest.update(np.ascontiguousarray(arrays[key]).tobytes())
        digest.update(np.asarray(self.receiver_orientation, dtype=float).tobytes())
        digest.update(np.array([self.pd_area, float(self.los_blocked)]).tobytes())
        digest.update(np.array(self.search_region.lower + self.search_region.upper, dtype=float).tobytes())
        return digest.hexdigest()

    def with_noise_variance(self, variance: float | Sequence[float]) -> Scene:
        if np.ndim(variance) == 0:
            variances = tuple(float(variance) for _ in self.leds)
        else:
            variances = tuple(float(v) for v in variance)
        return dataclasses.replace(self, noise_variances=variances)

    def with_true_wall_orientations(self, per_wall: Sequence[ArrayLike]) -> Scene:
        """Give every element the true orientation drawn for its wall."""
        vectors = [np.asarray(v, dtype=float) for v in per_wall]
        irs = tuple(
            dataclasses.replace(e, true_orientation=vectors[e.wall_id - 1]) for e in self.irs
        )
        return dataclasses.replace(self, irs=irs)


def wall_assumed_angles() -> list[SphericalAngles]:
    """Angles of the inward wall normals under the spherical convention."""
    return [unit_to_spherical(WALL_NORMALS[wall_id]) for wall_id in sorted(WALL_NORMALS)]


def _wall_frame(wall_id: int, room: Box) -> tuple[Vec3, Vec3, Vec3, float, float]:
    """Wall center, horizontal tangent, vertical tangent, wall width, wall height."""
    lo, hi = room.lower_array, room.upper_array
    center = room.center
    vertical = np.array([0.0, 0.0, 1.0])
    height = float(hi[2] - lo[2])
    if wall_id in (1, 2):
        center[1] = lo[1] if wall_id == 1 else hi[1]
        return center, np.array([1.0, 0.0, 0.0]), vertical, float(hi[0] - lo[0]), height
    center[0] = lo[0] if wall_id == 3 else hi[0]
    return center, np.array([0.0, 1.0, 0.0]), vertical, float(hi[1] - lo[1]), height


def build_irs_array(
    per_wall_count: int,
    element_width: float,
    element_height: float,
    h_gap: float,
    v_gap: float,
    room: Box,
    phong: PhongParameters,
) -> list[IrsElement]:
    """Lay out a centered sqrt(n) x sqrt(n) grid of elements on each of the four walls.

    Args:
        per_wall_count: Elements per wall; must be a perfect square
        element_width: Element extent along the wall's horizontal tangent (m)
        element_height: Element extent along the vertical (m)
        h_gap: Horizontal spacing between neighbouring elements (m)
        v_gap: Vertical spacing between neighbouring elements (m)
        room: Room box; walls are its four vertical faces
        phong: Reflection parameters given to every element

    Returns:
        4 * per_wall_count elements, wall by wall, rows bottom to top

    Raises:
        GeometryError: If the count is not a perfect square or the grid overflows a wall
    """
    side = math.isqrt(per_wall_count) if per_wall_count >= 0 else -1
    if per_wall_count < 1 or side * side != per_wall_count:
        raise GeometryError(f"per_wall_count must be a positive perfect square, got {per_wall_count}")
    if element_width <= 0 or element_height <= 0:
        raise GeometryError(f"Element size must be positive, got {element_width} x {element_height}")

    grid_width = side * element_width + (side - 1) * h_gap
    grid_height = side * element_height + (side - 1) * v_gap
    pitch_u = element_width + h_gap
    pitch_v = element_height + v_gap
    offsets = np.arange(side) - 0.5 * (side - 1)

    elements: list[IrsElement] = []
    for wall_id, angles in zip(sorted(WALL_NORMALS), wall_assumed_angles()):
        center, tangent_u, tangent_v, wall_width, wall_height = _wall_frame(wall_id, room)
        if grid_width > wall_width or grid_height > wall_height:
            raise GeometryError(
                f"IRS grid {grid_width:.3f} x {grid_height:.3f} m overflows wall {wall_id} "
                f"({wall_width:.3f} x {wall_height:.3f} m)"
            )
        normal = spherical_to_unit(angles)
        for row in offsets:
            for col in offsets:
                elements.append(
                    IrsElement(
                        center=center + col * pitch_u * tangent_u + row * pitch_v * tangent_v,
                        assumed_orientation=normal,
                        true_orientation=normal,
                        width=element_width,
                        height=element_height,
                        tangent_u=tangent_u,
                        tangent_v=tangent_v,
                        reflectance=phong.reflectance,
                        diffuse_fraction=phong.diffuse_fraction,
                        directivity=phong.directivity,
                        wall_id=wall_id,
                    )
                )
    logger.debug(f"Built {len(elements)} IRS elements ({side}x{side} per wall)")
    return elements


def perturb_wall_orientations(
    assumed_per_wall: Sequence[SphericalAngles],
    k: float,
    rng: np.random.Generator,
) -> list[Vec3]:
    """Draw true wall orientations theta + U(-k, k), phi + U(-k, k), independently per wall.

    Draws are taken wall by wall as (theta offset, phi offset) pairs. With
    k = 0 the offsets are exactly zero and the assumed orientations come back
    unchanged.
    """
    if k < 0:
        raise ValueError(f"Perturbation half-width must be non-negative, got {k}")
    offsets = rng.uniform(-k, k, size=(len(assumed_per_wall), 2))
    return [
        spherical_to_unit(SphericalAngles(theta=a.theta + dt, phi=a.phi + dp))
        for a, (dt, dp) in zip(assumed_per_wall, offsets)
    ]


def scene_validate(scene: Scene, receiver_position: ArrayLike | None = None) -> list[str]:
    """Collect every invariant violation of a scene. An empty list means valid."""
    violations: list[str] = []

    if not scene.leds:
        violations.append("scene has no LEDs")
    for idx, led in enumerate(scene.leds):
        if not led.tx_power > 0:
            violations.append(f"LED {idx}: tx_power must be > 0, got {led.tx_power}")
        if not led.lambertian_order >= 1:
            violations.append(f"LED {idx}: lambertian_order must be >= 1, got {led.lambertian_order}")
        if not is_unit(led.orientation):
            violations.append(f"LED {idx}: orientation is not a unit vector")

    if len(scene.noise_variances) != len(scene.leds):
        violations.append(
            f"expected {len(scene.leds)} noise variances, got {len(scene.noise_variances)}"
        )
    for idx, variance in enumerate(scene.noise_variances):
        if not variance > 0:
            violations.append(f"noise variance {idx} must be > 0, got {variance}")

    if not scene.pd_area > 0:
        violations.append(f"pd_area must be > 0, got {scene.pd_area}")
    if not is_unit(scene.receiver_orientation):
        violations.append("receiver orientation is not a unit vector")

    if np.any(scene.search_region.size <= 0):
        violations.append(f"search region is degenerate: {scene.search_region}")
    if receiver_position is not None and not scene.search_region.contains(receiver_position):
        violations.append(f"receiver {list(receiver_position)} lies outside the search region")

    room_lo, room_hi = scene.room.lower_array, scene.room.upper_array
    for idx, element in enumerate(scene.irs):
        prefix = f"IRS element {idx}"
        if not element.area > 0:
            violations.append(f"{prefix}: area must be > 0, got {element.area}")
        if not 0.0 <= element.reflectance <= 1.0:
            violations.append(f"{prefix}: reflectance {element.reflectance} outside [0, 1]")
        if not 0.0 <= element.diffuse_fraction <= 1.0:
            violations.append(f"{prefix}: diffuse_fraction {element.diffuse_fraction} outside [0, 1]")
        if not element.directivity >= 0:
            violations.append(f"{prefix}: directivity must be >= 0, got {element.directivity}")
        if element.wall_id not in WALL_NORMALS:
            violations.append(f"{prefix}: unknown wall id {element.wall_id}")
            continue
        if not (is_unit(element.assumed_orientation) and is_unit(element.true_orientation)):
            violations.append(f"{prefix}: orientation is not a unit vector")
        wall_normal = np.asarray(WALL_NORMALS[element.wall_id])
        u, v = element.tangent_u, element.tangent_v
        orthonormal = (
            is_unit(u, 1e-9) and is_unit(v, 1e-9) and abs(float(u @ v)) < 1e-9
            and abs(float(u @ wall_normal)) < 1e-9 and abs(float(v @ wall_normal)) < 1e-9
        )
        if not orthonormal:
            violations.append(f"{prefix}: tangent basis is not orthonormal within the wall plane")
        axis = int(np.argmax(np.abs(wall_normal)))
        plane = room_lo[axis] if wall_normal[axis] > 0 else room_hi[axis]
        if abs(element.center[axis] - plane) > UNIT_TOLERANCE:
            violations.append(f"{prefix}: center is off its wall plane")
    return violations


@dataclass(frozen=True)
class IrsLayout:
    """Parameters of the wall-mounted grid (see build_irs_array)."""

    per_wall_count: int = 441
    element_width: float = 0.04
    element_height: float = 0.02
    h_gap: float = 0.02
    v_gap: float = 0.01
    phong: PhongParameters = field(default_factory=PhongParameters)


def build_scene(
    leds: Sequence[Led],
    layout: IrsLayout | None,
    receiver_orientation: ArrayLike,
    pd_area: float,
    noise_variances: Sequence[float],
    room: Box,
    search_region: Box | None = None,
    los_blocked: bool = True,
) -> Scene:
    """Assemble a Scene, laying out IRS elements on the walls of ``room``."""
    irs = () if layout is None else tuple(
        build_irs_array(
            layout.per_wall_count,
            layout.element_width,
            layout.element_height,
            layout.h_gap,
            layout.v_gap,
            room,
            layout.phong,
        )
    )
    scene = Scene(
        leds=tuple(leds),
        irs=irs,
        receiver_orientation=as_vec3(receiver_orientation),
        pd_area=float(pd_area),
        noise_variances=tuple(float(v) for v in noise_variances),
        room=room,
        search_region=search_region or room,
        los_blocked=bool(los_blocked),
    )
    logger.info(
        f"Scene: {scene.num_leds} LEDs, {scene.num_elements} IRS elements, "
        f"los_blocked={scene.los_blocked}"
    )
    return scene
