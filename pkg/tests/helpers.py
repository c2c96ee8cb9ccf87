"""Scene builders shared by the test modules."""

import numpy as np

from irs_vlp.scene import Box, IrsLayout, Led, build_scene, perturb_wall_orientations, wall_assumed_angles

ROOM = Box(lower=(-2.0, -2.0, 0.0), upper=(2.0, 2.0, 3.0))
RECEIVER = np.array([0.5, 0.5, 0.85])
LED_XY = ((1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0))
DOWN = np.array([0.0, 0.0, -1.0])
UP = np.array([0.0, 0.0, 1.0])


def ceiling_leds(tx_power: float = 5.0) -> list[Led]:
    return [Led(position=np.array([x, y, 3.0]), orientation=DOWN, tx_power=tx_power) for x, y in LED_XY]


def make_scene(per_wall_count: int | None = 49, los_blocked: bool = True, noise: float = 1e-17,
               tx_power: float = 5.0, **layout):
    irs = None if per_wall_count is None else IrsLayout(per_wall_count=per_wall_count, **layout)
    return build_scene(ceiling_leds(tx_power), irs, UP, 1e-4, [noise] * 4, ROOM, los_blocked=los_blocked)


def mismatch(scene, k: float, seed: int = 1):
    walls = perturb_wall_orientations(wall_assumed_angles(), k, np.random.default_rng(seed))
    return scene.with_true_wall_orientations(walls)


def interior_points(rng: np.random.Generator, n: int, clearance: float = 0.2) -> np.ndarray:
    lo = ROOM.lower_array + clearance
    hi = ROOM.upper_array - clearance
    return rng.uniform(lo, hi, size=(n, 3))
