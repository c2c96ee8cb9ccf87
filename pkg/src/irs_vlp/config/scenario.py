"""Scenario files: defaults, profiles, figure presets and resolution into a Scene."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from irs_vlp.errors import ConfigError, GeometryError, SceneValidationError
from irs_vlp.estimation import EstimatorConfig
from irs_vlp.montecarlo import ExperimentConfig, MismatchMode
from irs_vlp.scene import (
    Box,
    IrsLayout,
    Led,
    PhongParameters,
    Scene,
    Vec3,
    as_vec3,
    build_scene,
    scene_validate,
)

logger = logging.getLogger(__name__)

FIGURE3_SIGMA2 = [1e-13, 1e-14, 1e-15, 1e-16, 1e-17, 1e-18, 1e-19, 1e-20, 1e-21]

DEFAULTS: dict[str, Any] = {
    "room": {"lower": [-2.0, -2.0, 0.0], "upper": [2.0, 2.0, 3.0]},
    "leds": [
        {"position": [x, y, 3.0], "orientation": [0.0, 0.0, -1.0], "lambertian_order": 1.0, "tx_power": 5.0}
        for x, y in ((1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0))
    ],
    "irs_layout": {
        "per_wall_count": 441,
        "element_width": 0.04,
        "element_height": 0.02,
        "h_gap": 0.02,
        "v_gap": 0.01,
        "reflectance": 0.95,
        "diffuse_fraction": 0.0,
        "directivity": 5.0,
    },
    "receiver": {"position": [0.5, 0.5, 0.85], "orientation": [0.0, 0.0, 1.0], "pd_area": 1e-4},
    "noise": {"variance": 1e-17},
    "search_region": None,
    "los_blocked": True,
    "experiment": {
        "k_values": [0.0, 0.25, 0.5, 0.75, 1.0],
        "sigma2_values": [1e-17],
        "trials": 500,
        "mode": MismatchMode.REDRAW_PER_TRIAL.value,
        "seed": 1,
        "threads": 1,
    },
    "estimator": {
        "grid_resolution": 0.10,
        "tolerance": 1e-6,
        "max_iterations": 100,
        "multistart": 5,
        "quadrature": 1,
    },
}

PROFILES: dict[str, dict[str, Any]] = {
    "desk": {"irs_layout": {"per_wall_count": 49}, "experiment": {"trials": 200}},
    "paper": {"irs_layout": {"per_wall_count": 441}, "experiment": {"trials": 500}},
}
PROFILE_ALIASES = {"full": "paper"}

FIGURES: dict[int, dict[str, Any]] = {
    2: {"experiment": {
        "k_values": [0.0, 0.25, 0.5, 0.75, 1.0],
        "sigma2_values": [1e-15, 1e-16, 1e-17],
        "mode": MismatchMode.REDRAW_PER_TRIAL.value,
    }},
    3: {"experiment": {
        "k_values": [0.5, 1.0], "sigma2_values": FIGURE3_SIGMA2, "mode": MismatchMode.FIXED_SEEDED.value,
    }},
    4: {"experiment": {
        "k_values": [0.25, 1.0], "sigma2_values": FIGURE3_SIGMA2, "mode": MismatchMode.FIXED_SEEDED.value,
    }},
}


@dataclass(frozen=True)
class Scenario:
    """A fully resolved scenario and the objects built from it."""

    scene: Scene
    experiment: ExperimentConfig
    resolved: dict[str, Any]
    scene_hash: str
    path: Path | None
    profile: str | None


def deep_merge(base: dict[str, Any], update: dict[str, Any]) -> dict[str, Any]:
    """Recursively merge ``update`` into a copy of ``base``; non-dict values replace."""
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def read_config_file(path: Path) -> dict[str, Any]:
    """Parse a JSON or YAML scenario file into a mapping.

    Raises:
        ConfigError: On unreadable files or syntax errors (with line and column)
    """
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e

    if path.suffix.lower() in (".yaml", ".yml"):
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            if mark is not None:
                raise ConfigError(f"Invalid YAML in {path}", mark.line + 1, mark.column + 1) from e
            raise ConfigError(f"Invalid YAML in {path}: {e}") from e
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Invalid JSON in {path}: {e.msg}", e.lineno, e.colno) from e

    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"Config {path} must hold a mapping at the top level, got {type(data).__name__}")
    return data


def resolve_config(
    data: dict[str, Any],
    profile: str | None = None,
    figure: int | None = None,
    overrides: dict[str, Any] | None = None,
) -> dict[str, Any]:
    """defaults < profile < figure preset < file < overrides."""
    unknown = set(data) - set(DEFAULTS) - {"profile"}
    if unknown:
        raise ConfigError(f"Unknown config keys: {sorted(unknown)}")
    profile = profile or data.get("profile")
    profile = PROFILE_ALIASES.get(profile, profile)
    resolved = copy.deepcopy(DEFAULTS)
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"Unknown profile '{profile}', expected one of {sorted(PROFILES)}")
        resolved = deep_merge(resolved, PROFILES[profile])
    if figure is not None:
        if figure not in FIGURES:
            raise ConfigError(f"Unknown figure preset {figure}, expected one of {sorted(FIGURES)}")
        resolved = deep_merge(resolved, FIGURES[figure])
    resolved = deep_merge(resolved, {k: v for k, v in data.items() if k != "profile"})
    if overrides:
        resolved = deep_merge(resolved, overrides)
    resolved["profile"] = profile
    return resolved


# Keys that change how a run executes but not what it computes.
EXECUTION_KEYS = {"experiment": ("threads",)}


def scene_hash(resolved: dict[str, Any]) -> str:
    """SHA-256 of the canonical resolved scenario, execution-only keys excluded."""
    hashed = copy.deepcopy(resolved)
    for section, keys in EXECUTION_KEYS.items():
        for key in keys:
            hashed.get(section, {}).pop(key, None)
    return hashlib.sha256(json.dumps(hashed, sort_keys=True).encode()).hexdigest()


def _box(value: Any, what: str) -> Box:
    try:
        lower = tuple(float(v) for v in value["lower"])
        upper = tuple(float(v) for v in value["upper"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{what} needs numeric 'lower' and 'upper' triples: {e}") from e
    if len(lower) != 3 or len(upper) != 3:
        raise ConfigError(f"{what} corners must have 3 components")
    return Box(lower=lower, upper=upper)


def _vec(value: Any, what: str) -> Vec3:
    try:
        return as_vec3(value)
    except (GeometryError, TypeError, ValueError) as e:
        raise ConfigError(f"{what} must be a 3-vector, got {value!r}") from e


def _build_scene(resolved: dict[str, Any]) -> tuple[Scene, Vec3]:
    room = _box(resolved["room"], "room")
    search_region = _box(resolved["search_region"], "search_region") if resolved["search_region"] else room

    leds = []
    for idx, entry in enumerate(resolved["leds"]):
        try:
            leds.append(Led(
                position=_vec(entry["position"], f"leds[{idx}].position"),
                orientation=_vec(entry.get("orientation", [0.0, 0.0, -1.0]), f"leds[{idx}].orientation"),
                lambertian_order=float(entry.get("lambertian_order", 1.0)),
                tx_power=float(entry.get("tx_power", 5.0)),
            ))
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"leds[{idx}] is invalid: {e}") from e

    layout_cfg = resolved["irs_layout"]
    layout = None
    try:
        if layout_cfg is not None and int(layout_cfg["per_wall_count"]) > 0:
            layout = IrsLayout(
                per_wall_count=int(layout_cfg["per_wall_count"]),
                element_width=float(layout_cfg["element_width"]),
                element_height=float(layout_cfg["element_height"]),
                h_gap=float(layout_cfg["h_gap"]),
                v_gap=float(layout_cfg["v_gap"]),
                phong=PhongParameters(
                    reflectance=float(layout_cfg["reflectance"]),
                    diffuse_fraction=float(layout_cfg["diffuse_fraction"]),
                    directivity=float(layout_cfg["directivity"]),
                ),
            )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"irs_layout is invalid: {e}") from e

    receiver = resolved["receiver"]
    noise = resolved["noise"]
    try:
        if "variances" in noise:
            variances = [float(v) for v in noise["variances"]]
        else:
            variances = [float(noise["variance"])] * len(leds)
        pd_area = float(receiver["pd_area"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"noise / receiver settings are invalid: {e}") from e

    try:
        scene = build_scene(
            leds,
            layout,
            _vec(receiver["orientation"], "receiver.orientation"),
            pd_area,
            variances,
            room,
            search_region=search_region,
            los_blocked=bool(resolved["los_blocked"]),
        )
    except GeometryError as e:
        raise ConfigError(f"irs_layout does not fit the room: {e}") from e

    position = _vec(receiver["position"], "receiver.position")
    violations = scene_validate(scene, position)
    if violations:
        raise SceneValidationError(violations)
    return scene, position


def _build_experiment(resolved: dict[str, Any], scene: Scene, receiver: Vec3) -> ExperimentConfig:
    exp, est = resolved["experiment"], resolved["estimator"]
    try:
        estimator = EstimatorConfig(
            grid_resolution=float(est["grid_resolution"]),
            tolerance=float(est["tolerance"]),
            max_iterations=int(est["max_iterations"]),
            multistart=int(est["multistart"]),
            quadrature=int(est["quadrature"]),
        )
        mode = MismatchMode(exp["mode"])
        return ExperimentConfig(
            scene=scene,
            receiver=receiver,
            k_values=tuple(float(k) for k in exp["k_values"]),
            sigma2_values=tuple(float(s) for s in exp["sigma2_values"]),
            trials=int(exp["trials"]),
            mode=mode,
            master_seed=int(exp["seed"]),
            estimator=estimator,
            threads=int(exp.get("threads", 1)),
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"experiment / estimator settings are invalid: {e}") from e


def build_scenario(
    data: dict[str, Any],
    path: Path | None = None,
    profile: str | None = None,
    figure: int | None = None,
    overrides: dict[str, Any] | None = None,
) -> Scenario:
    resolved = resolve_config(data, profile, figure, overrides)
    scene, receiver = _build_scene(resolved)
    experiment = _build_experiment(resolved, scene, receiver)
    return Scenario(
        scene=scene,
        experiment=experiment,
        resolved=resolved,
        scene_hash=scene_hash(resolved),
        path=path,
        profile=resolved["profile"],
    )


_cache: dict[tuple, Scenario] = {}
_cache_lock = threading.Lock()


def load_scenario(
    path: Path | str | None = None,
    profile: str | None = None,
    figure: int | None = None,
    overrides: dict[str, Any] | None = None,
) -> Scenario:
    """Load and resolve a scenario, cached per (path, mtime, profile, figure, overrides).

    With no path the defaults (plus profile and overrides) are used.
    """
    path = Path(path).resolve() if path is not None else None
    mtime = path.stat().st_mtime_ns if path is not None and path.exists() else None
    key = (str(path), mtime, profile, figure, json.dumps(overrides or {}, sort_keys=True))
    with _cache_lock:
        if key in _cache:
            return _cache[key]

    data = read_config_file(path) if path is not None else {}
    scenario = build_scenario(data, path, profile, figure, overrides)
    logger.debug(f"Resolved scenario {path or '<defaults>'} -> {scenario.scene_hash[:12]}")
    with _cache_lock:
        _cache[key] = scenario
    return scenario


def invalidate_cache() -> None:
    with _cache_lock:
        _cache.clear()


def parse_config(
    path: Path | str | None,
    profile: str | None = None,
    overrides: dict[str, Any] | None = None,
) -> tuple[Scene, ExperimentConfig]:
    """Fully resolved (Scene, ExperimentConfig) for a scenario file.

    Raises:
        ConfigError: Parse errors (with line and column) or invalid values
        SceneValidationError: The resolved scene violates an invariant
    """
    scenario = load_scenario(path, profile, overrides=overrides)
    return scenario.scene, scenario.experiment
