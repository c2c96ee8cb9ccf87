import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np

from irs_vlp import __version__
from irs_vlp.bounds import compute_bounds
from irs_vlp.calculus import clamp_margin, fd_gradient, fd_hessian, gain_jet
from irs_vlp.channel import channel_gains_batch, mean_powers, total_gain
from irs_vlp.config.scenario import Scenario, load_scenario
from irs_vlp.errors import BoundsError, ConfigError, EstimationError, GeometryError
from irs_vlp.estimation import estimate_position, pseudo_true_estimate, simulate_measurements
from irs_vlp.montecarlo import orientation_sets, run_rmse_vs_k, run_rmse_vs_noise
from irs_vlp.scene import Scene, perturb_wall_orientations, unit_to_spherical, wall_assumed_angles
from irs_vlp.utils.manifest import RunManifest, manifest_path, write_manifest
from irs_vlp.utils.output import dumps, output_stem, write_csv, write_json
from irs_vlp.utils.rng import derive_trial_rng, mismatch_rng, stream_rng

logger = logging.getLogger("irs_vlp")

SUBCOMMANDS = (
    "validate", "channel", "derivcheck", "estimate", "pseudotrue", "bounds", "rmse-vs-k", "rmse-vs-noise",
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_GEOMETRY = 4
EXIT_BOUNDS = 5
EXIT_ESTIMATION = 6
EXIT_IO = 7

DERIVCHECK_GRADIENT_ABS = 1e-12
DERIVCHECK_GRADIENT_REL = 1e-6
DERIVCHECK_HESSIAN_REL = 1e-4
# Samples closer than this to a clamp kink (or a wall) are skipped.
DERIVCHECK_MARGIN = 1e-3
DERIVCHECK_WALL_CLEARANCE = 0.1

ENV_DEFAULTS = {
    "config": "IRS_VLP_CONFIG",
    "seed": "IRS_VLP_SEED",
    "profile": "IRS_VLP_PROFILE",
    "out": "IRS_VLP_OUT",
    "threads": "IRS_VLP_THREADS",
    "quadrature": "IRS_VLP_QUADRATURE",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Scenario file (JSON or YAML)")
    common.add_argument("--seed", type=int, help="Master seed (unsigned 64-bit)")
    common.add_argument("--profile", choices=("desk", "paper", "full"), help="Scale profile (default: desk; full is an alias of paper)")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--threads", type=int, help="Worker threads for Monte-Carlo trials")
    common.add_argument("--quadrature", type=int, help="Midpoint nodes per element side")
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")

    parser = argparse.ArgumentParser(
        prog="irs-vlp",
        description="Position estimation and bounds for IRS-assisted visible light positioning",
    )
    parser.add_argument("--version", action="version", version=f"irs-vlp {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    sub.add_parser("validate", parents=[common], help="Resolve and validate a scenario")

    channel = sub.add_parser("channel", parents=[common], help="Channel gains at a position")
    channel.add_argument("--position", type=float, nargs=3, metavar=("X", "Y", "Z"))
    channel.add_argument("--k", type=float, default=0.0, help="Orientation mismatch half-width (rad)")
    channel.add_argument("--elements", action="store_true", help="Include per-element gains")

    derivcheck = sub.add_parser("derivcheck", parents=[common], help="Analytic vs finite-difference derivatives")
    derivcheck.add_argument("--samples", type=int, default=100)
    derivcheck.add_argument("--k", type=float, default=0.5)

    for name, helptext in (
        ("estimate", "MML and ML estimates from one simulated measurement"),
        ("pseudotrue", "Pseudo-true position of the mismatched model"),
        ("bounds", "MCRB, LB and CRB at the receiver"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--k", type=float, default=1.0)
        p.add_argument("--sigma2", type=float, help="Noise variance for every LED (W^2)")

    for name, helptext in (
        ("rmse-vs-k", "RMSE against the mismatch half-width k"),
        ("rmse-vs-noise", "RMSE and bounds against the noise variance"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--k", type=float, nargs="+")
        p.add_argument("--sigma2", type=float, nargs="+")
        p.add_argument("--trials", type=int)
        p.add_argument("--figure", type=int, choices=(2, 3, 4), help="Use a figure's k / sigma^2 grid")
    return parser


def _env_default(args: argparse.Namespace, name: str, cast=str):
    value = getattr(args, name, None)
    if value is not None:
        return value
    raw = os.environ.get(ENV_DEFAULTS[name])
    if raw is None or raw == "":
        return None
    try:
        return cast(raw)
    except ValueError as e:
        raise ConfigError(f"{ENV_DEFAULTS[name]}={raw!r} is invalid: {e}") from e


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    experiment: dict[str, Any] = {}
    estimator: dict[str, Any] = {}
    seed = _env_default(args, "seed", int)
    if seed is not None:
        experiment["seed"] = seed
    threads = _env_default(args, "threads", int)
    if threads is not None:
        experiment["threads"] = threads
    quadrature = _env_default(args, "quadrature", int)
    if quadrature is not None:
        estimator["quadrature"] = quadrature
    if args.subcommand in ("rmse-vs-k", "rmse-vs-noise"):
        if args.k is not None:
            experiment["k_values"] = list(args.k)
        if args.sigma2 is not None:
            experiment["sigma2_values"] = list(args.sigma2)
        if args.trials is not None:
            experiment["trials"] = args.trials
    overrides: dict[str, Any] = {}
    if experiment:
        overrides["experiment"] = experiment
    if estimator:
        overrides["estimator"] = estimator
    return overrides


def _load(args: argparse.Namespace) -> Scenario:
    figure = getattr(args, "figure", None)
    if args.subcommand == "rmse-vs-noise" and figure is None:
        figure = 3
    return load_scenario(
        _env_default(args, "config"),
        profile=_env_default(args, "profile") or "desk",
        figure=figure,
        overrides=_overrides(args),
    )


def _mismatched(scenario: Scenario, k: float, sigma2: float | None = None) -> tuple[Scene, list]:
    walls = perturb_wall_orientations(
        wall_assumed_angles(), k, mismatch_rng(scenario.experiment.master_seed, 0)
    )
    scene = scenario.scene.with_true_wall_orientations(walls)
    if sigma2 is not None:
        scene = scene.with_noise_variance(sigma2)
    return scene, walls


def _walls_dict(walls: list) -> list[dict[str, Any]]:
    return [
        {"wall": i, "vector": v.tolist(), "theta": unit_to_spherical(v).theta, "phi": unit_to_spherical(v).phi}
        for i, v in enumerate(walls, start=1)
    ]


def _cmd_validate(scenario: Scenario, args) -> tuple[int, dict[str, Any]]:
    scene = scenario.scene
    return EXIT_OK, {
        "valid": True,
        "scene_hash": scenario.scene_hash,
        "profile": scenario.profile,
        "leds": scene.num_leds,
        "irs_elements": scene.num_elements,
        "los_blocked": scene.los_blocked,
        "receiver": scenario.experiment.receiver.tolist(),
    }


def _cmd_channel(scenario: Scenario, args) -> tuple[int, dict[str, Any]]:
    scene, walls = _mismatched(scenario, args.k)
    position = np.asarray(args.position, dtype=float) if args.position else scenario.experiment.receiver
    quadrature = scenario.experiment.estimator.quadrature
    result: dict[str, Any] = {"position": position.tolist(), "k": args.k, "true_walls": _walls_dict(walls)}
    true_set, assumed_set = orientation_sets(scene)
    for tag, orientations in (("assumed", assumed_set), ("true", true_set)):
        leds = []
        for i in range(scene.num_leds):
            breakdown = total_gain(scene, i, position, orientations, quadrature)
            entry = {
                "los_gain": breakdown.los_gain,
                "los_blocked": breakdown.los_blocked,
                "reflected_gain": float(np.sum(breakdown.per_element_gains)),
                "total": breakdown.total,
            }
            if args.elements:
                entry["per_element_gains"] = breakdown.per_element_gains.tolist()
            leds.append(entry)
        result[tag] = {
            "gains": leds,
            "mean_powers": mean_powers(scene, position, orientations, quadrature).tolist(),
        }
    return EXIT_OK, result


def _cmd_derivcheck(scenario: Scenario, args) -> tuple[int, dict[str, Any]]:
    scene, _ = _mismatched(scenario, args.k)
    orientations, _ = orientation_sets(scene)
    quadrature = scenario.experiment.estimator.quadrature
    rng = stream_rng(scenario.experiment.master_seed)
    region = scene.search_region
    lo = region.lower_array + DERIVCHECK_WALL_CLEARANCE
    hi = region.upper_array - DERIVCHECK_WALL_CLEARANCE

    checked = skipped = 0
    worst_gradient = worst_hessian = 0.0
    gradient_ok = True
    while checked < args.samples and checked + skipped < 20 * args.samples:
        x = rng.uniform(lo, hi)
        if clamp_margin(scene, x, orientations, quadrature) < DERIVCHECK_MARGIN:
            skipped += 1
            continue
        jet = gain_jet(scene, x, orientations, quadrature, order=2)
        for i in range(scene.num_leds):
            def h(y, i=i):
                return float(channel_gains_batch(scene, y, orientations, quadrature)[0, i])

            fd_g = fd_gradient(h, x)
            err = np.abs(jet.gradients[i] - fd_g)
            gradient_ok &= bool(np.all(err <= DERIVCHECK_GRADIENT_ABS + DERIVCHECK_GRADIENT_REL * np.abs(fd_g)))
            worst_gradient = max(worst_gradient, float(np.max(err) / max(np.max(np.abs(fd_g)), 1e-300)))

            fd_h = fd_hessian(h, x)
            rel = np.linalg.norm(jet.hessians[i] - fd_h) / max(np.linalg.norm(fd_h), 1e-300)
            worst_hessian = max(worst_hessian, float(rel))
        checked += 1

    hessian_ok = worst_hessian < DERIVCHECK_HESSIAN_REL
    status = EXIT_OK if gradient_ok and hessian_ok and checked > 0 else EXIT_CHECK_FAILED
    return status, {
        "samples": checked,
        "skipped": skipped,
        "max_gradient_error": worst_gradient,
        "max_hessian_error": worst_hessian,
        "gradient_ok": gradient_ok,
        "hessian_ok": hessian_ok,
    }


def _cmd_estimate(scenario: Scenario, args) -> tuple[int, dict[str, Any]]:
    scene, walls = _mismatched(scenario, args.k, args.sigma2)
    config = scenario.experiment
    true_set, assumed_set = orientation_sets(scene)
    rng = derive_trial_rng(config.master_seed, 0, 0, 0)
    p_rx = simulate_measurements(scene, config.receiver, true_set, rng, config.estimator.quadrature)
    mml = estimate_position(p_rx, scene, assumed_set, config.estimator)
    ml = estimate_position(p_rx, scene, true_set, config.estimator)
    return EXIT_OK, {
        "k": args.k,
        "receiver": config.receiver.tolist(),
        "measurements": p_rx.tolist(),
        "mml": mml.to_dict(),
        "ml": ml.to_dict(),
        "true_walls": _walls_dict(walls),
    }


def _cmd_pseudotrue(scenario: Scenario, args) -> tuple[int, dict[str, Any]]:
    scene, walls = _mismatched(scenario, args.k, args.sigma2)
    config = scenario.experiment
    true_set, assumed_set = orientation_sets(scene)
    estimate = pseudo_true_estimate(scene, config.receiver, true_set, assumed_set, config.estimator)
    return EXIT_OK, {
        "k": args.k,
        "receiver": config.receiver.tolist(),
        "x0": estimate.position.tolist(),
        "bias_norm": float(np.linalg.norm(config.receiver - estimate.position)),
        "estimate": estimate.to_dict(),
        "true_walls": _walls_dict(walls),
    }


def _cmd_bounds(scenario: Scenario, args) -> tuple[int, dict[str, Any]]:
    scene, walls = _mismatched(scenario, args.k, args.sigma2)
    config = scenario.experiment
    true_set, assumed_set = orientation_sets(scene)
    report = compute_bounds(scene, config.receiver, true_set, assumed_set, config.estimator)
    return EXIT_OK, {
        "k": args.k,
        "sigma2": list(scene.noise_variances),
        "receiver": config.receiver.tolist(),
        "report": report.to_dict(),
        "true_walls": _walls_dict(walls),
    }


def _write_outputs(
    scenario: Scenario,
    args,
    payload: dict[str, Any],
    rows: list[dict[str, Any]] | None,
    started: float,
) -> list[Path]:
    out = _env_default(args, "out")
    if out is None and rows is None:
        return []
    base = Path(out or "results").resolve()
    base.mkdir(parents=True, exist_ok=True)
    stem = output_stem(args.subcommand, scenario.experiment.master_seed)
    outputs = [write_json(base / f"{stem}.json", payload)]
    if rows is not None:
        outputs.insert(0, write_csv(base / f"{stem}.csv", rows))
    manifest = RunManifest(
        subcommand=args.subcommand,
        config_path=str(scenario.path) if scenario.path else None,
        scene_hash=scenario.scene_hash,
        version=__version__,
        outputs=[str(p) for p in outputs],
        duration_s=time.monotonic() - started,
        seed=scenario.experiment.master_seed,
        profile=scenario.profile,
        argv=list(getattr(args, "argv", None) or sys.argv[1:]),
    )
    write_manifest(manifest, manifest_path(outputs[0]))
    return outputs


def dispatch(subcommand: str, args: argparse.Namespace) -> int:
    """Run one subcommand and return its exit status.

    Raises:
        VlpError subclasses and OSError, mapped to exit codes by main()
    """
    if subcommand not in SUBCOMMANDS:
        print(f"Unknown subcommand '{subcommand}'", file=sys.stderr)
        return EXIT_USAGE
    args.subcommand = subcommand
    started = time.monotonic()
    scenario = _load(args)

    rows = None
    if subcommand == "rmse-vs-k":
        result = run_rmse_vs_k(scenario.experiment)
        status, payload, rows = EXIT_OK, result.to_dict(), result.to_csv_rows()
    elif subcommand == "rmse-vs-noise":
        result = run_rmse_vs_noise(scenario.experiment)
        status, payload, rows = EXIT_OK, result.to_dict(), result.to_csv_rows()
    else:
        handler = {
            "validate": _cmd_validate,
            "channel": _cmd_channel,
            "derivcheck": _cmd_derivcheck,
            "estimate": _cmd_estimate,
            "pseudotrue": _cmd_pseudotrue,
            "bounds": _cmd_bounds,
        }[subcommand]
        status, payload = handler(scenario, args)

    payload = {"scene_hash": scenario.scene_hash, **payload}
    outputs = _write_outputs(scenario, args, payload, rows, started)
    if rows is None:
        print(dumps(payload))
    else:
        for path in outputs:
            print(path)
    return status


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = list(argv) if argv is not None else sys.argv[1:]
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    try:
        return dispatch(args.subcommand, args)
    except ConfigError as e:
        print(f"Config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except GeometryError as e:
        print(f"Geometry error: {e}", file=sys.stderr)
        return EXIT_GEOMETRY
    except BoundsError as e:
        print(f"Bounds error: {e}", file=sys.stderr)
        return EXIT_BOUNDS
    except EstimationError as e:
        print(f"Estimation error: {e}", file=sys.stderr)
        return EXIT_ESTIMATION
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
