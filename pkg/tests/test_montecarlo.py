import logging
import math
from unittest.mock import patch

import numpy as np
import pytest

from irs_vlp.bounds import bounds_at
from irs_vlp.errors import BoundsError, ConfigError, EstimationError
from irs_vlp.estimation import EstimatorConfig
from irs_vlp.montecarlo import (
    ExperimentConfig,
    MismatchMode,
    fixed_mismatch_scene,
    random_guess_rmse,
    rmse,
    run_rmse_vs_k,
    run_rmse_vs_noise,
)
from irs_vlp.scene import perturb_wall_orientations, wall_assumed_angles
from irs_vlp.utils.rng import mismatch_rng

from tests.helpers import RECEIVER, ROOM

COARSE = EstimatorConfig(grid_resolution=0.25)


def _config(scene, **overrides):
    values = dict(
        scene=scene,
        receiver=RECEIVER,
        k_values=(0.0, 0.5),
        sigma2_values=(1e-17,),
        trials=4,
        mode=MismatchMode.REDRAW_PER_TRIAL,
        master_seed=7,
        estimator=COARSE,
    )
    values.update(overrides)
    return ExperimentConfig(**values)


class TestRmse:
    def test_exact_estimates(self):
        assert rmse([RECEIVER, RECEIVER], RECEIVER) == 0.0

    def test_single_offset(self):
        assert rmse([RECEIVER + [0.0, 0.3, 0.4]], RECEIVER) == pytest.approx(0.5, rel=1e-12)

    def test_mixed(self):
        assert rmse([RECEIVER, RECEIVER + [3.0, 4.0, 0.0]], RECEIVER) == pytest.approx(5 / math.sqrt(2), rel=1e-12)

    def test_empty(self):
        with pytest.raises(EstimationError, match="empty"):
            rmse([], RECEIVER)

    def test_random_guess_floor(self):
        """Uniform guesses over the 4 x 4 x 3 m room sit about 2.08 m from the receiver."""
        value = random_guess_rmse(ROOM, RECEIVER, 100_000, np.random.default_rng(0))
        assert value == pytest.approx(math.sqrt(4.339166666666667), abs=0.02)
        assert value < 2.1


class TestExperimentConfig:
    @pytest.mark.parametrize(
        "overrides, message",
        [
            ({"trials": 0}, "trials"),
            ({"k_values": ()}, "k_values"),
            ({"k_values": (-0.1,)}, "k values"),
            ({"sigma2_values": (0.0,)}, "sigma2"),
            ({"threads": 0}, "threads"),
            ({"master_seed": -1}, "master seed"),
        ],
    )
    def test_invalid(self, tiny_scene, overrides, message):
        with pytest.raises(ConfigError, match=message):
            _config(tiny_scene, **overrides)


class TestRmseVsK:
    def test_zero_mismatch_rows_agree(self, desk_scene):
        result = run_rmse_vs_k(_config(desk_scene))
        at_zero = result.points[0]
        assert at_zero.k == 0.0
        assert at_zero.mml_rmse == at_zero.ml_rmse
        assert len(result.points) == 2
        assert result.realized_orientations == {}

    def test_independent_of_thread_count(self, desk_scene):
        serial = run_rmse_vs_k(_config(desk_scene, threads=1))
        parallel = run_rmse_vs_k(_config(desk_scene, threads=3))
        assert serial.to_csv_rows() == parallel.to_csv_rows()

    def test_seed_changes_draws(self, desk_scene):
        a = run_rmse_vs_k(_config(desk_scene, k_values=(0.5,)))
        b = run_rmse_vs_k(_config(desk_scene, k_values=(0.5,), master_seed=8))
        assert a.points[0].mml_rmse != b.points[0].mml_rmse

    def test_csv_rows(self, desk_scene):
        result = run_rmse_vs_k(_config(desk_scene, k_values=(0.5,), sigma2_values=(1e-16, 1e-17)))
        rows = result.to_csv_rows()
        assert [row["series"] for row in rows] == ["mml", "ml", "mml", "ml"]
        assert rows[0]["inv_sigma2_db"] == pytest.approx(160.0)
        assert rows[2]["inv_sigma2_db"] == pytest.approx(170.0)
        assert all(row["trials"] == 4 and row["seed"] == 7 for row in rows)

    def test_fixed_mode_reports_realization(self, desk_scene):
        result = run_rmse_vs_k(_config(desk_scene, k_values=(0.5,), mode=MismatchMode.FIXED_SEEDED))
        walls = result.realized_orientations[0.5]
        expected = perturb_wall_orientations(wall_assumed_angles(), 0.5, mismatch_rng(7, 0))
        for got, want in zip(walls, expected):
            np.testing.assert_array_equal(got, want)
        realized = result.to_dict()["realized_orientations"]["0.5"]
        assert [entry["wall"] for entry in realized] == [1, 2, 3, 4]


class TestRmseVsNoise:
    def test_requires_fixed_mode(self, desk_scene):
        with pytest.raises(ConfigError, match="fixed-seeded"):
            run_rmse_vs_noise(_config(desk_scene))

    def test_bound_series(self, desk_scene):
        config = _config(
            desk_scene,
            k_values=(0.0, 0.3),
            sigma2_values=(1e-15, 1e-17),
            trials=3,
            mode=MismatchMode.FIXED_SEEDED,
        )
        result = run_rmse_vs_noise(config)
        assert len(result.points) == 4
        for point in result.points:
            names = [name for name, _ in point.series()]
            assert names == ["mml", "ml", "mcrb", "lb", "crb", "bias", "random_guess"]
            assert point.bounds.lb_rmse >= point.bounds.mcrb_rmse
            assert point.random_guess == pytest.approx(2.083, abs=0.02)

        matched = result.points[0].bounds
        assert matched.bias_norm < 1e-6
        assert matched.mcrb_rmse == pytest.approx(matched.crb_rmse, rel=1e-4)
        # Same x0 for every noise level of a k value.
        np.testing.assert_array_equal(result.points[2].bounds.x0, result.points[3].bounds.x0)
        assert result.points[2].bounds.mcrb_rmse > result.points[3].bounds.mcrb_rmse

    def test_fixed_scene_matches_seeded_stream(self, desk_scene):
        config = _config(desk_scene, mode=MismatchMode.FIXED_SEEDED)
        scene, walls = fixed_mismatch_scene(config, 1)
        expected = perturb_wall_orientations(wall_assumed_angles(), 0.5, mismatch_rng(7, 1))
        for got, want in zip(walls, expected):
            np.testing.assert_array_equal(got, want)
        np.testing.assert_array_equal(scene.irs[0].true_orientation, walls[0])

    def test_bound_failure_keeps_the_row(self, desk_scene, caplog):
        calls = []

        def flaky_bounds(*args, **kwargs):
            calls.append(args)
            if len(calls) == 1:
                raise BoundsError("Matrix A is singular or ill-conditioned", 1e13)
            return bounds_at(*args, **kwargs)

        config = _config(
            desk_scene, k_values=(0.3,), sigma2_values=(1e-15, 1e-17), trials=2, mode=MismatchMode.FIXED_SEEDED
        )
        with patch("irs_vlp.montecarlo.bounds_at", side_effect=flaky_bounds):
            with caplog.at_level(logging.WARNING, logger="irs_vlp.montecarlo"):
                result = run_rmse_vs_noise(config)

        assert "No bounds at sigma2=1.0e-15" in caplog.text
        failed, ok = result.points
        assert math.isnan(failed.bounds.mcrb_rmse)
        assert math.isnan(failed.bounds.lb_rmse)
        assert failed.bounds.bias_norm == pytest.approx(ok.bounds.bias_norm)
        assert math.isfinite(failed.mml_rmse)
        assert math.isfinite(ok.bounds.mcrb_rmse)

        rows = result.to_csv_rows()
        assert len(rows) == 2 * 7
        mcrb_rows = [row for row in rows if row["series"] == "mcrb"]
        assert math.isnan(mcrb_rows[0]["value_m"])
