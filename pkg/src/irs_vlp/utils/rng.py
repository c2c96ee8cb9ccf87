"""Deterministic random substreams keyed by experiment coordinates."""

import numpy as np

# Spawn key reserved for the random-guess baseline, outside any (k, sigma, trial) index.
RANDOM_GUESS_KEY = 2**32 - 1


def stream_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Generator for the substream ``key`` of ``master_seed``.

    Substreams with different keys are statistically independent and do not
    depend on the order in which they are created.
    """
    if master_seed < 0:
        raise ValueError(f"Master seed must be non-negative, got {master_seed}")
    return np.random.default_rng(np.random.SeedSequence(entropy=master_seed, spawn_key=key))


def derive_trial_rng(master_seed: int, k_index: int, sigma_index: int, trial: int) -> np.random.Generator:
    return stream_rng(master_seed, k_index, sigma_index, trial)


def mismatch_rng(master_seed: int, k_index: int) -> np.random.Generator:
    """Stream for the single wall-perturbation draw of a fixed-mismatch experiment."""
    return stream_rng(master_seed, k_index)


def random_guess_rng(master_seed: int) -> np.random.Generator:
    return stream_rng(master_seed, RANDOM_GUESS_KEY)
