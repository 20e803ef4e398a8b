import pytest

from mfglab.fbsde import SolverConfig
from mfglab.fixedpoint import FixedPointConfig, solve_matching
from mfglab.model import builtin_game

_EQ_CACHE = {}


def fp_config(n_steps=50, n_paths=4096):
    return FixedPointConfig(
        solver=SolverConfig(n_steps=n_steps, n_paths=n_paths))


def cached_equilibrium(name, n_steps=50, n_paths=4096, seed=0):
    """Session-wide memo of solved builtins; several test modules and the
    acceptance battery share the expensive solves."""
    key = (name, n_steps, n_paths, seed)
    if key not in _EQ_CACHE:
        _EQ_CACHE[key] = solve_matching(
            builtin_game(name), fp_config(n_steps, n_paths), seed=seed)
    return _EQ_CACHE[key]


@pytest.fixture(scope="session")
def equilibrium_of():
    return cached_equilibrium
