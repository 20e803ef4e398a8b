import numpy as np
import pytest

from mfglab.measures import ParticleCloud
from mfglab.model import (
    COMPETITIVE,
    COOPERATIVE,
    builtin_game,
    builtin_library,
    gaussian_initial_law,
    measure_args,
    split_crowd_initial_law,
)
from mfglab.rng import substream
from mfglab.validation import validate_game

ALL_BUILTINS = sorted(builtin_library())


def test_builtin_library_contents():
    assert ALL_BUILTINS == [
        "lq-1pop",
        "lq-2pop-competitive",
        "lq-2pop-cooperative",
        "lq-bimodal",
        "lq-scalar",
        "mixed-opec",
        "nonlq-box",
    ]


def test_unknown_builtin_error_lists_choices():
    with pytest.raises(KeyError, match="lq-1pop"):
        builtin_game("no-such-model")


@pytest.mark.parametrize("name", ALL_BUILTINS)
def test_builtins_validate(name):
    report = validate_game(builtin_game(name), n_samples=50, seed=0)
    assert report.passed, [c.to_dict() for c in report.failures()]


def test_cooperation_kinds():
    assert builtin_game("lq-1pop").populations[0].cooperation == COMPETITIVE
    coop = builtin_game("lq-2pop-cooperative")
    assert all(p.cooperation == COOPERATIVE for p in coop.populations)
    mixed = builtin_game("mixed-opec")
    kinds = [p.cooperation for p in mixed.populations]
    assert kinds == [COOPERATIVE, COMPETITIVE]


def test_mixed_opec_flags():
    flags = builtin_game("mixed-opec").structural_flags
    assert not flags.cooperative_measure_free_intercepts
    assert flags.mixed_fringe_own_law_free_intercepts


def test_measure_args_orders_other_populations():
    spec = builtin_game("lq-2pop-competitive")
    clouds = [ParticleCloud(np.full((4, 1), float(i)))
              for i in range(spec.n_populations)]
    mu, nus = measure_args(spec, 1, clouds)
    assert mu is clouds[1]
    assert len(nus) == 1 and nus[0] is clouds[0]


def test_gaussian_initial_law_moments():
    law = gaussian_initial_law([2.0], 0.5)
    draws = np.asarray(law(substream(0, "test-gauss"), 200000))
    assert draws.shape == (200000, 1)
    assert draws.mean() == pytest.approx(2.0, abs=0.01)
    assert draws.std() == pytest.approx(0.5, abs=0.01)


def test_split_crowd_initial_law_shape():
    law = split_crowd_initial_law(0.8, 0.2)
    draws = np.asarray(law(substream(0, "test-split"), 100000))[:, 0]
    # two symmetric clusters separated by a hard gap
    assert np.all((np.abs(draws) >= 0.6) & (np.abs(draws) <= 1.0))
    share = np.mean(draws > 0)
    assert abs(share - 0.5) <= 5.0 / np.sqrt(len(draws))
    var = builtin_game("lq-bimodal").populations[0].initial_cov[0, 0]
    assert draws.var() == pytest.approx(var, rel=0.02)


def test_builtin_game_caches_instances():
    assert builtin_game("lq-1pop") is builtin_game("lq-1pop")


def test_lq_metadata_present_on_lq_builtins():
    for name in ALL_BUILTINS:
        spec = builtin_game(name)
        for pop in spec.populations:
            if name == "nonlq-box":
                assert pop.lq is None
            else:
                assert pop.lq is not None
