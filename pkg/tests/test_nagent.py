import numpy as np
import pytest

from mfglab.nagent import (
    Deviation,
    MODE_COMPETITIVE,
    MODE_COOPERATIVE,
    MODE_MIXED_AGENT,
    MODE_MIXED_POPULATION,
    StructuralFlagError,
    chaos_rate,
    default_deviations,
    eps_bar,
    eps_chaos_sq,
    nash_gap,
    simulate_iid_copies,
    simulate_interacting,
)
from mfglab.model import builtin_game

from conftest import cached_equilibrium


def test_chaos_rate_formula():
    assert eps_chaos_sq(100, 1) == pytest.approx(100 ** -0.5)
    assert eps_chaos_sq(100, 3) == pytest.approx(100 ** -0.5)
    assert eps_chaos_sq(100, 4) == pytest.approx(
        (1 + np.log(100)) / np.sqrt(100))
    assert eps_chaos_sq(100, 6) == pytest.approx(100 ** (-2.0 / 6.0))
    assert eps_bar(100, 1) == pytest.approx(100 ** -0.25)
    assert eps_bar(100, 6) == pytest.approx(100 ** (-1.0 / 6.0))


def test_deviation_idents():
    ids = [d.ident for d in default_deviations()]
    assert ids == ["shift:+0.1", "shift:-0.1", "shift:+0.5", "shift:-0.5",
                   "anchor", "null"]
    with pytest.raises(ValueError, match="unknown deviation"):
        Deviation("teleport")


def test_iid_copies_are_prefix_stable():
    spec = builtin_game("lq-1pop")
    eq = cached_equilibrium("lq-1pop", n_steps=10, n_paths=512)
    small = simulate_iid_copies(spec, eq, 16, seed=3)
    large = simulate_iid_copies(spec, eq, 64, seed=3)
    assert np.array_equal(small.paths[0], large.paths[0][:, :16, :])
    assert np.array_equal(small.agent_costs(0), large.agent_costs(0)[:16])


def test_interacting_exchangeable_under_relabeling():
    spec = builtin_game("lq-1pop")
    eq = cached_equilibrium("lq-1pop", n_steps=10, n_paths=512)
    plain = simulate_interacting(spec, eq, 32, seed=5)
    perm = [np.array([31 - p for p in range(32)])]
    swapped = simulate_interacting(spec, eq, 32, seed=5, permutations=perm)
    # dynamics run in tag order, so relabeling never perturbs the paths;
    # the per-agent cost view is the advertised permuted lens on tag order
    assert np.array_equal(plain.paths[0], swapped.paths[0])
    assert np.array_equal(plain.agent_costs(0)[perm[0]],
                          swapped.agent_costs(0))
    assert swapped.cost_estimate(0) == plain.cost_estimate(0)


def test_interacting_equals_iid_when_dynamics_ignore_the_measure():
    # the decoupled game reads no empirical statistics, so coupling the
    # agents changes nothing
    spec = builtin_game("lq-scalar")
    eq = cached_equilibrium("lq-scalar", n_steps=10, n_paths=512)
    a = simulate_iid_copies(spec, eq, 24, seed=1)
    b = simulate_interacting(spec, eq, 24, seed=1)
    assert np.array_equal(a.paths[0], b.paths[0])
    assert a.cost_estimate(0) == b.cost_estimate(0)


def test_empirical_flow_matches_states():
    spec = builtin_game("lq-1pop")
    eq = cached_equilibrium("lq-1pop", n_steps=10, n_paths=512)
    system = simulate_interacting(spec, eq, 16, seed=0)
    flow = system.empirical_flow(0)
    assert len(flow.clouds) == 11
    assert np.array_equal(flow.clouds[4].points, system.paths[0][4])


def test_unconverged_equilibrium_rejected():
    spec = builtin_game("lq-1pop")
    from mfglab.fixedpoint import FixedPointConfig, solve_matching
    from mfglab.fbsde import SolverConfig
    bad = solve_matching(
        spec,
        FixedPointConfig(solver=SolverConfig(n_steps=10, n_paths=256),
                         fp_tol=1e-9, max_iterations=2),
        seed=0,
    )
    with pytest.raises(ValueError, match="not converged"):
        simulate_iid_copies(spec, bad, 8)


def test_chaos_needs_three_sizes_and_deep_reference():
    spec = builtin_game("lq-1pop")
    eq = cached_equilibrium("lq-1pop", n_steps=10, n_paths=512)
    with pytest.raises(ValueError, match="fit refused"):
        chaos_rate(spec, eq, [32, 32, 64], repetitions=2)
    with pytest.raises(ValueError, match="16x"):
        chaos_rate(spec, eq, [16, 32, 64], repetitions=2, reference_factor=8)


def test_chaos_report_small_run():
    spec = builtin_game("lq-1pop")
    eq = cached_equilibrium("lq-1pop", n_steps=10, n_paths=512)
    report = chaos_rate(spec, eq, [16, 32, 64], repetitions=4, seed=0)
    assert report.N_list == (16, 32, 64)
    assert report.knot_curves[0].shape == (3, 11)
    assert np.all(report.knot_curves[0] > 0)
    # larger systems sit closer to the limit law
    sup = report.estimates[0]
    assert sup[0] > sup[-1]
    assert report.slopes[0] < 0
    d = report.to_dict()
    assert len(d["slopes"]) == 1
    import json
    json.dumps(d)


def test_null_deviation_gains_exactly_zero():
    spec = builtin_game("lq-1pop")
    eq = cached_equilibrium("lq-1pop", n_steps=10, n_paths=512)
    report = nash_gap(spec, eq, N_list=(8, 12, 16),
                      deviations=(Deviation("null"), Deviation("shift", 0.3)),
                      repetitions=2, seed=0)
    for n in (8, 12, 16):
        assert report.gains[(n, "null")] == 0.0
        assert report.gain_ses[(n, "null")] == 0.0
        # tiny systems sit far from the limit, so the shifted control can
        # beat the mean-field feedback; only finiteness is guaranteed here
        assert np.isfinite(report.gains[(n, "shift:+0.3")])
        assert report.gain_ses[(n, "shift:+0.3")] > 0.0


def test_mode_preconditions_checked_before_simulation():
    eq = cached_equilibrium("lq-1pop", n_steps=10, n_paths=512)
    spec = builtin_game("lq-1pop")
    # sizes are absurd on purpose: the guard must fire first, instantly
    with pytest.raises(StructuralFlagError, match="cooperative population"):
        nash_gap(spec, eq, N_list=(10 ** 9, 2 * 10 ** 9, 4 * 10 ** 9),
                 mode=MODE_COOPERATIVE)
    with pytest.raises(StructuralFlagError, match="both cooperative"):
        nash_gap(spec, eq, N_list=(10 ** 9, 2 * 10 ** 9, 4 * 10 ** 9),
                 mode=MODE_MIXED_POPULATION)

    opec = builtin_game("mixed-opec")
    eq_opec = cached_equilibrium("mixed-opec", n_steps=10, n_paths=512)
    # cartel intercepts depend on the cartel's own law, so population
    # deviations in the cooperative sense are structurally unsupported
    with pytest.raises(StructuralFlagError, match="structural flag"):
        nash_gap(opec, eq_opec, N_list=(10 ** 9, 2 * 10 ** 9, 4 * 10 ** 9),
                 mode=MODE_COOPERATIVE)
    with pytest.raises(StructuralFlagError, match="not competitive"):
        nash_gap(opec, eq_opec, N_list=(10 ** 9, 2 * 10 ** 9, 4 * 10 ** 9),
                 mode=MODE_COMPETITIVE, population=0)


def test_mixed_modes_run_on_mixed_builtin():
    opec = builtin_game("mixed-opec")
    eq = cached_equilibrium("mixed-opec", n_steps=10, n_paths=512)
    devs = (Deviation("shift", 0.2), Deviation("null"))
    for mode, pop in ((MODE_MIXED_POPULATION, 0), (MODE_MIXED_AGENT, 1)):
        report = nash_gap(opec, eq, N_list=(6, 8, 10), deviations=devs,
                          repetitions=2, seed=0, mode=mode)
        assert report.population == pop
        assert report.mode == mode
        assert set(report.deviation_ids) == {"shift:+0.2", "null"}
        for n in (6, 8, 10):
            assert report.eps_bar_sum[n] > 0


def test_open_loop_and_best_response_variants_run():
    spec = builtin_game("lq-1pop")
    eq = cached_equilibrium("lq-1pop", n_steps=10, n_paths=512)
    devs = (Deviation("best-response", 0.3), Deviation("null"))
    closed = nash_gap(spec, eq, N_list=(6, 8, 10), deviations=devs,
                      repetitions=2, seed=0)
    opened = nash_gap(spec, eq, N_list=(6, 8, 10), deviations=devs,
                      repetitions=2, seed=0, open_loop=True)
    assert closed.open_loop is False
    assert opened.open_loop is True
    for n in (6, 8, 10):
        assert np.isfinite(closed.gains[(n, "best-response:0.3")])
        assert np.isfinite(opened.gains[(n, "best-response:0.3")])


def test_workers_do_not_change_nash_results():
    spec = builtin_game("lq-1pop")
    eq = cached_equilibrium("lq-1pop", n_steps=10, n_paths=512)
    devs = (Deviation("shift", 0.2), Deviation("null"))
    a = nash_gap(spec, eq, N_list=(6, 8, 10), deviations=devs,
                 repetitions=2, seed=0, workers=1)
    b = nash_gap(spec, eq, N_list=(6, 8, 10), deviations=devs,
                 repetitions=2, seed=0, workers=8)
    assert a.gains == b.gains
    assert a.gain_ses == b.gain_ses
    assert a.kappa_by_N == b.kappa_by_N
