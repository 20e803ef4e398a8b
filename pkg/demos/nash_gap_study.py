"""
Deviation gains in finite games, three ways
===========================================

The mean-field strategy is only approximately optimal once N is finite.
For each mode (a single competitive agent, a whole cooperative
population, or the cooperative side of a mixed game) this script swaps
the deviating unit's control, measures the cost change under common
random numbers, and compares the worst case against the theoretical
floor kappa * sum of per-population rates.
"""

from mfglab.fbsde import SolverConfig
from mfglab.fixedpoint import FixedPointConfig, solve_matching
from mfglab.model import builtin_game
from mfglab.nagent import (
    MODE_COMPETITIVE,
    MODE_COOPERATIVE,
    MODE_MIXED_POPULATION,
    StructuralFlagError,
    nash_gap,
)

cfg = FixedPointConfig(solver=SolverConfig(n_steps=50, n_paths=4096))
runs = (
    ("lq-1pop", MODE_COMPETITIVE),
    ("lq-2pop-cooperative", MODE_COOPERATIVE),
    ("mixed-opec", MODE_MIXED_POPULATION),
)

for name, mode in runs:
    spec = builtin_game(name)
    eq = solve_matching(spec, cfg, seed=0)
    report = nash_gap(spec, eq, N_list=(64, 256, 1024), repetitions=8,
                      seed=0, mode=mode)
    tgt = report.population
    jmf = report.meanfield_costs[tgt][0]
    print("== %s, %s (deviating population %d)" % (name, mode, tgt))
    print("   N    J^N      |J^N - J^mf|   min gain    kappa")
    for n in report.N_list:
        jn, _ = report.baseline_costs[n][tgt]
        print("%5d  %.5f  %12.5f  %+.6f  %.4f" % (
            n, jn, abs(jn - jmf), report.min_gain(n),
            report.kappa_by_N[n]))
    print("  per-deviation gains at N=%d:" % report.N_list[-1])
    for ident in report.deviation_ids:
        print("    %-16s %+.6f (se %.6f)" % (
            ident, report.gains[(report.N_list[-1], ident)],
            report.gain_ses[(report.N_list[-1], ident)]))
    print()

# modes guard their structural preconditions: the cartel's drift and cost
# intercepts depend on the cartel's own law, so cooperative-population
# deviations on the mixed game are refused before any simulation
opec = builtin_game("mixed-opec")
eq = solve_matching(opec, cfg, seed=0)
try:
    nash_gap(opec, eq, mode=MODE_COOPERATIVE)
except StructuralFlagError as err:
    print("cooperative mode on the mixed game is rejected:\n  %s" % err)
