"""Finite-agent simulation: i.i.d. copies, interacting systems, chaos
rates, and approximate-Nash gaps.

Every agent owns an independent randomness bundle (initial draw plus
Brownian increments) keyed by a stable tag, so simulations are nested
across population sizes and exchangeable by construction: permuting
agent labels permutes the bundles without changing any estimate, and the
N-agent i.i.d. system is a prefix of the larger one. The interacting
system feeds live empirical clouds to the coefficients while controls
always read the frozen equilibrium flows and decoupling fields.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .fbsde import _drift, _sigma_dw, _trapezoid_weights, solve_adjoint
from .hamiltonian import minimize_controls
from .measures import MeasureFlow, ParticleCloud, sliced_w2, wasserstein2_1d_any
from .model import COMPETITIVE, COOPERATIVE
from .rng import parallel_map, substream

MODE_COMPETITIVE = "competitive-agent"
MODE_COOPERATIVE = "cooperative-population"
MODE_MIXED_POPULATION = "mixed-setup1"
MODE_MIXED_AGENT = "mixed-setup2"
ALL_MODES = (
    MODE_COMPETITIVE,
    MODE_COOPERATIVE,
    MODE_MIXED_POPULATION,
    MODE_MIXED_AGENT,
)


class StructuralFlagError(ValueError):
    pass


def eps_chaos_sq(n, d):
    """Squared chaos rate for one population of size n in dimension d."""
    n = float(n)
    out = n ** (-2.0 / max(d, 4))
    if d == 4:
        out *= 1.0 + np.log(n)
    return out


def eps_bar(n, d):
    """Rate used by the Nash floor: the chaos rate or root-n, whichever
    is slower."""
    return max(np.sqrt(eps_chaos_sq(n, d)), float(n) ** -0.5)


@dataclass(frozen=True)
class Deviation:
    kind: str
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("shift", "anchor", "null", "best-response"):
            raise ValueError("unknown deviation kind %r" % self.kind)

    @property
    def ident(self):
        if self.kind == "shift":
            return "shift:%+g" % self.value
        if self.kind == "best-response":
            return "best-response:%g" % self.value
        return self.kind


def default_deviations():
    return (
        Deviation("shift", 0.1),
        Deviation("shift", -0.1),
        Deviation("shift", 0.5),
        Deviation("shift", -0.5),
        Deviation("anchor"),
        Deviation("null"),
    )


def _agent_stream(seed, rep, pop, agent):
    return substream(seed, "nagent:rep:%d:pop:%d:agent:%d" % (rep, pop, agent))


def _draw_bundles(spec, i, n_steps, n_agents, seed, rep, dt):
    """Per-agent initial draws and Brownian increments, in tag order."""
    pop = spec.populations[i]
    d = pop.state_dim
    xi = np.empty((n_agents, d))
    dW = np.empty((n_steps, n_agents, d))
    for p in range(n_agents):
        rng = _agent_stream(seed, rep, i, p)
        xi[p] = np.asarray(pop.initial_law(rng, 1), dtype=float).reshape(d)
        dW[:, p, :] = rng.standard_normal((n_steps, d))
    return xi, dW * np.sqrt(dt)


class _EquilibriumFeedback:
    """Mean-field feedback: frozen flows in the measure slots, the solved
    decoupling field in the adjoint slot."""

    def __init__(self, spec, i, flows, field):
        self.spec = spec
        self.i = i
        self.flows = flows
        self.field = field
        self.others = spec.others(i)

    def __call__(self, k, t, X):
        mu = self.flows[self.i].clouds[k]
        nus = tuple(self.flows[j].clouds[k] for j in self.others)
        return minimize_controls(
            self.spec, self.i, t, X, mu, nus, self.field.eval(k, X)
        )


def _deviation_fn(dev, spec, i, base_feedback, strategies):
    pop = spec.populations[i]
    if dev.kind == "null":
        return base_feedback
    if dev.kind == "anchor":
        anchor = pop.action_set.anchor_point

        def fn(k, t, X):
            return np.tile(anchor, (len(X), 1))

        return fn
    if dev.kind == "shift":
        c = np.full(pop.action_set.dimension, dev.value)

        def fn(k, t, X):
            return pop.action_set.project(base_feedback(k, t, X) + c[None, :])

        return fn
    return strategies[dev.ident]


def prepare_best_response(spec, i, equilibrium, tilt):
    """Re-solve the adjoint against frozen flows with a tilted control
    cost, returning the resulting feedback.

    The tilt adds tilt * sum(alpha) to the running cost, so the solved
    feedback is the best response of an agent whose control price is
    shifted; with tilt 0 it reproduces the equilibrium feedback up to
    regression noise.
    """
    pop = spec.populations[i]
    delta = np.full(pop.action_set.dimension, float(tilt))
    base_f = pop.cost.f
    base_dfa = pop.cost.df_dalpha

    def f(t, x, mu, nus, alpha):
        return np.asarray(base_f(t, x, mu, nus, alpha), dtype=float) + (
            np.atleast_2d(alpha) @ delta
        )

    def df_dalpha(t, x, mu, nus, alpha):
        return np.asarray(base_dfa(t, x, mu, nus, alpha), dtype=float) + delta

    cost_kw = {"f": f, "df_dalpha": df_dalpha}
    if pop.cost.quadratic_in_alpha:
        cost_kw["quad_linear"] = (
            lambda t, x, mu, nus: np.asarray(
                pop.cost.quad_linear(t, x, mu, nus), dtype=float
            )
            + delta
        )
    cost = dataclasses.replace(pop.cost, **cost_kw)
    tilted = dataclasses.replace(
        spec,
        populations=tuple(
            dataclasses.replace(p, cost=cost) if j == i else p
            for j, p in enumerate(spec.populations)
        ),
    )
    sol = solve_adjoint(
        tilted,
        i,
        equilibrium.flows,
        equilibrium.config.solver,
        equilibrium.seed,
        initial_field=equilibrium.solutions[i].field,
    )
    return _EquilibriumFeedback(tilted, i, equilibrium.flows, sol.field)


@dataclass
class AgentSystem:
    spec_name: str
    grid: object
    sizes: tuple
    interacting: bool
    paths: list
    controls: list
    costs: list
    modes: list
    permutations: list
    seed: int
    rep: int

    def cost_estimate(self, i):
        """Population-average cost with its standard error, computed in
        canonical tag order (permutation-invariant by construction)."""
        c = self.costs[i]
        return float(c.mean()), float(c.std(ddof=1) / np.sqrt(len(c)))

    def agent_costs(self, i):
        """Per-agent costs in label order (permuted view of tag order)."""
        perm = self.permutations[i]
        if perm is None:
            return self.costs[i].copy()
        return self.costs[i][np.asarray(perm)]

    def empirical_flow(self, i):
        return MeasureFlow(
            self.grid,
            [ParticleCloud(self.paths[i][k]) for k in range(len(self.grid))],
        )


def _check_permutations(sizes, permutations):
    if permutations is None:
        return [None] * len(sizes)
    out = []
    for i, perm in enumerate(permutations):
        if perm is None:
            out.append(None)
            continue
        arr = np.asarray(perm, dtype=int)
        if sorted(arr.tolist()) != list(range(sizes[i])):
            raise ValueError(
                "permutation for population %d is not a bijection on %d tags"
                % (i, sizes[i])
            )
        out.append(arr)
    return out


def _run_system(spec, equilibrium, sizes, seed, rep, interacting,
                deviating=None, open_loop_controls=None, permutations=None):
    """Simulate the coupled (or i.i.d.) agent system in tag order.

    deviating: None or dict {pop index: (bool mask over tags, control fn)}.
    open_loop_controls: dict {pop index: (K, n_dev, k) array} overriding
    the deviating agents' controls with a precommitted process.
    """
    m = spec.n_populations
    grid = equilibrium.flows[0].grid
    K = grid.n_steps
    flows = equilibrium.flows
    perms = _check_permutations(sizes, permutations)
    feedbacks = [
        _EquilibriumFeedback(spec, i, flows, equilibrium.solutions[i].field)
        for i in range(m)
    ]
    deviating = deviating or {}

    states = []
    dWs = []
    for i in range(m):
        xi, dW = _draw_bundles(spec, i, K, sizes[i], seed, rep, grid.dt)
        states.append(xi)
        dWs.append(dW)

    w = _trapezoid_weights(grid)
    paths = [np.empty((K + 1, sizes[i], spec.populations[i].state_dim))
             for i in range(m)]
    controls = [
        np.empty((K, sizes[i], spec.populations[i].action_set.dimension))
        for i in range(m)
    ]
    run_costs = [np.zeros(sizes[i]) for i in range(m)]
    for i in range(m):
        paths[i][0] = states[i]

    for k in range(K):
        t = grid.times[k]
        if interacting:
            clouds_k = [ParticleCloud(states[i]) for i in range(m)]
        else:
            clouds_k = [flows[i].clouds[k] for i in range(m)]
        for i in range(m):
            pop = spec.populations[i]
            mu = clouds_k[i]
            nus = tuple(clouds_k[j] for j in spec.others(i))
            alpha = feedbacks[i](k, t, states[i])
            if i in deviating:
                mask, dev_fn = deviating[i]
                if i in (open_loop_controls or {}):
                    alpha[mask] = open_loop_controls[i][k]
                else:
                    # full-batch evaluation keeps the floating-point path
                    # identical to the baseline's, so a deviation that maps
                    # to the equilibrium feedback costs exactly zero
                    alpha[mask] = dev_fn(k, t, states[i])[mask]
            controls[i][k] = alpha
            run_costs[i] += w[k] * np.asarray(
                pop.cost.f(t, states[i], mu, nus, alpha), dtype=float
            )
            states[i] = (
                states[i]
                + _drift(pop, t, states[i], mu, nus, alpha) * grid.dt
                + _sigma_dw(pop, t, states[i], mu, nus, dWs[i][k])
            )
            paths[i][k + 1] = states[i]

    if interacting:
        clouds_T = [ParticleCloud(states[i]) for i in range(m)]
    else:
        clouds_T = [flows[i].clouds[K] for i in range(m)]
    costs = []
    modes = []
    for i in range(m):
        pop = spec.populations[i]
        mu = clouds_T[i]
        nus = tuple(clouds_T[j] for j in spec.others(i))
        run_costs[i] += w[K] * np.asarray(
            pop.cost.f(grid.times[K], states[i], mu, nus, controls[i][K - 1]),
            dtype=float,
        )
        total = run_costs[i] + np.asarray(
            pop.cost.g(states[i], mu, nus), dtype=float
        )
        costs.append(total)
        mode_row = ["mean-field-feedback"] * sizes[i]
        if i in deviating:
            mask = deviating[i][0]
            for p in np.where(mask)[0]:
                mode_row[p] = "deviating"
        modes.append(mode_row)

    return AgentSystem(
        spec_name=spec.name,
        grid=grid,
        sizes=tuple(sizes),
        interacting=interacting,
        paths=paths,
        controls=controls,
        costs=costs,
        modes=modes,
        permutations=perms,
        seed=seed,
        rep=rep,
    )


def _normalize_sizes(spec, N):
    if np.isscalar(N):
        return (int(N),) * spec.n_populations
    sizes = tuple(int(v) for v in N)
    if len(sizes) != spec.n_populations:
        raise ValueError("need one size per population")
    return sizes


def _require_converged(equilibrium):
    if not equilibrium.converged:
        raise ValueError("equilibrium report is not converged")


def simulate_iid_copies(spec, equilibrium, N, seed=0, rep=0,
                        permutations=None):
    """Independent copies of the mean-field optimal state, one per agent.

    Both coefficients and controls read the frozen equilibrium flows, so
    agents never interact and the N-agent system is a prefix of any
    larger one with the same seed.
    """
    _require_converged(equilibrium)
    sizes = _normalize_sizes(spec, N)
    return _run_system(spec, equilibrium, sizes, seed, rep, interacting=False,
                       permutations=permutations)


def simulate_interacting(spec, equilibrium, N, seed=0, rep=0,
                         permutations=None, deviating=None,
                         open_loop_controls=None):
    """Coupled Euler system: coefficients read per-knot empirical clouds,
    controls read frozen equilibrium flows and decoupling fields."""
    _require_converged(equilibrium)
    sizes = _normalize_sizes(spec, N)
    return _run_system(spec, equilibrium, sizes, seed, rep, interacting=True,
                       deviating=deviating,
                       open_loop_controls=open_loop_controls,
                       permutations=permutations)


# ---------------------------------------------------------------------------
# Chaos rate


@dataclass
class ChaosReport:
    spec_name: str
    N_list: tuple
    repetitions: int
    reference_n: int
    estimates: list
    standard_errors: list
    knot_curves: list
    slopes: list
    r_squared: list
    eps_sq_theory: list
    bias_check: list
    seed: int

    def to_dict(self):
        return {
            "spec_name": self.spec_name,
            "N_list": list(self.N_list),
            "repetitions": self.repetitions,
            "reference_n": self.reference_n,
            "estimates": [list(map(float, e)) for e in self.estimates],
            "standard_errors": [list(map(float, e))
                                for e in self.standard_errors],
            "slopes": [float(s) for s in self.slopes],
            "r_squared": [float(r) for r in self.r_squared],
            "eps_sq_theory": [list(map(float, e)) for e in self.eps_sq_theory],
            "bias_check": [list(map(float, b)) for b in self.bias_check],
            "seed": self.seed,
        }


def _iid_bulk_flow(spec, equilibrium, i, n, rng):
    """One forward simulation of n i.i.d. copies with bulk draws; used
    for the high-resolution reference sample of the limit law."""
    pop = spec.populations[i]
    grid = equilibrium.flows[0].grid
    K = grid.n_steps
    d = pop.state_dim
    flows = equilibrium.flows
    feedback = _EquilibriumFeedback(spec, i, flows,
                                    equilibrium.solutions[i].field)
    xi = np.asarray(pop.initial_law(rng, n), dtype=float).reshape(n, d)
    dW = rng.standard_normal((K, n, d)) * np.sqrt(grid.dt)
    X = np.empty((K + 1, n, d))
    X[0] = xi
    state = xi
    for k in range(K):
        t = grid.times[k]
        mu = flows[i].clouds[k]
        nus = tuple(flows[j].clouds[k] for j in spec.others(i))
        alpha = feedback(k, t, state)
        state = (
            state
            + _drift(pop, t, state, mu, nus, alpha) * grid.dt
            + _sigma_dw(pop, t, state, mu, nus, dW[k])
        )
        X[k + 1] = state
    return X


def _w2sq(points_a, ref_cloud):
    a = ParticleCloud(points_a)
    if a.dim == 1:
        return wasserstein2_1d_any(a, ref_cloud) ** 2
    return sliced_w2(a, ref_cloud) ** 2


def chaos_rate(spec, equilibrium, N_list, repetitions=32, seed=0,
               reference_factor=16, workers=1):
    """Empirical chaos rate: sup-knot mean squared W2 between the law of
    N i.i.d. copies and a high-resolution reference sample of the limit.

    The reference uses reference_factor times the largest N (at least
    16x); a half-resolution reference is evaluated alongside as a bias
    self-check. Fitting needs at least 3 distinct sizes.
    """
    _require_converged(equilibrium)
    N_list = tuple(sorted(int(n) for n in N_list))
    if len(set(N_list)) < 3:
        raise ValueError(
            "fit refused: need at least 3 distinct population sizes, got %r"
            % (N_list,)
        )
    if reference_factor < 16:
        raise ValueError("reference resolution must be at least 16x max N")
    n_max = N_list[-1]
    n_ref = int(reference_factor) * n_max
    m = spec.n_populations
    grid = equilibrium.flows[0].grid
    n_knots = len(grid)

    references = []
    for i in range(m):
        rng = substream(seed, "nagent:reference:pop:%d" % i)
        X = _iid_bulk_flow(spec, equilibrium, i, n_ref, rng)
        references.append(X)

    ref_clouds = [
        [ParticleCloud(references[i][k]) for k in range(n_knots)]
        for i in range(m)
    ]
    half_clouds = [
        [ParticleCloud(references[i][k][: n_ref // 2]) for k in range(n_knots)]
        for i in range(m)
    ]

    def one_rep(rep):
        sys_max = simulate_iid_copies(spec, equilibrium, n_max, seed=seed,
                                      rep=rep)
        full = np.empty((m, len(N_list), n_knots))
        half = np.empty((m, len(N_list), n_knots))
        for i in range(m):
            for a, n in enumerate(N_list):
                for k in range(n_knots):
                    pts = sys_max.paths[i][k][:n]
                    full[i, a, k] = _w2sq(pts, ref_clouds[i][k])
                    half[i, a, k] = _w2sq(pts, half_clouds[i][k])
        return full, half

    results = parallel_map(one_rep, list(range(repetitions)), workers=workers)
    full = np.stack([r[0] for r in results])
    half = np.stack([r[1] for r in results])

    estimates = []
    ses = []
    curves = []
    slopes = []
    r2s = []
    eps_theory = []
    bias = []
    for i in range(m):
        d = spec.populations[i].state_dim
        per_knot = full[:, i].mean(axis=0)
        sup_idx = per_knot.argmax(axis=1)
        est = per_knot[np.arange(len(N_list)), sup_idx]
        se = np.array(
            [
                full[:, i, a, sup_idx[a]].std(ddof=1) / np.sqrt(repetitions)
                for a in range(len(N_list))
            ]
        )
        half_knot = half[:, i].mean(axis=0)
        half_est = half_knot[np.arange(len(N_list)), sup_idx]
        logs_n = np.log(np.asarray(N_list, dtype=float))
        logs_e = np.log(est)
        slope, intercept = np.polyfit(logs_n, logs_e, 1)
        fitted = slope * logs_n + intercept
        ss_res = float(np.sum((logs_e - fitted) ** 2))
        ss_tot = float(np.sum((logs_e - logs_e.mean()) ** 2))
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
        estimates.append(est)
        ses.append(se)
        curves.append(per_knot)
        slopes.append(float(slope))
        r2s.append(float(r2))
        eps_theory.append([eps_chaos_sq(n, d) for n in N_list])
        bias.append(half_est)
    return ChaosReport(
        spec_name=spec.name,
        N_list=N_list,
        repetitions=repetitions,
        reference_n=n_ref,
        estimates=estimates,
        standard_errors=ses,
        knot_curves=curves,
        slopes=slopes,
        r_squared=r2s,
        eps_sq_theory=eps_theory,
        bias_check=bias,
        seed=seed,
    )


def chaos_to_csv(report, path):
    lines = ["population,N,estimate,se,eps_sq_theory,bias_check"]
    for i in range(len(report.estimates)):
        for a, n in enumerate(report.N_list):
            lines.append(
                "%d,%d,%.17g,%.17g,%.17g,%.17g"
                % (
                    i,
                    n,
                    report.estimates[i][a],
                    report.standard_errors[i][a],
                    report.eps_sq_theory[i][a],
                    report.bias_check[i][a],
                )
            )
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Nash gaps


@dataclass
class NashGapReport:
    spec_name: str
    mode: str
    population: int
    N_list: tuple
    deviation_ids: tuple
    repetitions: int
    open_loop: bool
    gains: dict
    gain_ses: dict
    eps_bar_sum: dict
    normalized: dict
    kappa_by_N: dict
    kappa_floor_by_N: dict
    baseline_costs: dict
    meanfield_costs: list
    seed: int

    def min_gain(self, n):
        return min(self.gains[(n, dev)] for dev in self.deviation_ids)

    def to_dict(self):
        return {
            "spec_name": self.spec_name,
            "mode": self.mode,
            "population": self.population,
            "N_list": list(self.N_list),
            "deviations": list(self.deviation_ids),
            "repetitions": self.repetitions,
            "open_loop": self.open_loop,
            "gains": {
                "%d:%s" % key: val for key, val in sorted(self.gains.items())
            },
            "gain_ses": {
                "%d:%s" % key: val
                for key, val in sorted(self.gain_ses.items())
            },
            "eps_bar_sum": {str(n): v for n, v in self.eps_bar_sum.items()},
            "normalized": {
                "%d:%s" % key: val
                for key, val in sorted(self.normalized.items())
            },
            "kappa_by_N": {str(n): v for n, v in self.kappa_by_N.items()},
            "kappa_floor_by_N": {
                str(n): v for n, v in self.kappa_floor_by_N.items()
            },
            "baseline_costs": {
                str(n): [{"mean": c[0], "se": c[1]} for c in costs]
                for n, costs in self.baseline_costs.items()
            },
            "meanfield_costs": [
                {"mean": c[0], "se": c[1]} for c in self.meanfield_costs
            ],
            "seed": self.seed,
        }


def _validate_mode(spec, mode, population):
    comp = [i for i, p in enumerate(spec.populations)
            if p.cooperation == COMPETITIVE]
    coop = [i for i, p in enumerate(spec.populations)
            if p.cooperation == COOPERATIVE]
    flags = spec.structural_flags
    if mode not in ALL_MODES:
        raise ValueError("unknown mode %r; expected one of %s"
                         % (mode, ", ".join(ALL_MODES)))
    if mode == MODE_COMPETITIVE:
        if not comp:
            raise StructuralFlagError(
                "competitive-agent mode needs a competitive population"
            )
        target = comp[0] if population is None else population
        if spec.populations[target].cooperation != COMPETITIVE:
            raise StructuralFlagError(
                "population %d is not competitive" % target
            )
        return target, "agent"
    if mode == MODE_COOPERATIVE:
        if not coop:
            raise StructuralFlagError(
                "cooperative-population mode needs a cooperative population"
            )
        if not flags.cooperative_measure_free_intercepts:
            raise StructuralFlagError(
                "cooperative-population deviations need intercept "
                "coefficients free of the own measure; the structural flag "
                "is not set for this game"
            )
        target = coop[0] if population is None else population
        if spec.populations[target].cooperation != COOPERATIVE:
            raise StructuralFlagError(
                "population %d is not cooperative" % target
            )
        return target, "population"
    if not comp or not coop:
        raise StructuralFlagError(
            "mixed modes need both cooperative and competitive populations"
        )
    if not flags.mixed_fringe_own_law_free_intercepts:
        raise StructuralFlagError(
            "mixed-mode deviations need fringe intercepts free of the own "
            "law; the structural flag is not set for this game"
        )
    if mode == MODE_MIXED_POPULATION:
        target = coop[0] if population is None else population
        if spec.populations[target].cooperation != COOPERATIVE:
            raise StructuralFlagError(
                "mixed-setup1 deviates a cooperative population; %d is not"
                % target
            )
        return target, "population"
    target = comp[0] if population is None else population
    if spec.populations[target].cooperation != COMPETITIVE:
        raise StructuralFlagError(
            "mixed-setup2 deviates a single competitive agent; %d is not"
            % target
        )
    return target, "agent"


def _open_loop_shadow(spec, equilibrium, i, tags, seed, rep, dev_fn):
    """Precommitted control paths: evaluate the deviation feedback along
    the deviator's own i.i.d. copy path (same bundle, frozen flows)."""
    pop = spec.populations[i]
    grid = equilibrium.flows[0].grid
    K = grid.n_steps
    d = pop.state_dim
    flows = equilibrium.flows
    n = len(tags)
    xi = np.empty((n, d))
    dW = np.empty((K, n, d))
    for idx, p in enumerate(tags):
        rng = _agent_stream(seed, rep, i, int(p))
        xi[idx] = np.asarray(pop.initial_law(rng, 1), dtype=float).reshape(d)
        dW[:, idx, :] = rng.standard_normal((K, d))
    dW *= np.sqrt(grid.dt)
    out = np.empty((K, n, pop.action_set.dimension))
    state = xi
    for k in range(K):
        t = grid.times[k]
        mu = flows[i].clouds[k]
        nus = tuple(flows[j].clouds[k] for j in spec.others(i))
        alpha = dev_fn(k, t, state)
        out[k] = alpha
        state = (
            state
            + _drift(pop, t, state, mu, nus, alpha) * grid.dt
            + _sigma_dw(pop, t, state, mu, nus, dW[k])
        )
    return out


def nash_gap(spec, equilibrium, N_list=(64, 256, 1024), deviations=None,
             repetitions=8, seed=0, mode=MODE_COMPETITIVE, population=None,
             open_loop=False, best_response_tilt=0.3, workers=1):
    """Deviation gains of the mean-field strategy in the N-agent game.

    For each size and deviation, the deviating unit (one agent, or one
    whole population deviating exchangeably, per mode) swaps its control
    for the deviation while everyone else keeps the equilibrium feedback;
    the gain J(deviation) - J(equilibrium) is estimated with common
    random numbers agent by agent. Mode preconditions (cooperation kinds
    and structural flags) are checked before any simulation.
    """
    _require_converged(equilibrium)
    target, unit = _validate_mode(spec, mode, population)
    N_list = tuple(int(n) for n in N_list)
    devs = tuple(deviations) if deviations is not None else default_deviations()
    m = spec.n_populations

    strategies = {}
    for dev in devs:
        if dev.kind == "best-response":
            strategies[dev.ident] = prepare_best_response(
                spec, target, equilibrium, dev.value
            )

    base_feedback = _EquilibriumFeedback(
        spec, target, equilibrium.flows, equilibrium.solutions[target].field
    )

    def one_task(task):
        n, rep = task
        sizes = _normalize_sizes(spec, n)
        baseline = simulate_interacting(spec, equilibrium, sizes, seed=seed,
                                        rep=rep)
        if unit == "agent":
            mask = np.zeros(sizes[target], dtype=bool)
            mask[0] = True
        else:
            mask = np.ones(sizes[target], dtype=bool)
        tags = np.where(mask)[0]
        dev_rows = {}
        for dev in devs:
            dev_fn = _deviation_fn(dev, spec, target, base_feedback,
                                   strategies)
            open_ctrl = None
            if open_loop and dev.kind != "null":
                open_ctrl = {
                    target: _open_loop_shadow(spec, equilibrium, target, tags,
                                              seed, rep, dev_fn)
                }
            system = simulate_interacting(
                spec, equilibrium, sizes, seed=seed, rep=rep,
                deviating={target: (mask, dev_fn)},
                open_loop_controls=open_ctrl,
            )
            if unit == "agent":
                gain = float(system.costs[target][0]
                             - baseline.costs[target][0])
            else:
                gain = float(system.costs[target].mean()
                             - baseline.costs[target].mean())
            dev_rows[dev.ident] = gain
        base_costs = [baseline.costs[i] for i in range(m)]
        return n, rep, dev_rows, base_costs

    tasks = [(n, rep) for n in N_list for rep in range(repetitions)]
    results = parallel_map(one_task, tasks, workers=workers)

    gains = {}
    gain_ses = {}
    baseline_costs = {}
    for n in N_list:
        rows = [r for r in results if r[0] == n]
        for dev in devs:
            vals = np.array([r[2][dev.ident] for r in rows])
            gains[(n, dev.ident)] = float(vals.mean())
            gain_ses[(n, dev.ident)] = float(
                vals.std(ddof=1) / np.sqrt(len(vals))
                if len(vals) > 1
                else 0.0
            )
        per_pop = []
        for i in range(m):
            allc = np.concatenate([r[3][i] for r in rows])
            per_pop.append(
                (
                    float(allc.mean()),
                    float(allc.std(ddof=1) / np.sqrt(len(allc))),
                )
            )
        baseline_costs[n] = per_pop

    eps_sum = {}
    normalized = {}
    kappa = {}
    kappa_floor = {}
    for n in N_list:
        sizes = _normalize_sizes(spec, n)
        total = sum(
            eps_bar(sizes[i], spec.populations[i].state_dim) for i in range(m)
        )
        eps_sum[n] = float(total)
        for dev in devs:
            normalized[(n, dev.ident)] = gains[(n, dev.ident)] / total
        low = min(devs, key=lambda dev: gains[(n, dev.ident)])
        min_gain = gains[(n, low.ident)]
        kappa[n] = float(max(0.0, -min_gain) / total)
        kappa_floor[n] = float(gain_ses[(n, low.ident)] / total)

    return NashGapReport(
        spec_name=spec.name,
        mode=mode,
        population=target,
        N_list=N_list,
        deviation_ids=tuple(dev.ident for dev in devs),
        repetitions=repetitions,
        open_loop=open_loop,
        gains=gains,
        gain_ses=gain_ses,
        eps_bar_sum=eps_sum,
        normalized=normalized,
        kappa_by_N=kappa,
        kappa_floor_by_N=kappa_floor,
        baseline_costs=baseline_costs,
        meanfield_costs=list(equilibrium.costs),
        seed=seed,
    )


def nash_to_csv(report, path):
    lines = ["mode,N,deviation,estimate,se,normalized"]
    for n in report.N_list:
        for dev in report.deviation_ids:
            lines.append(
                "%s,%d,%s,%.17g,%.17g,%.17g"
                % (
                    report.mode,
                    n,
                    dev,
                    report.gains[(n, dev)],
                    report.gain_ses[(n, dev)],
                    report.normalized[(n, dev)],
                )
            )
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
