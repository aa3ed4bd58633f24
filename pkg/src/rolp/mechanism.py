"""Truthful variant: prune unfit options, allocate unconditionally, charge VCG.

Before the scaled LP is solved in a round, every option of the arriving
bidder that no longer fits the remaining capacity is removed (from this
LP and all later ones). The chosen option is then allocated without a
feasibility test: pruning already guarantees it fits. The bidder is
charged its externality: the scaled-LP optimum without it minus what the
others receive inside the chosen optimum (both under reported profits).

Utilities are always evaluated against true valuations, payments against
reported ones. The exact-enumeration auditor verifies that no bidder can
gain in expectation by misreporting, per fixed arrival order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import permutations as iter_permutations

import numpy as np

from .instances import Option, PackingInstance, Request, normalize_rows
from .lp import SizeLimitError, solve_packing
from .online import (
    CAPACITY_TOL,
    DISTRIBUTION_TOL,
    DistributionError,
    RoundLog,
    feasibility_test,
)

PAYMENT_TOL = 1e-9

MAX_AUDIT_REQUESTS = 4
MAX_AUDIT_OPTIONS = 3


@dataclass(frozen=True)
class BidderScenario:
    """A true instance plus (possibly strategic) per-bidder profit reports."""

    true_instance: PackingInstance
    reports: dict[int, tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self):
        for j, profits in self.reports.items():
            options = self.true_instance.requests[j].options
            if len(profits) != len(options):
                raise ValueError(
                    f"report for bidder {j} has {len(profits)} entries, "
                    f"expected {len(options)}"
                )
            if any(not math.isfinite(p) or p < 0 for p in profits):
                raise ValueError(f"report for bidder {j} must be finite and >= 0")

    def reported_instance(self) -> PackingInstance:
        """The true instance with reported profits swapped in."""
        if not self.reports:
            return self.true_instance
        requests = []
        for j, req in enumerate(self.true_instance.requests):
            if j in self.reports:
                requests.append(Request(tuple(
                    Option(p, opt.consumption)
                    for p, opt in zip(self.reports[j], req.options)
                )))
            else:
                requests.append(req)
        return PackingInstance(
            self.true_instance.name, self.true_instance.capacities, tuple(requests)
        )

    def with_report(self, j: int, profits: tuple[float, ...]) -> "BidderScenario":
        reports = dict(self.reports)
        reports[j] = tuple(profits)
        return BidderScenario(self.true_instance, reports)


@dataclass(frozen=True)
class MechanismOutcome:
    """Allocation, per-bidder VCG payments, and true-valuation utilities."""

    rounds: tuple[RoundLog, ...]
    allocation: dict[tuple[int, int], int]
    payments: dict[int, float]
    utilities: dict[int, float]
    welfare: float
    opt_value: float
    ratio: float


def prune_infeasible_options(
    instance: PackingInstance, y_consumption, j: int
) -> set[int]:
    """Option indices of request j that still fit the remaining capacity."""
    capacities = instance.capacities
    return {
        k
        for k, opt in enumerate(instance.requests[j].options)
        if feasibility_test(y_consumption, opt.consumption, capacities)
    }


def vcg_payment(
    instance_with_reports: PackingInstance,
    f: float,
    S,
    j: int,
    xtilde,
    *,
    engine: str = "bland",
    allowed_options=None,
) -> float:
    """Externality of bidder j under the scaled LP on reported profits.

    The optimum over S minus j, less the reported welfare the others get
    inside the chosen optimum ``xtilde``. Never negative beyond solver
    noise (removing a bidder cannot lower the others' optimum).
    """
    others = [q for q in set(S) if q != j]
    sol_without, _ = solve_packing(
        instance_with_reports, f, others, engine=engine, allowed_options=allowed_options
    )
    others_welfare = 0.0
    for (q, k), v in xtilde.values.items():
        if q != j:
            others_welfare += instance_with_reports.requests[q].options[k].profit * v
    payment = sol_without.objective - others_welfare
    if payment < -PAYMENT_TOL:
        raise RuntimeError(
            f"negative VCG payment {payment!r}: solver returned inconsistent optima"
        )
    return max(0.0, payment)


def run_mechanism(
    scenario: BidderScenario,
    permutation,
    rng,
    *,
    engine: str = "bland",
    sampling_p: float = 0.0,
    opt_value: float | None = None,
) -> MechanismOutcome:
    """One execution of the truthful mechanism over an arrival order.

    ``sampling_p`` > 0 reproduces the low-capacity variant: the first
    floor(p * n) bidders are observed only (no LP, no payment, no
    allocation). The final allocation is feasible by construction of the
    pruning step; there is no end-of-round feasibility test.
    """
    true_inst = normalize_rows(scenario.true_instance)
    reported = normalize_rows(scenario.reported_instance())
    n = true_inst.num_requests
    if sorted(permutation) != list(range(n)):
        raise ValueError("permutation must be a permutation of all request ids")
    if not 0.0 <= sampling_p < 1.0:
        raise ValueError(f"sampling fraction must be in [0, 1) (got {sampling_p})")
    sample_len = int(math.floor(sampling_p * n))
    capacities = np.asarray(true_inst.capacities)
    y = np.zeros(true_inst.num_resources)
    survivors: dict[int, set[int]] = {}
    seen: list[int] = []
    allocation: dict[tuple[int, int], int] = {}
    payments: dict[int, float] = {}
    utilities: dict[int, float] = {}
    logs: list[RoundLog] = []
    welfare = 0.0
    for pos, j in enumerate(permutation):
        ell = pos + 1
        seen.append(j)
        survivors[j] = prune_infeasible_options(reported, y, j)
        if pos < sample_len:
            payments[j] = 0.0
            utilities[j] = 0.0
            logs.append(RoundLog(ell, j, 0.0, None, False, tuple(y), sampled=True))
            continue
        allowed = {q: sorted(survivors[q]) for q in seen}
        xtilde, _ = solve_packing(
            reported, ell / n, seen, engine=engine, allowed_options=allowed
        )
        payment = vcg_payment(
            reported, ell / n, seen, j, xtilde, engine=engine, allowed_options=allowed
        )
        payments[j] = payment
        row = sorted((k, v) for (q, k), v in xtilde.values.items() if q == j)
        probs = [max(0.0, v) for _, v in row]
        total = sum(probs)
        if total > 1.0 + DISTRIBUTION_TOL:
            raise DistributionError(f"option probabilities sum to {total!r} > 1")
        scale = total if total > 1.0 else 1.0
        u = float(rng.random()) * scale
        acc = 0.0
        chosen = None
        for (k, _), prob in zip(row, probs):
            acc += prob
            if u < acc:
                chosen = k
                break
        accepted = False
        true_value = 0.0
        if chosen is not None:
            option = true_inst.requests[j].options[chosen]
            for i, a in option.consumption.items():
                y[i] += a
            allocation[(j, chosen)] = 1
            true_value = option.profit
            welfare += true_value
            accepted = True
        utilities[j] = true_value - payment
        logs.append(RoundLog(ell, j, xtilde.objective, chosen, accepted, tuple(y)))
    for i in range(true_inst.num_resources):
        if y[i] > capacities[i] + CAPACITY_TOL:
            raise RuntimeError(
                f"pruning failed to protect resource {i}: {y[i]} > {capacities[i]}"
            )
    if opt_value is None:
        if n:
            sol, _ = solve_packing(true_inst, 1.0, range(n), engine=engine)
            opt_value = sol.objective
        else:
            opt_value = 0.0
    ratio = welfare / opt_value if opt_value > 0 else 1.0
    return MechanismOutcome(
        rounds=tuple(logs),
        allocation=allocation,
        payments=payments,
        utilities=utilities,
        welfare=welfare,
        opt_value=opt_value,
        ratio=ratio,
    )


# ---------------------------------------------------------------------------
# Exact utility enumeration and the truthfulness audit
# ---------------------------------------------------------------------------

AUDIT_VARIANTS = ("mechanism", "primal")


def expected_utility_exact(
    scenario: BidderScenario,
    bidder: int,
    permutation,
    *,
    variant: str = "mechanism",
    engine: str = "bland",
    sampling_p: float = 0.0,
) -> float:
    """Exact expected utility of one bidder under a fixed arrival order.

    Enumerates every rounding branch with its exact probability. For the
    ``mechanism`` variant utility is true allocated value minus the VCG
    payment; for the ``primal`` variant (the unpruned algorithm run as an
    auction with no payments) it is the true value of the accepted option.
    """
    if variant not in AUDIT_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    true_inst = normalize_rows(scenario.true_instance)
    reported = normalize_rows(scenario.reported_instance())
    n = true_inst.num_requests
    if n > MAX_AUDIT_REQUESTS:
        raise SizeLimitError(f"audit supports n <= {MAX_AUDIT_REQUESTS} bidders")
    if any(len(r.options) > MAX_AUDIT_OPTIONS for r in true_inst.requests):
        raise SizeLimitError(f"audit supports <= {MAX_AUDIT_OPTIONS} options per bidder")
    capacities = np.asarray(true_inst.capacities)
    sample_len = int(math.floor(sampling_p * n))
    solve_cache: dict = {}

    def cached_solve(f, S, allowed):
        key = (round(f, 15), tuple(sorted(S)),
               tuple(sorted((q, tuple(ks)) for q, ks in allowed.items()))
               if allowed is not None else None)
        if key not in solve_cache:
            solve_cache[key] = solve_packing(
                reported, f, S, engine=engine, allowed_options=allowed
            )[0]
        return solve_cache[key]

    def recurse(pos: int, y: tuple[float, ...], survivors: tuple) -> float:
        if pos == n:
            return 0.0
        j = permutation[pos]
        ell = pos + 1
        S = list(permutation[:ell])
        if variant == "mechanism":
            surv_j = tuple(sorted(prune_infeasible_options(reported, y, j)))
            survivors = survivors + ((j, surv_j),)
        if pos < sample_len:
            return recurse(pos + 1, y, survivors)
        allowed = dict(survivors) if variant == "mechanism" else None
        xtilde = cached_solve(ell / n, S, allowed)
        row = sorted((k, v) for (q, k), v in xtilde.values.items() if q == j)
        probs = [max(0.0, v) for _, v in row]
        total = sum(probs)
        scale = total if total > 1.0 else 1.0
        payment = 0.0
        if variant == "mechanism" and j == bidder:
            payment = vcg_payment(
                reported, ell / n, S, j, xtilde, engine=engine, allowed_options=allowed
            )
        expected = (1.0 - total / scale) * (recurse(pos + 1, y, survivors) - (
            payment if j == bidder else 0.0
        ))
        true_options = true_inst.requests[j].options
        for (k, _), prob in zip(row, probs):
            if prob <= 0.0:
                continue
            option = true_options[k]
            gain = 0.0
            y_next = y
            if variant == "mechanism":
                allocate = True
            else:
                allocate = feasibility_test(y, option.consumption, capacities)
            if allocate:
                y_list = list(y)
                for i, a in option.consumption.items():
                    y_list[i] += a
                y_next = tuple(y_list)
                gain = option.profit
            contribution = recurse(pos + 1, y_next, survivors)
            if j == bidder:
                contribution += gain - payment
            expected += (prob / scale) * contribution
        return expected

    return recurse(0, tuple(0.0 for _ in range(true_inst.num_resources)), ())


@dataclass(frozen=True)
class AuditViolation:
    bidder: int
    permutation: tuple[int, ...]
    deviation: str
    truthful_utility: float
    deviated_utility: float


@dataclass(frozen=True)
class AuditReport:
    scenario_name: str
    variant: str
    checked: int
    violations: tuple[AuditViolation, ...]

    @property
    def passed(self) -> bool:
        return not self.violations


DEFAULT_DEVIATION_GRID = (0.0, 0.5, 2.0)


def _deviations_for(profits: tuple[float, ...], grid) -> list[tuple[str, tuple[float, ...]]]:
    devs = []
    for g in grid:
        if g == 1.0:
            continue
        devs.append((f"scale x{g:g}", tuple(g * p for p in profits)))
    for k in range(len(profits)):
        zeroed = tuple(0.0 if t == k else p for t, p in enumerate(profits))
        devs.append((f"zero option {k}", zeroed))
    return devs


def truthfulness_audit(
    scenario: BidderScenario,
    deviation_grid=DEFAULT_DEVIATION_GRID,
    *,
    variant: str = "mechanism",
    engine: str = "bland",
    sampling_p: float = 0.0,
    tol: float = 1e-7,
) -> AuditReport:
    """Compare truthful vs deviated expected utility for every bidder.

    Every arrival order is checked separately (the truthfulness claim holds
    even when bidders know the order in advance). Deviations are
    multiplicative scalings of the full report vector plus zeroing each
    single option. A violation is a deviation strictly profitable beyond
    ``tol``.
    """
    inst = scenario.true_instance
    n = inst.num_requests
    violations: list[AuditViolation] = []
    checked = 0
    for perm in iter_permutations(range(n)):
        utility_cache: dict[int, float] = {}
        for bidder in range(n):
            true_profits = tuple(o.profit for o in inst.requests[bidder].options)
            if bidder not in utility_cache:
                utility_cache[bidder] = expected_utility_exact(
                    scenario, bidder, perm,
                    variant=variant, engine=engine, sampling_p=sampling_p,
                )
            u_truth = utility_cache[bidder]
            for label, dev_profits in _deviations_for(true_profits, deviation_grid):
                u_dev = expected_utility_exact(
                    scenario.with_report(bidder, dev_profits), bidder, perm,
                    variant=variant, engine=engine, sampling_p=sampling_p,
                )
                checked += 1
                if u_dev > u_truth + tol:
                    violations.append(AuditViolation(
                        bidder=bidder,
                        permutation=tuple(perm),
                        deviation=label,
                        truthful_utility=u_truth,
                        deviated_utility=u_dev,
                    ))
    return AuditReport(
        scenario_name=inst.name,
        variant=variant,
        checked=checked,
        violations=tuple(violations),
    )


# ---------------------------------------------------------------------------
# Pinned audit scenarios
# ---------------------------------------------------------------------------

def primal_counterexample_scenario() -> tuple[BidderScenario, tuple[int, ...]]:
    """A scenario where the unpruned algorithm rewards misreporting.

    Bidder 0 arrives first and with certainty occupies half of resource 0.
    Bidder 1's higher-profit option then no longer fits, yet the LP still
    routes rounding mass to it; zeroing that option's report moves the mass
    to the fitting option and strictly raises bidder 1's expected utility.
    The pruned mechanism removes the unfit option by itself, so the same
    scenario audits clean there.
    """
    inst = PackingInstance(
        "primal-counterexample",
        (1.0, 1.0),
        (
            Request((Option(5.0, {0: 0.5}),)),
            Request((Option(10.0, {0: 1.0}), Option(4.0, {1: 1.0}))),
        ),
    )
    return BidderScenario(inst), (0, 1)


def pinned_scenarios(count: int = 20) -> list[BidderScenario]:
    """Deterministic suite of tiny scenarios for the truthfulness audit."""
    scenarios = [
        # single bidder, single feasible option
        BidderScenario(PackingInstance("solo", (1.0,), (
            Request((Option(3.0, {0: 1.0}),)),
        ))),
        # two identical bidders fighting for one unit
        BidderScenario(PackingInstance("duel", (1.0,), (
            Request((Option(2.0, {0: 1.0}),)),
            Request((Option(2.0, {0: 1.0}),)),
        ))),
        # asymmetric profits, one unit
        BidderScenario(PackingInstance("duel-asym", (1.0,), (
            Request((Option(1.0, {0: 1.0}),)),
            Request((Option(2.0, {0: 1.0}),)),
        ))),
        # the counterexample instance, audited under the pruned mechanism
        primal_counterexample_scenario()[0],
    ]
    rng = np.random.default_rng(20240501)
    grid = 8
    while len(scenarios) < count:
        m = int(rng.integers(1, 3))
        n = int(rng.integers(2, 4))
        requests = []
        for _ in range(n):
            options = []
            for _ in range(int(rng.integers(1, 3))):
                spread = rng.choice(m, size=int(rng.integers(1, m + 1)), replace=False)
                cons = {int(i): float(rng.integers(1, grid + 1)) / grid for i in spread}
                options.append(Option(float(rng.integers(1, 4 * grid)) / grid, cons))
            requests.append(Request(tuple(options)))
        caps = tuple(float(rng.integers(grid // 2, 2 * grid)) / grid for _ in range(m))
        scenarios.append(
            BidderScenario(PackingInstance(f"pinned-{len(scenarios)}", caps, tuple(requests)))
        )
    return scenarios
