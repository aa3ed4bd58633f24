"""Online packing by scaled-LP rounding in the random-order model.

Each round reveals one request. The algorithm solves the LP restricted to
everything seen so far with capacities scaled by (round / n), reads the
arriving request's fractional row as a probability distribution over its
options, rounds, and keeps the tentative choice only if it fits the real
(unscaled) capacities. The sampled variant skips the first floor(p * n)
rounds entirely except for revealing the requests.
"""
from __future__ import annotations

import math
from bisect import insort
from dataclasses import dataclass, field
from itertools import permutations as iter_permutations

import numpy as np

from .instances import PackingInstance, normalize_rows
from .lp import (
    CompiledPacking,
    FractionalSolution,
    SizeLimitError,
    solve_compiled,
)

CAPACITY_TOL = 1e-9
DISTRIBUTION_TOL = 1e-9


class DistributionError(ValueError):
    """Raised when a fractional row sums to more than one beyond tolerance."""


@dataclass(frozen=True)
class RoundLog:
    """What happened in one online round."""

    round_index: int                      # 1-based position in the arrival order
    request_id: int
    scaled_lp_objective: float
    tentative_option: int | None
    accepted: bool
    consumption_after: tuple[float, ...]  # accepted consumption, normalized units
    sampled: bool = False


@dataclass(frozen=True)
class RunOutcome:
    """Full log of one online execution plus its competitive ratio."""

    rounds: tuple[RoundLog, ...]
    allocation: dict[tuple[int, int], int]
    alg_value: float
    opt_value: float
    ratio: float


def default_sampling_p(B: float, d: int) -> float:
    """Sampling-phase fraction 1 - (1/2e) * (1/2d)^(1/(B-1)) for known B, d."""
    if B < 2:
        raise ValueError(f"sampling fraction requires B >= 2 (got {B})")
    if d < 1:
        raise ValueError(f"column sparsity must be >= 1 (got {d})")
    return 1.0 - (1.0 / (2.0 * math.e)) * (1.0 / (2.0 * d)) ** (1.0 / (B - 1.0))


def _choose_from_probabilities(probs, rng) -> int | None:
    """One index draw from a sub-distribution, consuming one uniform variate.

    Sums above 1 within tolerance are renormalized; anything larger is a
    contract violation of the upstream solver.
    """
    total = 0.0
    for p in probs:
        total += p
    if total > 1.0 + DISTRIBUTION_TOL:
        raise DistributionError(f"option probabilities sum to {total!r} > 1")
    scale = total if total > 1.0 else 1.0
    u = float(rng.random()) * scale
    acc = 0.0
    for k, p in enumerate(probs):
        acc += p
        if u < acc:
            return k
    return None


def round_tentative(xtilde: FractionalSolution, j: int, rng) -> int | None:
    """Round request j's fractional row to one option index (or None)."""
    row = sorted(
        (k, v) for (jj, k), v in xtilde.values.items() if jj == j
    )
    probs = [max(0.0, v) for _, v in row]
    choice = _choose_from_probabilities(probs, rng)
    return None if choice is None else row[choice][0]


def feasibility_test(
    y_consumption, option_consumption: dict[int, float], capacities
) -> bool:
    """True iff adding the option keeps every resource within capacity."""
    for i, a in option_consumption.items():
        if y_consumption[i] + a > capacities[i] + CAPACITY_TOL:
            return False
    return True


def _run_online(
    instance: PackingInstance,
    permutation,
    rng,
    *,
    sample_len: int,
    engine: str,
    scale_with_round: bool = True,
    opt_value: float | None = None,
) -> RunOutcome:
    """Shared round loop for the plain, sampled, and full-capacity variants."""
    inst = normalize_rows(instance)
    n = inst.num_requests
    if sorted(permutation) != list(range(n)):
        raise ValueError("permutation must be a permutation of all request ids")
    cp = CompiledPacking(inst)
    capacities = np.asarray(inst.capacities)
    y = np.zeros(inst.num_resources)
    seen: list[int] = []
    allocation: dict[tuple[int, int], int] = {}
    alg_value = 0.0
    logs: list[RoundLog] = []
    for pos, j in enumerate(permutation):
        ell = pos + 1
        insort(seen, j)
        if pos < sample_len:
            logs.append(
                RoundLog(ell, j, 0.0, None, False, tuple(y), sampled=True)
            )
            continue
        f = ell / n if scale_with_round else 1.0
        x, objective, _ = solve_compiled(cp, f, seen, engine=engine)
        offset = 0
        for q in seen:
            if q == j:
                break
            offset += cp.block_ncols[q]
        k_options = cp.block_ncols[j]
        tentative = _choose_from_probabilities(
            np.maximum(x[offset:offset + k_options], 0.0), rng
        )
        accepted = False
        if tentative is not None:
            consumption = inst.requests[j].options[tentative].consumption
            if feasibility_test(y, consumption, capacities):
                for i, a in consumption.items():
                    y[i] += a
                allocation[(j, tentative)] = 1
                alg_value += inst.requests[j].options[tentative].profit
                accepted = True
        logs.append(RoundLog(ell, j, objective, tentative, accepted, tuple(y)))
    if opt_value is None:
        if n:
            _, opt_value, _ = solve_compiled(cp, 1.0, list(range(n)), engine=engine)
        else:
            opt_value = 0.0
    ratio = alg_value / opt_value if opt_value > 0 else 1.0
    return RunOutcome(
        rounds=tuple(logs),
        allocation=allocation,
        alg_value=alg_value,
        opt_value=opt_value,
        ratio=ratio,
    )


def run_primal(
    instance: PackingInstance,
    permutation,
    rng,
    *,
    engine: str = "bland",
    opt_value: float | None = None,
) -> RunOutcome:
    """One execution of the scaled-LP rounding algorithm over an arrival order."""
    return _run_online(
        instance, permutation, rng, sample_len=0, engine=engine, opt_value=opt_value
    )


def run_primal_sampled(
    instance: PackingInstance,
    p: float,
    permutation,
    rng,
    *,
    engine: str = "bland",
    opt_value: float | None = None,
) -> RunOutcome:
    """Scaled-LP rounding with an initial observation-only phase.

    The first floor(p * n) requests only join the visible set: no LP solve,
    no rounding, no allocation. With p = 0 this is exactly ``run_primal``
    on the same random stream.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"sampling fraction p must be in [0, 1) (got {p})")
    n = instance.num_requests
    return _run_online(
        instance,
        permutation,
        rng,
        sample_len=int(math.floor(p * n)),
        engine=engine,
        opt_value=opt_value,
    )


# ---------------------------------------------------------------------------
# Exact expectation by exhaustive enumeration (test oracle)
# ---------------------------------------------------------------------------

MAX_ENUMERATION_REQUESTS = 4


def expected_alg_for_permutation(
    instance: PackingInstance,
    permutation,
    *,
    sampling_p: float = 0.0,
    engine: str = "bland",
    _cache: dict | None = None,
) -> float:
    """Exact E[ALG] for one fixed arrival order, enumerating every branch."""
    inst = normalize_rows(instance)
    n = inst.num_requests
    if n > MAX_ENUMERATION_REQUESTS:
        raise SizeLimitError(
            f"exhaustive enumeration supports n <= {MAX_ENUMERATION_REQUESTS}"
        )
    cp = CompiledPacking(inst)
    capacities = np.asarray(inst.capacities)
    sample_len = int(math.floor(sampling_p * n))
    cache = _cache if _cache is not None else {}

    def row_for(pos: int, j: int):
        seen = tuple(sorted(permutation[: pos + 1]))
        key = seen
        if key not in cache:
            cache[key] = solve_compiled(cp, (pos + 1) / n, list(seen), engine=engine)
        x, _, _ = cache[key]
        offset = 0
        for q in seen:
            if q == j:
                break
            offset += cp.block_ncols[q]
        return np.maximum(x[offset:offset + cp.block_ncols[j]], 0.0)

    def recurse(pos: int, y: tuple[float, ...]) -> float:
        if pos == n:
            return 0.0
        j = permutation[pos]
        if pos < sample_len:
            return recurse(pos + 1, y)
        probs = row_for(pos, j)
        total = float(probs.sum())
        if total > 1.0 + DISTRIBUTION_TOL:
            raise DistributionError(f"option probabilities sum to {total!r} > 1")
        scale = total if total > 1.0 else 1.0
        expected = (1.0 - total / scale) * recurse(pos + 1, y)
        options = inst.requests[j].options
        for k, prob in enumerate(probs):
            if prob <= 0.0:
                continue
            gain = 0.0
            y_next = y
            if feasibility_test(y, options[k].consumption, capacities):
                gain = options[k].profit
                y_list = list(y)
                for i, a in options[k].consumption.items():
                    y_list[i] += a
                y_next = tuple(y_list)
            expected += (prob / scale) * (gain + recurse(pos + 1, y_next))
        return expected

    return recurse(0, tuple(0.0 for _ in range(inst.num_resources)))


def expected_alg_exact(
    instance: PackingInstance,
    *,
    sampling_p: float = 0.0,
    engine: str = "bland",
) -> float:
    """Exact E[ALG] over the uniform arrival order and all rounding branches."""
    n = instance.num_requests
    if n == 0:
        return 0.0
    cache: dict = {}
    total = 0.0
    count = 0
    for perm in iter_permutations(range(n)):
        total += expected_alg_for_permutation(
            instance, perm, sampling_p=sampling_p, engine=engine, _cache=cache
        )
        count += 1
    return total / count
