"""Online generalized assignment: biased coin over a heavy and a light branch.

Options consuming more than half a bin are a matching problem in disguise
(no bin fits two of them), handled by a sample-then-commit secretary
matching. The remaining light options run the LP-rounding loop with an
initial observation phase and full (unscaled) capacities. A single biased
coin selects which restricted instance the whole run works on.
"""
from __future__ import annotations

import math

import numpy as np

from .instances import BinOption, GapInstance, gap_to_packing, normalize_rows, option_bins
from .lp import solve_packing
from .matching import solve_dense
from .online import CAPACITY_TOL, _run_online

DEFAULT_HEAVY_PROBABILITY = 1.0 / (1.0 + 16.0 / (3.0 * math.e))
DEFAULT_LIGHT_SAMPLING = 2.0 / 3.0


class HeavyLightSplit:
    """Partition of a GAP instance's options at half the bin capacity."""

    def __init__(self, heavy: GapInstance, light: GapInstance):
        self.heavy = heavy
        self.light = light


class GapRunOutcome:
    """One online GAP execution: branch taken, assignment, and ratios."""

    def __init__(
        self,
        branch: str,
        assignment: dict[int, int],
        alg_value: float,
        opt_value: float,
        opt_heavy: float,
        opt_light: float,
    ):
        self.branch = branch
        self.assignment = assignment
        self.alg_value = alg_value
        self.opt_value = opt_value
        self.opt_heavy = opt_heavy
        self.opt_light = opt_light
        self.ratio = alg_value / opt_value if opt_value > 0 else 1.0


def split_heavy_light(gap: GapInstance) -> HeavyLightSplit:
    """Options with size strictly above half the bin capacity go heavy.

    Every item appears in both restricted instances (possibly with an empty
    bin map), so arrival orders carry over unchanged.
    """
    heavy_items = []
    light_items = []
    for item in gap.items:
        heavy: dict[int, BinOption] = {}
        light: dict[int, BinOption] = {}
        for i, opt in item.items():
            if opt.size > 0.5 * gap.bin_capacities[i]:
                heavy[i] = opt
            else:
                light[i] = opt
        heavy_items.append(heavy)
        light_items.append(light)
    return HeavyLightSplit(
        heavy=GapInstance(f"{gap.name}-heavy", gap.bin_capacities, tuple(heavy_items)),
        light=GapInstance(f"{gap.name}-light", gap.bin_capacities, tuple(light_items)),
    )


def gap_fractional_opt(gap: GapInstance, *, engine: str = "bland") -> float:
    """Fractional optimum of the GAP LP relaxation over all items."""
    embed = normalize_rows(gap_to_packing(gap))
    if embed.num_requests == 0:
        return 0.0
    sol, _ = solve_packing(embed, 1.0, range(embed.num_requests), engine=engine)
    return sol.objective


def secretary_matching(
    heavy: GapInstance, permutation, rng=None
) -> tuple[dict[int, int], float]:
    """Sample-then-commit online edge-weighted matching on the heavy options.

    The first floor(n / e) items pass by unassigned. Each later item joins a
    fresh offline matching over everything seen so far versus all bins; its
    matched edge, if any, is committed exactly when that bin is still free.
    Deterministic given the arrival order: no random variate is consumed.
    """
    n = heavy.num_items
    m = heavy.num_bins
    profits = np.zeros((m, n))
    for j, item in enumerate(heavy.items):
        for i, opt in item.items():
            profits[i, j] = opt.profit
    sample_len = int(math.floor(n / math.e))
    assignment: dict[int, int] = {}
    used_bins: set[int] = set()
    value = 0.0
    for pos in range(sample_len, n):
        j = permutation[pos]
        seen = sorted(permutation[: pos + 1])
        pairs, _ = solve_dense(profits[:, seen])
        for bin_row, item_col in pairs:
            if seen[item_col] == j:
                if bin_row not in used_bins:
                    used_bins.add(bin_row)
                    assignment[j] = bin_row
                    value += profits[bin_row, j]
                break
    return assignment, value


def run_light_phase(
    light: GapInstance,
    p: float,
    permutation,
    rng,
    *,
    engine: str = "bland",
) -> tuple[dict[int, int], float]:
    """LP-rounding loop on the light options with unscaled capacities.

    The first floor(p * n) items are observed only. Every later item is
    rounded from the LP over all visible items at full capacities and kept
    when its size still fits the chosen bin. One uniform variate is
    consumed per processed item.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"sampling fraction p must be in [0, 1) (got {p})")
    n = light.num_items
    embed = gap_to_packing(light)
    outcome = _run_online(
        embed,
        permutation,
        rng,
        sample_len=int(math.floor(p * n)),
        engine=engine,
        scale_with_round=False,
        opt_value=0.0,
    )
    assignment = {
        j: option_bins(light.items[j])[k] for (j, k) in outcome.allocation
    }
    used = {}
    for j, i in assignment.items():
        used[i] = used.get(i, 0.0) + light.items[j][i].size
    for i, load in used.items():
        if load > light.bin_capacities[i] + CAPACITY_TOL:
            raise RuntimeError(f"bin {i} overfilled by the light phase: {load}")
    return assignment, outcome.alg_value


def run_gap(
    gap: GapInstance,
    lam: float = DEFAULT_HEAVY_PROBABILITY,
    p: float = DEFAULT_LIGHT_SAMPLING,
    permutation=None,
    rng=None,
    *,
    engine: str = "bland",
    precomputed_opts: tuple[float, float, float] | None = None,
) -> GapRunOutcome:
    """One online GAP run: heavy branch with probability lam, else light.

    The coin consumes one uniform variate before any branch work.
    ``precomputed_opts`` short-circuits the three offline LP optima
    (full, heavy, light) when the caller amortizes them across trials.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"heavy-branch probability must be in [0, 1] (got {lam})")
    if not 0.0 <= p < 1.0:
        raise ValueError(f"sampling fraction p must be in [0, 1) (got {p})")
    split = split_heavy_light(gap)
    if precomputed_opts is not None:
        opt_value, opt_heavy, opt_light = precomputed_opts
    else:
        opt_value = gap_fractional_opt(gap, engine=engine)
        opt_heavy = gap_fractional_opt(split.heavy, engine=engine)
        opt_light = gap_fractional_opt(split.light, engine=engine)
    heads = float(rng.random()) < lam
    if heads:
        assignment, value = secretary_matching(split.heavy, permutation, rng)
        branch = "heavy"
    else:
        assignment, value = run_light_phase(
            split.light, p, permutation, rng, engine=engine
        )
        branch = "light"
    return GapRunOutcome(
        branch=branch,
        assignment=assignment,
        alg_value=value,
        opt_value=opt_value,
        opt_heavy=opt_heavy,
        opt_light=opt_light,
    )
