"""Exact fractional solver for scaled packing LPs with dual certificates.

The scaled LP over a request subset S with scale f restricts allocation to
requests in S and multiplies every capacity by f:

    max  sum c[j,k] x[j,k]
    s.t. sum_{j,k} a[i,j,k] x[j,k] <= f * b[i]   for every resource i
         sum_k x[j,k] <= 1                       for every request j in S
         x >= 0,  x[j,k] = 0 outside S

Two interchangeable engines sit behind the same contract:

* ``bland`` -- a dense two-phase tableau simplex with Bland's anti-cycling
  rule. Fully deterministic pivot order; the reference engine.
* ``highs`` -- HiGHS through SciPy's vendored bindings (one solver object
  per process, options pinned once). Deterministic for identical inputs and
  roughly two orders of magnitude faster on the Monte-Carlo workloads.

Both return a basis-exact dual certificate. ``brute_force_fractional_opt``
is the independent test oracle: exhaustive enumeration of basic solutions
in exact rational arithmetic.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np

from .instances import PackingInstance

FEASIBILITY_TOL = 1e-9
OPTIMALITY_TOL = 1e-7

_PIVOT_TOL = 1e-10


class SolverLimitError(RuntimeError):
    """Pivot budget exceeded; carries the budget and the last objective seen."""

    def __init__(self, limit: int, last_objective: float):
        super().__init__(
            f"simplex exceeded its pivot budget of {limit} "
            f"(last objective {last_objective!r})"
        )
        self.limit = limit
        self.last_objective = last_objective


class SolverError(RuntimeError):
    """Unexpected solver failure (non-optimal status on a feasible LP)."""


class SizeLimitError(ValueError):
    """Problem too large for the exhaustive exact oracle."""


@dataclass(frozen=True)
class FractionalSolution:
    """Primal optimum of a scaled LP; values keyed by (request, option)."""

    values: dict[tuple[int, int], float]
    objective: float

    def request_row(self, j: int, num_options: int) -> list[float]:
        return [self.values.get((j, k), 0.0) for k in range(num_options)]


@dataclass(frozen=True)
class DualCertificate:
    """Feasible dual solution proving optimality of the paired primal."""

    resource_prices: tuple[float, ...]
    request_prices: dict[int, float]
    dual_objective: float


# ---------------------------------------------------------------------------
# Column assembly
# ---------------------------------------------------------------------------

class CompiledPacking:
    """Per-request column blocks of an instance, precomputed for fast solves.

    Columns are always laid out request-major in ascending request id with
    options in ascending option index, so every engine sees the identical
    matrix for a given (f, S) and the returned optimum is reproducible.
    """

    def __init__(self, instance: PackingInstance):
        self.instance = instance
        self.m = instance.num_resources
        self.capacities = np.asarray(instance.capacities, dtype=np.float64)
        self.block_profits: list[np.ndarray] = []
        self.block_res_idx: list[np.ndarray] = []   # flat resource indices
        self.block_values: list[np.ndarray] = []    # entries incl. request-row 1.0
        self.block_req_pos: list[np.ndarray] = []   # positions of request-row entries
        self.block_indptr: list[np.ndarray] = []    # per-block column pointer (local)
        self.block_ncols: list[int] = []
        for req in instance.requests:
            profits, res_idx, values, req_pos, indptr = [], [], [], [], [0]
            pos = 0
            for opt in req.options:
                profits.append(opt.profit)
                for i in sorted(opt.consumption):
                    res_idx.append(i)
                    values.append(opt.consumption[i])
                    pos += 1
                res_idx.append(-1)          # request-row slot, patched per solve
                values.append(1.0)
                req_pos.append(pos)
                pos += 1
                indptr.append(pos)
            self.block_profits.append(np.asarray(profits, dtype=np.float64))
            self.block_res_idx.append(np.asarray(res_idx, dtype=np.int32))
            self.block_values.append(np.asarray(values, dtype=np.float64))
            self.block_req_pos.append(np.asarray(req_pos, dtype=np.int64))
            self.block_indptr.append(np.asarray(indptr, dtype=np.int32))
            self.block_ncols.append(len(req.options))

    def assemble(self, ordered_requests: Sequence[int]):
        """CSC arrays for the subset LP; requests must be sorted ascending."""
        m = self.m
        profits = np.concatenate([self.block_profits[j] for j in ordered_requests]) \
            if ordered_requests else np.empty(0)
        values = np.concatenate([self.block_values[j] for j in ordered_requests]) \
            if ordered_requests else np.empty(0)
        indices = np.concatenate([self.block_res_idx[j] for j in ordered_requests]) \
            if ordered_requests else np.empty(0, dtype=np.int32)
        sizes = [self.block_res_idx[j].size for j in ordered_requests]
        starts = np.concatenate([[0], np.cumsum(sizes)]) if sizes else np.zeros(1)
        # patch request-row entries: request rank r occupies matrix row m + r
        rank = 0
        for pos, j in enumerate(ordered_requests):
            if self.block_ncols[j] == 0:
                continue
            indices[starts[pos] + self.block_req_pos[j]] = m + rank
            rank += 1
        indptr_parts = [np.zeros(1, dtype=np.int64)]
        for pos, j in enumerate(ordered_requests):
            if self.block_ncols[j]:
                indptr_parts.append(self.block_indptr[j][1:] + starts[pos])
        indptr = np.concatenate(indptr_parts)
        col_requests = [j for j in ordered_requests for _ in range(self.block_ncols[j])]
        n_req_rows = rank
        return profits, indices, values, indptr, col_requests, n_req_rows


def _column_list(
    instance: PackingInstance,
    S: Iterable[int],
    allowed_options: Mapping[int, Iterable[int]] | None,
) -> list[tuple[int, int]]:
    cols = []
    for j in sorted(set(S)):
        if j < 0 or j >= instance.num_requests:
            raise ValueError(f"request id {j} out of range")
        n_opts = len(instance.requests[j].options)
        if allowed_options is not None and j in allowed_options:
            ks = sorted(set(allowed_options[j]))
            if any(k < 0 or k >= n_opts for k in ks):
                raise ValueError(f"option index out of range for request {j}")
        else:
            ks = range(n_opts)
        cols.extend((j, k) for k in ks)
    return cols


def _dense_arrays(
    instance: PackingInstance, f: float, cols: list[tuple[int, int]]
):
    """Dense G, h, c for the subset LP with the canonical column order."""
    m = instance.num_resources
    req_ids = sorted({j for j, _ in cols})
    req_row = {j: m + r for r, j in enumerate(req_ids)}
    n_rows = m + len(req_ids)
    G = np.zeros((n_rows, len(cols)))
    c = np.zeros(len(cols))
    for idx, (j, k) in enumerate(cols):
        opt = instance.requests[j].options[k]
        c[idx] = opt.profit
        for i, a in opt.consumption.items():
            G[i, idx] = a
        G[req_row[j], idx] = 1.0
    h = np.empty(n_rows)
    h[:m] = f * np.asarray(instance.capacities)
    h[m:] = 1.0
    return G, h, c, req_ids


# ---------------------------------------------------------------------------
# Engine: dense two-phase simplex, Bland's rule
# ---------------------------------------------------------------------------

def simplex_maximize(
    c: np.ndarray,
    G: np.ndarray,
    h: np.ndarray,
    max_pivots: int | None = None,
) -> tuple[np.ndarray, np.ndarray, float]:
    """max c.x s.t. Gx <= h, x >= 0, by two-phase tableau simplex.

    Bland's rule throughout: the entering column is the lowest-index column
    with an improving reduced cost and ratio-test ties leave the row whose
    basic variable has the lowest index, so the pivot sequence (and thus the
    returned vertex) is a pure function of the input.

    Returns (x, y, objective) where y are the dual prices of the rows.
    """
    n_rows, n_cols = G.shape
    if max_pivots is None:
        max_pivots = 200 * (n_rows + n_cols) + 1000

    flip = h < 0
    A = np.where(flip[:, None], -G, G)
    rhs = np.where(flip, -h, h)
    art_rows = np.nonzero(flip)[0]
    n_art = art_rows.size

    # columns: [structural | slack/surplus | artificial | rhs]
    total = n_cols + n_rows + n_art
    T = np.zeros((n_rows + 1, total + 1))
    T[:n_rows, :n_cols] = A
    T[:n_rows, total] = rhs
    slack_sign = np.where(flip, -1.0, 1.0)
    T[np.arange(n_rows), n_cols + np.arange(n_rows)] = slack_sign
    basis = np.array([n_cols + i for i in range(n_rows)], dtype=np.int64)
    for t, r in enumerate(art_rows):
        T[r, n_cols + n_rows + t] = 1.0
        basis[r] = n_cols + n_rows + t

    pivots_used = 0

    def run_phase(allowed: int) -> None:
        nonlocal pivots_used
        while True:
            obj_row = T[n_rows, :allowed]
            entering = -1
            for j in range(allowed):
                if obj_row[j] < -_PIVOT_TOL:
                    entering = j
                    break
            if entering < 0:
                return
            col = T[:n_rows, entering]
            best_ratio, leave = np.inf, -1
            for r in range(n_rows):
                if col[r] > _PIVOT_TOL:
                    ratio = T[r, total] / col[r]
                    if ratio < best_ratio - _PIVOT_TOL or (
                        ratio < best_ratio + _PIVOT_TOL
                        and (leave < 0 or basis[r] < basis[leave])
                    ):
                        best_ratio, leave = ratio, r
            if leave < 0:
                raise SolverError("LP is unbounded")
            if pivots_used >= max_pivots:
                raise SolverLimitError(max_pivots, -T[n_rows, total])
            pivots_used += 1
            T[leave] /= T[leave, entering]
            factors = T[:, entering].copy()
            factors[leave] = 0.0
            T[:, :] -= np.outer(factors, T[leave])
            T[:, entering] = 0.0
            T[leave, entering] = 1.0
            basis[leave] = entering

    if n_art:
        # phase 1: minimize the sum of artificials
        T[n_rows, :] = 0.0
        for t in range(n_art):
            T[n_rows, n_cols + n_rows + t] = 1.0
        for r in art_rows:
            T[n_rows] -= T[r]
        run_phase(n_cols + n_rows)  # artificials may leave but not enter
        if T[n_rows, total] < -FEASIBILITY_TOL * max(1.0, abs(rhs).max()):
            raise SolverError("LP is infeasible")
        # drive any basic artificial out, or drop its (redundant) row
        for r in range(n_rows):
            if basis[r] >= n_cols + n_rows:
                for j in range(n_cols + n_rows):
                    if abs(T[r, j]) > _PIVOT_TOL:
                        T[r] /= T[r, j]
                        factors = T[:, j].copy()
                        factors[r] = 0.0
                        T[:, :] -= np.outer(factors, T[r])
                        T[:, j] = 0.0
                        T[r, j] = 1.0
                        basis[r] = j
                        break

    # phase 2: minimize -c.x
    T[n_rows, :] = 0.0
    T[n_rows, :n_cols] = -c
    for r in range(n_rows):
        if basis[r] < n_cols:
            T[n_rows] += c[basis[r]] * T[r]
    run_phase(n_cols + n_rows)

    x = np.zeros(n_cols)
    for r in range(n_rows):
        if basis[r] < n_cols:
            x[basis[r]] = T[r, total]
    # the objective-row entry over row i's slack (or surplus) column is the
    # dual price of the original <= constraint, for either row orientation
    y = T[n_rows, n_cols:n_cols + n_rows]
    objective = T[n_rows, total]
    return x, np.maximum(y, 0.0), objective


# ---------------------------------------------------------------------------
# Engine: HiGHS
# ---------------------------------------------------------------------------

try:  # SciPy >= 1.15 vendors the highspy bindings
    import scipy.optimize._highspy._core as _highs_core  # type: ignore
except ImportError:  # pragma: no cover - exercised only on older SciPy
    _highs_core = None

_HIGHS_CACHE: tuple[int, object] | None = None


def _highs_solver():
    """One configured HiGHS object per process (rebuilt after fork)."""
    global _HIGHS_CACHE
    pid = os.getpid()
    if _HIGHS_CACHE is not None and _HIGHS_CACHE[0] == pid:
        return _HIGHS_CACHE[1]
    h = _highs_core._Highs()
    opts = _highs_core.HighsOptions()
    opts.output_flag = False
    opts.log_to_console = False
    opts.threads = 1
    opts.presolve = "off"
    opts.simplex_scale_strategy = 0
    opts.simplex_strategy = 4  # primal simplex
    opts.simplex_primal_edge_weight_strategy = 0
    opts.primal_feasibility_tolerance = 1e-9
    opts.dual_feasibility_tolerance = 1e-9
    h.passOptions(opts)
    _HIGHS_CACHE = (pid, h)
    return h


def _solve_highs_csc(profits, indices, values, indptr, rhs):
    """Solve max profits.x, CSC constraint matrix, rows <= rhs, x >= 0."""
    ncols = profits.size
    nrows = rhs.size
    if _highs_core is None:  # pragma: no cover
        from scipy import sparse
        from scipy.optimize import linprog

        A = sparse.csc_matrix((values, indices, indptr), shape=(nrows, ncols))
        res = linprog(-profits, A_ub=A, b_ub=rhs, bounds=(0, None), method="highs")
        if res.status != 0:
            raise SolverError(f"HiGHS failed: {res.message}")
        return res.x, -res.ineqlin.marginals, -res.fun
    h = _highs_solver()
    lp = _highs_core.HighsLp()
    lp.num_col_ = ncols
    lp.num_row_ = nrows
    lp.a_matrix_.num_col_ = ncols
    lp.a_matrix_.num_row_ = nrows
    lp.a_matrix_.format_ = _highs_core.MatrixFormat.kColwise
    lp.col_cost_ = -profits
    lp.col_lower_ = np.zeros(ncols)
    lp.col_upper_ = np.full(ncols, np.inf)
    lp.row_lower_ = np.full(nrows, -np.inf)
    lp.row_upper_ = rhs
    lp.a_matrix_.start_ = indptr
    lp.a_matrix_.index_ = indices
    lp.a_matrix_.value_ = values
    h.passModel(lp)
    h.run()
    status = h.getModelStatus()
    if status != _highs_core.HighsModelStatus.kOptimal:
        raise SolverError(f"HiGHS failed: {h.modelStatusToString(status)}")
    sol = h.getSolution()
    x = np.asarray(sol.col_value)
    y = np.maximum(-np.asarray(sol.row_dual), 0.0)
    return x, y, float(-h.getInfo().objective_function_value)


ENGINES = ("bland", "highs")


def solve_compiled(
    cp: CompiledPacking,
    f: float,
    ordered_requests: Sequence[int],
    engine: str = "highs",
) -> tuple[np.ndarray, float, np.ndarray]:
    """Fast-path subset solve on a precompiled instance.

    ``ordered_requests`` must be sorted ascending. Returns the raw column
    solution (request-major, option order), the objective, and the row
    duals; the arrays match ``solve_packing`` on the same subset exactly.
    """
    profits, indices, values, indptr, _, n_req_rows = cp.assemble(ordered_requests)
    ncols = profits.size
    m = cp.m
    nrows = m + n_req_rows
    if ncols == 0:
        return np.empty(0), 0.0, np.zeros(nrows)
    rhs = np.empty(nrows)
    rhs[:m] = f * cp.capacities
    rhs[m:] = 1.0
    if engine == "highs":
        x, y, objective = _solve_highs_csc(profits, indices, values, indptr, rhs)
    else:
        G = np.zeros((nrows, ncols))
        col_of_entry = np.repeat(np.arange(ncols), np.diff(indptr))
        G[indices, col_of_entry] = values
        x, y, objective = simplex_maximize(profits, G, rhs)
    return x, float(objective), y


def solve_packing(
    instance: PackingInstance,
    f: float,
    S: Iterable[int],
    *,
    engine: str = "bland",
    allowed_options: Mapping[int, Iterable[int]] | None = None,
    max_pivots: int | None = None,
) -> tuple[FractionalSolution, DualCertificate]:
    """Solve the scaled LP over request subset S with capacities f * b.

    ``allowed_options`` optionally restricts each request to a subset of its
    options (absent requests keep all options); excluded columns are removed
    from the LP entirely. Deterministic: identical inputs produce the
    identical optimum under either engine.
    """
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}; pick one of {ENGINES}")
    if f <= 0:
        raise ValueError(f"scale f must be positive (got {f})")
    cols = _column_list(instance, S, allowed_options)
    req_ids_all = sorted(set(S))
    if not cols:
        dual = DualCertificate(
            resource_prices=tuple(0.0 for _ in range(instance.num_resources)),
            request_prices={j: 0.0 for j in req_ids_all},
            dual_objective=0.0,
        )
        return FractionalSolution(values={}, objective=0.0), dual

    if engine == "bland":
        G, h, c, req_ids = _dense_arrays(instance, f, cols)
        x, y, objective = simplex_maximize(c, G, h, max_pivots=max_pivots)
    else:
        m = instance.num_resources
        req_ids = sorted({j for j, _ in cols})
        req_row = {j: m + r for r, j in enumerate(req_ids)}
        profits = np.empty(len(cols))
        nnz = sum(
            len(instance.requests[j].options[k].consumption) + 1 for j, k in cols
        )
        indices = np.empty(nnz, dtype=np.int32)
        values = np.empty(nnz)
        indptr = np.zeros(len(cols) + 1, dtype=np.int64)
        pos = 0
        for idx, (j, k) in enumerate(cols):
            opt = instance.requests[j].options[k]
            profits[idx] = opt.profit
            for i in sorted(opt.consumption):
                indices[pos] = i
                values[pos] = opt.consumption[i]
                pos += 1
            indices[pos] = req_row[j]
            values[pos] = 1.0
            pos += 1
            indptr[idx + 1] = pos
        rhs = np.empty(m + len(req_ids))
        rhs[:m] = f * np.asarray(instance.capacities)
        rhs[m:] = 1.0
        x, y, objective = _solve_highs_csc(profits, indices, values, indptr, rhs)

    m = instance.num_resources
    sol_values = {cols[idx]: float(x[idx]) for idx in range(len(cols))}
    request_prices = {j: 0.0 for j in req_ids_all}
    for r, j in enumerate(req_ids):
        request_prices[j] = float(y[m + r])
    resource_prices = tuple(float(v) for v in y[:m])
    dual_objective = float(
        f * np.dot(np.asarray(instance.capacities), y[:m]) + sum(request_prices.values())
    )
    return (
        FractionalSolution(values=sol_values, objective=float(objective)),
        DualCertificate(
            resource_prices=resource_prices,
            request_prices=request_prices,
            dual_objective=dual_objective,
        ),
    )


def verify_duality(
    instance: PackingInstance,
    f: float,
    S: Iterable[int],
    primal: FractionalSolution,
    dual: DualCertificate,
    allowed_options: Mapping[int, Iterable[int]] | None = None,
) -> float:
    """Worst violation among primal feasibility, dual feasibility, objectives.

    Zero (within tolerance) certifies that the primal is optimal for the
    scaled LP; any capacity overshoot, dual violation, or objective gap
    surfaces as a positive return value.
    """
    m = instance.num_resources
    S = set(S)
    consumption = np.zeros(m)
    per_request: dict[int, float] = {}
    objective = 0.0
    worst = 0.0
    for (j, k), v in primal.values.items():
        if j not in S:
            worst = max(worst, abs(v))
            continue
        worst = max(worst, -v)
        opt = instance.requests[j].options[k]
        for i, a in opt.consumption.items():
            consumption[i] += a * v
        per_request[j] = per_request.get(j, 0.0) + v
        objective += opt.profit * v
    capacities = np.asarray(instance.capacities)
    if m:
        worst = max(worst, float(np.max(consumption - f * capacities, initial=0.0)))
    for j, tot in per_request.items():
        worst = max(worst, tot - 1.0)
    worst = max(worst, abs(objective - primal.objective))
    # dual feasibility on every admissible column
    y = np.asarray(dual.resource_prices)
    worst = max(worst, float(np.max(-y, initial=0.0)))
    for j in S:
        u_j = dual.request_prices.get(j, 0.0)
        worst = max(worst, -u_j)
        options = instance.requests[j].options
        ks = (
            allowed_options[j]
            if allowed_options is not None and j in allowed_options
            else range(len(options))
        )
        for k in ks:
            opt = options[k]
            covered = u_j + sum(a * y[i] for i, a in opt.consumption.items())
            worst = max(worst, opt.profit - covered)
    worst = max(worst, abs(primal.objective - dual.dual_objective))
    return worst


# ---------------------------------------------------------------------------
# Exact rational oracle
# ---------------------------------------------------------------------------

def _solve_exact(A: list[list[Fraction]], rhs: list[Fraction]) -> list[Fraction] | None:
    """Solve a square rational system; None if singular."""
    t = len(rhs)
    M = [row[:] + [rhs[r]] for r, row in enumerate(A)]
    for col in range(t):
        pivot_row = next((r for r in range(col, t) if M[r][col] != 0), None)
        if pivot_row is None:
            return None
        M[col], M[pivot_row] = M[pivot_row], M[col]
        inv = Fraction(1, 1) / M[col][col]
        M[col] = [v * inv for v in M[col]]
        for r in range(t):
            if r != col and M[r][col] != 0:
                factor = M[r][col]
                M[r] = [v - factor * p for v, p in zip(M[r], M[col])]
    return [M[r][t] for r in range(t)]


def brute_force_fractional_opt(
    instance: PackingInstance,
    f: float,
    S: Iterable[int],
    max_variables: int = 12,
) -> float:
    """Exact optimum of the scaled LP by enumerating all basic solutions.

    Every candidate vertex is the solution of a square rational system: a
    choice of active rows paired with an equally sized support of nonzero
    variables. Entirely independent of the simplex code paths; intended as
    a test oracle for tiny instances only.
    """
    cols = _column_list(instance, S, None)
    N = len(cols)
    if N == 0:
        return 0.0
    if N > max_variables:
        raise SizeLimitError(
            f"{N} variables exceeds the exact-oracle limit of {max_variables}"
        )
    m = instance.num_resources
    req_ids = sorted({j for j, _ in cols})
    req_row = {j: m + r for r, j in enumerate(req_ids)}
    n_rows = m + len(req_ids)
    A = [[Fraction(0) for _ in range(N)] for _ in range(n_rows)]
    c = []
    for idx, (j, k) in enumerate(cols):
        opt = instance.requests[j].options[k]
        c.append(Fraction(opt.profit))
        for i, a in opt.consumption.items():
            A[i][idx] = Fraction(a)
        A[req_row[j]][idx] = Fraction(1)
    rhs = [Fraction(f) * Fraction(b) for b in instance.capacities] + [
        Fraction(1) for _ in req_ids
    ]

    best = Fraction(0)  # x = 0 is always feasible (rhs >= 0)
    max_t = min(N, n_rows)
    for t in range(1, max_t + 1):
        for rows in combinations(range(n_rows), t):
            for support in combinations(range(N), t):
                sub = [[A[r][v] for v in support] for r in rows]
                if any(all(e == 0 for e in row) for row in sub):
                    continue
                x_sub = _solve_exact(sub, [rhs[r] for r in rows])
                if x_sub is None or any(v < 0 for v in x_sub):
                    continue
                feasible = True
                for r in range(n_rows):
                    lhs = sum(A[r][v] * x_sub[idx] for idx, v in enumerate(support))
                    if lhs > rhs[r]:
                        feasible = False
                        break
                if feasible:
                    value = sum(c[v] * x_sub[idx] for idx, v in enumerate(support))
                    if value > best:
                        best = value
    return float(best)
