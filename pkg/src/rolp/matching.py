"""Maximum-weight bipartite matching with deterministic tie-breaking.

The core is a potential-based Hungarian solve (shortest augmenting paths)
on a padded square matrix. Optimal dual prices come out of the same run;
complementary slackness then identifies the subgraph of edges that can
appear in *some* optimal matching, and a greedy pass over that subgraph in
lexicographic edge order extracts the lexicographically smallest optimal
matching. Ties therefore break identically on every platform.

Zero-weight edges are never part of a returned matching.
"""
from __future__ import annotations

from typing import Mapping

import numpy as np

_TIGHT_TOL = 1e-9


def _hungarian_impl(cost):  # pragma: no cover - jitted; covered via wrapper
    """Min-cost perfect assignment on a square matrix, with potentials.

    Returns (row_of_col, u, v) where ``row_of_col[j]`` is the row assigned
    to column j and (u, v) are dual potentials with u[i] + v[j] <= cost[i, j]
    everywhere and equality on assignment edges.
    """
    N = cost.shape[0]
    INF = np.inf
    u = np.zeros(N + 1)
    v = np.zeros(N + 1)
    row_of_col = np.full(N + 1, -1, dtype=np.int64)
    way = np.zeros(N + 1, dtype=np.int64)
    minv = np.empty(N + 1)
    used = np.empty(N + 1, dtype=np.bool_)
    for i in range(N):
        row_of_col[N] = i
        j0 = N
        for j in range(N + 1):
            minv[j] = INF
            used[j] = False
        while row_of_col[j0] != -1:
            used[j0] = True
            i0 = row_of_col[j0]
            delta = INF
            j1 = -1
            for j in range(N):
                if not used[j]:
                    cur = cost[i0, j] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(N + 1):
                if used[j]:
                    u[row_of_col[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
        while j0 != N:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    return row_of_col[:N], u[:N], v[:N]


try:
    from numba import njit

    _hungarian = njit(cache=True)(_hungarian_impl)
except ImportError:  # pragma: no cover - numba is an optional speedup
    _hungarian = _hungarian_impl


class _LexRefiner:
    """Exchange greedy extracting the lex-smallest optimal matching.

    Works on the tight subgraph: by complementary slackness the optimal
    matchings are exactly the matchings of tight positive edges that
    saturate every positive-price vertex. A witness matching is maintained
    throughout; a candidate edge is accepted iff the witness can be rewired
    to contain it (drop-aware alternating paths: vertices with zero dual
    price may be left unmatched).
    """

    def __init__(
        self,
        tight_edges: list[tuple[int, int]],
        plus_rows: set[int],
        plus_cols: set[int],
        initial: list[tuple[int, int]],
    ):
        self.edges = sorted(set(tight_edges))
        self.plus_rows = plus_rows
        self.plus_cols = plus_cols
        self.adj_row: dict[int, list[int]] = {}
        self.adj_col: dict[int, list[int]] = {}
        for i, j in self.edges:
            self.adj_row.setdefault(i, []).append(j)
            self.adj_col.setdefault(j, []).append(i)
        self.row_match = {i: j for i, j in initial}
        self.col_match = {j: i for i, j in initial}
        self.excluded: set[tuple[int, int]] = set()
        self.fixed_rows: set[int] = set()
        self.fixed_cols: set[int] = set()

    def _resaturate_col(self, c: int, seen_cols: set[int]) -> bool:
        for r in self.adj_col.get(c, ()):
            if (r, c) in self.excluded or r in self.fixed_rows:
                continue
            c_prev = self.row_match.get(r)
            if c_prev == c:
                continue
            if c_prev is None:
                freed = True
            elif c_prev not in self.plus_cols:
                del self.col_match[c_prev]  # zero-price column may go unmatched
                freed = True
            elif c_prev not in seen_cols:
                seen_cols.add(c_prev)
                freed = self._resaturate_col(c_prev, seen_cols)
            else:
                freed = False
            if freed:
                self.row_match[r] = c
                self.col_match[c] = r
                return True
        return False

    def _resaturate_row(self, r: int, seen_rows: set[int]) -> bool:
        for c in self.adj_row.get(r, ()):
            if (r, c) in self.excluded or c in self.fixed_cols:
                continue
            r_prev = self.col_match.get(c)
            if r_prev == r:
                continue
            if r_prev is None:
                freed = True
            elif r_prev not in self.plus_rows:
                del self.row_match[r_prev]  # zero-price row may go unmatched
                freed = True
            elif r_prev not in seen_rows:
                seen_rows.add(r_prev)
                freed = self._resaturate_row(r_prev, seen_rows)
            else:
                freed = False
            if freed:
                self.row_match[r] = c
                self.col_match[c] = r
                return True
        return False

    def run(self) -> list[tuple[int, int]]:
        chosen: list[tuple[int, int]] = []
        for edge in self.edges:
            i, j = edge
            if i in self.fixed_rows or j in self.fixed_cols:
                continue
            if self.row_match.get(i) == j:
                chosen.append(edge)
                self.fixed_rows.add(i)
                self.fixed_cols.add(j)
                continue
            save_rm = dict(self.row_match)
            save_cm = dict(self.col_match)
            j_prev = self.row_match.pop(i, None)
            if j_prev is not None:
                del self.col_match[j_prev]
            i_prev = self.col_match.pop(j, None)
            if i_prev is not None:
                del self.row_match[i_prev]
            self.row_match[i] = j
            self.col_match[j] = i
            self.fixed_rows.add(i)
            self.fixed_cols.add(j)
            ok = True
            if j_prev is not None and j_prev in self.plus_cols:
                ok = self._resaturate_col(j_prev, {j_prev})
            if ok and i_prev is not None and i_prev in self.plus_rows:
                ok = self._resaturate_row(i_prev, {i_prev})
            if ok:
                chosen.append(edge)
            else:
                self.row_match = save_rm
                self.col_match = save_cm
                self.fixed_rows.discard(i)
                self.fixed_cols.discard(j)
                self.excluded.add(edge)
        return chosen


def solve_dense(W: np.ndarray) -> tuple[list[tuple[int, int]], float]:
    """Lexicographically smallest maximum-weight matching of a dense matrix.

    ``W`` has one row per left vertex and one column per right vertex; a
    zero entry means no usable edge. Matched pairs are returned as (row,
    col) index pairs together with the total weight.
    """
    R, C = W.shape
    if R == 0 or C == 0 or not np.any(W > 0.0):
        return [], 0.0
    # pad with at least one all-zero row and column so the perfect-matching
    # potentials normalize into valid duals of the unpadded problem
    N = max(R, C) + 1
    padded = np.zeros((N, N))
    padded[:R, :C] = W
    row_of_col, u, v = _hungarian(-padded)
    alpha = -u
    beta = -v
    shift = -beta.min()
    p = np.maximum(alpha[:R] - shift, 0.0)
    q = np.maximum(beta[:C] + shift, 0.0)
    scale = max(1.0, float(W.max()))
    tol = _TIGHT_TOL * scale
    tight = (p[:, None] + q[None, :] <= W + tol) & (W > 0.0)
    tight_edges = [(int(i), int(j)) for i, j in zip(*np.nonzero(tight))]
    plus_rows = {int(i) for i in np.nonzero(p > tol)[0]}
    plus_cols = {int(j) for j in np.nonzero(q > tol)[0]}
    if (
        tight.sum(axis=0).max(initial=0) <= 1
        and tight.sum(axis=1).max(initial=0) <= 1
    ):
        # every vertex has at most one tight edge: the optimum is unique
        chosen = tight_edges
    else:
        initial = [
            (int(row_of_col[j]), int(j))
            for j in range(C)
            if 0 <= row_of_col[j] < R and W[row_of_col[j], j] > 0.0
        ]
        chosen = _LexRefiner(tight_edges, plus_rows, plus_cols, initial).run()
        chosen.sort()
    total = float(sum(W[i, j] for i, j in chosen))
    hungarian_value = float(sum(
        W[row_of_col[j], j]
        for j in range(C)
        if 0 <= row_of_col[j] < R and W[row_of_col[j], j] > 0.0
    ))
    if total < hungarian_value - tol:
        # duals too degenerate to certify the tight subgraph; fall back to
        # the Hungarian matching itself (still deterministic, still optimal)
        chosen = sorted(
            (int(row_of_col[j]), int(j))
            for j in range(C)
            if 0 <= row_of_col[j] < R and W[row_of_col[j], j] > 0.0
        )
        total = hungarian_value
    return chosen, total


def max_weight_bipartite_matching(
    weights: Mapping[tuple[int, int], float],
) -> tuple[set[tuple[int, int]], float]:
    """Maximum-weight matching of a sparse (bin, item) -> weight map.

    Each bin and each item is used at most once; zero-weight edges are never
    included; among maximum-weight matchings the lexicographically smallest
    set of (bin, item) pairs is returned, so the result is deterministic.
    """
    if not weights:
        return set(), 0.0
    for (i, j), w in weights.items():
        if not np.isfinite(w) or w < 0:
            raise ValueError(f"weight for edge ({i}, {j}) must be finite and >= 0, got {w}")
    bins = sorted({i for i, _ in weights})
    items = sorted({j for _, j in weights})
    bin_pos = {b: t for t, b in enumerate(bins)}
    item_pos = {c: t for t, c in enumerate(items)}
    W = np.zeros((len(bins), len(items)))
    for (i, j), w in weights.items():
        W[bin_pos[i], item_pos[j]] = w
    chosen, total = solve_dense(W)
    return {(bins[i], items[j]) for i, j in chosen}, total
