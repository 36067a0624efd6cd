"""Exact Wasserstein-1 distance between discrete measures on the plane.

Two exact routes are used:

* uniform clouds whose sizes share a small common multiple are expanded to a
  square assignment problem (Birkhoff: some optimal plan is a permutation of
  the expanded atoms) and solved with the Hungarian method;
* everything else goes through the transportation simplex below, which stops
  once every reduced cost is non-negative to within ``tol``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from ._validation import SeedLike, as_generator, check_positions, check_probability_vector

ASSIGNMENT_LIMIT = 3000


@dataclass
class PointCloud:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = check_positions(self.points, name="points")
        self.weights = check_probability_vector(self.weights)
        if self.weights.shape[0] != self.points.shape[0]:
            raise ValueError("points and weights differ in length")

    @classmethod
    def uniform(cls, points) -> "PointCloud":
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("a point cloud needs at least one point")
        return cls(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))


@dataclass
class TransportSolution:
    cost: float
    plan: np.ndarray
    row_potential: np.ndarray
    col_potential: np.ndarray
    iterations: int
    min_reduced_cost: float


def solve_transport(supply, demand, cost, tol: float = 1e-9, max_iter: int | None = None) -> TransportSolution:
    """Transportation simplex (MODI pricing) for a balanced problem.

    ``supply`` and ``demand`` are non-negative with equal sums; ``cost`` has
    shape (len(supply), len(demand)). The basis is kept as a spanning tree of
    exactly n + m - 1 cells, degenerate zero-flow cells included.
    """
    a = np.asarray(supply, dtype=float)
    b = np.asarray(demand, dtype=float)
    C = np.asarray(cost, dtype=float)
    n, m = a.size, b.size
    if C.shape != (n, m):
        raise ValueError(f"cost shape {C.shape} does not match ({n}, {m})")
    if abs(a.sum() - b.sum()) > 1e-9 * max(1.0, a.sum()):
        raise ValueError("unbalanced transportation problem")
    if max_iter is None:
        max_iter = 50 * (n + m) * max(1, int(math.sqrt(n * m)))

    flow: dict[tuple[int, int], float] = {}
    rows_adj: list[set[int]] = [set() for _ in range(n)]
    cols_adj: list[set[int]] = [set() for _ in range(m)]

    def add(i, j, f):
        flow[(i, j)] = f
        rows_adj[i].add(j)
        cols_adj[j].add(i)

    def drop(i, j):
        del flow[(i, j)]
        rows_adj[i].discard(j)
        cols_adj[j].discard(i)

    # north-west corner start: one index advances per cell, n + m - 1 cells total
    s, d = a.copy(), b.copy()
    i = j = 0
    while True:
        x = min(s[i], d[j])
        add(i, j, x)
        s[i] -= x
        d[j] -= x
        if i == n - 1 and j == m - 1:
            break
        if j == m - 1 or (i < n - 1 and s[i] <= d[j]):
            i += 1
        else:
            j += 1

    u = np.zeros(n)
    v = np.zeros(m)
    it = 0
    scale = max(1.0, float(np.abs(C).max()))
    while True:
        # potentials: u_i + v_j = C_ij on the basis tree, rooted at row 0
        seen_r = np.zeros(n, bool)
        seen_c = np.zeros(m, bool)
        seen_r[0] = True
        u[0] = 0.0
        queue = deque([(0, 0)])
        while queue:
            kind, k = queue.popleft()
            if kind == 0:
                for jj in rows_adj[k]:
                    if not seen_c[jj]:
                        v[jj] = C[k, jj] - u[k]
                        seen_c[jj] = True
                        queue.append((1, jj))
            else:
                for ii in cols_adj[k]:
                    if not seen_r[ii]:
                        u[ii] = C[ii, k] - v[k]
                        seen_r[ii] = True
                        queue.append((0, ii))
        reduced = C - u[:, None] - v[None, :]
        flat = int(np.argmin(reduced))
        red_min = float(reduced.flat[flat])
        if red_min >= -tol * scale:
            break
        it += 1
        if it > max_iter:
            raise RuntimeError(f"transportation simplex did not converge in {max_iter} pivots")
        ei, ej = divmod(flat, m)

        # path in the tree from column ej back to row ei
        parent: dict[tuple[int, int], tuple[int, int] | None] = {(1, ej): None}
        queue = deque([(1, ej)])
        target = (0, ei)
        while queue:
            node = queue.popleft()
            if node == target:
                break
            kind, k = node
            nbrs = [(0, ii) for ii in cols_adj[k]] if kind == 1 else [(1, jj) for jj in rows_adj[k]]
            for nb in nbrs:
                if nb not in parent:
                    parent[nb] = node
                    queue.append(nb)
        cells = []
        node = target
        while parent[node] is not None:
            prev = parent[node]
            cell = (node[1], prev[1]) if node[0] == 0 else (prev[1], node[1])
            cells.append(cell)
            node = prev
        # cells run from row ei to column ej; the entering cell closes the cycle.
        # signs alternate starting with '-' on the cell adjacent to the entering row.
        minus = cells[0::2]
        plus = cells[1::2]
        theta = min(flow[c] for c in minus)
        leave = min((c for c in minus if flow[c] <= theta), key=lambda c: (flow[c], c))
        for c in minus:
            flow[c] -= theta
        for c in plus:
            flow[c] += theta
        drop(*leave)
        add(ei, ej, theta)

    plan = np.zeros((n, m))
    for (i, j), f in flow.items():
        plan[i, j] = max(f, 0.0)
    return TransportSolution(
        cost=float(np.sum(plan * C)),
        plan=plan,
        row_potential=u.copy(),
        col_potential=v.copy(),
        iterations=it,
        min_reduced_cost=red_min,
    )


def _uniform_assignment_cost(a: PointCloud, b: PointCloud) -> float | None:
    n, m = len(a), len(b)
    L = n * m // math.gcd(n, m)
    if L > ASSIGNMENT_LIMIT:
        return None
    pa = np.repeat(a.points, L // n, axis=0)
    pb = np.repeat(b.points, L // m, axis=0)
    C = cdist(pa, pb)
    r, c = linear_sum_assignment(C)
    return float(C[r, c].sum() / L)


def wasserstein1(a: PointCloud, b: PointCloud, *, method: str = "auto") -> float:
    """Exact W1 with Euclidean ground cost.

    ``method`` is ``"auto"``, ``"assignment"`` (uniform weights only) or
    ``"simplex"``.
    """
    if not isinstance(a, PointCloud) or not isinstance(b, PointCloud):
        raise TypeError("wasserstein1 expects PointCloud inputs")
    if method not in ("auto", "assignment", "simplex"):
        raise ValueError(f"unknown method {method!r}")
    if method != "simplex" and a.is_uniform and b.is_uniform:
        value = _uniform_assignment_cost(a, b)
        if value is not None:
            return value
        if method == "assignment":
            raise ValueError("clouds too large for the assignment route")
    elif method == "assignment":
        raise ValueError("the assignment route needs uniform weights")
    return solve_transport(a.weights, b.weights, cdist(a.points, b.points)).cost


@dataclass(frozen=True)
class MixtureSpec:
    """Gaussian mixture with diagonal covariances (entries are variances)."""

    weights: tuple[float, ...] = (0.5, 0.5)
    means: tuple[tuple[float, float], ...] = ((1.0, 0.0), (-1.0, 0.0))
    variances: tuple[tuple[float, float], ...] = ((0.05, 0.05), (0.05, 0.05))

    def __post_init__(self):
        k = len(self.weights)
        if len(self.means) != k or len(self.variances) != k:
            raise ValueError("weights, means and variances must have equal length")
        check_probability_vector(self.weights, name="mixture weights")
        if any(v < 0 for var in self.variances for v in var):
            raise ValueError("mixture variances must be non-negative")


def sample_gaussian_mixture(
    spec: MixtureSpec,
    n: int,
    seed: SeedLike,
    box_half_width: float | None = 2.0,
) -> PointCloud:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = as_generator(seed)
    comp = rng.choice(len(spec.weights), size=n, p=np.asarray(spec.weights))
    means = np.asarray(spec.means, dtype=float)[comp]
    std = np.sqrt(np.asarray(spec.variances, dtype=float))[comp]
    pts = means + std * rng.standard_normal(size=(n, 2))
    if box_half_width is not None:
        pts = np.clip(pts, -box_half_width, box_half_width)
    return PointCloud.uniform(pts)


FORMATION_TARGET = MixtureSpec()
