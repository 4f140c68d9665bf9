"""Object-level data association between two keypoint sets.

Matching two sets of detected object centers (stereo pair or consecutive
frames) is framed as a linear sum assignment problem. The cost of pairing
two nodes compares the summed distances to their directional neighbor
sets — the relative geometry of rigid seed clusters is preserved across
views, while appearance is useless — plus a penalty on vertical offset,
since inter-frame and stereo displacement is predominantly horizontal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Keypoint2D, ValidationError

# Direction indices into the per-node neighbor-sum arrays.
_LEFT, _RIGHT, _TOP, _BOTTOM = 0, 1, 2, 3


@dataclass(frozen=True)
class AssocConfig:
    """Parameters of the association cost and the match filter.

    ``delta_px`` / ``epsilon_px`` define the directional neighbor windows.
    ``r_weight`` scales the four structure terms against the vertical
    offset term. A pairing whose four neighbor geometries agree perfectly
    scores ``4 * r_weight``, so ``cost_filter_threshold`` must sit above
    that with slack for vertical offset and partial windows.
    """

    delta_px: float = 102.4
    epsilon_px: float = 12.8
    r_weight: float = 10.0
    cost_filter_threshold: float = 90.0
    missing_neighbor_penalty: float = 1.0
    one_sided_missing_penalty: float = 4.0
    dummy_cost: float = 180.0
    symmetric_ratio: bool = False

    def __post_init__(self):
        if not (self.delta_px > self.epsilon_px > 0):
            raise ValidationError(
                f"need delta_px > epsilon_px > 0, got {self.delta_px}, {self.epsilon_px}"
            )
        if self.r_weight <= 0:
            raise ValidationError("r_weight must be positive")
        if self.cost_filter_threshold <= 0:
            raise ValidationError("cost_filter_threshold must be positive")
        if self.dummy_cost <= self.cost_filter_threshold:
            raise ValidationError(
                "dummy_cost must exceed cost_filter_threshold so dummy "
                "assignments are always filtered"
            )

    @classmethod
    def for_rig_width(cls, width_px: float, **overrides) -> "AssocConfig":
        """Scale the neighbor windows to the image resolution."""
        delta = width_px / 20.0
        base = dict(delta_px=delta, epsilon_px=delta / 8.0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {
            "delta_px": self.delta_px,
            "epsilon_px": self.epsilon_px,
            "r_weight": self.r_weight,
            "cost_filter_threshold": self.cost_filter_threshold,
            "missing_neighbor_penalty": self.missing_neighbor_penalty,
            "one_sided_missing_penalty": self.one_sided_missing_penalty,
            "dummy_cost": self.dummy_cost,
            "symmetric_ratio": self.symmetric_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AssocConfig":
        return cls(**d)


@dataclass
class NeighborSets:
    """The four directional neighbor sets of one node."""

    left: list[Keypoint2D] = field(default_factory=list)
    right: list[Keypoint2D] = field(default_factory=list)
    top: list[Keypoint2D] = field(default_factory=list)
    bottom: list[Keypoint2D] = field(default_factory=list)


@dataclass
class Assignment:
    """Result of associating set U to set V.

    ``pairs`` is a partial bijection (u_index, v_index, cost); indices
    absent from it are listed in ``unmatched_u`` / ``unmatched_v``.
    """

    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_u: list[int] = field(default_factory=list)
    unmatched_v: list[int] = field(default_factory=list)

    def as_index_map(self) -> dict[int, int]:
        return {u: v for u, v, _ in self.pairs}


def build_neighbor_sets(node: Keypoint2D, peers: list[Keypoint2D],
                        cfg: AssocConfig) -> NeighborSets:
    """Collect the peers falling in the four directional windows of
    ``node``. All window inequalities are strict; a peer may belong to
    several sets when the windows overlap."""
    a, b = node.x, node.y
    d, e = cfg.delta_px, cfg.epsilon_px
    sets = NeighborSets()
    for p in peers:
        dx = a - p.x
        dy = b - p.y
        if 0 < dx < d and abs(dy) < e:
            sets.left.append(p)
        if 0 < -dx < d and abs(dy) < e:
            sets.right.append(p)
        if 0 < dy < d and abs(dx) < e:
            sets.top.append(p)
        if 0 < -dy < d and abs(dx) < e:
            sets.bottom.append(p)
    return sets


def _distance_sum(node: Keypoint2D, members: list[Keypoint2D]) -> float:
    return sum(math.hypot(p.x - node.x, p.y - node.y) for p in members)


_EMPTY_SUM_FLOOR = 1e-12


def _structure_term(sum_u: float, sum_v: float, cfg: AssocConfig) -> float:
    """One directional term of the pairing cost, times 1/r.

    The ratio of neighbor-distance sums is 1 for identical local geometry.
    Empty windows cannot form a ratio: two empty windows are treated as
    agreement (neutral penalty), a one-sided empty window as mismatch
    evidence (larger penalty).
    """
    u_empty = sum_u <= _EMPTY_SUM_FLOOR
    v_empty = sum_v <= _EMPTY_SUM_FLOOR
    if u_empty and v_empty:
        return cfg.missing_neighbor_penalty
    if u_empty or v_empty:
        return cfg.one_sided_missing_penalty
    ratio = sum_u / sum_v
    if cfg.symmetric_ratio:
        ratio = max(ratio, 1.0 / ratio)
    return ratio


def pair_cost(u: Keypoint2D, v: Keypoint2D, u_sets: NeighborSets,
              v_sets: NeighborSets, cfg: AssocConfig) -> float:
    """Cost of associating node ``u`` (set U) with node ``v`` (set V)."""
    total = 0.0
    for u_members, v_members in ((u_sets.left, v_sets.left),
                                 (u_sets.right, v_sets.right),
                                 (u_sets.top, v_sets.top),
                                 (u_sets.bottom, v_sets.bottom)):
        total += cfg.r_weight * _structure_term(
            _distance_sum(u, u_members), _distance_sum(v, v_members), cfg)
    return total + abs(u.y - v.y)


def _neighbor_sums(points: np.ndarray, cfg: AssocConfig) -> np.ndarray:
    """Per-node distance sums over the four directional windows, (n, 4).

    Vectorized equivalent of build_neighbor_sets + per-set distance sums.
    """
    n = len(points)
    sums = np.zeros((n, 4))
    if n < 2:
        return sums
    dx = points[:, 0][:, None] - points[None, :, 0]  # a - c
    dy = points[:, 1][:, None] - points[None, :, 1]  # b - d
    dist = np.hypot(dx, dy)
    adx = np.abs(dx)
    ady = np.abs(dy)
    d, e = cfg.delta_px, cfg.epsilon_px
    masks = (
        (dx > 0) & (dx < d) & (ady < e),    # left
        (-dx > 0) & (-dx < d) & (ady < e),  # right
        (dy > 0) & (dy < d) & (adx < e),    # top
        (-dy > 0) & (-dy < d) & (adx < e),  # bottom
    )
    for k, m in enumerate(masks):
        sums[:, k] = np.where(m, dist, 0.0).sum(axis=1)
    return sums


def _as_array(kps: list[Keypoint2D]) -> np.ndarray:
    if not kps:
        return np.zeros((0, 2))
    return np.array([(k.x, k.y) for k in kps], dtype=float)


def cost_matrix(U: list[Keypoint2D], V: list[Keypoint2D],
                cfg: AssocConfig) -> np.ndarray:
    """Square cost matrix of side max(|U|, |V|); padded rows/columns for
    the smaller side carry ``cfg.dummy_cost``."""
    pu = _as_array(U)
    pv = _as_array(V)
    su = _neighbor_sums(pu, cfg)
    sv = _neighbor_sums(pv, cfg)
    n, m = len(U), len(V)
    side = max(n, m)
    costs = np.full((side, side), cfg.dummy_cost, dtype=float)
    if n and m:
        u_empty = su <= _EMPTY_SUM_FLOOR  # (n, 4)
        v_empty = sv <= _EMPTY_SUM_FLOOR  # (m, 4)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = su[:, None, :] / sv[None, :, :]  # (n, m, 4)
        if cfg.symmetric_ratio:
            ratio = np.maximum(ratio, 1.0 / ratio)
        both = u_empty[:, None, :] & v_empty[None, :, :]
        either = u_empty[:, None, :] | v_empty[None, :, :]
        ratio = np.where(either, cfg.one_sided_missing_penalty, ratio)
        ratio = np.where(both, cfg.missing_neighbor_penalty, ratio)
        vertical = np.abs(pu[:, 1][:, None] - pv[None, :, 1])
        costs[:n, :m] = cfg.r_weight * ratio.sum(axis=2) + vertical
    return costs


def solve_lsap(costs: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-cost assignment of a square matrix, Hungarian method.

    Potentials-with-augmenting-paths formulation of Kuhn-Munkres, O(n^3).
    Scan order is fixed (rows in order, lowest column index wins ties), so
    the result is deterministic. Returns (column_of_row, total_cost).
    """
    costs = np.asarray(costs, dtype=float)
    if costs.ndim != 2 or costs.shape[0] != costs.shape[1]:
        raise ValidationError(f"cost matrix must be square, got {costs.shape}")
    if not np.all(np.isfinite(costs)):
        raise ValidationError("cost matrix has non-finite entries")
    n = costs.shape[0]
    if n == 0:
        return np.zeros(0, dtype=int), 0.0

    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of_col = np.zeros(n + 1, dtype=int)  # 0 means unassigned; rows are 1-based
    prev_col = np.zeros(n + 1, dtype=int)

    for i in range(1, n + 1):
        row_of_col[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            cols = ~used[1:]
            reduced = costs[i0 - 1, :] - u[i0] - v[1:]
            better = cols & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            prev_col[1:][better] = j0
            # lowest column index wins ties via argmax on the first minimum
            masked = np.where(cols, minv[1:], INF)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[row_of_col[used]] += delta
            v[used] -= delta
            minv[1:][cols] -= delta
            j0 = j1
            if row_of_col[j0] == 0:
                break
        while j0:
            j1 = prev_col[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1

    col_of_row = np.zeros(n, dtype=int)
    for j in range(1, n + 1):
        col_of_row[row_of_col[j] - 1] = j - 1
    total = float(costs[np.arange(n), col_of_row].sum())
    return col_of_row, total


def associate(U: list[Keypoint2D], V: list[Keypoint2D],
              cfg: AssocConfig) -> Assignment:
    """Full association pipeline: neighbor structure, cost matrix,
    Hungarian assignment, then confidence filtering.

    Dummy assignments (from rectangular padding) and assignments costing
    more than ``cfg.cost_filter_threshold`` are dropped to the unmatched
    lists.
    """
    n, m = len(U), len(V)
    if n == 0 or m == 0:
        return Assignment(pairs=[], unmatched_u=list(range(n)),
                          unmatched_v=list(range(m)))
    costs = cost_matrix(U, V, cfg)
    # The solver runs on a double-padded matrix: every node on either
    # side can fall back to a dummy at dummy_cost (unused dummies pair
    # up at zero). Without the fallback a node whose counterpart is
    # missing (false negative, entered/exited the frame) is forced to
    # hijack some other node's partner. Pairs that cannot survive the
    # filter are additionally priced as dummies so they cannot displace
    # honest pairs through chains of just-under-threshold steals.
    side = n + m
    solver_costs = np.zeros((side, side))
    solver_costs[:n, :m] = np.where(costs[:n, :m] > cfg.cost_filter_threshold,
                                    cfg.dummy_cost, costs[:n, :m])
    solver_costs[:n, m:] = cfg.dummy_cost
    solver_costs[n:, :m] = cfg.dummy_cost
    col_of_row, _ = solve_lsap(solver_costs)
    pairs: list[tuple[int, int, float]] = []
    matched_u: set[int] = set()
    matched_v: set[int] = set()
    for i in range(n):
        j = int(col_of_row[i])
        if j >= m:
            continue
        c = float(costs[i, j])
        if c > cfg.cost_filter_threshold:
            continue
        pairs.append((i, j, c))
        matched_u.add(i)
        matched_v.add(j)
    return Assignment(
        pairs=pairs,
        unmatched_u=[i for i in range(n) if i not in matched_u],
        unmatched_v=[j for j in range(m) if j not in matched_v],
    )


def write_assignment_csv(fh, assignment: Assignment, frame: int, kind: str) -> None:
    """Append one assignment to an open CSV stream (debug dump)."""
    for u_idx, v_idx, cost in assignment.pairs:
        fh.write(f"{frame},{kind},{u_idx},{v_idx},{cost:.6f}\n")
