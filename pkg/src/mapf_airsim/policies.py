"""Action-producing controllers.

The local controller is an A*-guided logit oracle: it places weight
w_path on the next shortest-path step toward the agent's goal and a small
uniform weight elsewhere, so the masked softmax concentrates ~0.9 on the
path step when all five actions are legal. Guidance is cached as one BFS
distance field per goal, which makes the argmax a shortest-path step from
any cell the agent gets displaced to.

The cloud side is a windowed, time-budgeted prioritized planner over a
space-time reservation table; its action for an agent is turned into a
logit residual that overrides the local argmax on packet reception.
"""

from __future__ import annotations

import heapq
import itertools
import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .execution_engine import ACTION_DELTAS, Action, TransitionKernel, _SIDE_BACK
from .map_model import Cell, GridMap, NEIGHBOR_OFFSETS

__all__ = [
    "LegalityMask",
    "Observation",
    "observe",
    "legality_mask",
    "masked_distribution",
    "astar",
    "bfs_distance_field",
    "GuidanceCache",
    "local_policy_decide",
    "greedy_step",
    "belief_map",
    "priority_masked_belief",
    "windowed_central_plan",
    "PlannerResult",
    "hybrid_decide",
    "detect_conflict_windows",
    "W_PATH_DEFAULT",
    "W_CLOUD_DEFAULT",
]

# exp(w)/(exp(w)+4) = 0.9  =>  w = ln 36; mirrors the kernel's 0.9 center
W_PATH_DEFAULT = math.log(36.0)
W_CLOUD_DEFAULT = 10.0

MOVE_ACTIONS = (Action.UP, Action.DOWN, Action.LEFT, Action.RIGHT)

LegalityMask = np.ndarray  # bool, shape (5,), indexed by Action


@dataclass
class Observation:
    """Egocentric 3-channel FOV patch (obstacles, other agents, guidance)
    plus the relative goal vector and normalized coordinates."""

    fov: np.ndarray  # shape (3, fov_size, fov_size)
    goal_vector: Tuple[int, int]
    norm_xy: Tuple[float, float]

    @property
    def peer_count(self) -> int:
        return int(self.fov[1].sum())


def observe(grid: GridMap, positions: Sequence[Cell], goals: Sequence[Cell],
            agent: int, cache: "GuidanceCache", fov_size: int = 7) -> Observation:
    """Build an agent's egocentric observation. Out-of-map region is marked
    as obstacle; the agent itself is excluded from the peer channel."""
    if fov_size % 2 != 1:
        raise ValueError("fov_size must be odd")
    r = fov_size // 2
    pos, goal = positions[agent], goals[agent]
    fov = np.zeros((3, fov_size, fov_size), dtype=np.float32)
    dist = cache.field(goal)
    dmax = max(float(dist.max()), 1.0)
    peers = {p for j, p in enumerate(positions) if j != agent}
    for oy in range(fov_size):
        for ox in range(fov_size):
            x, y = pos.x + ox - r, pos.y + oy - r
            if not grid.is_free(x, y):
                fov[0, oy, ox] = 1.0
            else:
                if Cell(x, y) in peers:
                    fov[1, oy, ox] = 1.0
                if dist[y, x] >= 0:
                    fov[2, oy, ox] = 1.0 - dist[y, x] / dmax
    return Observation(
        fov=fov,
        goal_vector=(goal.x - pos.x, goal.y - pos.y),
        norm_xy=(pos.x / max(grid.width - 1, 1), pos.y / max(grid.height - 1, 1)),
    )


def legality_mask(grid: GridMap, pos: Cell, at_goal: bool) -> LegalityMask:
    """Stay is always legal; moves require an in-bounds free target.
    An agent at its goal is pinned to stay."""
    mask = np.zeros(5, dtype=bool)
    mask[Action.STAY] = True
    if at_goal:
        return mask
    for a in MOVE_ACTIONS:
        dx, dy = ACTION_DELTAS[a]
        if grid.is_free(pos.x + dx, pos.y + dy):
            mask[a] = True
    return mask


def masked_distribution(logits: np.ndarray, mask: LegalityMask) -> np.ndarray:
    """Softmax restricted to legal actions; illegal entries are exactly 0."""
    if not mask.any():
        raise ValueError("mask admits no legal action")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max()
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum()


def bfs_distance_field(grid: GridMap, goal: Cell) -> np.ndarray:
    """Shortest 4-connected distance to goal; unreachable cells hold -1."""
    dist = np.full((grid.height, grid.width), -1, dtype=np.int32)
    if not grid.is_free(goal.x, goal.y):
        return dist
    dist[goal.y, goal.x] = 0
    dq = deque([goal])
    blocked = grid.blocked
    w, h = grid.width, grid.height
    while dq:
        c = dq.popleft()
        d = dist[c.y, c.x] + 1
        for dx, dy in NEIGHBOR_OFFSETS:
            nx, ny = c.x + dx, c.y + dy
            if 0 <= nx < w and 0 <= ny < h and not blocked[ny, nx] and dist[ny, nx] < 0:
                dist[ny, nx] = d
                dq.append(Cell(nx, ny))
    return dist


class GuidanceCache:
    """Per-goal BFS distance fields, shared across agents and rollouts."""

    def __init__(self, grid: GridMap):
        self.grid = grid
        self._fields: Dict[Cell, np.ndarray] = {}

    def field(self, goal: Cell) -> np.ndarray:
        f = self._fields.get(goal)
        if f is None:
            f = bfs_distance_field(self.grid, goal)
            self._fields[goal] = f
        return f


def astar(grid: GridMap, start: Cell, goal: Cell) -> Optional[List[Cell]]:
    """Deterministic shortest 4-connected path, or None if unreachable.

    Tie-break: f, then h, then (up, down, left, right) insertion order.
    """
    if not grid.is_free(start.x, start.y) or not grid.is_free(goal.x, goal.y):
        raise ValueError("start and goal must be free cells")
    if start == goal:
        return [start]
    counter = itertools.count()
    h0 = abs(start.x - goal.x) + abs(start.y - goal.y)
    open_heap = [(h0, h0, next(counter), start)]
    g_best = {start: 0}
    parent: Dict[Cell, Cell] = {}
    closed: Set[Cell] = set()
    while open_heap:
        f, h, _, cur = heapq.heappop(open_heap)
        if cur in closed:
            continue
        closed.add(cur)
        if cur == goal:
            path = [cur]
            while path[-1] != start:
                path.append(parent[path[-1]])
            return path[::-1]
        g = g_best[cur]
        for dx, dy in NEIGHBOR_OFFSETS:
            nxt = Cell(cur.x + dx, cur.y + dy)
            if not grid.is_free(nxt.x, nxt.y) or nxt in closed:
                continue
            ng = g + 1
            if ng < g_best.get(nxt, 1 << 30):
                g_best[nxt] = ng
                parent[nxt] = cur
                nh = abs(nxt.x - goal.x) + abs(nxt.y - goal.y)
                heapq.heappush(open_heap, (ng + nh, nh, next(counter), nxt))
    return None


def greedy_step(grid: GridMap, dist: np.ndarray, pos: Cell) -> Action:
    """First action in fixed order that strictly descends the distance field.
    Stays when at the goal or the goal is unreachable."""
    d0 = dist[pos.y, pos.x]
    if d0 <= 0:
        return Action.STAY
    for a in MOVE_ACTIONS:
        dx, dy = ACTION_DELTAS[a]
        nx, ny = pos.x + dx, pos.y + dy
        if grid.in_bounds(nx, ny) and dist[ny, nx] == d0 - 1:
            return a
    return Action.STAY


def local_policy_decide(grid: GridMap, pos: Cell, goal: Cell,
                        cache: GuidanceCache,
                        w_path: float = W_PATH_DEFAULT) -> np.ndarray:
    """Logits with weight w_path on the shortest-path step, 0 elsewhere.
    Collision-agnostic; conflicts are left to arbitration and the cloud."""
    logits = np.zeros(5)
    step_action = greedy_step(grid, cache.field(goal), pos)
    logits[step_action] = w_path
    return logits


PolicyFn = "Callable[[Cell, Cell], np.ndarray]"


def _kernel_spread(grid: GridMap, pos: Cell, action: Action,
                   kernel: TransitionKernel,
                   extra_blocked: Set[Cell]) -> Dict[Cell, float]:
    """Analytic one-step outcome distribution with bounce-to-stay."""
    if action == Action.STAY:
        return {pos: 1.0}
    out: Dict[Cell, float] = {}
    fx, fy = ACTION_DELTAS[action]
    (s1, s2, back) = _SIDE_BACK[action]
    targets = [
        (Cell(pos.x + fx, pos.y + fy), kernel.p_forward),
        (pos, kernel.eps_stay),
        (Cell(pos.x + s1[0], pos.y + s1[1]), kernel.eps_side / 2.0),
        (Cell(pos.x + s2[0], pos.y + s2[1]), kernel.eps_side / 2.0),
        (Cell(pos.x + back[0], pos.y + back[1]), kernel.eps_back),
    ]
    for cell, p in targets:
        if p == 0.0:
            continue
        if not grid.is_free(cell.x, cell.y) or cell in extra_blocked:
            cell = pos
        out[cell] = out.get(cell, 0.0) + p
    return out


def belief_map(grid: GridMap, positions: Sequence[Cell], goals: Sequence[Cell],
               cache: GuidanceCache, kernel: TransitionKernel,
               n_steps: int = 4,
               w_path: float = W_PATH_DEFAULT) -> List[List[Dict[Cell, float]]]:
    """Per-agent occupancy distributions for horizons 1..n_steps.

    Propagation treats the other agents as static obstacles in the bounce
    step; each (agent, horizon) distribution sums to 1.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    beliefs = []
    for i, (pos, goal) in enumerate(zip(positions, goals)):
        peers = {p for j, p in enumerate(positions) if j != i}
        dist_field = cache.field(goal)
        cur = {pos: 1.0}
        per_step = []
        for _ in range(n_steps):
            nxt: Dict[Cell, float] = {}
            for cell, mass in cur.items():
                logits = np.zeros(5)
                logits[greedy_step(grid, dist_field, cell)] = w_path
                mask = legality_mask(grid, cell, at_goal=(cell == goal))
                probs = masked_distribution(logits, mask)
                for a in Action:
                    pa = probs[a]
                    if pa == 0.0:
                        continue
                    for tgt, pk in _kernel_spread(grid, cell, a, kernel, peers).items():
                        nxt[tgt] = nxt.get(tgt, 0.0) + mass * pa * pk
            total = sum(nxt.values())
            cur = {c: m / total for c, m in nxt.items()}
            per_step.append(cur)
        beliefs.append(per_step)
    return beliefs


def priority_masked_belief(beliefs: Sequence[Sequence[Dict[Cell, float]]],
                           priorities: Sequence[int], self_agent: int,
                           theta_b: float = 0.5) -> Tuple[Set[Cell], list]:
    """Planning view for one agent: cells where a higher-priority agent's
    mass exceeds theta_b at any horizon are blocked; lower-priority agents'
    mass is dropped entirely."""
    blocked: Set[Cell] = set()
    visible = []
    kappa_self = priorities[self_agent]
    for j, steps in enumerate(beliefs):
        if j == self_agent:
            visible.append(steps)
            continue
        if priorities[j] < kappa_self:  # higher priority = lower rank index
            visible.append(steps)
            for dist in steps:
                for cell, mass in dist.items():
                    if mass > theta_b:
                        blocked.add(cell)
        else:
            visible.append([{} for _ in steps])
    return blocked, visible


@dataclass
class PlannerResult:
    actions: Dict[int, Action]
    restarts_completed: int
    budget_exhausted: bool
    window_size: int


def _plan_one(grid: GridMap, start: Cell, dist: np.ndarray, horizon: int,
              vtx_res: Set[Tuple[Cell, int]],
              edge_res: Set[Tuple[Cell, Cell, int]],
              static_blocked: Set[Cell]) -> Optional[List[Cell]]:
    """Space-time A* over t in [0, horizon] against a reservation table.
    Returns the cell trajectory (length horizon+1) minimizing arrival, then
    final distance-to-goal; None when even staying put is impossible."""
    counter = itertools.count()
    d0 = int(dist[start.y, start.x]) if dist[start.y, start.x] >= 0 else 1 << 20
    heap = [(d0, d0, next(counter), start, 0)]
    parent: Dict[Tuple[Cell, int], Tuple[Cell, int]] = {}
    seen = {(start, 0)}
    best_terminal = None
    while heap:
        f, h, _, cell, t = heapq.heappop(heap)
        if h == 0 or t == horizon:
            best_terminal = (cell, t)
            break
        for a in Action:
            dx, dy = ACTION_DELTAS[a]
            nxt = Cell(cell.x + dx, cell.y + dy)
            if a != Action.STAY:
                if not grid.is_free(nxt.x, nxt.y) or nxt in static_blocked:
                    continue
            if (nxt, t + 1) in seen or (nxt, t + 1) in vtx_res:
                continue
            if a != Action.STAY and (nxt, cell, t) in edge_res:
                continue
            seen.add((nxt, t + 1))
            parent[(nxt, t + 1)] = (cell, t)
            nh = int(dist[nxt.y, nxt.x]) if dist[nxt.y, nxt.x] >= 0 else 1 << 20
            heapq.heappush(heap, (t + 1 + nh, nh, next(counter), nxt, t + 1))
    if best_terminal is None:
        return None
    # Reconstruct, then pad with stays (arrived early or ran out of horizon).
    cell, t = best_terminal
    traj = [cell]
    while t > 0:
        cell, t = parent[(cell, t)]
        traj.append(cell)
    traj.reverse()
    while len(traj) < horizon + 1:
        traj.append(traj[-1])
    return traj


def _joint_plan(grid: GridMap, order: Sequence[int], positions: Dict[int, Cell],
                fields: Dict[int, np.ndarray], horizon: int,
                static_blocked: Dict[int, Set[Cell]],
                window_positions: Dict[int, Cell]):
    """Sequential prioritized planning. Returns (trajectories, cost) or None."""
    vtx_res: Set[Tuple[Cell, int]] = set()
    edge_res: Set[Tuple[Cell, Cell, int]] = set()
    # Unplanned agents' current cells are reserved at t=1, so a returned
    # first move can never collide with an agent that ends up staying.
    pending = set(order)
    trajs: Dict[int, List[Cell]] = {}
    cost = 0.0
    for i in order:
        pending.discard(i)
        extra_vtx = {(window_positions[j], 1) for j in pending}
        traj = _plan_one(grid, positions[i], fields[i], horizon,
                         vtx_res | extra_vtx, edge_res, static_blocked[i])
        if traj is None:
            traj = [positions[i]] * (horizon + 1)
        for t in range(1, horizon + 1):
            vtx_res.add((traj[t], t))
            if traj[t] != traj[t - 1]:
                edge_res.add((traj[t - 1], traj[t], t - 1))
        vtx_res.add((traj[0], 0))
        d = fields[i]
        arrived = next((t for t, c in enumerate(traj) if d[c.y, c.x] == 0), None)
        final = d[traj[-1].y, traj[-1].x]
        cost += arrived if arrived is not None else horizon + max(int(final), 0)
        trajs[i] = traj
    return trajs, cost


def _first_moves(trajs: Dict[int, List[Cell]]) -> Dict[int, Action]:
    moves = {}
    for i, traj in trajs.items():
        dx, dy = traj[1].x - traj[0].x, traj[1].y - traj[0].y
        moves[i] = next(a for a, d in ACTION_DELTAS.items() if d == (dx, dy))
    return moves


def _assert_conflict_free(trajs: Dict[int, List[Cell]]):
    firsts = {i: (traj[0], traj[1]) for i, traj in trajs.items()}
    targets = [nxt for _, nxt in firsts.values()]
    if len(set(targets)) != len(targets):
        raise AssertionError("windowed plan produced a vertex conflict")
    for i, (pi, ni) in firsts.items():
        for j, (pj, nj) in firsts.items():
            if i < j and ni == pj and nj == pi and ni != pi:
                raise AssertionError("windowed plan produced an edge swap")
    stay_cells = {p for p, nxt in firsts.values() if p == nxt}
    for p, nxt in firsts.values():
        if nxt != p and nxt in stay_cells:
            raise AssertionError("windowed plan moves into a staying agent")


def windowed_central_plan(grid: GridMap, agents: Sequence[int],
                          positions: Sequence[Cell], goals: Sequence[Cell],
                          cache: GuidanceCache,
                          budget_s: Optional[float] = None,
                          max_restarts: int = 2,
                          horizon: int = 6,
                          priorities: Optional[Sequence[int]] = None,
                          static_blocked: Optional[Dict[int, Set[Cell]]] = None,
                          rng: Optional[np.random.Generator] = None) -> PlannerResult:
    """Anytime joint plan for the window agents; first moves are guaranteed
    conflict-free in intent among them. budget_s == 0 degrades to each
    agent's local argmax."""
    if not agents:
        raise ValueError("window must contain at least one agent")
    if budget_s is not None and budget_s <= 0:
        actions = {i: greedy_step(grid, cache.field(goals[i]), positions[i])
                   for i in agents}
        return PlannerResult(actions, 0, True, len(agents))

    t_start = time.perf_counter()
    window_positions = {i: positions[i] for i in agents}
    fields = {i: cache.field(goals[i]) for i in agents}
    blocked = static_blocked or {i: set() for i in agents}
    order0 = sorted(agents, key=lambda i: (priorities[i], i) if priorities else i)

    best = _joint_plan(grid, order0, window_positions, fields, horizon,
                       blocked, window_positions)
    restarts = 0
    exhausted = False
    while restarts < max_restarts:
        if budget_s is not None and time.perf_counter() - t_start > budget_s:
            exhausted = True
            break
        if rng is None:
            break
        order = list(agents)
        perm = rng.permutation(len(order))
        order = [order[int(k)] for k in perm]
        cand = _joint_plan(grid, order, window_positions, fields, horizon,
                           blocked, window_positions)
        restarts += 1
        if cand[1] < best[1]:
            best = cand
    trajs, _ = best
    _assert_conflict_free(trajs)
    return PlannerResult(_first_moves(trajs), restarts, exhausted, len(agents))


def hybrid_decide(local_logits: np.ndarray, mask: LegalityMask,
                  residual: Optional[np.ndarray] = None,
                  sample: bool = False,
                  rng: Optional[np.random.Generator] = None) -> Action:
    """Apply the cloud residual when a DL packet arrived, else act locally.
    Default is argmax for evaluation determinism."""
    logits = local_logits if residual is None else local_logits + residual
    probs = masked_distribution(logits, mask)
    if sample:
        if rng is None:
            raise ValueError("sampling requires an rng")
        return Action(int(rng.choice(5, p=probs)))
    return Action(int(np.argmax(probs)))


def detect_conflict_windows(positions: Sequence[Cell],
                            conflict_cells: Sequence[Cell] = (),
                            window: int = 9,
                            proximity: int = 2) -> List[Tuple[Set[int], List[Cell]]]:
    """Seed 9x9 windows from recent conflict cells and close agent pairs;
    overlapping windows merge. Returns (agent set, seed cells) per window."""
    half = window // 2
    seed_set: Set[Cell] = set(conflict_cells)
    n = len(positions)
    buckets: Dict[Cell, List[int]] = {}
    for i, p in enumerate(positions):
        buckets.setdefault(p, []).append(i)
    for i in range(n):
        px, py = positions[i]
        for dx in range(-proximity, proximity + 1):
            for dy in range(-proximity, proximity + 1):
                for j in buckets.get(Cell(px + dx, py + dy), ()):
                    if j > i:
                        seed_set.add(Cell((px + positions[j].x) // 2,
                                          (py + positions[j].y) // 2))
    if not seed_set:
        return []
    seeds = sorted(seed_set)
    # Union-find over seeds whose boxes overlap.
    parent = list(range(len(seeds)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a in range(len(seeds)):
        for b in range(a + 1, len(seeds)):
            if (abs(seeds[a].x - seeds[b].x) <= 2 * half
                    and abs(seeds[a].y - seeds[b].y) <= 2 * half):
                parent[find(a)] = find(b)

    clusters: Dict[int, List[Cell]] = {}
    for k, s in enumerate(seeds):
        clusters.setdefault(find(k), []).append(s)
    out = []
    for cells in clusters.values():
        members = set()
        for i, p in enumerate(positions):
            if any(abs(p.x - s.x) <= half and abs(p.y - s.y) <= half for s in cells):
                members.add(i)
        if len(members) >= 2:
            out.append((members, cells))
    return out
