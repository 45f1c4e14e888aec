"""Stochastic action execution and the safety arbitration layer.

Execution is attempt-then-arbitrate: each agent's intended action is
perturbed by the transition kernel, blocked destinations bounce to stay,
attempted interactions (wall, vertex, edge-swap, move into a stayer) are
recorded, and arbitration then enforces single occupancy deterministically.

Randomness discipline: each agent consumes exactly one kernel draw per
step from its own substream (reserved even for stay), and vertex-conflict
winners are picked from a substream keyed by (step, target cell), so
outcomes never depend on evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .map_model import Cell, GridMap
from .rng import StreamFamily

__all__ = [
    "Action",
    "TransitionKernel",
    "WorldState",
    "StepOutcome",
    "WaitCause",
    "sample_proposal",
    "proposal_from_uniform",
    "bounce_to_stay",
    "arbitrate",
    "step",
    "ACTION_DELTAS",
]


class Action(IntEnum):
    STAY = 0
    UP = 1
    DOWN = 2
    LEFT = 3
    RIGHT = 4


ACTION_DELTAS: Dict[Action, Tuple[int, int]] = {
    Action.STAY: (0, 0),
    Action.UP: (0, -1),
    Action.DOWN: (0, 1),
    Action.LEFT: (-1, 0),
    Action.RIGHT: (1, 0),
}

# For each move action: (side1, side2, back) deltas.
_SIDE_BACK: Dict[Action, Tuple[Tuple[int, int], Tuple[int, int], Tuple[int, int]]] = {
    Action.UP: ((-1, 0), (1, 0), (0, 1)),
    Action.DOWN: ((-1, 0), (1, 0), (0, -1)),
    Action.LEFT: ((0, -1), (0, 1), (1, 0)),
    Action.RIGHT: ((0, -1), (0, 1), (-1, 0)),
}


class WaitCause(IntEnum):
    NONE = 0
    GOAL = 1
    INTENT = 2
    WALL = 3
    VERTEX = 4
    EDGE = 5


@dataclass(frozen=True)
class TransitionKernel:
    eps_stay: float = 0.05
    eps_side: float = 0.05
    eps_back: float = 0.0

    def __post_init__(self):
        for e in (self.eps_stay, self.eps_side, self.eps_back):
            if not (0.0 <= e <= 1.0):
                raise ValueError("kernel probabilities must lie in [0, 1]")
        if self.eps_stay + self.eps_side + self.eps_back > 1.0 + 1e-12:
            raise ValueError("kernel probabilities must sum to <= 1")

    @property
    def p_forward(self) -> float:
        return 1.0 - self.eps_stay - self.eps_side - self.eps_back


@dataclass
class WorldState:
    """Mutable per-episode world: positions, goals, priorities, counters."""

    positions: List[Cell]
    goals: List[Cell]
    priorities: List[int] = field(default_factory=list)
    tasks_completed: List[int] = field(default_factory=list)
    t: int = 0

    def __post_init__(self):
        n = len(self.positions)
        if len(self.goals) != n:
            raise ValueError("positions and goals must have equal length")
        if not self.priorities:
            self.priorities = list(range(n))
        if not self.tasks_completed:
            self.tasks_completed = [0] * n
        if len(set(self.positions)) != n:
            raise ValueError("single-occupancy violated at construction")

    @property
    def n_agents(self) -> int:
        return len(self.positions)

    def at_goal(self, i: int) -> bool:
        return self.positions[i] == self.goals[i]


@dataclass
class StepOutcome:
    executed: List[Cell]
    wait_cause: List[WaitCause]
    transition_failure: List[bool]
    events: List[frozenset]  # subsets of {"vertex","edge","wall","wait"}
    pre_arbitration_conflicts: Dict[str, int]


def sample_proposal(pos: Cell, action: Action, kernel: TransitionKernel,
                    rng: np.random.Generator) -> Cell:
    """Kernel-perturbed destination. Always consumes exactly one draw."""
    return proposal_from_uniform(pos, action, kernel, rng.random())


def proposal_from_uniform(pos: Cell, action: Action, kernel: TransitionKernel,
                          u: float) -> Cell:
    """Pure kernel lookup given a pre-drawn uniform in [0, 1)."""
    if action == Action.STAY:
        return pos
    fx, fy = ACTION_DELTAS[action]
    p = kernel.p_forward
    if u < p:
        return Cell(pos.x + fx, pos.y + fy)
    p += kernel.eps_stay
    if u < p:
        return pos
    (s1x, s1y), (s2x, s2y), (bx, by) = _SIDE_BACK[action]
    p += kernel.eps_side / 2.0
    if u < p:
        return Cell(pos.x + s1x, pos.y + s1y)
    p += kernel.eps_side / 2.0
    if u < p:
        return Cell(pos.x + s2x, pos.y + s2y)
    return Cell(pos.x + bx, pos.y + by)


def bounce_to_stay(grid: GridMap, pos: Cell, proposed: Cell) -> Cell:
    """Blocked or off-grid destinations collapse back to the current cell."""
    return proposed if grid.is_free(proposed.x, proposed.y) else pos


WinnerRng = Callable[[Cell], np.random.Generator]


@dataclass
class ArbitrationResult:
    executed: List[Cell]
    wait_cause: List[WaitCause]
    transition_failure: List[bool]
    events: List[set]
    pre_counts: Dict[str, int]


def arbitrate(grid: GridMap, positions: Sequence[Cell],
              proposals: Sequence[Cell],
              winner_rng) -> ArbitrationResult:
    """Resolve raw (possibly blocked) proposals into conflict-free moves.

    winner_rng: either a Generator or a callable Cell -> Generator used to
    pick the single winner of each vertex contest.
    """
    n = len(positions)
    if len(proposals) != n:
        raise ValueError("one proposal per agent required")
    occupied = {}
    for i, p in enumerate(positions):
        occupied[p] = i

    wait_cause = [WaitCause.NONE] * n
    failure = [False] * n
    events: List[set] = [set() for _ in range(n)]
    target: List[Cell] = [None] * n  # effective destination after wall rule
    pre = {"vertex": 0, "edge": 0, "wall": 0}

    for i in range(n):
        prop = proposals[i]
        if prop != positions[i]:
            dx, dy = prop.x - positions[i].x, prop.y - positions[i].y
            if abs(dx) + abs(dy) != 1:
                raise ValueError(f"proposal {prop} not adjacent to {positions[i]}")
        if prop == positions[i]:
            target[i] = positions[i]
        elif not grid.is_free(prop.x, prop.y):
            target[i] = positions[i]
            wait_cause[i] = WaitCause.WALL
            failure[i] = True
            events[i].add("wall")
            pre["wall"] += 1
        else:
            target[i] = prop

    # Attempt recording: swap pairs and same-target groups, before any
    # inter-agent resolution mutates targets.
    swap_agents = set()
    for i in range(n):
        if target[i] == positions[i]:
            continue
        j = occupied.get(target[i])
        if j is not None and j != i and target[j] == positions[i]:
            swap_agents.add(i)
    raw_groups: Dict[Cell, List[int]] = {}
    for i in range(n):
        if target[i] != positions[i]:
            raw_groups.setdefault(target[i], []).append(i)
    for cell, contenders in raw_groups.items():
        if len(contenders) >= 2:
            pre["vertex"] += len(contenders)
            for i in contenders:
                events[i].add("vertex")
    pre["edge"] = len(swap_agents)  # counted once per involved agent

    # Edge-swap attempts: both movers forced to stay.
    for i in swap_agents:
        events[i].add("edge")
        wait_cause[i] = WaitCause.EDGE
        failure[i] = True
        target[i] = positions[i]

    # Vertex contests among remaining movers: one uniformly random winner.
    groups: Dict[Cell, List[int]] = {}
    for i in range(n):
        if target[i] != positions[i]:
            groups.setdefault(target[i], []).append(i)
    for cell in sorted(groups):
        contenders = groups[cell]
        if len(contenders) < 2:
            continue
        rng = winner_rng(cell) if callable(winner_rng) else winner_rng
        winner = contenders[int(rng.integers(len(contenders)))]
        for i in contenders:
            if i != winner:
                wait_cause[i] = WaitCause.VERTEX
                failure[i] = True
                target[i] = positions[i]

    # Cascade: moves into a cell whose occupant ends up staying are blocked.
    # Iterates to a fixed point; terminates in <= n rounds since each round
    # converts at least one mover into a stayer.
    changed = True
    while changed:
        changed = False
        staying = {positions[i] for i in range(n) if target[i] == positions[i]}
        for i in range(n):
            if target[i] != positions[i] and target[i] in staying:
                target[i] = positions[i]
                wait_cause[i] = WaitCause.INTENT
                changed = True

    executed = list(target)
    if len(set(executed)) != n:
        raise AssertionError("arbitration failed to preserve single occupancy")
    return ArbitrationResult(executed, wait_cause, failure, events, pre)


def step(grid: GridMap, state: WorldState, actions: Sequence[Action],
         kernel: TransitionKernel, agent_rngs: Sequence[np.random.Generator],
         winner_rng) -> StepOutcome:
    """One world step: kernel sampling, attempt recording, arbitration.

    Mutates state.positions and state.t. agent_rngs holds one persistent
    substream per agent; winner_rng picks vertex winners (Generator or
    Cell -> Generator factory).
    """
    n = state.n_agents
    if len(actions) != n:
        raise ValueError("one action per agent required")
    proposals = [sample_proposal(state.positions[i], actions[i], kernel, agent_rngs[i])
                 for i in range(n)]
    res = arbitrate(grid, state.positions, proposals, winner_rng)

    wait_cause = list(res.wait_cause)
    events = res.events
    for i in range(n):
        moved = res.executed[i] != state.positions[i]
        at_goal_stay = state.at_goal(i) and actions[i] == Action.STAY
        if not moved:
            if at_goal_stay:
                wait_cause[i] = WaitCause.GOAL
            elif actions[i] != Action.STAY:
                # "no-move" event regardless of whether the block came from
                # arbitration or from a kernel-sampled stay outcome
                events[i].add("wait")

    outcome = StepOutcome(
        executed=res.executed,
        wait_cause=wait_cause,
        transition_failure=res.transition_failure,
        events=[frozenset(e) for e in events],
        pre_arbitration_conflicts=res.pre_counts,
    )
    state.positions = list(res.executed)
    state.t += 1
    return outcome
