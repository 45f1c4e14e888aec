"""Lifelong goal streams, per-step reward shaping, and throughput accounting.

Reward per agent and step:
    r = R_goal*1{goal reached} - c_step - C_fail*1{transition failure}
        - C_wait*1{no-move, not at goal} + alpha_d*(d_prev - d_next)
        - C_comm*(1 - comm_ok)
Idling at the goal with a stay action is exempt from the no-move penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .map_model import Cell, GridMap, Scenario
from .execution_engine import Action, StepOutcome, WaitCause, WorldState

__all__ = ["RewardParams", "TaskLog", "GoalSource", "reward", "tnct", "throughput"]


@dataclass(frozen=True)
class RewardParams:
    r_goal: float = 100.0
    c_step: float = 0.1
    c_fail: float = 10.0
    c_wait: float = 1.0
    alpha_d: float = 1.0
    c_comm: float = 0.5

    def __post_init__(self):
        for v in (self.r_goal, self.c_step, self.c_fail, self.c_wait,
                  self.alpha_d, self.c_comm):
            if v < 0:
                raise ValueError("reward weights must be non-negative")


@dataclass
class TaskLog:
    """Completion timestamps per agent, bounded by the horizon."""

    horizon: int
    completions: List[List[int]] = field(default_factory=list)

    def ensure(self, n_agents: int):
        while len(self.completions) < n_agents:
            self.completions.append([])

    def record(self, agent: int, t: int):
        if t > self.horizon:
            raise ValueError("completion after horizon")
        if self.completions[agent] and self.completions[agent][-1] >= t:
            raise ValueError("timestamps must be strictly increasing")
        self.completions[agent].append(t)


def tnct(log: TaskLog) -> int:
    """Total completed tasks within the horizon."""
    return sum(len(c) for c in log.completions)


def throughput(log: TaskLog) -> float:
    return tnct(log) / log.horizon


class GoalSource:
    """Lifelong goal stream: scenario entries in per-agent strided order,
    or seeded uniform draws over free cells."""

    def __init__(self, grid: GridMap, n_agents: int,
                 scenario: Optional[Scenario] = None):
        self.grid = grid
        self.n_agents = n_agents
        self.scenario = scenario
        self.free = grid.free_cells()
        if scenario is not None and len(scenario) == 0:
            raise ValueError("scenario has no entries")
        # Per-agent cursor into the entry list; agent i consumes entries
        # i, i+N, i+2N, ... wrapping at the end.
        self._cursor = list(range(n_agents))

    def initial(self, agent: int) -> tuple:
        """(start, goal) for initialization."""
        if self.scenario is not None:
            entry = self.scenario.entries[agent % len(self.scenario)]
            return entry.start, entry.goal
        raise ValueError("random mode has no scenario starts")

    def next_goal(self, agent: int, current: Cell,
                  rng: Optional[np.random.Generator] = None) -> Cell:
        """A free goal cell distinct from the agent's current cell."""
        if self.scenario is not None:
            n_entries = len(self.scenario)
            for _ in range(n_entries + 1):
                self._cursor[agent] += self.n_agents
                goal = self.scenario.entries[self._cursor[agent] % n_entries].goal
                if goal != current:
                    return goal
            raise ValueError("no distinct goal available in scenario")
        if rng is None:
            raise ValueError("random mode requires an rng")
        candidates = [c for c in self.free if c != current]
        if not candidates:
            raise ValueError("no free cell available for a new goal")
        return candidates[int(rng.integers(len(candidates)))]


def reward(outcome: StepOutcome, actions, prev_positions, prev_dist, next_dist,
           at_goal_prev, comm_ok, params: RewardParams) -> List[float]:
    """Per-agent shaped reward for one step.

    prev_dist/next_dist are Manhattan distances to the step's goal before
    and after execution; at_goal_prev marks agents idling on their goal.
    """
    n = len(outcome.executed)
    out = []
    for i in range(n):
        r = -params.c_step
        reached = next_dist[i] == 0 and prev_dist[i] != 0
        if reached:
            r += params.r_goal
        if outcome.transition_failure[i]:
            r -= params.c_fail
        no_move = outcome.executed[i] == prev_positions[i]
        at_goal_stay = at_goal_prev[i] and actions[i] == Action.STAY
        if no_move and not at_goal_stay:
            r -= params.c_wait
        r += params.alpha_d * (prev_dist[i] - next_dist[i])
        if not comm_ok[i]:
            r -= params.c_comm
        out.append(r)
    return out
