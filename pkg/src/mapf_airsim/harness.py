"""Episode orchestration, controller variants, sweeps, and metrics.

Controllers:
  local            — every agent follows its A*-guided local policy.
  central_baseline — top-K_o-by-SNR agents get a communication slot; the
                     connected agents inside detected conflict windows take
                     the windowed planner's action, everyone else the local
                     A* step.
  hybrid           — uplink sender selection over risk centers, Monte-Carlo
                     risk/relief scoring, top-C_DL downlink grants, and a
                     cloud residual override applied on packet reception.

Determinism: a root seed expands into named substreams (kernel per agent,
arbitration per (step, cell), channel per (step, agent), scheduler MC per
(step, agent, rollout), priorities per refresh), so adding or removing a
consumer never perturbs the others, and thread count cannot reorder draws.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import downlink_allocator as dl
from . import uplink_scheduler as ul
from .execution_engine import (Action, StepOutcome, TransitionKernel,
                               WorldState, step)
from .lifelong_tasks import GoalSource, RewardParams, TaskLog, reward, tnct, throughput
from .map_model import Cell, GridMap, Scenario, free_cell_count, parse_map, parse_scenario
from .policies import (GuidanceCache, W_CLOUD_DEFAULT, belief_map,
                       detect_conflict_windows, greedy_step, hybrid_decide,
                       legality_mask, local_policy_decide,
                       priority_masked_belief, windowed_central_plan)
from .radio_link import (CommBudget, LinkBudgetParams, RadioMap, blocklength,
                         build_radio_map, db_to_linear, p_succ, sample_packet)
from .rng import substream

__all__ = [
    "SchedulerParams",
    "PlannerParams",
    "ExperimentConfig",
    "MetricsRecord",
    "CSV_COLUMNS",
    "topk_snr",
    "run_episode",
    "sweep",
    "sweep_csv",
    "profile_runtime",
    "load_config_file",
    "ConfigError",
]

CSV_COLUMNS = ["map", "N", "r_ch", "controller", "seed", "tnct", "throughput",
               "vertex_conflicts", "edge_conflicts", "wall_hits", "waits",
               "ul_success_rate", "dl_success_rate",
               "t_local_ms", "t_cloud_ms", "t_comm_ms"]


@dataclass(frozen=True)
class SchedulerParams:
    mc: dl.RolloutParams = field(default_factory=lambda: dl.RolloutParams(
        horizon=3, rollouts=4, decay=0.9, radius=2))
    omega: Tuple[float, float, float, float] = (1.0, 1.0, 0.5, 0.25)
    fov_size: int = 7
    priority_period: int = 16
    theta_b: float = 0.5
    w_cloud: float = W_CLOUD_DEFAULT
    max_scored: int = 8
    max_plan_agents: int = 10
    use_belief_masking: bool = True
    belief_horizon: int = 2

    def omega_map(self) -> Dict[str, float]:
        return dict(zip(dl.EVENT_TYPES, self.omega))


@dataclass(frozen=True)
class PlannerParams:
    horizon: int = 6
    restarts: int = 1
    budget_s: Optional[float] = None


@dataclass(frozen=True)
class ExperimentConfig:
    map_path: str
    scen_path: Optional[str] = None
    n_agents: int = 8
    horizon: int = 128
    channel_ratio: float = 0.0
    controller: str = "local"
    kernel: TransitionKernel = field(default_factory=TransitionKernel)
    link: LinkBudgetParams = field(default_factory=LinkBudgetParams)
    comm: CommBudget = field(default_factory=lambda: CommBudget(
        total_rbs=256, c_ul=8, c_dl=8))
    reward_params: RewardParams = field(default_factory=RewardParams)
    scheduler: SchedulerParams = field(default_factory=SchedulerParams)
    planner: PlannerParams = field(default_factory=PlannerParams)
    ap_position: Optional[Tuple[int, int]] = None
    seeds: Tuple[int, ...] = (0,)
    force_packet_success: bool = False
    include_timings: bool = True

    def __post_init__(self):
        if not (0.0 <= self.channel_ratio <= 1.0):
            raise ValueError("channel ratio must lie in [0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.controller not in ("local", "hybrid", "central_baseline"):
            raise ValueError(f"unknown controller {self.controller!r}")


@dataclass
class MetricsRecord:
    map_name: str
    n_agents: int
    channel_ratio: float
    controller: str
    seed: int
    tnct: int
    throughput: float
    vertex_conflicts: int
    edge_conflicts: int
    wall_hits: int
    waits: int
    ul_success_rate: float
    dl_success_rate: float
    t_local_ms: float
    t_cloud_ms: float
    t_comm_ms: float
    mean_reward: float = 0.0
    pre_arbitration_conflicts: int = 0
    planner_calls: int = 0

    def csv_row(self) -> str:
        vals = [self.map_name, self.n_agents, f"{self.channel_ratio:g}",
                self.controller, self.seed, self.tnct,
                f"{self.throughput:.8f}", self.vertex_conflicts,
                self.edge_conflicts, self.wall_hits, self.waits,
                f"{self.ul_success_rate:.6f}", f"{self.dl_success_rate:.6f}",
                f"{self.t_local_ms:.4f}", f"{self.t_cloud_ms:.4f}",
                f"{self.t_comm_ms:.4f}"]
        return ",".join(str(v) for v in vals)


def topk_snr(positions: Sequence[Cell], rmap: RadioMap, k_o: int) -> List[int]:
    """The k_o agents with the largest instantaneous DL SNR; ties by id."""
    if not (0 <= k_o <= len(positions)):
        raise ValueError("need 0 <= K_o <= N")
    order = sorted(range(len(positions)),
                   key=lambda i: (-rmap.snr_dl_db[positions[i].y, positions[i].x], i))
    return order[:k_o]


def _peers_in_fov(positions: Sequence[Cell], agent: int, fov_size: int) -> int:
    r = (fov_size - 1) // 2
    px, py = positions[agent]
    return sum(1 for j, p in enumerate(positions)
               if j != agent and abs(p.x - px) <= r and abs(p.y - py) <= r)


def _default_ap(grid: GridMap) -> Cell:
    """Free cell closest to the map center."""
    cx, cy = (grid.width - 1) / 2.0, (grid.height - 1) / 2.0
    return min(grid.free_cells(),
               key=lambda c: ((c.x - cx) ** 2 + (c.y - cy) ** 2, c))


class _EpisodeRunner:
    def __init__(self, config: ExperimentConfig, seed: int):
        self.cfg = config
        self.seed = int(seed)
        with open(config.map_path, "rb") as fh:
            self.grid = parse_map(fh.read())
        self.scenario: Optional[Scenario] = None
        if config.scen_path:
            with open(config.scen_path, "rb") as fh:
                self.scenario = parse_scenario(fh.read(), self.grid)
        if config.n_agents > free_cell_count(self.grid):
            raise ValueError("more agents than free cells")
        self.cache = GuidanceCache(self.grid)
        self.needs_comm = (config.controller != "local"
                           and config.channel_ratio > 0.0)
        self.rmap: Optional[RadioMap] = None
        if self.needs_comm:
            ap = (Cell(*config.ap_position) if config.ap_position
                  else _default_ap(self.grid))
            if not self.grid.is_free(ap.x, ap.y):
                raise ValueError("AP position must be a free cell")
            self.rmap = build_radio_map(self.grid, ap, config.link)
        self._structural_centers = ul.identify_risk_centers(self.grid)
        self._psucc_cache: Dict[Tuple[str, Cell, int], float] = {}

    def _p_succ_cached(self, direction: str, pos: Cell, bits: int, n: int) -> float:
        """Nominal (no-shadowing) packet success at a cell; memoized since
        the large-scale SNR field is static."""
        key = (direction, pos, bits)
        hit = self._psucc_cache.get(key)
        if hit is None:
            snr = (self.rmap.snr_ul_db if direction == "ul"
                   else self.rmap.snr_dl_db)[pos.y, pos.x]
            hit = p_succ(db_to_linear(float(snr)), bits / n, n)
            self._psucc_cache[key] = hit
        return hit

    # ------------- setup -------------

    def _initial_state(self) -> Tuple[WorldState, GoalSource]:
        cfg, grid = self.cfg, self.grid
        source = GoalSource(grid, cfg.n_agents, self.scenario)
        if self.scenario is not None:
            starts, goals, used = [], [], set()
            idx = 0
            entries = self.scenario.entries
            for i in range(cfg.n_agents):
                while idx < len(entries) and entries[idx].start in used:
                    idx += 1
                if idx >= len(entries):
                    raise ValueError("scenario has too few distinct starts")
                starts.append(entries[idx].start)
                goals.append(entries[idx].goal)
                used.add(entries[idx].start)
                source._cursor[i] = idx
                idx += 1
        else:
            rng = substream(self.seed, "init")
            free = grid.free_cells()
            picks = rng.choice(len(free), size=cfg.n_agents, replace=False)
            starts = [free[int(k)] for k in picks]
            goals = []
            for i, s in enumerate(starts):
                goals.append(source.next_goal(i, s, substream(self.seed, "tasks", i, 0)))
        state = WorldState(positions=starts, goals=goals)
        return state, source

    # ------------- per-step helpers -------------

    def _sample_packet(self, t: int, agent: int, direction: str,
                       gamma_db: float, rate: float, n: int) -> bool:
        if self.cfg.force_packet_success:
            return True
        rng = substream(self.seed, "chan", t, direction, agent)
        return sample_packet(gamma_db, rate, n, self.cfg.link, rng)

    def _plan_windows(self, state: WorldState, windows, kappa,
                      eligible: Set[int], t: int) -> Tuple[Dict[int, Action], int]:
        """Run the windowed planner per conflict window over eligible agents."""
        cfg = self.cfg
        cloud_actions: Dict[int, Action] = {}
        calls = 0
        for members, seeds in windows:
            group = sorted(m for m in members if m in eligible)
            if len(group) < 2:
                continue
            cap = cfg.scheduler.max_plan_agents
            if len(group) > cap:
                # keep the members closest to the window seeds
                def seed_dist(i):
                    p = state.positions[i]
                    return min(abs(p.x - s.x) + abs(p.y - s.y) for s in seeds)
                group = sorted(sorted(group, key=lambda i: (seed_dist(i), i))[:cap])
            blocked = self._static_blocks(state, group, kappa, seeds)
            rng = substream(self.seed, "plan", t, seeds[0].x, seeds[0].y)
            result = windowed_central_plan(
                self.grid, group, state.positions, state.goals, self.cache,
                budget_s=cfg.planner.budget_s, max_restarts=cfg.planner.restarts,
                horizon=cfg.planner.horizon, priorities=kappa,
                static_blocked=blocked, rng=rng)
            cloud_actions.update(result.actions)
            calls += 1
        return cloud_actions, calls

    def _static_blocks(self, state: WorldState, group: Sequence[int], kappa,
                       seeds) -> Dict[int, Set[Cell]]:
        """Per-agent blocked cells: nearby non-window agents are static
        obstacles; optionally, belief footprints of higher-priority
        bystanders above theta_b are blocked too."""
        cfg = self.cfg
        margin = 6
        nearby = [j for j, p in enumerate(state.positions)
                  if j not in group and any(
                      abs(p.x - s.x) <= margin and abs(p.y - s.y) <= margin
                      for s in seeds)]
        base = {state.positions[j] for j in nearby}
        if not cfg.scheduler.use_belief_masking or not nearby:
            return {i: set(base) for i in group}
        idx = list(nearby)
        beliefs = belief_map(self.grid,
                             [state.positions[j] for j in idx],
                             [state.goals[j] for j in idx],
                             self.cache, cfg.kernel,
                             n_steps=cfg.scheduler.belief_horizon)
        blocks: Dict[int, Set[Cell]] = {}
        for i in group:
            extra = set(base)
            for bj, j in enumerate(idx):
                if kappa[j] < kappa[i]:  # higher-priority bystander
                    for dist in beliefs[bj]:
                        for cell, mass in dist.items():
                            if mass > cfg.scheduler.theta_b:
                                extra.add(cell)
            extra.discard(state.positions[i])
            blocks[i] = extra
        return blocks

    # ------------- controllers -------------

    def run(self) -> MetricsRecord:
        cfg = self.cfg
        state, source = self._initial_state()
        log = TaskLog(horizon=cfg.horizon)
        log.ensure(cfg.n_agents)
        history = ul.ConflictHistory()
        agent_rngs = [substream(self.seed, "kernel", i) for i in range(cfg.n_agents)]
        task_counters = [1] * cfg.n_agents  # goal-draw index per agent

        kappa = list(range(cfg.n_agents))
        last_scores: Dict[int, float] = {}
        last_conflict_cells: List[Cell] = []

        counts = {"vertex": 0, "edge": 0, "wall": 0, "wait": 0}
        pre_conflicts = 0
        ul_attempts = ul_success = dl_attempts = dl_success = 0
        t_local = t_cloud = t_comm = 0.0
        total_reward = 0.0
        planner_calls = 0

        k_slots = int(round(cfg.channel_ratio * cfg.n_agents))
        comm_active = self.needs_comm and k_slots > 0
        n1 = blocklength(1, cfg.link)

        for t in range(cfg.horizon):
            # --- local phase ---
            tic = time.perf_counter()
            fields = [self.cache.field(state.goals[i]) for i in range(cfg.n_agents)]
            local_actions = [
                Action.STAY if state.at_goal(i)
                else greedy_step(self.grid, fields[i], state.positions[i])
                for i in range(cfg.n_agents)
            ]
            actions = list(local_actions)
            t_local += time.perf_counter() - tic

            comm_ok = [True] * cfg.n_agents

            if comm_active:
                if t % cfg.scheduler.priority_period == 0:
                    scores_vec = [last_scores.get(i, 0.0) for i in range(cfg.n_agents)]
                    prio_rng = substream(self.seed, "prio", t // cfg.scheduler.priority_period)
                    kappa = dl.assign_priorities(scores_vec, prio_rng)
                    state.priorities = kappa

                windows = detect_conflict_windows(state.positions,
                                                  last_conflict_cells)
                if cfg.controller == "central_baseline":
                    a, b, c, d, e = self._baseline_step(
                        state, windows, kappa, t, n1, actions, comm_ok)
                    dl_attempts += a; dl_success += b
                    t_cloud += c; t_comm += d; planner_calls += e
                else:
                    stats = self._hybrid_step(state, windows, kappa, t, n1,
                                              k_slots, actions, comm_ok,
                                              last_scores, history)
                    ul_attempts += stats[0]; ul_success += stats[1]
                    dl_attempts += stats[2]; dl_success += stats[3]
                    t_cloud += stats[4]; t_comm += stats[5]
                    planner_calls += stats[6]

            # --- execute ---
            prev_positions = list(state.positions)
            prev_goals = list(state.goals)
            at_goal_prev = [state.at_goal(i) for i in range(cfg.n_agents)]
            winner_rng = lambda cell, _t=t: substream(self.seed, "arb", _t, cell.x, cell.y)
            outcome = step(self.grid, state, actions, cfg.kernel,
                           agent_rngs, winner_rng)

            # --- tasks, rewards, accounting ---
            prev_dist = [abs(prev_positions[i].x - prev_goals[i].x)
                         + abs(prev_positions[i].y - prev_goals[i].y)
                         for i in range(cfg.n_agents)]
            next_dist = [abs(outcome.executed[i].x - prev_goals[i].x)
                         + abs(outcome.executed[i].y - prev_goals[i].y)
                         for i in range(cfg.n_agents)]
            rewards = reward(outcome, actions, prev_positions, prev_dist,
                             next_dist, at_goal_prev, comm_ok, cfg.reward_params)
            total_reward += sum(rewards)

            for i in range(cfg.n_agents):
                if next_dist[i] == 0 and prev_dist[i] != 0:
                    state.tasks_completed[i] += 1
                    log.record(i, t + 1)
                    rng = substream(self.seed, "tasks", i, task_counters[i])
                    task_counters[i] += 1
                    state.goals[i] = source.next_goal(i, state.positions[i], rng)

            conflict_cells = []
            for i in range(cfg.n_agents):
                ev = outcome.events[i]
                for e in counts:
                    if e in ev:
                        counts[e] += 1
                if "vertex" in ev or "edge" in ev:
                    conflict_cells.append(prev_positions[i])
            pre_conflicts += (outcome.pre_arbitration_conflicts["vertex"]
                              + outcome.pre_arbitration_conflicts["edge"])
            last_conflict_cells = conflict_cells
            history.step(conflict_cells)

        n_steps = cfg.horizon
        ms = 1000.0 / n_steps
        return MetricsRecord(
            map_name=os.path.splitext(os.path.basename(cfg.map_path))[0],
            n_agents=cfg.n_agents,
            channel_ratio=cfg.channel_ratio,
            controller=cfg.controller,
            seed=self.seed,
            tnct=tnct(log),
            throughput=throughput(log),
            vertex_conflicts=counts["vertex"],
            edge_conflicts=counts["edge"],
            wall_hits=counts["wall"],
            waits=counts["wait"],
            ul_success_rate=(ul_success / ul_attempts) if ul_attempts else 0.0,
            dl_success_rate=(dl_success / dl_attempts) if dl_attempts else 0.0,
            t_local_ms=t_local * ms if self.cfg.include_timings else 0.0,
            t_cloud_ms=t_cloud * ms if self.cfg.include_timings else 0.0,
            t_comm_ms=t_comm * ms if self.cfg.include_timings else 0.0,
            mean_reward=total_reward / (n_steps * cfg.n_agents),
            pre_arbitration_conflicts=pre_conflicts,
            planner_calls=planner_calls,
        )

    def _baseline_step(self, state, windows, kappa, t, n1, actions, comm_ok):
        """Top-K_o-by-SNR access; connected window agents take the planner
        action, everyone else keeps the local A* step."""
        cfg = self.cfg
        k_o = int(round(cfg.channel_ratio * cfg.n_agents))
        tic = time.perf_counter()
        connected = topk_snr(state.positions, self.rmap, k_o)
        succ: Set[int] = set()
        dl_attempts = dl_successes = 0
        for i in connected:
            pos = state.positions[i]
            bits = dl.dl_bit_length(_peers_in_fov(state.positions, i, cfg.scheduler.fov_size))
            rate = dl.dl_rate(bits, n1)
            ok = self._sample_packet(t, i, "dl", self.rmap.snr_dl_db[pos.y, pos.x],
                                     rate, n1)
            dl_attempts += 1
            dl_successes += int(ok)
            comm_ok[i] = ok
            if ok:
                succ.add(i)
        t_comm = time.perf_counter() - tic

        tic = time.perf_counter()
        cloud_actions, calls = self._plan_windows(state, windows, kappa, succ, t)
        for i, a in cloud_actions.items():
            actions[i] = a
        t_cloud = time.perf_counter() - tic
        return dl_attempts, dl_successes, t_cloud, t_comm, calls

    def _hybrid_step(self, state, windows, kappa, t, n1, k_slots, actions,
                     comm_ok, last_scores, history):
        cfg = self.cfg
        sched = cfg.scheduler

        # --- uplink: sender selection + RB allocation ---
        tic = time.perf_counter()
        centers = self._risk_centers_now(history)
        nn = ul.visibility(state.positions, centers, sched.fov_size)
        p_nom = {}
        for i in range(cfg.n_agents):
            pos = state.positions[i]
            bits = ul.ul_bit_length(_peers_in_fov(state.positions, i, sched.fov_size))
            p_nom[i] = self._p_succ_cached("ul", pos, bits, n1)
        senders = ul.greedy_select(centers, list(range(cfg.n_agents)), nn,
                                   p_nom, k_slots)
        ul_attempts = ul_successes = 0
        ul_failed: Set[int] = set()
        if senders:
            bits_map = {i: ul.ul_bit_length(
                _peers_in_fov(state.positions, i, sched.fov_size))
                for i in senders}
            snr_map = {i: float(self.rmap.snr_ul_db[state.positions[i].y,
                                                    state.positions[i].x])
                       for i in senders}
            c_ul = max(len(senders), k_slots)
            budget = replace(cfg.comm, c_ul=c_ul,
                             total_rbs=max(cfg.comm.total_rbs, c_ul + cfg.comm.c_dl))
            plan = ul.allocate_ul(bits_map, snr_map, budget, cfg.link)
            for g in plan.grants:
                n_i = n1 * g.rb_count
                ok = self._sample_packet(t, g.agent, "ul",
                                         snr_map[g.agent], g.bits / n_i, n_i)
                ul_attempts += 1
                ul_successes += int(ok)
                if not ok:
                    ul_failed.add(g.agent)
                    comm_ok[g.agent] = False
        t_comm = time.perf_counter() - tic

        # --- cloud: plan windows, score candidates, select DL grants ---
        tic = time.perf_counter()
        eligible = set(range(cfg.n_agents))
        cloud_actions, calls = self._plan_windows(state, windows, kappa,
                                                  eligible, t)
        scores: Dict[int, float] = {}
        residuals: Dict[int, np.ndarray] = {}
        if cloud_actions:
            candidates = sorted(cloud_actions)
            if len(candidates) > sched.max_scored:
                order = sorted(candidates, key=lambda i: (kappa[i], i),
                               reverse=True)  # lowest priority first
                candidates = sorted(order[:sched.max_scored])
            omega = sched.omega_map()
            for i in candidates:
                pos = state.positions[i]
                mask = legality_mask(self.grid, pos, state.at_goal(i))
                local_logits = local_policy_decide(self.grid, pos,
                                                   state.goals[i], self.cache)
                residual = np.zeros(5)
                residual[cloud_actions[i]] = sched.w_cloud
                klg = dl.kl_gap(local_logits, local_logits + residual, mask)
                if klg <= 0.0:
                    continue
                mc_factory = (lambda m, _i=i, _t=t:
                              substream(self.seed, "mc", _t, _i, m))
                rho, sigma = dl.risk_and_relief(
                    self.grid, state.positions, state.goals, i, self.cache,
                    cfg.kernel, cloud_actions, sched.mc, mc_factory)
                bits = dl.dl_bit_length(_peers_in_fov(state.positions, i,
                                                      sched.fov_size))
                p_dl = self._p_succ_cached("dl", pos, bits, n1)
                s = dl.dl_score(kappa[i], p_dl, rho, sigma, omega, klg)
                if s > 0.0:
                    scores[i] = s
                    residuals[i] = residual
        granted = dl.select_dl(scores, k_slots)
        last_scores.clear()
        last_scores.update(scores)
        t_cloud = time.perf_counter() - tic

        # --- downlink transmission + residual application ---
        tic = time.perf_counter()
        dl_attempts = dl_successes = 0
        for i in granted:
            pos = state.positions[i]
            bits = dl.dl_bit_length(_peers_in_fov(state.positions, i, sched.fov_size))
            ok = self._sample_packet(t, i, "dl",
                                     float(self.rmap.snr_dl_db[pos.y, pos.x]),
                                     dl.dl_rate(bits, n1), n1)
            dl_attempts += 1
            dl_successes += int(ok)
            if not ok:
                comm_ok[i] = False
                continue
            mask = legality_mask(self.grid, pos, state.at_goal(i))
            local_logits = local_policy_decide(self.grid, pos, state.goals[i],
                                               self.cache)
            actions[i] = hybrid_decide(local_logits, mask, residuals[i])
        t_comm += time.perf_counter() - tic
        return (ul_attempts, ul_successes, dl_attempts, dl_successes,
                t_cloud, t_comm, calls)

    def _risk_centers_now(self, history: ul.ConflictHistory) -> List[ul.RiskCenter]:
        """Structural centers merged with the decayed conflict history.

        Same result as rebuilding from the grid each step, without the
        per-step free-cell degree scan.
        """
        weights = {c.cell: c.weight for c in self._structural_centers}
        for cell, cnt in history.counts.items():
            weights[cell] = weights.get(cell, 0.0) + cnt
        return [ul.RiskCenter(cell, w) for cell, w in sorted(weights.items())]


def run_episode(config: ExperimentConfig, seed: int) -> MetricsRecord:
    return _EpisodeRunner(config, seed).run()


def _run_one(args) -> MetricsRecord:
    config, seed = args
    return run_episode(config, seed)


def _worker_count() -> int:
    env = os.environ.get("MAPF_AIRSIM_THREADS", "1")
    n = int(env)
    if n == 0:
        n = os.cpu_count() or 1
    return max(1, n)


def sweep(configs: Sequence[ExperimentConfig]) -> List[MetricsRecord]:
    """Run every (config, seed) pair in deterministic order."""
    jobs = [(cfg, seed) for cfg in configs for seed in cfg.seeds]
    if not jobs:
        raise ValueError("empty sweep: no configs or no seeds")
    workers = _worker_count()
    if workers == 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))


def sweep_csv(records: Sequence[MetricsRecord]) -> str:
    lines = [",".join(CSV_COLUMNS)]
    lines.extend(r.csv_row() for r in records)
    return "\n".join(lines) + "\n"


def profile_runtime(records: Sequence[MetricsRecord]) -> Dict:
    """Per-(map, N) mean phase times and growth ratios across N doublings."""
    groups: Dict[Tuple[str, int], List[MetricsRecord]] = {}
    for r in records:
        if r.t_local_ms == 0.0 and r.t_cloud_ms == 0.0 and r.t_comm_ms == 0.0:
            raise ValueError("record has no phase timings")
        groups.setdefault((r.map_name, r.n_agents), []).append(r)
    keys = sorted(groups)
    if len(keys) < 2:
        raise ValueError("need records across >= 2 (map, N) settings")
    means = {}
    for key, rs in groups.items():
        means[key] = {
            "t_local_ms": float(np.mean([r.t_local_ms for r in rs])),
            "t_cloud_ms": float(np.mean([r.t_cloud_ms for r in rs])),
            "t_comm_ms": float(np.mean([r.t_comm_ms for r in rs])),
        }
        means[key]["t_total_ms"] = sum(means[key].values())
    ratios = {}
    for (m, n) in keys:
        if (m, 2 * n) in means:
            ratios[f"{m}:N{2 * n}/N{n}"] = (means[(m, 2 * n)]["t_total_ms"]
                                            / means[(m, n)]["t_total_ms"])
    return {"means": means, "doubling_ratios": ratios}


# ---------------------------------------------------------------------------
# Config file: flat "key = value" lines with dotted section prefixes.
# ---------------------------------------------------------------------------

class ConfigError(ValueError):
    pass


def _parse_scalar(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


_LIST_KEYS = {"run.seeds", "sweep.maps", "sweep.agents",
              "sweep.channel_ratios", "sweep.controllers"}

_KNOWN_KEYS = {
    "map.path", "map.scen",
    "run.agents", "run.horizon", "run.channel_ratio", "run.controller",
    "run.seeds",
    "kernel.eps_stay", "kernel.eps_side", "kernel.eps_back",
    "link.f0_hz", "link.b_rb_hz", "link.t_pkt_s", "link.eta",
    "link.p_tx_ul_dbm", "link.p_tx_dl_dbm", "link.nf_db",
    "link.shadow_sigma_db", "link.cell_size_m",
    "comm.total_rbs", "comm.target_per",
    "reward.r_goal", "reward.c_step", "reward.c_fail", "reward.c_wait",
    "reward.alpha_d", "reward.c_comm",
    "sched.mc_rollouts", "sched.mc_horizon", "sched.mc_decay",
    "sched.mc_radius", "sched.fov", "sched.priority_period",
    "sched.theta_b", "sched.w_cloud", "sched.max_scored",
    "sched.use_belief_masking", "sched.belief_horizon",
    "sched.omega_vertex", "sched.omega_edge", "sched.omega_wall",
    "sched.omega_wait",
    "planner.horizon", "planner.restarts", "planner.budget_s",
    "radio.ap_x", "radio.ap_y",
    "output.include_timings", "test.force_packet_success",
} | _LIST_KEYS


def parse_config_text(text: str) -> Dict[str, object]:
    values: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in _LIST_KEYS:
            values[key] = [_parse_scalar(v) for v in raw.split(",") if v.strip()]
        else:
            values[key] = _parse_scalar(raw)
    return values


def config_from_values(values: Dict[str, object],
                       base_dir: str = ".") -> ExperimentConfig:
    def path_of(p):
        return p if os.path.isabs(p) else os.path.join(base_dir, p)

    if "map.path" not in values:
        raise ConfigError("map.path is required")
    kernel = TransitionKernel(
        eps_stay=values.get("kernel.eps_stay", 0.05),
        eps_side=values.get("kernel.eps_side", 0.05),
        eps_back=values.get("kernel.eps_back", 0.0))
    link_kwargs = {}
    for key, attr in [("link.f0_hz", "f0_hz"), ("link.b_rb_hz", "b_rb_hz"),
                      ("link.t_pkt_s", "t_pkt_s"), ("link.eta", "eta"),
                      ("link.p_tx_ul_dbm", "p_tx_ul_dbm"),
                      ("link.p_tx_dl_dbm", "p_tx_dl_dbm"),
                      ("link.nf_db", "nf_db"),
                      ("link.shadow_sigma_db", "shadow_sigma_db"),
                      ("link.cell_size_m", "cell_size_m")]:
        if key in values:
            link_kwargs[attr] = float(values[key])
    link = LinkBudgetParams(**link_kwargs)
    comm = CommBudget(total_rbs=int(values.get("comm.total_rbs", 256)),
                      c_ul=8, c_dl=8,
                      target_per=float(values.get("comm.target_per", 0.1)))
    reward_params = RewardParams(
        r_goal=float(values.get("reward.r_goal", 100.0)),
        c_step=float(values.get("reward.c_step", 0.1)),
        c_fail=float(values.get("reward.c_fail", 10.0)),
        c_wait=float(values.get("reward.c_wait", 1.0)),
        alpha_d=float(values.get("reward.alpha_d", 1.0)),
        c_comm=float(values.get("reward.c_comm", 0.5)))
    mc = dl.RolloutParams(
        horizon=int(values.get("sched.mc_horizon", 4)),
        rollouts=int(values.get("sched.mc_rollouts", 4)),
        decay=float(values.get("sched.mc_decay", 0.9)),
        radius=int(values.get("sched.mc_radius", 3)))
    scheduler = SchedulerParams(
        mc=mc,
        omega=(float(values.get("sched.omega_vertex", 1.0)),
               float(values.get("sched.omega_edge", 1.0)),
               float(values.get("sched.omega_wall", 0.5)),
               float(values.get("sched.omega_wait", 0.25))),
        fov_size=int(values.get("sched.fov", 7)),
        priority_period=int(values.get("sched.priority_period", 16)),
        theta_b=float(values.get("sched.theta_b", 0.5)),
        w_cloud=float(values.get("sched.w_cloud", W_CLOUD_DEFAULT)),
        max_scored=int(values.get("sched.max_scored", 16)),
        use_belief_masking=bool(values.get("sched.use_belief_masking", True)),
        belief_horizon=int(values.get("sched.belief_horizon", 4)))
    planner = PlannerParams(
        horizon=int(values.get("planner.horizon", 6)),
        restarts=int(values.get("planner.restarts", 1)),
        budget_s=(float(values["planner.budget_s"])
                  if "planner.budget_s" in values else None))
    ap = None
    if "radio.ap_x" in values or "radio.ap_y" in values:
        ap = (int(values["radio.ap_x"]), int(values["radio.ap_y"]))
    seeds = tuple(int(s) for s in values.get("run.seeds", [0]))
    return ExperimentConfig(
        map_path=path_of(str(values["map.path"])),
        scen_path=(path_of(str(values["map.scen"])) if "map.scen" in values else None),
        n_agents=int(values.get("run.agents", 8)),
        horizon=int(values.get("run.horizon", 128)),
        channel_ratio=float(values.get("run.channel_ratio", 0.0)),
        controller=str(values.get("run.controller", "local")),
        kernel=kernel, link=link, comm=comm, reward_params=reward_params,
        scheduler=scheduler, planner=planner, ap_position=ap, seeds=seeds,
        force_packet_success=bool(values.get("test.force_packet_success", False)),
        include_timings=bool(values.get("output.include_timings", True)))


def load_config_file(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        values = parse_config_text(fh.read())
    return config_from_values(values, base_dir=os.path.dirname(os.path.abspath(path)))


def sweep_grid_from_values(values: Dict[str, object],
                           base_dir: str = ".") -> List[ExperimentConfig]:
    """Cartesian product (map, N, r_ch, controller) sharing the seed list."""
    base = config_from_values(
        {k: v for k, v in values.items() if not k.startswith("sweep.")}
        | ({"map.path": values["sweep.maps"][0]} if "sweep.maps" in values else {}),
        base_dir=base_dir)
    maps = values.get("sweep.maps", [base.map_path])
    agents = values.get("sweep.agents", [base.n_agents])
    ratios = values.get("sweep.channel_ratios", [base.channel_ratio])
    controllers = values.get("sweep.controllers", [base.controller])
    out = []
    for m in maps:
        mp = m if os.path.isabs(str(m)) else os.path.join(base_dir, str(m))
        for n in agents:
            for r in ratios:
                for ctrl in controllers:
                    out.append(replace(base, map_path=mp, n_agents=int(n),
                                       channel_ratio=float(r),
                                       controller=str(ctrl)))
    return out
