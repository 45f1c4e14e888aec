"""Deterministic co-simulation of lifelong grid path finding with
stochastic action execution and finite-blocklength wireless links."""

from .execution_engine import (Action, StepOutcome, TransitionKernel,
                               WaitCause, WorldState, arbitrate,
                               sample_proposal, step)
from .harness import (CSV_COLUMNS, ExperimentConfig, MetricsRecord,
                      PlannerParams, SchedulerParams, load_config_file,
                      profile_runtime, run_episode, sweep, sweep_csv,
                      topk_snr)
from .lifelong_tasks import (GoalSource, RewardParams, TaskLog, reward,
                             throughput, tnct)
from .map_model import (Cell, GridMap, MapFormatError, Scenario, manhattan,
                        parse_map, parse_scenario, serialize_map)
from .radio_link import (CommBudget, LinkBudgetParams, RadioMap,
                         build_radio_map, capacity, dispersion, p_loss,
                         p_succ, sample_packet, select_rate)

__version__ = "0.1.0"
