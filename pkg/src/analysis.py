#!/usr/bin/env python3
"""
Analysis Module
===============
Diagnostics computed from trained networks and metrics streams:

1. Return-gap bound between model return and true return
2. Divergence estimates (per-level policy TV, world-model error proxy) that feed it
3. Monotonicity of evaluation returns and final-performance summaries
4. Ablation tables and learning curves for external plotting

Key Concepts:
- Level k: the decision position of an agent within one timestep's order
- epsilon_pi[k]: largest total-variation distance between the old and new
  level-k action distributions over a probe batch of real transitions
- epsilon_m: reported as a proxy built from squared prediction error; it is
  not a certified TV bound on the transition distribution
"""

from collections import defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from autodiff import DTYPE, softmax_array
from errors import InvalidArgumentError
from logger import get_logger
from utils import iter_metric_values, mean_std

logger = get_logger(__name__)

DISTRIBUTION_TOLERANCE = 1e-6
# probe level of an agent in a mode without a decision order
UNORDERED_LEVEL = -1

EPSILON_M_CAVEAT = ("epsilon_m is a proxy: min(1, sqrt(max per-transition squared prediction error)) "
                    "on the probe batch, not a bound on the total-variation distance of the true "
                    "transition distribution")


# ============================================================================
# RETURN-GAP BOUND
# ============================================================================

@dataclass(frozen=True)
class BoundInputs:
    """
    Inputs of the return-gap bound

    Attributes:
        epsilon_m (float): world-model error bound (or its proxy)
        epsilon_pi (tuple): per-level policy divergence bounds, level 1 first
        gamma (float): discount in (0, 1)
        r_max (float): largest reward magnitude
        epsilon_m_is_proxy (bool): epsilon_m was estimated, not given
    """
    epsilon_m: float
    epsilon_pi: Tuple[float, ...]
    gamma: float
    r_max: float
    epsilon_m_is_proxy: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'epsilon_pi', tuple(float(e) for e in self.epsilon_pi))
        if not 0.0 < self.gamma < 1.0:
            raise InvalidArgumentError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.r_max <= 0:
            raise InvalidArgumentError(f"r_max must be positive, got {self.r_max}")
        if self.epsilon_m < 0 or any(e < 0 for e in self.epsilon_pi):
            raise InvalidArgumentError("divergence bounds must be nonnegative")

    @property
    def epsilon_pi_sum(self) -> float:
        return float(sum(self.epsilon_pi))

    def to_dict(self) -> dict:
        return {
            'epsilon_m': self.epsilon_m,
            'epsilon_pi': list(self.epsilon_pi),
            'epsilon_pi_sum': self.epsilon_pi_sum,
            'gamma': self.gamma,
            'r_max': self.r_max,
            'epsilon_m_is_proxy': self.epsilon_m_is_proxy,
        }


def return_gap_bound(inputs: BoundInputs) -> float:
    """
    Largest gap between model return and true return

    C = 2 gamma r_max (eps_m + 2 sum eps_pi) / (1 - gamma)^2
        + 4 r_max sum eps_pi / (1 - gamma)

    Example:
        gamma=0.95, r_max=1, eps_m=0.1, sum eps_pi=0.05 gives 152 + 4 = 156.0
    """
    gamma, r_max = inputs.gamma, inputs.r_max
    eps_pi = inputs.epsilon_pi_sum
    model_term = 2.0 * gamma * r_max * (inputs.epsilon_m + 2.0 * eps_pi) / (1.0 - gamma) ** 2
    policy_term = 4.0 * r_max * eps_pi / (1.0 - gamma)
    return model_term + policy_term


def format_bound_report(inputs: BoundInputs, bound: float) -> str:
    lines = [
        f"gamma        : {inputs.gamma}",
        f"r_max        : {inputs.r_max:.6g}",
        f"epsilon_m    : {inputs.epsilon_m:.6g}{' (proxy)' if inputs.epsilon_m_is_proxy else ''}",
    ]
    for level, eps in enumerate(inputs.epsilon_pi, start=1):
        lines.append(f"epsilon_pi[{level}]: {eps:.6g}")
    lines.append(f"C            : {bound:.6g}")
    if inputs.epsilon_m_is_proxy:
        lines.append(f"note: {EPSILON_M_CAVEAT}")
    return '\n'.join(lines)


# ============================================================================
# DIVERGENCES
# ============================================================================

def tv_distance(p, q) -> float:
    """
    Total-variation distance 0.5 * sum |p_i - q_i|

    Raises:
        InvalidArgumentError: If the vectors differ in length or are not
            probability distributions
    """
    p = np.asarray(p, dtype=DTYPE)
    q = np.asarray(q, dtype=DTYPE)
    if p.ndim != 1 or p.shape != q.shape:
        raise InvalidArgumentError(f"distributions must be vectors of equal length, got {p.shape} and {q.shape}")
    for name, dist in (('p', p), ('q', q)):
        if np.any(dist < -DISTRIBUTION_TOLERANCE) or abs(dist.sum() - 1.0) > DISTRIBUTION_TOLERANCE:
            raise InvalidArgumentError(f"{name} is not a probability distribution")
    return float(min(1.0, 0.5 * np.abs(p - q).sum()))


@dataclass
class ProbeBatch:
    """
    Real transitions with the conditioning each agent acted under

    Attributes:
        observations: (B, n, obs_dim)
        levels: (B, n) decision level of each agent, 0 for the first mover;
            -1 for every agent when the mode had no decision order
        actions: (B, n)
        peer_slots: (B, n, n-1) peer actions each agent saw, -1 where unknown
        next_observations: (B, n, obs_dim)
        rewards: (B,) team rewards
        share_hidden (bool): whether the agents exchanged hidden states
        mode (str): ordering mode that collected the batch
    """
    observations: np.ndarray
    levels: np.ndarray
    actions: np.ndarray
    peer_slots: np.ndarray
    next_observations: np.ndarray
    rewards: np.ndarray
    share_hidden: bool = True
    mode: str = ''

    def __len__(self):
        return int(self.observations.shape[0])

    @property
    def n_agents(self) -> int:
        return int(self.observations.shape[1])

    @classmethod
    def from_buffer(cls, buffer, share_hidden: bool = True, mode: str = '',
                    ordered: bool = True) -> 'ProbeBatch':
        """
        Probe batch from a rollout buffer that kept its next observations

        Args:
            buffer (RolloutBuffer): finished rollouts
            share_hidden (bool): whether the agents exchanged hidden states
            mode (str): ordering mode label
            ordered (bool): False when the mode shares no actions; the buffer's
                orders are then placeholders and every level is recorded as -1

        Raises:
            InvalidArgumentError: If the buffer is empty or lacks next observations
        """
        if len(buffer) == 0:
            raise InvalidArgumentError("cannot build a probe batch from an empty buffer")
        if len(buffer.next_observations) != len(buffer):
            raise InvalidArgumentError("buffer did not record next observations")
        observations = buffer.flat('observations')
        n = observations.shape[1]
        if ordered:
            levels = np.array([[order.level_of(agent) - 1 for agent in range(n)]
                               for step in buffer.orders for order in step], dtype=np.int64)
        else:
            levels = np.full(observations.shape[:2], UNORDERED_LEVEL, dtype=np.int64)
        return cls(observations, levels, buffer.flat('actions'), buffer.flat('peer_slots'),
                   buffer.flat('next_observations'), buffer.flat('rewards'), share_hidden, mode)

    def subset(self, indices) -> 'ProbeBatch':
        indices = np.asarray(indices, dtype=np.int64)
        return ProbeBatch(self.observations[indices], self.levels[indices], self.actions[indices],
                          self.peer_slots[indices], self.next_observations[indices],
                          self.rewards[indices], self.share_hidden, self.mode)


def policy_divergences(old_probs, new_probs, levels) -> Tuple[float, ...]:
    """
    Per-level maximum TV distance between two sets of action distributions

    Args:
        old_probs, new_probs: (B, n, n_actions) distributions per agent
        levels: (B, n) level of each agent, -1 where there was no order

    Returns:
        tuple: one value per level; a level never occupied reports 0.0.
            Agents without a level are independent factors of the joint
            policy and are reported in their own agent slot.
    """
    old_probs = np.asarray(old_probs, dtype=DTYPE)
    new_probs = np.asarray(new_probs, dtype=DTYPE)
    levels = np.asarray(levels, dtype=np.int64)
    if old_probs.shape != new_probs.shape or old_probs.shape[:2] != levels.shape:
        raise InvalidArgumentError("old, new and level arrays do not line up")
    n = levels.shape[1]
    worst = [0.0] * n
    for b in range(levels.shape[0]):
        for agent in range(n):
            level = int(levels[b, agent])
            if level == UNORDERED_LEVEL:
                level = agent
            worst[level] = max(worst[level], tv_distance(old_probs[b, agent], new_probs[b, agent]))
    return tuple(worst)


def action_distributions(networks, probe: ProbeBatch) -> np.ndarray:
    """(B, n, n_actions) policy distributions under the recorded conditioning"""
    logits, _ = networks.forward_joint(probe.observations, probe.peer_slots, probe.share_hidden)
    return softmax_array(logits.data).reshape(len(probe), probe.n_agents, -1)


def model_error_proxy(predicted_next, predicted_rewards, probe: ProbeBatch) -> float:
    """
    min(1, sqrt(max per-transition mean squared error))

    Zero for a model that reproduces every probe transition; never decreases
    when transitions are added to the probe.
    """
    batch = len(probe)
    predicted = np.concatenate([np.asarray(predicted_next, dtype=DTYPE).reshape(batch, -1),
                                np.asarray(predicted_rewards, dtype=DTYPE).reshape(batch, 1)], axis=1)
    target = np.concatenate([probe.next_observations.reshape(batch, -1),
                             probe.rewards.reshape(batch, 1)], axis=1)
    per_transition = np.mean((predicted - target) ** 2, axis=1)
    return float(min(1.0, np.sqrt(per_transition.max())))


WorldModel = Union[object, Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]]


def _predict_transitions(world_model, probe: ProbeBatch) -> Tuple[np.ndarray, np.ndarray]:
    if callable(world_model) and not hasattr(world_model, 'world_forward'):
        return world_model(probe.observations, probe.actions)
    batch, n, obs_dim = probe.observations.shape
    hidden = world_model.encode(probe.observations.reshape(batch * n, obs_dim)).data.reshape(batch, n, -1)
    next_pred, reward_pred = world_model.world_forward(hidden, probe.actions)
    return next_pred.data.reshape(batch, n, obs_dim), reward_pred.data.reshape(batch)


def estimate_divergences(old, new, probe: ProbeBatch, gamma: float,
                         world_model: Optional[WorldModel] = None,
                         r_max: Optional[float] = None) -> BoundInputs:
    """
    Bound inputs estimated on a probe batch

    Args:
        old: networks of the data-collecting policy
        new: networks after the update
        probe (ProbeBatch): real transitions collected by ``old``
        gamma (float): discount
        world_model: networks whose world model is scored, or a callable
            ``(observations, actions) -> (next_observations, rewards)``;
            defaults to ``new``
        r_max (float): reward magnitude; defaults to the largest |reward| in the probe

    Raises:
        InvalidArgumentError: If the probe is empty or r_max cannot be positive
    """
    if len(probe) == 0:
        raise InvalidArgumentError("probe batch is empty")
    epsilon_pi = policy_divergences(action_distributions(old, probe), action_distributions(new, probe),
                                    probe.levels)
    next_pred, reward_pred = _predict_transitions(world_model if world_model is not None else new, probe)
    epsilon_m = model_error_proxy(next_pred, reward_pred, probe)
    if r_max is None:
        r_max = float(np.max(np.abs(probe.rewards)))
        if r_max == 0.0:
            raise InvalidArgumentError("every probe reward is zero; pass r_max explicitly")
    logger.debug(f"Divergences over {len(probe)} probe transitions: eps_pi={epsilon_pi}, eps_m={epsilon_m:.4g}")
    return BoundInputs(epsilon_m, epsilon_pi, gamma, r_max, epsilon_m_is_proxy=True)


# ============================================================================
# TRAINING REPORTS
# ============================================================================

@dataclass
class MonotonicityReport:
    flags: List[bool]
    fraction: float
    start_index: int = 0

    def to_dict(self) -> dict:
        return {'flags': self.flags, 'fraction': self.fraction, 'start_index': self.start_index}


def monotonicity_report(series: Sequence[float], warmup_fraction: float = 0.0) -> MonotonicityReport:
    """
    Nondecrease flags between consecutive evaluations

    The first ``warmup_fraction`` of the series is skipped. With fewer than
    two points left the fraction is 1.0.

    Example:
        [1, 2, 2, 1, 3] gives flags [T, T, F, T] and fraction 0.75

    Raises:
        InvalidArgumentError: If the series is empty or the fraction is outside [0, 1)
    """
    if len(series) == 0:
        raise InvalidArgumentError("return series is empty")
    if not 0.0 <= warmup_fraction < 1.0:
        raise InvalidArgumentError(f"warmup_fraction must lie in [0, 1), got {warmup_fraction}")
    start = int(len(series) * warmup_fraction)
    values = [float(v) for v in series[start:]]
    flags = [b >= a for a, b in zip(values, values[1:])]
    fraction = float(np.mean(flags)) if flags else 1.0
    return MonotonicityReport(flags, fraction, start)


def final_window_mean(series: Sequence[float], window: int) -> float:
    """Mean of the last ``window`` evaluations (all of them if fewer)"""
    if len(series) == 0:
        raise InvalidArgumentError("return series is empty")
    return float(np.mean(series[-max(1, window):]))


@dataclass
class TrainingReport:
    """
    Evaluation returns of one mode across seeds

    Attributes:
        mode (str): ordering mode
        steps: seed -> env step of every evaluation
        returns: seed -> mean evaluation return of every evaluation
        monotonicity: seed -> MonotonicityReport
        final_returns: seed -> mean over the final window
    """
    mode: str
    steps: Dict[int, List[int]] = field(default_factory=dict)
    returns: Dict[int, List[float]] = field(default_factory=dict)
    monotonicity: Dict[int, MonotonicityReport] = field(default_factory=dict)
    final_returns: Dict[int, float] = field(default_factory=dict)

    @property
    def seeds(self) -> List[int]:
        return sorted(self.returns)

    @property
    def final_mean_std(self) -> Tuple[float, float]:
        return mean_std([self.final_returns[s] for s in self.seeds])

    @property
    def mean_monotone_fraction(self) -> float:
        if not self.monotonicity:
            return 0.0
        return float(np.mean([self.monotonicity[s].fraction for s in self.seeds]))

    def to_dict(self) -> dict:
        mean, std = self.final_mean_std
        return {
            'mode': self.mode,
            'seeds': self.seeds,
            'final_return_mean': mean,
            'final_return_std': std,
            'mean_monotone_fraction': self.mean_monotone_fraction,
            'per_seed': {
                str(s): {
                    'steps': self.steps[s],
                    'eval_returns': self.returns[s],
                    'final_return': self.final_returns[s],
                    'monotonicity': self.monotonicity[s].to_dict(),
                } for s in self.seeds
            },
        }


def build_training_report(mode: str, runs: Dict[int, Tuple[Sequence[int], Sequence[float]]],
                          final_window: int = 10, warmup_fraction: float = 0.2) -> TrainingReport:
    """
    Args:
        mode (str): ordering mode label
        runs (dict): seed -> (evaluation steps, evaluation returns)

    Raises:
        InvalidArgumentError: If a seed's steps and returns differ in length
    """
    report = TrainingReport(mode)
    for seed, (steps, returns) in sorted(runs.items()):
        if len(steps) != len(returns):
            raise InvalidArgumentError(f"seed {seed}: {len(steps)} steps but {len(returns)} returns")
        report.steps[seed] = [int(s) for s in steps]
        report.returns[seed] = [float(r) for r in returns]
        report.monotonicity[seed] = monotonicity_report(returns, warmup_fraction)
        report.final_returns[seed] = final_window_mean(returns, final_window)
    return report


def runs_from_records(records: Sequence[dict]) -> Dict[int, Tuple[List[int], List[float]]]:
    """Group metrics records by seed into (steps, returns) series"""
    runs = defaultdict(lambda: ([], []))
    for record in sorted(records, key=lambda r: (r['seed'], r['update'])):
        steps, returns = runs[int(record['seed'])]
        steps.append(int(record['env_steps']))
        returns.append(float(record['eval_return_mean']))
    return dict(runs)


# ============================================================================
# ABLATION TABLES AND CURVES
# ============================================================================

ABLATION_HEADER = ('name', 'mode', 'runs', 'final_return_mean', 'final_return_std',
                   'mean_monotone_fraction')
CURVE_HEADER = ('step', 'mode', 'mean', 'std', 'n')


def ablation_rows(reports: Dict[str, TrainingReport]) -> List[Tuple]:
    rows = []
    for name, report in reports.items():
        mean, std = report.final_mean_std
        rows.append((name, report.mode, len(report.seeds), round(mean, 6), round(std, 6),
                     round(report.mean_monotone_fraction, 6)))
    return rows


def pairwise_ordering(reports: Dict[str, TrainingReport]) -> List[Tuple[str, str, float]]:
    """(a, b, mean_a - mean_b) for every pair of named modes, in listing order"""
    means = {name: report.final_mean_std[0] for name, report in reports.items()}
    return [(a, b, means[a] - means[b]) for a, b in combinations(means, 2)]


def learning_curves(records_by_label: Dict[str, Sequence[dict]]) -> List[Tuple]:
    """
    Rows (step, label, mean, std, n) of evaluation return across seeds

    Seeds are aligned by env step; a step reached by fewer seeds reports
    the smaller n.
    """
    rows = []
    for label, records in records_by_label.items():
        by_step = defaultdict(list)
        for step, value in iter_metric_values(records, 'eval_return_mean'):
            by_step[step].append(value)
        for step in sorted(by_step):
            mean, std = mean_std(by_step[step])
            rows.append((step, label, round(mean, 6), round(std, 6), len(by_step[step])))
    return rows
