#!/usr/bin/env python3
"""
Sequential Communication Module
===============================
The two-phase protocol run by the agents at every timestep.

1. Negotiation: agents share hidden states, roll their intentions forward under
   the world model and broadcast intention values. The agent with the highest
   value moves first; the procedure repeats for the remaining agents with the
   upper agents' actions fixed, until every agent has a level.
2. Launching: agents decide one level at a time. Each agent conditions on the
   actions of all upper-level agents and sends its own action to every lower
   level agent. The joint action is then executed at once.

Key Concepts:
- OrderSequence: permutation of agent ids, position = decision level
- Intention rollout: H world-model steps under a sampled order for the
  remaining agents; its value is the discounted mean of predicted rewards
- Intention value: mean over F rollouts with different sampled lower orders
- No environment handle reaches this module; rollouts only use the networks
- Batching: all rollouts of one level, across environments, candidates and
  futures, run as one batch. Each environment draws from its own generator,
  so results do not depend on how many environments run together.
"""

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from autodiff import DTYPE, Tensor
from errors import InvalidArgumentError
from logger import get_logger
from networks import AgentNetworks, Categorical, peer_layout

logger = get_logger(__name__)

NEGOTIATION = 'negotiation'
LAUNCHING = 'launching'

# Above this many remaining agents, lower orders are drawn one permutation
# at a time instead of enumerating all of them
ENUMERATION_LIMIT = 6


# ============================================================================
# DATA TYPES
# ============================================================================

@dataclass(frozen=True)
class OrderSequence:
    """
    Priority of decision-making at one timestep

    ``agents[k]`` decides at level k + 1; level 1 decides first.
    """
    agents: Tuple[int, ...]

    def __post_init__(self):
        agents = tuple(int(a) for a in self.agents)
        object.__setattr__(self, 'agents', agents)
        if sorted(agents) != list(range(len(agents))):
            raise InvalidArgumentError(f"order {list(agents)} is not a permutation of 0..{len(agents) - 1}")

    def __len__(self):
        return len(self.agents)

    def __iter__(self):
        return iter(self.agents)

    def __getitem__(self, level_index):
        return self.agents[level_index]

    def level_of(self, agent: int) -> int:
        """1-based decision level of ``agent``"""
        return self.agents.index(agent) + 1

    def uppers(self, agent: int) -> Tuple[int, ...]:
        return self.agents[:self.agents.index(agent)]

    def as_text(self) -> str:
        return '-'.join(str(a) for a in self.agents)


@dataclass(frozen=True, eq=False)
class PredictedTrajectory:
    """
    H world-model steps: predicted joint observations, actions and rewards

    Attributes:
        order: full order used for every step of the rollout
        observations: (H, n * obs_dim) predictions o_{t+1} .. o_{t+H}
        actions: (H, n) actions a_t .. a_{t+H-1}
        rewards: (H,) predicted rewards r_{t+1} .. r_{t+H}
    """
    order: OrderSequence
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.rewards)


@dataclass(frozen=True, eq=False)
class IntentionValue:
    """Mean value of F rollouts for one candidate first-mover"""
    agent: int
    value: float
    lower_orders: Tuple[Tuple[int, ...], ...]
    trajectory_values: Tuple[float, ...]
    trajectories: Tuple[PredictedTrajectory, ...] = ()


@dataclass
class CommLog:
    """
    Message counts

    ``reference_value_messages`` is n(n-1)/2 per negotiation: the count one
    would get with one value broadcast per pair of agents. It is reported
    next to the value messages the level-by-level procedure actually sends.
    """
    hidden_broadcasts: int = 0
    value_messages: int = 0
    reference_value_messages: int = 0
    action_messages: int = 0
    timesteps: int = 0

    def __add__(self, other: 'CommLog') -> 'CommLog':
        return CommLog(
            hidden_broadcasts=self.hidden_broadcasts + other.hidden_broadcasts,
            value_messages=self.value_messages + other.value_messages,
            reference_value_messages=self.reference_value_messages + other.reference_value_messages,
            action_messages=self.action_messages + other.action_messages,
            timesteps=self.timesteps + other.timesteps,
        )

    def scaled(self, factor: int) -> 'CommLog':
        return CommLog(self.hidden_broadcasts * factor, self.value_messages * factor,
                       self.reference_value_messages * factor, self.action_messages * factor,
                       self.timesteps * factor)

    def to_dict(self) -> dict:
        return {
            'hidden_broadcasts': self.hidden_broadcasts,
            'value_messages': self.value_messages,
            'reference_value_messages': self.reference_value_messages,
            'action_messages': self.action_messages,
            'timesteps': self.timesteps,
        }

    def per_timestep(self) -> dict:
        steps = max(self.timesteps, 1)
        return {key: value / steps for key, value in self.to_dict().items() if key != 'timesteps'}


def count_messages(n_agents: int, phase: str) -> CommLog:
    """
    Messages exchanged during one timestep's negotiation or launching phase

    Negotiation: every agent broadcasts its hidden state once, then every
    level with r >= 2 undecided agents costs r value messages.
    Launching: the level-k agent sends its action to the n - k lower agents.

    Raises:
        InvalidArgumentError: If n < 1 or the phase is unknown
    """
    if n_agents < 1:
        raise InvalidArgumentError(f"need at least one agent, got {n_agents}")
    pairs = n_agents * (n_agents - 1) // 2
    if phase == NEGOTIATION:
        values = sum(n_agents - k + 1 for k in range(1, n_agents))
        return CommLog(hidden_broadcasts=n_agents, value_messages=values, reference_value_messages=pairs)
    if phase == LAUNCHING:
        return CommLog(action_messages=pairs)
    raise InvalidArgumentError(f"unknown phase {phase!r}; expected {NEGOTIATION!r} or {LAUNCHING!r}")


def trajectory_value(rewards: Sequence[float], gamma: float, horizon: int) -> float:
    """
    Discounted mean of predicted rewards: sum_k gamma^k r_k / H

    Raises:
        InvalidArgumentError: If len(rewards) != horizon or gamma is outside (0, 1]
    """
    rewards = np.asarray(rewards, dtype=DTYPE).reshape(-1)
    if horizon < 1 or rewards.size != horizon:
        raise InvalidArgumentError(f"expected {horizon} rewards, got {rewards.size}")
    if not 0.0 < gamma <= 1.0:
        raise InvalidArgumentError(f"gamma must lie in (0, 1], got {gamma}")
    discounts = gamma ** np.arange(horizon, dtype=DTYPE)
    return float(np.dot(discounts, rewards) / horizon)


def sample_lower_orders(agents: Sequence[int], futures: int, rng: np.random.Generator) -> List[Tuple[int, ...]]:
    """
    Draw ``futures`` orders of the given agents uniformly at random

    Orders are distinct whenever ``futures`` does not exceed the number of
    permutations; otherwise they are drawn with replacement.
    """
    agents = tuple(sorted(agents))
    if not agents:
        return [()] * futures
    total = math.factorial(len(agents))
    if len(agents) <= ENUMERATION_LIMIT:
        perms = list(itertools.permutations(agents))
        picks = rng.choice(total, size=futures, replace=futures > total)
        return [perms[int(i)] for i in picks]
    orders: List[Tuple[int, ...]] = []
    seen = set()
    while len(orders) < futures:
        order = tuple(int(a) for a in rng.permutation(agents))
        if order not in seen:
            seen.add(order)
            orders.append(order)
    return orders


def slot_positions(n_agents: int) -> np.ndarray:
    """(n, n) table: column of agent a within agent b's peer slots, -1 on the diagonal"""
    table = np.full((n_agents, n_agents), -1, dtype=np.int64)
    for b, peers in enumerate(peer_layout(n_agents)):
        table[b, peers] = np.arange(len(peers))
    return table


def _share_actions(slots: np.ndarray, agents: np.ndarray, actions: np.ndarray, positions: np.ndarray):
    """Write each row's decided action into the peer slots of the other agents"""
    rows = np.arange(len(agents))
    for b in range(slots.shape[1]):
        sel = agents != b
        slots[rows[sel], b, positions[b, agents[sel]]] = actions[sel]


def _pick(dist: Categorical, greedy: bool, row_rngs: Sequence[np.random.Generator]) -> np.ndarray:
    if greedy:
        return dist.mode()
    return dist.inverse_cdf(np.array([rng.random() for rng in row_rngs]))


# ============================================================================
# NEGOTIATION
# ============================================================================

class IntentionEvaluator:
    """
    Monte Carlo intention values under the world model

    Args:
        networks (AgentNetworks): shared policy, encoder and world model
        horizon (int): rollout depth H
        futures (int): rollouts per candidate F
        gamma (float): discount inside trajectory values
        greedy (bool): rollout actions are the distribution mode; False samples
    """

    def __init__(self, networks: AgentNetworks, horizon: int, futures: int, gamma: float, greedy: bool = True):
        if horizon < 1 or futures < 1:
            raise InvalidArgumentError(f"horizon and futures must be at least 1, got H={horizon}, F={futures}")
        self.networks = networks
        self.horizon = horizon
        self.futures = futures
        self.gamma = gamma
        self.greedy = greedy

    def _check_hidden(self, joint_hidden: np.ndarray):
        width = self.networks.hidden_width
        if joint_hidden.ndim != 3 or joint_hidden.shape[2] != width:
            raise InvalidArgumentError(f"joint hidden states must be (n, {width}), got {joint_hidden.shape[1:]}")

    def rollout_batch(self, joint_hidden: np.ndarray, orders: np.ndarray, fixed_actions: np.ndarray,
                      row_rngs: Sequence[np.random.Generator]) -> List[PredictedTrajectory]:
        """
        Roll K joint states forward for H steps

        Args:
            joint_hidden: (K, n, hidden) starting hidden states
            orders: (K, n) full order per rollout, used at every step
            fixed_actions: (K, n) by level position; >= 0 pins that level's
                action at the first step, -1 lets the policy choose
            row_rngs: generator per rollout, used only when sampling

        Returns:
            list: one PredictedTrajectory per rollout
        """
        net = self.networks
        joint_hidden = np.asarray(joint_hidden, dtype=DTYPE)
        self._check_hidden(joint_hidden)
        rollouts, n, width = joint_hidden.shape
        layout = peer_layout(n)
        positions = slot_positions(n)
        base = np.arange(rollouts, dtype=np.int64) * n
        rows = np.arange(rollouts)
        hidden = joint_hidden.reshape(rollouts * n, width)

        observations = np.zeros((rollouts, self.horizon, n * net.obs_dim))
        actions_taken = np.zeros((rollouts, self.horizon, n), dtype=np.int64)
        rewards = np.zeros((rollouts, self.horizon))
        for step in range(self.horizon):
            # upper actions are shared downward within each predicted step
            slots = np.full((rollouts, n, n - 1), -1, dtype=np.int64)
            actions = np.full((rollouts, n), -1, dtype=np.int64)
            for level in range(n):
                agents = orders[:, level]
                feats = net.features(hidden, base + agents, base[:, None] + layout[agents], slots[rows, agents])
                chosen = _pick(Categorical(net.policy(feats)), self.greedy, row_rngs)
                # levels negotiated so far keep their committed action
                if step == 0:
                    chosen = np.where(fixed_actions[:, level] >= 0, fixed_actions[:, level], chosen)
                actions[rows, agents] = chosen
                _share_actions(slots, agents, chosen, positions)
            obs_pred, reward = net.world_forward(hidden.reshape(rollouts, n, width), actions)
            observations[:, step] = obs_pred.data
            actions_taken[:, step] = actions
            rewards[:, step] = reward.data[:, 0]
            # predicted observations are re-encoded as the next hidden states
            hidden = net.encode(obs_pred.data.reshape(rollouts * n, net.obs_dim)).data

        return [PredictedTrajectory(OrderSequence(orders[k]), observations[k], actions_taken[k], rewards[k])
                for k in range(rollouts)]

    def evaluate(self, joint_hidden: np.ndarray, candidates: Sequence[Sequence[int]],
                 fixed: Sequence[Sequence[Tuple[int, int]]],
                 rngs: Sequence[np.random.Generator]) -> List[List[IntentionValue]]:
        """
        Intention values of every candidate in every environment

        Args:
            joint_hidden: (E, n, hidden)
            candidates: per environment, the undecided agents to score
            fixed: per environment, the (agent, action) pairs already fixed
            rngs: per environment generator (lower orders and sampled actions)

        Returns:
            list: per environment, one IntentionValue per candidate
        """
        joint_hidden = np.asarray(joint_hidden, dtype=DTYPE)
        self._check_hidden(joint_hidden)
        n = joint_hidden.shape[1]
        # one rollout row per (environment, candidate, lower order)
        starts, orders, pinned, row_rngs, spans = [], [], [], [], []
        for env, (env_candidates, env_fixed) in enumerate(zip(candidates, fixed)):
            fixed_agents = [agent for agent, _ in env_fixed]
            env_spans = []
            for candidate in env_candidates:
                if candidate in fixed_agents:
                    raise InvalidArgumentError(f"agent {candidate} is already fixed at an upper level")
                rest = [a for a in range(n) if a != candidate and a not in fixed_agents]
                lowers = sample_lower_orders(rest, self.futures, rngs[env])
                env_spans.append((candidate, len(orders), lowers))
                for lower in lowers:
                    orders.append(fixed_agents + [candidate] + list(lower))
                    pinned.append([action for _, action in env_fixed] + [-1] * (n - len(env_fixed)))
                    starts.append(joint_hidden[env])
                    row_rngs.append(rngs[env])
            spans.append(env_spans)

        # all rows in a single batched rollout
        trajectories = self.rollout_batch(np.stack(starts), np.array(orders, dtype=np.int64),
                                          np.array(pinned, dtype=np.int64), row_rngs)
        results = []
        for env_spans in spans:
            env_values = []
            for candidate, first, lowers in env_spans:
                trajs = tuple(trajectories[first:first + len(lowers)])
                values = tuple(trajectory_value(t.rewards, self.gamma, self.horizon) for t in trajs)
                env_values.append(IntentionValue(candidate, float(np.mean(values)),
                                                 tuple(tuple(o) for o in lowers), values, trajs))
            results.append(env_values)
        return results


def rollout_intention(first_mover: int, fixed_uppers: Sequence[Tuple[int, int]], joint_hidden,
                      networks: AgentNetworks, horizon: int, futures: int, gamma: float,
                      rng: np.random.Generator, greedy: bool = True) -> IntentionValue:
    """
    Intention value of ``first_mover`` with ``fixed_uppers`` above it

    Args:
        first_mover (int): candidate agent
        fixed_uppers (list): (agent, action) pairs already fixed, in level order
        joint_hidden: (n, hidden) hidden states of all agents
        networks (AgentNetworks): shared policy, encoder and world model
        horizon (int): H
        futures (int): F
        gamma (float): discount
        rng: generator for lower orders (and actions in sampled mode)

    Raises:
        InvalidArgumentError: first_mover already fixed, H or F below 1,
            or hidden width mismatch
    """
    evaluator = IntentionEvaluator(networks, horizon, futures, gamma, greedy)
    return evaluator.evaluate(np.asarray(joint_hidden, dtype=DTYPE)[None], [[first_mover]],
                              [list(fixed_uppers)], [rng])[0][0]


@dataclass
class NegotiationResult:
    orders: List[OrderSequence]
    # per environment, per level: the intention values that were compared
    intentions: List[List[List[IntentionValue]]]
    # per environment: the fixed (agent, action) pairs, in level order
    fixed: List[List[Tuple[int, int]]]
    comm: CommLog = field(default_factory=CommLog)


BatchEvaluate = Callable[[np.ndarray, List[List[int]], List[List[Tuple[int, int]]],
                          List[np.random.Generator]], List[List[IntentionValue]]]


def _slots_from_fixed(n: int, fixed: Sequence[Tuple[int, int]]) -> np.ndarray:
    slots = np.full((n, n - 1), -1, dtype=np.int64)
    positions = slot_positions(n)
    for agent, action in fixed:
        for b in range(n):
            if b != agent:
                slots[b, positions[b, agent]] = action
    return slots


def determine_priorities(joint_hidden, networks: AgentNetworks, horizon: int, futures: int, gamma: float,
                         rngs: Sequence[np.random.Generator], greedy: bool = True,
                         evaluate: Optional[BatchEvaluate] = None) -> NegotiationResult:
    """
    Negotiate an OrderSequence for each of E environments

    Level by level: score every undecided agent, make the best one (lowest id
    on ties) the next level, fix its action given the already fixed upper
    actions, and repeat with that action as conditioning.

    Args:
        joint_hidden: (E, n, hidden) hidden states per environment
        networks (AgentNetworks): shared networks
        horizon, futures, gamma: rollout settings
        rngs (list): one generator per environment
        greedy (bool): greedy rollouts and fixed actions; False samples
        evaluate: replaces IntentionEvaluator.evaluate (same signature)

    Returns:
        NegotiationResult
    """
    joint_hidden = np.asarray(joint_hidden, dtype=DTYPE)
    envs, n = joint_hidden.shape[:2]
    if n < 1:
        raise InvalidArgumentError("need at least one agent")
    if evaluate is None:
        evaluate = IntentionEvaluator(networks, horizon, futures, gamma, greedy).evaluate

    fixed: List[List[Tuple[int, int]]] = [[] for _ in range(envs)]
    remaining = [list(range(n)) for _ in range(envs)]
    intentions: List[List[List[IntentionValue]]] = [[] for _ in range(envs)]
    layout = peer_layout(n)
    while len(remaining[0]) > 1:
        scored = evaluate(joint_hidden, remaining, fixed, list(rngs))
        winners = []
        for env in range(envs):
            values = [iv.value for iv in scored[env]]
            # remaining stays sorted, so argmax breaks ties toward the lowest id
            winners.append(remaining[env][int(np.argmax(values))])
            intentions[env].append(list(scored[env]))

        # fix each winner's action conditioned on the upper actions so far
        hidden = joint_hidden.reshape(envs * n, -1)
        base = np.arange(envs, dtype=np.int64) * n
        agents = np.array(winners, dtype=np.int64)
        slots = np.stack([_slots_from_fixed(n, fixed[env])[winners[env]] for env in range(envs)])
        feats = networks.features(hidden, base + agents, base[:, None] + layout[agents], slots)
        actions = _pick(Categorical(networks.policy(feats)), greedy, rngs)
        for env in range(envs):
            fixed[env].append((winners[env], int(actions[env])))
            remaining[env].remove(winners[env])

    # the last undecided agent takes the lowest level without a rollout
    orders = [OrderSequence(tuple(a for a, _ in fixed[env]) + tuple(remaining[env])) for env in range(envs)]
    comm = count_messages(n, NEGOTIATION).scaled(envs)
    return NegotiationResult(orders, intentions, fixed, comm)


def determine_priority(joint_hidden, networks: AgentNetworks, horizon: int, futures: int, gamma: float,
                       rng: np.random.Generator, greedy: bool = True,
                       evaluate: Optional[Callable[[List[int], List[Tuple[int, int]]], Sequence[float]]] = None
                       ) -> OrderSequence:
    """
    OrderSequence for one joint state

    Args:
        joint_hidden: (n, hidden)
        evaluate: optional ``evaluate(candidates, fixed_uppers) -> values``
            used instead of world-model rollouts
    """
    joint_hidden = np.asarray(joint_hidden, dtype=DTYPE)
    batch_evaluate = None
    if evaluate is not None:
        def batch_evaluate(hidden, candidates, fixed, rngs):
            values = evaluate(list(candidates[0]), list(fixed[0]))
            return [[IntentionValue(agent, float(v), (), ()) for agent, v in zip(candidates[0], values)]]
    return determine_priorities(joint_hidden[None], networks, horizon, futures, gamma, [rng],
                                greedy, batch_evaluate).orders[0]


# ============================================================================
# LAUNCHING
# ============================================================================

@dataclass(eq=False)
class LaunchResult:
    """
    Outcome of the launching phase for E environments

    Attributes:
        actions: (E, n) joint actions to execute simultaneously
        log_probs: (E, n) log-probability of each chosen action
        values: (E, n) critic estimate under the same conditioning
        entropies: (E, n)
        peer_slots: (E, n, n-1) the peer actions each agent conditioned on
        comm (CommLog): action messages sent
    """
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    entropies: np.ndarray
    peer_slots: np.ndarray
    comm: CommLog


def launch(networks: AgentNetworks, hidden, orders: Optional[Sequence[OrderSequence]],
           rngs: Sequence[np.random.Generator], greedy: bool = False,
           share_hidden: bool = True, share_actions: bool = True) -> LaunchResult:
    """
    Sequential action selection for E environments

    Args:
        networks (AgentNetworks): shared networks
        hidden: (E*n, hidden) hidden states, row e*n + i for agent i
        orders (list): OrderSequence per environment; may be None when
            share_actions is False
        rngs (list): generator per environment
        greedy (bool): mode of the distribution instead of sampling
        share_hidden (bool): False zeroes the attention context
        share_actions (bool): False decides all agents at once with no
            upper actions

    Returns:
        LaunchResult
    """
    hidden = np.asarray(hidden.data if isinstance(hidden, Tensor) else hidden, dtype=DTYPE)
    envs = len(rngs)
    n = hidden.shape[0] // envs
    layout = peer_layout(n)
    positions = slot_positions(n)
    base = np.arange(envs, dtype=np.int64) * n
    rows = np.arange(envs)

    actions = np.full((envs, n), -1, dtype=np.int64)
    log_probs = np.zeros((envs, n))
    values = np.zeros((envs, n))
    entropies = np.zeros((envs, n))
    slots = np.full((envs, n, n - 1), -1, dtype=np.int64)
    # slots as each agent saw them when it decided
    conditioned = slots.copy()

    if share_actions:
        if orders is None or len(orders) != envs:
            raise InvalidArgumentError("an OrderSequence per environment is required")
        order_table = np.array([o.agents for o in orders], dtype=np.int64)
        # level k decides after seeing the actions of levels 1..k-1
        for level in range(n):
            agents = order_table[:, level]
            conditioned[rows, agents] = slots[rows, agents]
            feats = networks.features(hidden, base + agents, base[:, None] + layout[agents],
                                      slots[rows, agents], share_hidden)
            dist = Categorical(networks.policy(feats))
            chosen = _pick(dist, greedy, rngs)
            actions[rows, agents] = chosen
            log_probs[rows, agents] = dist.log_prob(chosen)
            entropies[rows, agents] = dist.entropy()
            values[rows, agents] = networks.critic(feats).data
            _share_actions(slots, agents, chosen, positions)
        # every upper agent sends its action to every lower one
        comm = count_messages(n, LAUNCHING).scaled(envs)
    else:
        # all agents at once; every peer slot stays -1
        self_rows = (base[:, None] + np.arange(n)[None, :]).reshape(-1)
        peer_rows = (base[:, None, None] + layout[None]).reshape(envs * n, n - 1)
        feats = networks.features(hidden, self_rows, peer_rows, slots.reshape(envs * n, n - 1), share_hidden)
        dist = Categorical(networks.policy(feats))
        # one draw per agent, each from its own environment's generator
        chosen = _pick(dist, greedy, [rngs[e] for e in range(envs) for _ in range(n)])
        actions = chosen.reshape(envs, n)
        log_probs = dist.log_prob(chosen).reshape(envs, n)
        entropies = dist.entropy().reshape(envs, n)
        values = networks.critic(feats).data.reshape(envs, n)
        comm = CommLog()
    return LaunchResult(actions, log_probs, values, entropies, conditioned, comm)


def launching_step(order: OrderSequence, joint_hidden, networks: AgentNetworks, mode: str,
                   rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, CommLog]:
    """
    Launching phase for one joint state

    Args:
        order (OrderSequence): decision levels
        joint_hidden: (n, hidden)
        mode (str): 'sample' or 'greedy'

    Returns:
        tuple: joint action (n,), log-probs (n,), CommLog
    """
    if mode not in ('sample', 'greedy'):
        raise InvalidArgumentError(f"mode must be 'sample' or 'greedy', got {mode!r}")
    joint_hidden = np.asarray(joint_hidden, dtype=DTYPE)
    if len(order) != joint_hidden.shape[0]:
        raise InvalidArgumentError(f"order covers {len(order)} agents, got {joint_hidden.shape[0]} hidden states")
    result = launch(networks, joint_hidden, [order], [rng], greedy=(mode == 'greedy'))
    return result.actions[0], result.log_probs[0], result.comm
