#!/usr/bin/env python3
"""
Training Module
===============
On-policy training of the shared agent networks.

Workflow per update:
1. Collect rollouts from a pool of environments under the ordering mode
2. Compute GAE advantages and returns-to-go
3. PPO-clip policy update, value regression, world-model regression
4. Clear the buffer (strictly on-policy) and evaluate every few updates

Key Concepts:
- OrderingMode: how the decision order is chosen each timestep
  (seqcomm | fixed[:perm] | random | simultaneous | nocomm)
- RolloutBuffer: one update's transitions, stamped with the policy version
  that produced them
- WorldModelDataset: bounded FIFO of real environment transitions
- Random streams: every environment owns its generators, derived from the run
  seed and the environment index, so an environment's trajectory does not
  depend on how many environments run beside it
"""

import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from autodiff import (
    DTYPE, Adam, Tape, Tensor, concat, exp, log_softmax, minimum, mul, reduce_mean,
    reduce_sum, scale, softmax, square, sub,
)
from environments import make_environment
from errors import InvalidArgumentError
from logger import get_logger
from networks import AgentNetworks
from seqcomm import CommLog, OrderSequence, determine_priorities, launch
from utils import mean_std, stream_rng, stream_rngs

logger = get_logger(__name__)

# Random stream ids derived from the run seed
ENV_STREAM = 0
ACTION_STREAM = 1
UPDATE_STREAM = 2
EVAL_ENV_STREAM = 3
EVAL_ACTION_STREAM = 4
WARMUP_STREAM = 5

MODE_KINDS = ('seqcomm', 'fixed', 'random', 'simultaneous', 'nocomm')


# ============================================================================
# ORDERING MODES
# ============================================================================

@dataclass(frozen=True)
class OrderingMode:
    """
    How the priority of decision-making is set

    - seqcomm: negotiated every timestep under the world model
    - fixed: ``fixed:2,0,1`` pins one order for all episodes; plain ``fixed``
      draws an order per environment at each episode start and keeps it
    - random: a fresh random order every timestep
    - simultaneous: hidden states are shared, actions are not
    - nocomm: nothing is shared
    """
    kind: str
    order: Optional[Tuple[int, ...]] = None

    @classmethod
    def parse(cls, text: str) -> 'OrderingMode':
        """
        Raises:
            ValueError: If the text names no mode or the order is not a permutation
        """
        text = str(text).strip()
        kind, _, rest = text.partition(':')
        kind = kind.strip().lower()
        if kind not in MODE_KINDS:
            raise InvalidArgumentError(f"unknown ordering mode {text!r}; expected one of {MODE_KINDS}")
        if not rest:
            return cls(kind)
        if kind != 'fixed':
            raise InvalidArgumentError(f"only the fixed mode takes an order, got {text!r}")
        try:
            order = tuple(int(x) for x in rest.split(','))
        except ValueError:
            raise InvalidArgumentError(f"order must be comma-separated integers, got {rest!r}")
        OrderSequence(order)
        return cls(kind, order)

    @property
    def negotiates(self) -> bool:
        return self.kind == 'seqcomm'

    @property
    def share_hidden(self) -> bool:
        return self.kind != 'nocomm'

    @property
    def share_actions(self) -> bool:
        return self.kind in ('seqcomm', 'fixed', 'random')

    def __str__(self):
        if self.order is None:
            return self.kind
        return f"{self.kind}:{','.join(str(a) for a in self.order)}"


# ============================================================================
# BUFFERS
# ============================================================================

@dataclass
class RolloutBuffer:
    """
    Transitions of one update, indexed [timestep, env, ...]

    Attributes:
        observations: (T, E, n, obs_dim)
        hidden_states: (T, E, n, hidden)
        orders: T lists of E OrderSequences
        actions: (T, E, n)
        peer_slots: (T, E, n, n-1) peer actions each agent conditioned on
        rewards: (T, E) team reward
        values: (T, E, n)
        log_probs: (T, E, n)
        dones: (T, E)
        next_observations: (T, E, n, obs_dim), kept when supplied
        advantages / returns: (T, E, n), set by finalize()
        policy_version (int): learner version that collected the data
    """
    policy_version: int = 0
    observations: List[np.ndarray] = field(default_factory=list)
    hidden_states: List[np.ndarray] = field(default_factory=list)
    orders: List[List[OrderSequence]] = field(default_factory=list)
    actions: List[np.ndarray] = field(default_factory=list)
    peer_slots: List[np.ndarray] = field(default_factory=list)
    rewards: List[np.ndarray] = field(default_factory=list)
    values: List[np.ndarray] = field(default_factory=list)
    log_probs: List[np.ndarray] = field(default_factory=list)
    dones: List[np.ndarray] = field(default_factory=list)
    next_observations: List[np.ndarray] = field(default_factory=list)
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def add(self, observations, hidden_states, orders, actions, peer_slots, rewards, values, log_probs, dones,
            next_observations=None):
        self.observations.append(np.asarray(observations, dtype=DTYPE))
        self.hidden_states.append(np.asarray(hidden_states, dtype=DTYPE))
        self.orders.append(list(orders))
        self.actions.append(np.asarray(actions, dtype=np.int64))
        self.peer_slots.append(np.asarray(peer_slots, dtype=np.int64))
        self.rewards.append(np.asarray(rewards, dtype=DTYPE))
        self.values.append(np.asarray(values, dtype=DTYPE))
        self.log_probs.append(np.asarray(log_probs, dtype=DTYPE))
        self.dones.append(np.asarray(dones, dtype=bool))
        if next_observations is not None:
            self.next_observations.append(np.asarray(next_observations, dtype=DTYPE))
        self.advantages = None
        self.returns = None

    def __len__(self):
        return len(self.rewards)

    @property
    def finalized(self) -> bool:
        return self.advantages is not None and self.returns is not None

    def finalize(self, gamma: float, gae_lambda: float):
        """Compute per-agent advantages and returns; the rollout ends at episode boundaries"""
        if not self.rewards:
            raise InvalidArgumentError("cannot finalize an empty buffer")
        # team reward and done flags broadcast over the agent axis
        rewards = np.stack(self.rewards)[:, :, None]
        values = np.stack(self.values)
        dones = np.stack(self.dones)[:, :, None]
        # every episode ends inside the buffer, so the value after the last step is 0
        bootstrap = np.zeros((1,) + values.shape[1:])
        self.advantages, self.returns = compute_gae(
            rewards, np.concatenate([values, bootstrap]), gamma, gae_lambda, dones)

    def flat(self, name: str) -> np.ndarray:
        """Stack a per-timestep field and merge the (T, E) axes"""
        data = np.stack(getattr(self, name))
        return data.reshape((-1,) + data.shape[2:])

    def num_samples(self) -> int:
        return len(self) * (self.rewards[0].shape[0] if self.rewards else 0)

    def clear(self):
        for name in ('observations', 'hidden_states', 'orders', 'actions', 'peer_slots',
                     'rewards', 'values', 'log_probs', 'dones', 'next_observations'):
            getattr(self, name).clear()
        self.advantages = None
        self.returns = None


class WorldModelDataset:
    """
    Bounded FIFO of real transitions (obs, actions, next obs, reward)

    When full, the oldest transitions are overwritten.
    """

    def __init__(self, capacity: int, n_agents: int, obs_dim: int):
        if capacity < 1:
            raise InvalidArgumentError(f"capacity must be at least 1, got {capacity}")
        self.capacity = capacity
        self.observations = np.zeros((capacity, n_agents, obs_dim))
        self.actions = np.zeros((capacity, n_agents), dtype=np.int64)
        self.next_observations = np.zeros((capacity, n_agents, obs_dim))
        self.rewards = np.zeros(capacity)
        self._size = 0
        self._cursor = 0

    def __len__(self):
        return self._size

    def add(self, observations, actions, next_observations, rewards):
        """Append a batch of transitions (leading axis = environments)"""
        observations = np.asarray(observations, dtype=DTYPE)
        for i in range(observations.shape[0]):
            # overwrite the oldest slot once full
            slot = self._cursor
            self.observations[slot] = observations[i]
            self.actions[slot] = np.asarray(actions)[i]
            self.next_observations[slot] = np.asarray(next_observations)[i]
            self.rewards[slot] = np.asarray(rewards)[i]
            self._cursor = (self._cursor + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def arrays(self, indices=None) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Transitions in insertion order (oldest first), or the given indices"""
        if indices is None:
            start = self._cursor if self._size == self.capacity else 0
            indices = (start + np.arange(self._size)) % self.capacity
        return (self.observations[indices], self.actions[indices],
                self.next_observations[indices], self.rewards[indices])

    def split(self, holdout_fraction: float, rng: np.random.Generator):
        """Random (train, holdout) arrays"""
        order = rng.permutation(self._size)
        cut = int(round(self._size * (1.0 - holdout_fraction)))
        obs, actions, next_obs, rewards = self.arrays()
        train = tuple(a[order[:cut]] for a in (obs, actions, next_obs, rewards))
        holdout = tuple(a[order[cut:]] for a in (obs, actions, next_obs, rewards))
        return train, holdout


# ============================================================================
# ESTIMATORS AND LOSSES
# ============================================================================

def compute_gae(rewards, values, gamma: float, gae_lambda: float, dones=None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Generalized advantage estimation

    delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t
    A_t = delta_t + gamma * lambda * (1 - done_t) * A_{t+1}

    Args:
        rewards: (T, ...) rewards
        values: (T+1, ...) value estimates; the last entry bootstraps the
            state after the final step
        dones: optional (T, ...) episode ends; a done step does not bootstrap

    Returns:
        tuple: advantages and returns (= advantages + values[:T])

    Raises:
        InvalidArgumentError: If the lengths do not line up
    """
    rewards = np.asarray(rewards, dtype=DTYPE)
    values = np.asarray(values, dtype=DTYPE)
    steps = rewards.shape[0] if rewards.ndim else 0
    if values.shape[0] != steps + 1:
        raise InvalidArgumentError(f"need {steps + 1} values for {steps} rewards, got {values.shape[0]}")
    if dones is None:
        dones = np.zeros(rewards.shape, dtype=bool)
    dones = np.asarray(dones, dtype=DTYPE)
    if dones.shape[0] != steps:
        raise InvalidArgumentError(f"need {steps} done flags, got {dones.shape[0]}")

    shape = np.broadcast_shapes(rewards.shape[1:], values.shape[1:], dones.shape[1:])
    advantages = np.zeros((steps,) + shape)
    running = np.zeros(shape)
    for t in reversed(range(steps)):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * live - values[t]
        running = delta + gamma * gae_lambda * live * running
        advantages[t] = running
    return advantages, advantages + values[:steps]


def ppo_clip_objective(ratio, advantage, epsilon: float):
    """min(ratio * A, g(epsilon, A)) with g = (1 + eps) A for A >= 0, else (1 - eps) A"""
    ratio = np.asarray(ratio, dtype=DTYPE)
    advantage = np.asarray(advantage, dtype=DTYPE)
    clipped = np.where(advantage >= 0, (1.0 + epsilon) * advantage, (1.0 - epsilon) * advantage)
    result = np.minimum(ratio * advantage, clipped)
    return float(result) if result.ndim == 0 else result


def value_loss(predictions, returns) -> Tensor:
    """Mean squared error against returns-to-go"""
    return reduce_mean(square(sub(predictions, np.asarray(returns, dtype=DTYPE))))


def world_model_loss(networks: AgentNetworks, observations, actions, next_observations, rewards) -> Tensor:
    """
    Mean squared error of (next joint observations, reward) predictions

    Hidden states come from the shared encoder as constants; only the world
    model receives gradient.
    """
    observations = np.asarray(observations, dtype=DTYPE)
    batch, n, obs_dim = observations.shape
    hidden = networks.encode(observations.reshape(batch * n, obs_dim)).data.reshape(batch, n, -1)
    obs_pred, reward_pred = networks.world_forward(hidden, actions)
    target = np.concatenate([np.asarray(next_observations, dtype=DTYPE).reshape(batch, n * obs_dim),
                             np.asarray(rewards, dtype=DTYPE).reshape(batch, 1)], axis=1)
    return reduce_mean(square(sub(concat([obs_pred, reward_pred], axis=1), target)))


@dataclass
class PolicyUpdateStats:
    loss: float = 0.0
    first_objective: float = 0.0
    entropy: float = 0.0
    clip_fraction: float = 0.0


class PpoLearner:
    """
    Gradient updates for the policy, critic and world model

    The actor and critic optimizers each cover the shared encoder and
    action attention plus their own head.
    """

    def __init__(self, networks: AgentNetworks, ppo_config, world_model_config, share_hidden: bool = True):
        self.networks = networks
        self.config = ppo_config
        self.world_config = world_model_config
        self.share_hidden = share_hidden
        clip = ppo_config.max_grad_norm or None
        self.actor_optimizer = Adam(networks.actor_parameters(), ppo_config.actor_lr, clip)
        self.critic_optimizer = Adam(networks.critic_parameters(), ppo_config.critic_lr, clip)
        self.world_optimizer = Adam(networks.world_parameters(), world_model_config.lr, clip)
        self.version = 0
        self.last_policy_stats = PolicyUpdateStats()

    def _check_buffer(self, buffer: RolloutBuffer):
        if not buffer.finalized:
            raise InvalidArgumentError("buffer has no advantages/returns; call finalize() first")
        if buffer.policy_version != self.version:
            raise InvalidArgumentError(
                f"buffer was collected by policy version {buffer.policy_version}, learner is at {self.version}")

    def _minibatches(self, count: int, rng: np.random.Generator):
        order = rng.permutation(count)
        size = max(1, self.config.minibatch_size)
        for start in range(0, count, size):
            yield order[start:start + size]

    def policy_loss(self, observations, peer_slots, actions, old_log_probs, advantages) -> Tuple[Tensor, dict]:
        """
        Negative clipped surrogate minus the entropy bonus

        Args:
            observations: (B, n, obs_dim)
            peer_slots: (B, n, n-1)
            actions, old_log_probs, advantages: (B, n)
        """
        logits, _ = self.networks.forward_joint(observations, peer_slots, self.share_hidden)
        log_probs_all = log_softmax(logits)
        new_log_probs = self.networks.log_probs(logits, np.asarray(actions).reshape(-1))
        ratio = exp(sub(new_log_probs, np.asarray(old_log_probs, dtype=DTYPE).reshape(-1)))
        adv = np.asarray(advantages, dtype=DTYPE).reshape(-1)
        eps = self.config.clip_epsilon
        clipped = np.where(adv >= 0, (1.0 + eps) * adv, (1.0 - eps) * adv)
        surrogate = reduce_mean(minimum(mul(ratio, adv), clipped))
        entropy = scale(reduce_mean(reduce_sum(mul(softmax(logits), log_probs_all), axis=1)), -1.0)
        loss = sub(scale(surrogate, -1.0), scale(entropy, self.config.entropy_coef))
        stats = {
            'objective': surrogate.item(),
            'entropy': entropy.item(),
            'clip_fraction': float(np.mean(np.abs(ratio.data - 1.0) > eps)),
        }
        return loss, stats

    def update_policy(self, buffer: RolloutBuffer, rng: np.random.Generator) -> float:
        """
        PPO-clip epochs over the buffer; conditioning uses the stored peer slots

        Returns:
            float: mean loss over all minibatches
        """
        self._check_buffer(buffer)
        # the stored peer slots reproduce the conditioning used at collection time
        obs, slots = buffer.flat('observations'), buffer.flat('peer_slots')
        actions, old = buffer.flat('actions'), buffer.flat('log_probs')
        adv = buffer.advantages.reshape(actions.shape)
        # normalize over the whole buffer, not per minibatch
        if self.config.normalize_advantages and adv.size > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)

        losses, first, entropies, clips = [], None, [], []
        for _ in range(self.config.epochs):
            for idx in self._minibatches(len(obs), rng):
                with Tape() as tape:
                    loss, stats = self.policy_loss(obs[idx], slots[idx], actions[idx], old[idx], adv[idx])
                # ratio is exactly 1 on the first minibatch
                if first is None:
                    first = stats['objective']
                losses.append(self.actor_optimizer.minimize(tape, loss))
                entropies.append(stats['entropy'])
                clips.append(stats['clip_fraction'])
        self.last_policy_stats = PolicyUpdateStats(float(np.mean(losses)), float(first),
                                                   float(np.mean(entropies)), float(np.mean(clips)))
        return self.last_policy_stats.loss

    def update_value(self, buffer: RolloutBuffer, rng: np.random.Generator) -> float:
        """Regress V(AM_a(e(o), a_upper)) onto returns-to-go; mean loss over minibatches"""
        self._check_buffer(buffer)
        obs, slots = buffer.flat('observations'), buffer.flat('peer_slots')
        returns = buffer.returns.reshape(len(obs), -1)
        losses = []
        for _ in range(self.config.epochs):
            for idx in self._minibatches(len(obs), rng):
                with Tape() as tape:
                    _, values = self.networks.forward_joint(obs[idx], slots[idx], self.share_hidden)
                    loss = value_loss(values, returns[idx].reshape(-1))
                losses.append(self.critic_optimizer.minimize(tape, loss))
        return float(np.mean(losses))

    def update_world_model(self, dataset: WorldModelDataset, rng: np.random.Generator, epochs: int = 1) -> float:
        """
        Minibatch regression passes over the dataset

        Raises:
            InvalidArgumentError: If the dataset is empty
        """
        if len(dataset) == 0:
            raise InvalidArgumentError("world-model dataset is empty")
        obs, actions, next_obs, rewards = dataset.arrays()
        size = max(1, self.world_config.batch_size)
        losses = []
        for _ in range(epochs):
            order = rng.permutation(len(obs))
            for start in range(0, len(obs), size):
                idx = order[start:start + size]
                with Tape() as tape:
                    loss = world_model_loss(self.networks, obs[idx], actions[idx], next_obs[idx], rewards[idx])
                losses.append(self.world_optimizer.minimize(tape, loss))
        return float(np.mean(losses)) if losses else 0.0

    def finish_update(self, buffer: RolloutBuffer):
        """Retire the buffer; data from older versions is rejected afterwards"""
        buffer.clear()
        self.version += 1


def check_logprob_consistency(buffer: RolloutBuffer, networks: AgentNetworks, share_hidden: bool = True,
                              tolerance: float = 1e-9) -> float:
    """
    Recompute stored log-probs from the stored conditioning

    Returns:
        float: largest absolute difference

    Raises:
        RuntimeError: If the difference exceeds ``tolerance``
    """
    obs, slots = buffer.flat('observations'), buffer.flat('peer_slots')
    actions, stored = buffer.flat('actions'), buffer.flat('log_probs')
    logits, _ = networks.forward_joint(obs, slots, share_hidden)
    recomputed = networks.log_probs(logits, actions.reshape(-1)).data
    worst = float(np.max(np.abs(recomputed - stored.reshape(-1)))) if recomputed.size else 0.0
    if worst > tolerance:
        raise RuntimeError(f"stored log-probs differ from recomputation by {worst:.3e}")
    return worst


# ============================================================================
# ROLLOUTS
# ============================================================================

class EnvPool:
    """
    Independent copies of one environment, each with its own generator

    Args:
        env: environment (stateless; states are held here)
        count (int): number of parallel copies
        rngs (list): one generator per copy, used by reset()
    """

    def __init__(self, env, count: int, rngs: Sequence[np.random.Generator]):
        if len(rngs) != count:
            raise InvalidArgumentError(f"need {count} generators, got {len(rngs)}")
        self.env = env
        self.count = count
        self.rngs = list(rngs)
        self.states = [None] * count
        self.observations = None

    def reset(self) -> np.ndarray:
        obs = []
        for i in range(self.count):
            self.states[i], o = self.env.reset(self.rngs[i])
            obs.append(o)
        self.observations = np.stack(obs)
        return self.observations

    def step(self, joint_actions) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Returns:
            tuple: next observations (E, n, obs_dim), rewards (E,), dones (E,)
        """
        obs, rewards, dones = [], [], []
        for i in range(self.count):
            result = self.env.step(self.states[i], joint_actions[i])
            self.states[i] = result.state
            obs.append(result.observations)
            rewards.append(result.reward)
            dones.append(result.done)
        self.observations = np.stack(obs)
        return self.observations, np.array(rewards), np.array(dones)


@dataclass
class RolloutStats:
    comm: CommLog = field(default_factory=CommLog)
    order_counts: Counter = field(default_factory=Counter)
    episode_returns: List[float] = field(default_factory=list)
    step_rewards: List[float] = field(default_factory=list)


def choose_orders(mode: OrderingMode, networks: AgentNetworks, hidden: np.ndarray, rngs, ordering_config,
                  gamma: float, episode_orders: Optional[List[OrderSequence]]) -> Tuple[List[OrderSequence], CommLog]:
    """Orders for every environment at this timestep, plus negotiation messages"""
    envs, n = hidden.shape[:2]
    # seqcomm: negotiate from intention values
    if mode.negotiates:
        result = determine_priorities(hidden, networks, ordering_config.horizon, ordering_config.futures,
                                      gamma, rngs, ordering_config.greedy_rollouts)
        return result.orders, result.comm
    if mode.kind == 'fixed':
        # drawn at episode start, held every step
        orders = episode_orders
    elif mode.kind == 'random':
        orders = [OrderSequence(tuple(rng.permutation(n))) for rng in rngs]
    else:
        # placeholder; launch() shares no actions in these modes
        orders = [OrderSequence(tuple(range(n)))] * envs
    comm = CommLog(hidden_broadcasts=n * envs) if mode.share_hidden else CommLog()
    return orders, comm


def episode_orders_for(mode: OrderingMode, n_agents: int, rngs) -> Optional[List[OrderSequence]]:
    if mode.kind != 'fixed':
        return None
    if mode.order is not None:
        return [OrderSequence(mode.order)] * len(rngs)
    return [OrderSequence(tuple(rng.permutation(n_agents))) for rng in rngs]


def collect_rollouts(pool: EnvPool, networks: AgentNetworks, mode: OrderingMode, config,
                     rngs: Sequence[np.random.Generator], dataset: Optional[WorldModelDataset] = None,
                     policy_version: int = 0, episodes: int = 1,
                     greedy: bool = False) -> Tuple[RolloutBuffer, RolloutStats]:
    """
    Run ``episodes`` full episodes in every environment of the pool

    Each timestep: encode observations, pick orders (negotiating in seqcomm
    mode), launch actions level by level, step all environments with the
    joint actions.

    Args:
        pool (EnvPool): environments
        networks (AgentNetworks): shared networks
        mode (OrderingMode): ordering mode
        config (ExperimentConfig): ordering and ppo settings
        rngs (list): action/order generator per environment
        dataset (WorldModelDataset): receives every real transition
        policy_version (int): stamped on the buffer
        episodes (int): episodes per environment

    Returns:
        tuple: (RolloutBuffer, RolloutStats)
    """
    buffer = RolloutBuffer(policy_version=policy_version)
    stats = RolloutStats()
    env = pool.env
    n = env.n_agents
    for _ in range(episodes):
        obs = pool.reset()
        orders_this_episode = episode_orders_for(mode, n, rngs)
        returns = np.zeros(pool.count)
        done = np.zeros(pool.count, dtype=bool)
        while not done.all():
            # Step 1: encode every agent observation
            hidden = networks.encode(obs.reshape(pool.count * n, env.obs_dim)).data
            joint_hidden = hidden.reshape(pool.count, n, -1)
            # Step 2: decide who goes first
            orders, comm = choose_orders(mode, networks, joint_hidden, rngs, config.ordering,
                                         config.ppo.gamma, orders_this_episode)
            # Step 3: launch level by level, then act simultaneously
            launched = launch(networks, hidden, orders, rngs, greedy=greedy,
                              share_hidden=mode.share_hidden, share_actions=mode.share_actions)
            next_obs, rewards, done = pool.step(launched.actions)

            # Step 4: record the transition for PPO and the world model
            buffer.add(obs, joint_hidden, orders, launched.actions, launched.peer_slots,
                       rewards, launched.values, launched.log_probs, done, next_obs)
            if dataset is not None:
                dataset.add(obs, launched.actions, next_obs, rewards)
            stats.comm = stats.comm + comm + launched.comm + CommLog(timesteps=pool.count)
            stats.order_counts.update(o.as_text() for o in orders)
            stats.step_rewards.extend(rewards.tolist())
            returns += rewards
            obs = next_obs
        stats.episode_returns.extend(returns.tolist())
    return buffer, stats


def collect_random_transitions(pool: EnvPool, dataset: WorldModelDataset, steps: int,
                               rng: np.random.Generator) -> int:
    """Fill the world-model dataset with uniformly random joint actions"""
    env = pool.env
    collected = 0
    while collected < steps:
        obs = pool.reset()
        done = np.zeros(pool.count, dtype=bool)
        while not done.all():
            actions = rng.integers(0, env.n_actions, size=(pool.count, env.n_agents))
            next_obs, rewards, done = pool.step(actions)
            dataset.add(obs, actions, next_obs, rewards)
            collected += pool.count
            obs = next_obs
    return collected


@dataclass
class EvaluationResult:
    episode_returns: List[float]
    mean_return: float
    std_return: float
    mean_step_reward: float
    comm: CommLog
    order_counts: Dict[str, int]


def evaluate(networks: AgentNetworks, env, mode: OrderingMode, config, seed: int,
             episodes: Optional[int] = None, greedy: Optional[bool] = None) -> EvaluationResult:
    """
    Evaluation episodes on a dedicated pool

    The pool's generators depend only on ``seed``, so every evaluation of a
    run sees the same episode layouts.
    """
    episodes = episodes or config.evaluation.episodes
    greedy = config.evaluation.greedy if greedy is None else greedy
    pool = EnvPool(env, episodes, stream_rngs(seed, EVAL_ENV_STREAM, episodes))
    rngs = stream_rngs(seed, EVAL_ACTION_STREAM, episodes)
    _, stats = collect_rollouts(pool, networks, mode, config, rngs, greedy=greedy)
    mean, std = mean_std(stats.episode_returns)
    return EvaluationResult(stats.episode_returns, mean, std, float(np.mean(stats.step_rewards)),
                            stats.comm, dict(sorted(stats.order_counts.items())))


# ============================================================================
# TRAINER
# ============================================================================

@dataclass
class TrainingResult:
    records: List[dict]
    eval_returns: List[float]
    eval_steps: List[int]
    env_steps: int
    updates: int
    initial_state: Dict[str, np.ndarray]
    probe: Optional[RolloutBuffer] = None
    pre_update_state: Optional[Dict[str, np.ndarray]] = None


class Trainer:
    """
    Runs one (config, mode, seed) training job

    Usage:
        trainer = Trainer(config, seed=0, mode=OrderingMode.parse('seqcomm'))
        result = trainer.train(on_record=writer.write)
    """

    def __init__(self, config, seed: int, mode: Optional[OrderingMode] = None, run_id: str = ''):
        self.config = config
        self.seed = int(seed)
        self.mode = mode or OrderingMode.parse(config.ordering.mode)
        self.run_id = run_id
        self.env = make_environment(config.environment)
        if self.mode.order is not None and len(self.mode.order) != self.env.n_agents:
            raise InvalidArgumentError(
                f"order {list(self.mode.order)} does not cover {self.env.n_agents} agents")
        self.networks = AgentNetworks.from_config(self.env.obs_dim, self.env.n_actions, config.network, self.seed)
        self.learner = PpoLearner(self.networks, config.ppo, config.world_model, self.mode.share_hidden)
        n_envs = config.ppo.n_envs
        self.pool = EnvPool(self.env, n_envs, stream_rngs(self.seed, ENV_STREAM, n_envs))
        self.rollout_rngs = stream_rngs(self.seed, ACTION_STREAM, n_envs)
        self.update_rng = stream_rng(self.seed, UPDATE_STREAM)
        self.dataset = WorldModelDataset(config.world_model.capacity, self.env.n_agents, self.env.obs_dim)
        self.log = get_logger(__name__)

    @property
    def trains_world_model(self) -> bool:
        return self.mode.negotiates or self.config.world_model.train_in_all_modes

    def warm_up_world_model(self) -> float:
        """Random-policy transitions and a few regression epochs before negotiation starts"""
        wm = self.config.world_model
        if wm.warmup_steps <= 0 or wm.warmup_epochs <= 0:
            return 0.0
        pool = EnvPool(self.env, self.pool.count, stream_rngs(self.seed, WARMUP_STREAM, self.pool.count))
        collected = collect_random_transitions(pool, self.dataset, wm.warmup_steps,
                                               stream_rng(self.seed, WARMUP_STREAM))
        loss = self.learner.update_world_model(self.dataset, self.update_rng, wm.warmup_epochs)
        self.log.info(f"World model warm-up: {collected} random transitions, loss {loss:.4f}")
        return loss

    def train(self, total_env_steps: Optional[int] = None,
              on_record: Optional[Callable[[dict], None]] = None,
              on_timing: Optional[Callable[[dict], None]] = None) -> TrainingResult:
        """
        Train until ``total_env_steps`` environment steps have been collected

        Args:
            total_env_steps (int): overrides ppo.total_env_steps
            on_record: called with every metrics record
            on_timing: called with wall-clock records

        Returns:
            TrainingResult
        """
        cfg = self.config
        total = total_env_steps or cfg.ppo.total_env_steps
        initial_state = self.networks.state_dict()
        started = time.perf_counter()
        # the world model is trained before the first negotiation
        world_loss = self.warm_up_world_model() if self.trains_world_model else 0.0

        records, eval_returns, eval_steps = [], [], []
        env_steps, update = 0, 0
        comm_total, orders_total = CommLog(), Counter()
        probe, pre_update_state = None, None
        while env_steps < total:
            buffer, stats = collect_rollouts(self.pool, self.networks, self.mode, cfg, self.rollout_rngs,
                                             self.dataset if self.trains_world_model else None,
                                             self.learner.version, cfg.ppo.rollout_episodes)
            env_steps += buffer.num_samples()
            # messages and orders accumulate until the next evaluation
            comm_total = comm_total + stats.comm
            orders_total.update(stats.order_counts)
            if cfg.ppo.check_consistency:
                check_logprob_consistency(buffer, self.networks, self.mode.share_hidden)

            buffer.finalize(cfg.ppo.gamma, cfg.ppo.gae_lambda)
            # keep the last pre-update weights for the return-gap bound
            if env_steps >= total:
                pre_update_state = self.networks.state_dict()
            policy_loss = self.learner.update_policy(buffer, self.update_rng)
            critic_loss = self.learner.update_value(buffer, self.update_rng)
            if self.trains_world_model and cfg.world_model.epochs_per_update > 0:
                world_loss = self.learner.update_world_model(self.dataset, self.update_rng,
                                                             cfg.world_model.epochs_per_update)
            # the final batch survives as the probe; earlier ones are retired
            probe = buffer if env_steps >= total else None
            if probe is None:
                self.learner.finish_update(buffer)
            update += 1

            if update % cfg.evaluation.every_updates == 0 or env_steps >= total:
                result = evaluate(self.networks, self.env, self.mode, cfg, self.seed)
                record = {
                    'run_id': self.run_id,
                    'seed': self.seed,
                    'mode': str(self.mode),
                    'update': update,
                    'env_steps': env_steps,
                    'eval_return_mean': result.mean_return,
                    'eval_return_std': result.std_return,
                    'eval_step_reward_mean': result.mean_step_reward,
                    'train_return_mean': float(np.mean(stats.episode_returns)),
                    'losses': {
                        'policy': policy_loss,
                        'value': critic_loss,
                        'world_model': world_loss,
                        'entropy': self.learner.last_policy_stats.entropy,
                    },
                    'comm': comm_total.per_timestep(),
                    'order_histogram': dict(sorted(orders_total.items())),
                }
                if not records:
                    record['hyperparameters'] = cfg.hyperparameters()
                records.append(record)
                eval_returns.append(result.mean_return)
                eval_steps.append(env_steps)
                comm_total, orders_total = CommLog(), Counter()
                self.log.info(f"[{self.mode}] seed {self.seed} update {update} steps {env_steps}: "
                              f"eval return {result.mean_return:.3f} +- {result.std_return:.3f}")
                if on_record:
                    on_record(record)
                if on_timing:
                    on_timing({'run_id': self.run_id, 'update': update,
                               'wall_clock_s': round(time.perf_counter() - started, 3)})

        return TrainingResult(records, eval_returns, eval_steps, env_steps, update, initial_state, probe,
                              pre_update_state)
