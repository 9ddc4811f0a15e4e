#!/usr/bin/env python3
"""
Environments Module
===================
The two cooperative tasks agents are trained on:

1. MatrixGame - one-step two-agent game with a fixed 3x3 payoff
2. ParticleNavigation - agents move on the plane and try to cover landmarks

Key Concepts:
- EnvState: complete simulator state; observations are derived from it
- Limited vision: an agent's observation never contains another agent's position
- Shared team reward: every agent receives the same reward
- step() is a pure function of (state, joint action); randomness only enters
  through reset()
"""

from dataclasses import dataclass, field, replace
from typing import Optional, Tuple, Union

import numpy as np

from errors import ConfigError, InvalidArgumentError, UnsupportedOperationError
from logger import get_logger

logger = get_logger(__name__)

SeedLike = Union[int, np.random.Generator, None]

# Rows are agent A's actions (a1, a2, a3), columns agent B's (b1, b2, b3)
MATRIX_GAME_PAYOFF = ((12.0, 6.0, 6.0),
                      (-6.0, 8.0, 0.0),
                      (-6.0, 0.0, 8.0))

# stay, up, down, left, right
PARTICLE_MOVES = np.array([[0.0, 0.0], [0.0, 1.0], [0.0, -1.0], [-1.0, 0.0], [1.0, 0.0]])


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ============================================================================
# STATE
# ============================================================================

@dataclass(frozen=True, eq=False)
class EnvState:
    """
    Full simulator state

    Attributes:
        timestep (int): steps taken in the current episode
        agent_positions: (n, 2) array, None for the matrix game
        agent_velocities: (n, 2) displacement of the last step, None for the matrix game
        landmark_positions: (n_landmarks, 2) array, None for the matrix game
    """
    timestep: int = 0
    agent_positions: Optional[np.ndarray] = None
    agent_velocities: Optional[np.ndarray] = None
    landmark_positions: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class StepResult:
    state: EnvState
    observations: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


# ============================================================================
# MATRIX GAME
# ============================================================================

@dataclass(frozen=True)
class MatrixGameSpec:
    payoff: Tuple[Tuple[float, ...], ...] = MATRIX_GAME_PAYOFF
    n_agents: int = 2
    episode_length: int = 1


class MatrixGame:
    """
    One-step cooperative game; both agents receive payoff[a][b]

    The only state is the timestep. Each agent observes its own identity
    one-hot, which carries no state content but lets the shared networks tell
    the row player from the column player.
    """

    kind = 'matrix_game'

    def __init__(self, spec: MatrixGameSpec = None):
        """
        Raises:
            InvalidArgumentError: If the payoff is not 3x3, or the spec asks for
                other than 2 agents or 1 step
        """
        self.spec = spec or MatrixGameSpec()
        self.payoff = np.array(self.spec.payoff, dtype=np.float64)
        if self.payoff.shape != (3, 3):
            raise InvalidArgumentError(f"payoff must be 3x3, got {self.payoff.shape}")
        if self.spec.n_agents != 2:
            raise InvalidArgumentError(f"the matrix game has exactly 2 agents, got {self.spec.n_agents}")
        if self.spec.episode_length != 1:
            raise InvalidArgumentError(f"the matrix game lasts exactly 1 step, got {self.spec.episode_length}")

    @property
    def n_agents(self) -> int:
        return self.spec.n_agents

    @property
    def n_actions(self) -> int:
        return self.payoff.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.n_agents

    @property
    def episode_length(self) -> int:
        return self.spec.episode_length

    def observe(self, state: EnvState) -> np.ndarray:
        # identity one-hot per agent, independent of the state
        return np.eye(self.n_agents)

    def reset(self, seed: SeedLike = None) -> Tuple[EnvState, np.ndarray]:
        state = EnvState(timestep=0)
        return state, self.observe(state)

    def step(self, state: EnvState, joint_action) -> StepResult:
        """
        Raises:
            InvalidArgumentError: wrong action count, action out of range, or
                stepping a finished episode
        """
        a, b = _check_joint_action(joint_action, self.n_agents, self.n_actions)
        if state.timestep >= self.episode_length:
            raise InvalidArgumentError("episode already finished; call reset()")
        next_state = EnvState(timestep=state.timestep + 1)
        return StepResult(next_state, self.observe(next_state), float(self.payoff[a, b]), True)

    def team_reward(self, state: EnvState) -> float:
        raise UnsupportedOperationError("team_reward is defined for the particle task only")


# ============================================================================
# PARTICLE NAVIGATION
# ============================================================================

@dataclass(frozen=True)
class ParticleEnvSpec:
    """
    Cooperative navigation settings

    The acceleration constant is kept for reference; motion uses a constant
    displacement per action.
    """
    n_agents: int = 3
    agent_radius: float = 0.15
    landmark_radius: float = 0.05
    world_bound: float = 1.0
    step_size: float = 0.1
    episode_length: int = 20
    collision_penalty: float = -1.0
    spawn_range: float = 0.9
    agent_acceleration: float = 7.0

    @property
    def n_landmarks(self) -> int:
        return self.n_agents


class ParticleNavigation:
    """
    n agents cover n landmarks

    Observation of agent i: own position, own velocity, then every landmark
    position relative to agent i. Other agents are invisible.

    Team reward: minus the sum over landmarks of the distance to the nearest
    agent, plus collision_penalty for every agent pair closer than the sum of
    their radii.
    """

    kind = 'navigation'

    def __init__(self, spec: ParticleEnvSpec = None):
        self.spec = spec or ParticleEnvSpec()
        if self.spec.n_agents < 1:
            raise InvalidArgumentError("the particle task needs at least one agent")

    @property
    def n_agents(self) -> int:
        return self.spec.n_agents

    @property
    def n_actions(self) -> int:
        return len(PARTICLE_MOVES)

    @property
    def obs_dim(self) -> int:
        return 4 + 2 * self.spec.n_landmarks

    @property
    def episode_length(self) -> int:
        return self.spec.episode_length

    def reset(self, seed: SeedLike = None) -> Tuple[EnvState, np.ndarray]:
        rng = _rng(seed)
        bound = self.spec.spawn_range
        state = EnvState(
            timestep=0,
            agent_positions=rng.uniform(-bound, bound, (self.n_agents, 2)),
            agent_velocities=np.zeros((self.n_agents, 2)),
            landmark_positions=rng.uniform(-bound, bound, (self.spec.n_landmarks, 2)),
        )
        return state, self.observe(state)

    def observe(self, state: EnvState) -> np.ndarray:
        """(n, obs_dim) observations, one row per agent"""
        pos = state.agent_positions
        relative = state.landmark_positions[None, :, :] - pos[:, None, :]
        return np.concatenate([pos, state.agent_velocities,
                               relative.reshape(self.n_agents, -1)], axis=1)

    def step(self, state: EnvState, joint_action) -> StepResult:
        """
        Move every agent one step, clamp to the world, score the new state

        Raises:
            InvalidArgumentError: wrong action count, action out of range, or
                stepping a finished episode
        """
        actions = np.array(_check_joint_action(joint_action, self.n_agents, self.n_actions))
        if state.timestep >= self.episode_length:
            raise InvalidArgumentError("episode already finished; call reset()")
        bound = self.spec.world_bound
        moved = np.clip(state.agent_positions + PARTICLE_MOVES[actions] * self.spec.step_size, -bound, bound)
        next_state = replace(state, timestep=state.timestep + 1, agent_positions=moved,
                             agent_velocities=moved - state.agent_positions)
        reward = self.team_reward(next_state)
        done = next_state.timestep >= self.episode_length
        return StepResult(next_state, self.observe(next_state), reward, done,
                          {'collisions': self.count_collisions(next_state)})

    def count_collisions(self, state: EnvState) -> int:
        pos = state.agent_positions
        gaps = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
        upper = np.triu_indices(self.n_agents, k=1)
        return int(np.sum(gaps[upper] < 2 * self.spec.agent_radius))

    def team_reward(self, state: EnvState) -> float:
        distances = np.linalg.norm(state.landmark_positions[:, None, :] - state.agent_positions[None, :, :], axis=-1)
        nearest = distances.min(axis=1)
        return float(-nearest.sum() + self.count_collisions(state) * self.spec.collision_penalty)


def _check_joint_action(joint_action, n_agents: int, n_actions: int):
    actions = [int(a) for a in np.asarray(joint_action).reshape(-1)]
    if len(actions) != n_agents:
        raise InvalidArgumentError(f"expected {n_agents} actions, got {len(actions)}")
    for agent, action in enumerate(actions):
        if not 0 <= action < n_actions:
            raise InvalidArgumentError(f"agent {agent}: action {action} out of range [0, {n_actions})")
    return actions


def make_environment(env_config):
    """
    Build the environment described by an EnvironmentConfig

    Raises:
        ConfigError: If the matrix game is asked for other than 2 agents or 1 step
        InvalidArgumentError: If the kind is unknown
    """
    if env_config.kind == 'matrix_game':
        if env_config.n_agents != 2:
            raise ConfigError('environment.n_agents',
                              f"the matrix game has exactly 2 agents, got {env_config.n_agents}")
        if env_config.episode_length != 1:
            raise ConfigError('environment.episode_length',
                              f"the matrix game lasts exactly 1 step, got {env_config.episode_length}")
        logger.debug("Matrix game: 2 agents, 3 actions, one step")
        return MatrixGame(MatrixGameSpec(n_agents=env_config.n_agents, episode_length=env_config.episode_length))
    if env_config.kind == 'navigation':
        logger.debug(f"Particle navigation: {env_config.n_agents} agents, "
                     f"{env_config.episode_length} steps per episode")
        return ParticleNavigation(ParticleEnvSpec(
            n_agents=env_config.n_agents,
            agent_radius=env_config.agent_radius,
            landmark_radius=env_config.landmark_radius,
            world_bound=env_config.world_bound,
            step_size=env_config.step_size,
            episode_length=env_config.episode_length,
            collision_penalty=env_config.collision_penalty,
            spawn_range=env_config.spawn_range,
            agent_acceleration=env_config.agent_acceleration,
        ))
    raise InvalidArgumentError(f"unknown environment kind: {env_config.kind}")
