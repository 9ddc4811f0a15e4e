"""
Unit tests for the environments module

Tests the one-step matrix game and cooperative particle navigation.
"""

import numpy as np
import pytest

from config import EnvironmentConfig
from environments import (
    MATRIX_GAME_PAYOFF, EnvState, MatrixGame, MatrixGameSpec, ParticleEnvSpec, ParticleNavigation,
    make_environment,
)
from errors import ConfigError, InvalidArgumentError, UnsupportedOperationError


def nav_state(agents, landmarks):
    agents = np.asarray(agents, dtype=float)
    return EnvState(timestep=0, agent_positions=agents, agent_velocities=np.zeros_like(agents),
                    landmark_positions=np.asarray(landmarks, dtype=float))


class TestMatrixGame:
    """Test the one-step cooperative matrix game"""

    def test_dimensions(self):
        game = MatrixGame()
        assert (game.n_agents, game.n_actions, game.obs_dim, game.episode_length) == (2, 3, 2, 1)

    def test_observations_are_identity_one_hots(self):
        _, obs = MatrixGame().reset(seed=5)
        np.testing.assert_array_equal(obs, np.eye(2))

    @pytest.mark.parametrize('a, b', [(0, 0), (0, 1), (1, 1), (2, 2), (2, 0)])
    def test_reward_is_payoff_entry(self, a, b):
        game = MatrixGame()
        state, _ = game.reset()
        result = game.step(state, [a, b])
        assert result.reward == MATRIX_GAME_PAYOFF[a][b]
        assert result.done

    def test_best_joint_action_pays_twelve(self):
        assert MatrixGame().payoff.max() == 12.0
        assert MatrixGame().payoff[0, 0] == 12.0

    def test_best_responses(self):
        """Row a1 is the best reply to b1; b2/b3 answer a2/a3"""
        payoff = MatrixGame().payoff
        np.testing.assert_array_equal(payoff.argmax(axis=0), [0, 1, 2])
        np.testing.assert_array_equal(payoff.argmax(axis=1), [0, 1, 2])
        np.testing.assert_array_equal(payoff.max(axis=0), [12.0, 8.0, 8.0])
        np.testing.assert_array_equal(payoff.max(axis=1), [12.0, 8.0, 8.0])

    def test_independent_gradient_ascent_reaches_best_joint_action(self):
        """Two softmax players following the exact expected gradient from uniform end at (a1, b1)"""
        payoff = MatrixGame().payoff
        logits_a, logits_b = np.zeros(3), np.zeros(3)
        for _ in range(5000):
            probs_a = np.exp(logits_a) / np.exp(logits_a).sum()
            probs_b = np.exp(logits_b) / np.exp(logits_b).sum()
            value_a, value_b = payoff @ probs_b, payoff.T @ probs_a
            logits_a += 0.1 * probs_a * (value_a - probs_a @ value_a)
            logits_b += 0.1 * probs_b * (value_b - probs_b @ value_b)
        assert int(np.argmax(logits_a)) == 0
        assert int(np.argmax(logits_b)) == 0
        assert probs_a @ payoff @ probs_b > 11.5

    @pytest.mark.parametrize('spec', [MatrixGameSpec(n_agents=3), MatrixGameSpec(episode_length=2)])
    def test_spec_must_match_the_game(self, spec):
        with pytest.raises(InvalidArgumentError):
            MatrixGame(spec)

    def test_step_after_episode_end_rejected(self):
        game = MatrixGame()
        state, _ = game.reset()
        result = game.step(state, [0, 0])
        with pytest.raises(InvalidArgumentError):
            game.step(result.state, [0, 0])

    @pytest.mark.parametrize('action', [[0], [0, 1, 2], [0, 3], [-1, 0]])
    def test_bad_joint_action_rejected(self, action):
        game = MatrixGame()
        state, _ = game.reset()
        with pytest.raises(InvalidArgumentError):
            game.step(state, action)

    def test_team_reward_unsupported(self):
        with pytest.raises(UnsupportedOperationError):
            MatrixGame().team_reward(EnvState())


class TestParticleNavigation:
    """Test cooperative navigation"""

    def test_reset_shapes(self):
        env = ParticleNavigation(ParticleEnvSpec(n_agents=4))
        state, obs = env.reset(seed=0)
        assert obs.shape == (4, env.obs_dim)
        assert env.obs_dim == 4 + 2 * 4
        assert state.landmark_positions.shape == (4, 2)
        assert np.all(np.abs(state.agent_positions) <= env.spec.spawn_range)

    def test_reset_is_seeded(self):
        env = ParticleNavigation()
        _, first = env.reset(seed=3)
        _, second = env.reset(seed=3)
        np.testing.assert_array_equal(first, second)

    def test_different_seeds_different_landmarks(self):
        env = ParticleNavigation()
        for pair in range(100):
            first, _ = env.reset(seed=2 * pair)
            second, _ = env.reset(seed=2 * pair + 1)
            assert not np.array_equal(first.landmark_positions, second.landmark_positions)

    def test_other_agents_are_invisible(self):
        """Moving one agent changes no other agent's observation"""
        env = ParticleNavigation()
        rng = np.random.default_rng(12)
        for _ in range(20):
            state, obs = env.reset(seed=rng)
            moved_agent = int(rng.integers(env.n_agents))
            positions = state.agent_positions.copy()
            positions[moved_agent] = rng.uniform(-1.0, 1.0, 2)
            perturbed = env.observe(nav_state(positions, state.landmark_positions))
            for agent in range(env.n_agents):
                if agent != moved_agent:
                    np.testing.assert_array_equal(perturbed[agent], obs[agent])

    def test_observation_layout(self):
        env = ParticleNavigation(ParticleEnvSpec(n_agents=2))
        state = EnvState(timestep=0,
                         agent_positions=np.array([[0.0, 0.0], [0.5, 0.5]]),
                         agent_velocities=np.zeros((2, 2)),
                         landmark_positions=np.array([[1.0, 0.0], [0.0, -1.0]]))
        obs = env.observe(state)
        np.testing.assert_allclose(obs[1], [0.5, 0.5, 0.0, 0.0, 0.5, -0.5, -0.5, -1.5])

    def test_move_and_clamp(self):
        env = ParticleNavigation(ParticleEnvSpec(n_agents=2, step_size=0.1))
        state = EnvState(timestep=0,
                         agent_positions=np.array([[0.0, 0.0], [0.95, 0.0]]),
                         agent_velocities=np.zeros((2, 2)),
                         landmark_positions=np.zeros((2, 2)))
        result = env.step(state, [1, 4])
        np.testing.assert_allclose(result.state.agent_positions, [[0.0, 0.1], [1.0, 0.0]])
        np.testing.assert_allclose(result.state.agent_velocities, [[0.0, 0.1], [0.05, 0.0]])

    def test_team_reward_with_collision(self):
        env = ParticleNavigation(ParticleEnvSpec(n_agents=2, agent_radius=0.15, collision_penalty=-1.0))
        state = EnvState(timestep=0,
                         agent_positions=np.array([[0.0, 0.0], [0.2, 0.0]]),
                         agent_velocities=np.zeros((2, 2)),
                         landmark_positions=np.array([[0.0, 0.0], [0.2, 0.0]]))
        assert env.count_collisions(state) == 1
        assert env.team_reward(state) == pytest.approx(-1.0)

    def test_team_reward_all_covered(self):
        env = ParticleNavigation()
        spots = [[-0.5, 0.0], [0.0, 0.5], [0.5, 0.0]]
        assert env.team_reward(nav_state(spots, spots)) == 0.0

    def test_team_reward_one_landmark_uncovered(self):
        env = ParticleNavigation()
        state = nav_state([[-0.5, 0.0], [0.5, 0.0], [0.0, -0.5]],
                          [[-0.5, 0.0], [0.5, 0.0], [0.0, 0.0]])
        assert env.count_collisions(state) == 0
        assert env.team_reward(state) == pytest.approx(-0.5)

    def test_team_reward_ignores_agent_order(self):
        env = ParticleNavigation(ParticleEnvSpec(n_agents=4))
        rng = np.random.default_rng(3)
        for _ in range(20):
            state, _ = env.reset(seed=rng)
            shuffled = nav_state(state.agent_positions[rng.permutation(4)], state.landmark_positions)
            assert env.team_reward(shuffled) == pytest.approx(env.team_reward(state), abs=1e-12)

    def test_episode_ends_after_length(self):
        env = ParticleNavigation(ParticleEnvSpec(n_agents=2, episode_length=2))
        state, _ = env.reset(seed=1)
        first = env.step(state, [0, 0])
        second = env.step(first.state, [0, 0])
        assert not first.done
        assert second.done
        assert 'collisions' in second.info
        with pytest.raises(InvalidArgumentError):
            env.step(second.state, [0, 0])


class TestMakeEnvironment:
    """Test environment construction from configuration"""

    def test_matrix_game(self):
        env = make_environment(EnvironmentConfig(kind='matrix_game', n_agents=2, episode_length=1))
        assert isinstance(env, MatrixGame)
        assert env.n_agents == 2

    @pytest.mark.parametrize('field, value', [('n_agents', 3), ('episode_length', 5)])
    def test_matrix_game_shape_is_fixed(self, field, value):
        settings = {'kind': 'matrix_game', 'n_agents': 2, 'episode_length': 1, field: value}
        with pytest.raises(ConfigError) as excinfo:
            make_environment(EnvironmentConfig(**settings))
        assert excinfo.value.key == f"environment.{field}"

    def test_navigation_uses_config(self):
        env = make_environment(EnvironmentConfig(kind='navigation', n_agents=5, episode_length=7))
        assert isinstance(env, ParticleNavigation)
        assert env.n_agents == 5
        assert env.episode_length == 7

    def test_unknown_kind(self):
        with pytest.raises(InvalidArgumentError):
            make_environment(EnvironmentConfig(kind='soccer'))


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
