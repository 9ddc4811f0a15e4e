"""
Unit tests for the seqcomm module

Tests message accounting, trajectory values, intention rollouts, priority
negotiation and the launching phase.
"""

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from errors import InvalidArgumentError
from networks import AgentNetworks
from seqcomm import (
    LAUNCHING, NEGOTIATION, CommLog, IntentionEvaluator, OrderSequence, count_messages, determine_priorities,
    determine_priority, launch, launching_step, rollout_intention, sample_lower_orders, slot_positions,
    trajectory_value,
)


def make_networks(n_agents, seed=0, hidden=6):
    return AgentNetworks(obs_dim=4 + 2 * n_agents, n_actions=5, seed=seed, hidden_width=hidden,
                         mlp_width=8, key_width=4, action_embed_width=3)


def random_hidden(n_agents, seed=0, hidden=6):
    return np.random.default_rng(seed).normal(size=(n_agents, hidden))


class TestOrderSequence:
    """Test the decision-order type"""

    def test_levels_are_one_based(self):
        order = OrderSequence((2, 0, 1))
        assert order.level_of(2) == 1
        assert order.level_of(1) == 3
        assert order.uppers(1) == (2, 0)
        assert order.as_text() == '2-0-1'

    @pytest.mark.parametrize('agents', [(0, 0, 1), (1, 2), (0, 2)])
    def test_non_permutation_rejected(self, agents):
        with pytest.raises(InvalidArgumentError):
            OrderSequence(agents)


class TestCountMessages:
    """Test per-timestep message accounting"""

    def test_two_agents(self):
        negotiation = count_messages(2, NEGOTIATION)
        launching = count_messages(2, LAUNCHING)
        assert negotiation.hidden_broadcasts == 2
        assert launching.action_messages == 1

    def test_four_agents(self):
        assert count_messages(4, NEGOTIATION).value_messages == 9
        assert count_messages(4, LAUNCHING).action_messages == 6

    @pytest.mark.parametrize('n', range(2, 9))
    def test_closed_forms(self, n):
        negotiation = count_messages(n, NEGOTIATION)
        assert negotiation.hidden_broadcasts == n
        assert negotiation.value_messages == sum(n - k + 1 for k in range(1, n))
        assert negotiation.reference_value_messages == n * (n - 1) // 2
        assert count_messages(n, LAUNCHING).action_messages == n * (n - 1) // 2

    def test_single_agent_sends_nothing(self):
        assert count_messages(1, NEGOTIATION).value_messages == 0
        assert count_messages(1, LAUNCHING).action_messages == 0

    def test_unknown_phase(self):
        with pytest.raises(InvalidArgumentError):
            count_messages(3, 'gossip')

    def test_commlog_arithmetic(self):
        total = CommLog(1, 2, 3, 4, 1) + CommLog(1, 2, 3, 4, 1)
        assert total.to_dict() == CommLog(1, 2, 3, 4, 1).scaled(2).to_dict()
        assert total.per_timestep()['action_messages'] == 4.0


class TestTrajectoryValue:
    """Test the discounted mean of predicted rewards"""

    def test_single_step(self):
        assert trajectory_value([2.0], 0.3, 1) == 2.0

    def test_undiscounted_mean(self):
        assert trajectory_value([1, 1, 1, 1], 1.0, 4) == pytest.approx(1.0)

    def test_discounted(self):
        assert trajectory_value([1, 0, 2], 0.95, 3) == pytest.approx(0.935, abs=1e-12)

    def test_wrong_length(self):
        with pytest.raises(InvalidArgumentError):
            trajectory_value([1.0, 2.0], 0.9, 3)

    def test_gamma_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            trajectory_value([1.0], 0.0, 1)

    @settings(max_examples=1000, deadline=None)
    @given(st.integers(min_value=1, max_value=20).flatmap(
        lambda h: st.tuples(st.just(h),
                            st.floats(min_value=0.01, max_value=1.0),
                            st.lists(st.floats(min_value=-100, max_value=100), min_size=h, max_size=h))))
    def test_matches_brute_force_sum(self, case):
        horizon, gamma, rewards = case
        expected = 0.0
        for k, reward in enumerate(rewards):
            expected += gamma ** k * reward
        expected /= horizon
        assert trajectory_value(rewards, gamma, horizon) == pytest.approx(expected, abs=1e-9)


class TestLowerOrders:
    """Test sampling of lower-level orders"""

    def test_distinct_when_possible(self):
        orders = sample_lower_orders([0, 1, 2], 4, np.random.default_rng(0))
        assert len(set(orders)) == 4
        assert all(sorted(o) == [0, 1, 2] for o in orders)

    def test_replacement_when_more_futures_than_orders(self):
        orders = sample_lower_orders([3], 3, np.random.default_rng(0))
        assert orders == [(3,), (3,), (3,)]

    def test_no_remaining_agents(self):
        assert sample_lower_orders([], 2, np.random.default_rng(0)) == [(), ()]

    def test_slot_positions(self):
        table = slot_positions(3)
        # agent 2 is slot 1 of agent 0's peers (1, 2); agent 0 is slot 0 of agent 2's
        assert table[0, 2] == 1
        assert table[2, 0] == 0
        assert list(np.diag(table)) == [-1, -1, -1]


class TestIntentionRollout:
    """Test Monte Carlo intention values"""

    def test_single_future_equals_its_trajectory(self):
        networks = make_networks(3)
        hidden = random_hidden(3)
        intention = rollout_intention(1, [], hidden, networks, horizon=3, futures=1, gamma=0.95,
                                      rng=np.random.default_rng(4))
        assert len(intention.trajectory_values) == 1
        assert intention.value == intention.trajectory_values[0]
        assert intention.trajectories[0].horizon == 3

    def test_mean_of_separately_rolled_trajectories(self):
        networks = make_networks(3)
        hidden = random_hidden(3)
        intention = rollout_intention(0, [], hidden, networks, horizon=4, futures=2, gamma=0.9,
                                      rng=np.random.default_rng(8))

        lowers = sample_lower_orders([1, 2], 2, np.random.default_rng(8))
        assert intention.lower_orders == tuple(lowers)
        evaluator = IntentionEvaluator(networks, horizon=4, futures=1, gamma=0.9)
        separate = [trajectory_value(evaluator.rollout_batch(
            hidden[None], np.array([(0,) + tuple(lower)]), np.full((1, 3), -1), [None])[0].rewards, 0.9, 4)
            for lower in lowers]
        assert intention.value == pytest.approx(np.mean(separate), abs=1e-10)

    def test_fixed_upper_action_is_executed(self):
        networks = make_networks(3)
        intention = rollout_intention(2, [(0, 4)], random_hidden(3), networks, horizon=2, futures=1,
                                      gamma=0.95, rng=np.random.default_rng(0))
        trajectory = intention.trajectories[0]
        assert trajectory.order.agents[:2] == (0, 2)
        assert trajectory.actions[0, 0] == 4

    def test_first_mover_already_fixed(self):
        with pytest.raises(InvalidArgumentError):
            rollout_intention(0, [(0, 1)], random_hidden(3), make_networks(3), horizon=2, futures=1,
                              gamma=0.95, rng=np.random.default_rng(0))

    def test_hidden_width_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            rollout_intention(0, [], random_hidden(3, hidden=5), make_networks(3), horizon=2, futures=1,
                              gamma=0.95, rng=np.random.default_rng(0))


class TestDeterminePriority:
    """Test level-by-level priority negotiation"""

    def test_single_agent(self):
        order = determine_priority(random_hidden(1), make_networks(1), 2, 1, 0.95, np.random.default_rng(0))
        assert order.agents == (0,)

    def test_highest_value_moves_first(self):
        def evaluate(candidates, fixed):
            table = {0: 0.2, 1: 0.9, 2: 0.5}
            return [table[a] for a in candidates]

        order = determine_priority(random_hidden(3), make_networks(3), 2, 1, 0.95,
                                   np.random.default_rng(0), evaluate=evaluate)
        assert order.agents == (1, 2, 0)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(min_value=-10, max_value=10), min_size=4, max_size=4),
           st.floats(min_value=-1000, max_value=1000))
    def test_shifting_all_values_keeps_order(self, values, shift):
        networks = make_networks(4)
        hidden = random_hidden(4)

        def stub(offset):
            return lambda candidates, fixed: [values[a] + offset for a in candidates]

        # values closer than rounding error of the shift are not a meaningful order
        assume(len(set(np.round(values, 6))) == len(values))
        plain = determine_priority(hidden, networks, 1, 1, 0.95, np.random.default_rng(0), evaluate=stub(0.0))
        shifted = determine_priority(hidden, networks, 1, 1, 0.95, np.random.default_rng(0), evaluate=stub(shift))
        assert plain == shifted

    def test_ties_go_to_lowest_id(self):
        order = determine_priority(random_hidden(3), make_networks(3), 1, 1, 0.95, np.random.default_rng(0),
                                   evaluate=lambda candidates, fixed: [0.0] * len(candidates))
        assert order.agents == (0, 1, 2)

    def test_upper_actions_are_passed_to_later_levels(self):
        seen = []

        def evaluate(candidates, fixed):
            seen.append(list(fixed))
            return [-a for a in candidates]

        determine_priority(random_hidden(3), make_networks(3), 1, 1, 0.95, np.random.default_rng(0),
                           evaluate=evaluate)
        assert [len(f) for f in seen] == [0, 1]
        assert seen[1][0][0] == 0

    @settings(max_examples=16, deadline=None)
    @given(st.integers(min_value=1, max_value=8), st.integers(min_value=0, max_value=2 ** 16))
    def test_always_a_permutation(self, n, seed):
        order = determine_priority(random_hidden(n, seed), make_networks(n, seed), 1, 1, 0.95,
                                   np.random.default_rng(seed))
        assert sorted(order.agents) == list(range(n))

    def test_seeded_negotiation_is_reproducible(self):
        networks = make_networks(3)
        hidden = np.stack([random_hidden(3, s) for s in range(2)])
        first = determine_priorities(hidden, networks, 2, 2, 0.95,
                                     [np.random.default_rng(s) for s in range(2)], greedy=False)
        second = determine_priorities(hidden, networks, 2, 2, 0.95,
                                      [np.random.default_rng(s) for s in range(2)], greedy=False)
        assert first.orders == second.orders
        assert first.fixed == second.fixed
        assert first.comm.value_messages == 2 * 5

    def test_batch_matches_single_environment(self):
        """An environment's order does not depend on the others in the batch"""
        networks = make_networks(3)
        hidden = np.stack([random_hidden(3, s) for s in range(3)])
        batched = determine_priorities(hidden, networks, 2, 2, 0.95, [np.random.default_rng(s) for s in range(3)])
        single = determine_priorities(hidden[1:2], networks, 2, 2, 0.95, [np.random.default_rng(1)])
        assert batched.orders[1] == single.orders[0]


class TestLaunching:
    """Test sequential action selection"""

    def test_action_messages(self):
        networks = make_networks(4)
        _, _, comm = launching_step(OrderSequence((3, 1, 0, 2)), random_hidden(4), networks, 'greedy',
                                    np.random.default_rng(0))
        assert comm.action_messages == 6

    def test_level_k_sees_exactly_upper_actions(self):
        networks = make_networks(4)
        order = OrderSequence((3, 1, 0, 2))
        result = launch(networks, random_hidden(4), [order], [np.random.default_rng(0)])
        slots = result.peer_slots[0]
        for agent in range(4):
            assert int(np.sum(slots[agent] >= 0)) == order.level_of(agent) - 1
        # agent 0 (level 3) conditions on the actions of agents 3 and 1
        positions = slot_positions(4)
        assert slots[0, positions[0, 3]] == result.actions[0, 3]
        assert slots[0, positions[0, 1]] == result.actions[0, 1]

    def test_single_agent_has_empty_conditioning(self):
        actions, log_probs, comm = launching_step(OrderSequence((0,)), random_hidden(1), make_networks(1),
                                                  'sample', np.random.default_rng(0))
        assert actions.shape == (1,)
        assert np.isfinite(log_probs).all()
        assert comm.action_messages == 0

    def test_log_probs_match_policy(self):
        networks = make_networks(3)
        hidden = random_hidden(3)
        order = OrderSequence((2, 0, 1))
        actions, log_probs, _ = launching_step(order, hidden, networks, 'sample', np.random.default_rng(5))
        result = launch(networks, hidden, [order], [np.random.default_rng(5)])
        for agent in range(3):
            peers = [j for j in range(3) if j != agent]
            dist = networks.policy_forward(hidden[agent], [hidden[j] for j in peers],
                                           list(result.peer_slots[0, agent]))
            assert log_probs[agent] == pytest.approx(float(dist.log_prob(actions[agent])), abs=1e-9)

    def test_seeded_sampling_is_reproducible(self):
        networks = make_networks(3)
        order = OrderSequence((1, 2, 0))
        first = launching_step(order, random_hidden(3), networks, 'sample', np.random.default_rng(11))
        second = launching_step(order, random_hidden(3), networks, 'sample', np.random.default_rng(11))
        np.testing.assert_array_equal(first[0], second[0])

    def test_simultaneous_launch_passes_no_actions(self):
        networks = make_networks(3)
        result = launch(networks, random_hidden(3), None, [np.random.default_rng(0)], share_actions=False)
        assert np.all(result.peer_slots == -1)
        assert result.comm.action_messages == 0

    def test_bad_mode(self):
        with pytest.raises(InvalidArgumentError):
            launching_step(OrderSequence((0, 1)), random_hidden(2), make_networks(2), 'argmax',
                           np.random.default_rng(0))

    def test_upper_action_changes_lower_logits(self):
        """Conditioning on a different upper action moves the lower agent's distribution"""
        changed = 0
        for seed in range(20):
            networks = make_networks(2, seed)
            hidden = random_hidden(2, seed)
            first = networks.policy_forward(hidden[1], [hidden[0]], [0]).logits
            second = networks.policy_forward(hidden[1], [hidden[0]], [3]).logits
            changed += int(not np.allclose(first, second))
        assert changed >= 19


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
