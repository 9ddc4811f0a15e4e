"""
Shared pytest configuration

Puts src/ on sys.path (modules import each other by bare name) and adds the
--run-slow switch for the long training-outcome checks.
"""

import sys
from pathlib import Path

import hypothesis
import pytest

SRC_DIR = Path(__file__).resolve().parent.parent / 'src'
CONFIG_DIR = Path(__file__).resolve().parent.parent / 'config'
if str(SRC_DIR) not in sys.path:
    sys.path.insert(0, str(SRC_DIR))

# pytest --hypothesis-profile=fast for a quick pass over the property suites
hypothesis.settings.register_profile("fast", max_examples=20, deadline=None)


def pytest_addoption(parser):
    parser.addoption('--run-slow', action='store_true', default=False,
                     help='run long training-outcome checks')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long training run, needs --run-slow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--run-slow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --run-slow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def config_dir():
    return CONFIG_DIR


@pytest.fixture
def tiny_matrix_config():
    """Matrix-game experiment small enough to train in a second"""
    from config import experiment_config_from_dict
    return experiment_config_from_dict({
        'experiment': {'name': 'tiny', 'seeds': [0], 'output_dir': 'runs'},
        'environment': {'kind': 'matrix_game', 'n_agents': 2, 'episode_length': 1},
        'ordering': {'mode': 'fixed:0,1', 'horizon': 1, 'futures': 1},
        'ppo': {'n_envs': 8, 'total_env_steps': 64, 'minibatch_size': 8, 'epochs': 2,
                'actor_lr': 0.005, 'critic_lr': 0.005},
        'network': {'hidden_width': 8, 'mlp_width': 16, 'key_width': 8, 'action_embed_width': 4},
        'world_model': {'capacity': 256, 'batch_size': 32, 'warmup_steps': 16, 'warmup_epochs': 1},
        'evaluation': {'every_updates': 2, 'episodes': 2, 'final_window': 2},
        'logging': {'log_to_file': False},
    }, apply_env=False)


@pytest.fixture
def tiny_navigation_config():
    from config import experiment_config_from_dict
    return experiment_config_from_dict({
        'experiment': {'name': 'tiny_nav', 'seeds': [0], 'output_dir': 'runs'},
        'environment': {'kind': 'navigation', 'n_agents': 3, 'episode_length': 3},
        'ordering': {'mode': 'seqcomm', 'horizon': 2, 'futures': 2},
        'ppo': {'n_envs': 2, 'total_env_steps': 12, 'minibatch_size': 4, 'epochs': 1},
        'network': {'hidden_width': 8, 'mlp_width': 12, 'key_width': 6, 'action_embed_width': 4},
        'world_model': {'capacity': 128, 'batch_size': 16, 'warmup_steps': 6, 'warmup_epochs': 1},
        'evaluation': {'every_updates': 1, 'episodes': 2, 'final_window': 2},
        'logging': {'log_to_file': False},
    }, apply_env=False)
