"""
Unit tests for the config module

Tests the YAML loader, environment variable substitution and validation of
every section.
"""

import pytest
import yaml

from config import (
    OUTPUT_DIR_ENV_VAR, SEED_ENV_VAR, Config, experiment_config_from_dict, load_experiment_config,
)
from errors import ConfigError
from networks import HIDDEN_WIDTH


def write_config(tmp_path, data, name='experiment.yaml'):
    path = tmp_path / name
    with open(path, 'w') as f:
        yaml.safe_dump(data, f)
    return path


def key_of(excinfo):
    return excinfo.value.key


class TestShippedConfigs:
    """Test the configuration files in config/"""

    def test_navigation_defaults(self, config_dir, monkeypatch):
        monkeypatch.delenv(SEED_ENV_VAR, raising=False)
        monkeypatch.delenv(OUTPUT_DIR_ENV_VAR, raising=False)
        config = load_experiment_config(config_dir / 'navigation.yaml')
        assert config.environment.kind == 'navigation'
        assert config.environment.episode_length == 20
        assert (config.ordering.horizon, config.ordering.futures) == (10, 2)
        assert config.ppo.gamma == 0.95
        assert config.network.hidden_width == 48
        assert len(config.seeds) == 5

    def test_matrix_game(self, config_dir, monkeypatch):
        monkeypatch.delenv(SEED_ENV_VAR, raising=False)
        config = load_experiment_config(config_dir / 'matrix_game.yaml')
        assert config.environment.kind == 'matrix_game'
        assert config.seeds == tuple(range(10))

    @pytest.mark.parametrize('name', ['matrix_game.yaml', 'navigation.yaml'])
    def test_hidden_width_matches_encoder(self, config_dir, name, monkeypatch):
        monkeypatch.delenv(OUTPUT_DIR_ENV_VAR, raising=False)
        config = load_experiment_config(config_dir / name)
        assert config.network.hidden_width == HIDDEN_WIDTH

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_experiment_config(tmp_path / 'absent.yaml')


class TestConfigEnvironmentVariables:
    """Test environment variable substitution in configuration"""

    def test_output_dir_placeholder(self, tmp_path, monkeypatch):
        monkeypatch.setenv('SEQCOMM_TEST_RUNS', '/data/runs')
        path = write_config(tmp_path, {'experiment': {'output_dir': '${SEQCOMM_TEST_RUNS}'}})
        assert Config(path).get('experiment.output_dir') == '/data/runs'

    def test_placeholder_outside_allowed_keys(self, tmp_path, monkeypatch):
        monkeypatch.setenv('SEQCOMM_TEST_GAMMA', '0.9')
        path = write_config(tmp_path, {'ppo': {'gamma': '${SEQCOMM_TEST_GAMMA}'}})
        with pytest.raises(ConfigError) as excinfo:
            Config(path)
        assert key_of(excinfo) == 'ppo.gamma'

    def test_missing_env_var(self, tmp_path, monkeypatch):
        monkeypatch.delenv('SEQCOMM_TEST_UNSET', raising=False)
        path = write_config(tmp_path, {'experiment': {'output_dir': '${SEQCOMM_TEST_UNSET}'}})
        with pytest.raises(ConfigError, match='SEQCOMM_TEST_UNSET'):
            Config(path)

    def test_seed_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv(SEED_ENV_VAR, '3,4')
        config = load_experiment_config(write_config(tmp_path, {}))
        assert config.seeds == (3, 4)

    def test_override_ignored_when_disabled(self, monkeypatch):
        monkeypatch.setenv(SEED_ENV_VAR, '7')
        monkeypatch.setenv(OUTPUT_DIR_ENV_VAR, '/elsewhere')
        config = experiment_config_from_dict({'experiment': {'seeds': [1]}}, apply_env=False)
        assert config.seeds == (1,)
        assert config.output_dir == 'runs'


class TestConfigStructure:
    """Test configuration access and validation"""

    def test_dot_notation(self):
        config = Config(None, raw_config={'ppo': {'gamma': 0.9}})
        assert config.get('ppo.gamma') == 0.9
        assert config.get('ppo.missing', 'fallback') == 'fallback'

    def test_empty_section_takes_defaults(self):
        config = Config(None, raw_config={'ppo': None})
        assert config.section('ppo')['gamma'] == 0.95

    def test_root_must_be_mapping(self, tmp_path):
        path = tmp_path / 'list.yaml'
        path.write_text('- 1\n- 2\n')
        with pytest.raises(ConfigError):
            Config(path)

    @pytest.mark.parametrize('data, key', [
        ({'ppo': {'gamma': 1.5}}, 'ppo.gamma'),
        ({'ppo': {'gamma': 0.0}}, 'ppo.gamma'),
        ({'ppo': {'epochs': 'four'}}, 'ppo.epochs'),
        ({'ppo': {'epochs': 2.5}}, 'ppo.epochs'),
        ({'ppo': {'normalize_advantages': 'yes'}}, 'ppo.normalize_advantages'),
        ({'ppo': {'learning_rate': 0.1}}, 'ppo.learning_rate'),
        ({'optimizer': {'lr': 0.1}}, 'optimizer'),
        ({'ordering': {'mode': 'chaotic'}}, 'ordering.mode'),
        ({'ordering': {'horizon': 0}}, 'ordering.horizon'),
        ({'ordering': {'mode': 'fixed:1,0'}}, 'ordering.mode'),
        ({'environment': {'kind': 'matrix_game', 'n_agents': 3, 'episode_length': 1}}, 'environment.n_agents'),
        ({'environment': {'kind': 'soccer'}}, 'environment.kind'),
        ({'evaluation': {'monotonicity_warmup': 1.0}}, 'evaluation.monotonicity_warmup'),
        ({'logging': {'level': 'LOUD'}}, 'logging.level'),
        ({'experiment': {'seeds': [1, 1]}}, 'experiment.seeds'),
        ({'experiment': {'seeds': ['x']}}, 'experiment.seeds'),
    ])
    def test_invalid_values_name_their_key(self, data, key):
        with pytest.raises(ConfigError) as excinfo:
            experiment_config_from_dict(data, apply_env=False)
        assert key_of(excinfo) == key
        assert str(excinfo.value).startswith(key)

    def test_gamma_one_is_allowed(self):
        assert experiment_config_from_dict({'ppo': {'gamma': 1.0}}, apply_env=False).ppo.gamma == 1.0


class TestExperimentConfig:
    """Test the typed experiment view"""

    def test_replace_section_field(self, tiny_matrix_config):
        changed = tiny_matrix_config.replace(ppo__epochs=3, seeds=[5])
        assert changed.ppo.epochs == 3
        assert changed.seeds == (5,)
        assert tiny_matrix_config.ppo.epochs == 2

    def test_replace_validates(self, tiny_matrix_config):
        with pytest.raises(ConfigError):
            tiny_matrix_config.replace(ppo__gamma=2.0)

    def test_to_dict_round_trips(self, tiny_matrix_config):
        again = experiment_config_from_dict(tiny_matrix_config.to_dict(), apply_env=False)
        assert again == tiny_matrix_config

    def test_hyperparameters(self, tiny_navigation_config):
        values = tiny_navigation_config.hyperparameters()
        assert values['horizon'] == 2
        assert values['futures'] == 2
        assert values['n_agents'] == 3


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
