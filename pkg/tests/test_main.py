"""
Integration tests for the command line

Tests every subcommand end to end on tiny configurations, exit codes and
the determinism of the stored metrics stream.
"""

import json

import pytest
import yaml

from config import OUTPUT_DIR_ENV_VAR, SEED_ENV_VAR
from errors import InvalidArgumentError
from main import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, collect_metrics, main, parse_named_modes
from run_storage import CHECKPOINT_FILE, MANIFEST_FILE, METRICS_FILE, PROBE_FILE, REPORT_FILE


@pytest.fixture(autouse=True)
def no_env_overrides(monkeypatch):
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)
    monkeypatch.delenv(OUTPUT_DIR_ENV_VAR, raising=False)


def write_yaml(tmp_path, config, name='tiny.yaml', **changes):
    """Experiment file for ``config`` writing into tmp_path/runs"""
    data = config.to_dict()
    data['experiment'] = {'name': data.pop('name'), 'seeds': data.pop('seeds'),
                          'output_dir': str(tmp_path / 'runs')}
    data.pop('output_dir')
    for key, value in changes.items():
        section, field = key.split('__')
        data[section][field] = value
    path = tmp_path / name
    with open(path, 'w') as f:
        yaml.safe_dump(data, f)
    return path


def run_dirs(root):
    return sorted(p for p in root.iterdir() if p.is_dir())


class TestParseNamedModes:
    """Test name=mode parsing for the ablate command"""

    def test_named_and_bare(self):
        named = parse_named_modes(['a_first=fixed:0,1', 'simultaneous'])
        assert [name for name, _ in named] == ['a_first', 'simultaneous']
        assert str(named[1][1]) == 'simultaneous'

    @pytest.mark.parametrize('items', [
        ['a=fixed:0,1', 'a=fixed:1,0'],
        ['seqcomm'],
        ['=seqcomm', 'random'],
        ['a=chaotic', 'random'],
    ])
    def test_rejected(self, items):
        with pytest.raises(InvalidArgumentError):
            parse_named_modes(items)


class TestExitCodes:
    """Test diagnostics and exit codes"""

    def test_invalid_gamma(self, tmp_path, tiny_matrix_config, capsys):
        path = write_yaml(tmp_path, tiny_matrix_config, ppo__gamma=1.5)
        assert main(['train', '--config', str(path)]) == EXIT_CONFIG
        assert 'ppo.gamma' in capsys.readouterr().out
        assert not (tmp_path / 'runs').exists()

    def test_missing_config(self, tmp_path):
        assert main(['train', '--config', str(tmp_path / 'absent.yaml')]) == EXIT_FAILURE

    def test_invalid_mode_override(self, tmp_path, tiny_matrix_config):
        path = write_yaml(tmp_path, tiny_matrix_config)
        assert main(['train', '--config', str(path), '--mode', 'fixed:0,1,2']) == EXIT_CONFIG

    def test_train_needs_config(self, tmp_path):
        assert main(['train', '--out', str(tmp_path)]) == EXIT_FAILURE


class TestBoundCommand:
    """Test the bound subcommand"""

    def test_raw_inputs(self, tmp_path, capsys):
        code = main(['bound', '--epsilon-m', '0.1', '--epsilon-pi', '0.02', '0.03',
                     '--r-max', '1', '--gamma', '0.95', '--out', str(tmp_path)])
        assert code == EXIT_OK
        data = json.loads((tmp_path / 'bound.json').read_text())
        assert data['C'] == pytest.approx(156.0, rel=1e-12)
        assert 'C            : 156' in capsys.readouterr().out

    def test_incomplete_inputs(self, tmp_path):
        assert main(['bound', '--epsilon-m', '0.1', '--gamma', '0.95', '--out', str(tmp_path)]) == EXIT_FAILURE

    def test_from_checkpoints(self, tmp_path, tiny_matrix_config):
        path = write_yaml(tmp_path, tiny_matrix_config)
        assert main(['train', '--config', str(path), '--steps', '16']) == EXIT_OK
        run = run_dirs(tmp_path / 'runs')[0]
        code = main(['bound', '--config', str(path), '--out', str(tmp_path / 'bound'),
                     '--old', str(run / 'previous_checkpoint.npz'), '--new', str(run / CHECKPOINT_FILE),
                     '--probe', str(run / PROBE_FILE), '--r-max', '12'])
        assert code == EXIT_OK
        data = json.loads((tmp_path / 'bound' / 'bound.json').read_text())
        assert len(data['epsilon_pi']) == 2
        assert data['C'] >= 0.0


class TestTrainCommand:
    """Test training runs and their artifacts"""

    def test_artifacts(self, tmp_path, tiny_matrix_config):
        path = write_yaml(tmp_path, tiny_matrix_config)
        assert main(['train', '--config', str(path)]) == EXIT_OK
        runs = run_dirs(tmp_path / 'runs')
        assert len(runs) == 1
        assert runs[0].name.startswith('fixed_0_1-s0-')
        for name in (METRICS_FILE, CHECKPOINT_FILE, PROBE_FILE, REPORT_FILE, MANIFEST_FILE):
            assert (runs[0] / name).exists(), name
        manifest = json.loads((runs[0] / MANIFEST_FILE).read_text())
        assert manifest['env_steps'] == 64
        assert set(manifest['artifacts']) >= {'metrics', 'checkpoint', 'probe', 'report'}

    def test_metrics_stream_is_reproducible(self, tmp_path, tiny_navigation_config):
        path = write_yaml(tmp_path, tiny_navigation_config)
        assert main(['train', '--config', str(path)]) == EXIT_OK
        metrics = run_dirs(tmp_path / 'runs')[0] / METRICS_FILE
        first = metrics.read_bytes()
        assert main(['train', '--config', str(path)]) == EXIT_OK
        assert metrics.read_bytes() == first

    def test_seed_flag_overrides_list(self, tmp_path, tiny_matrix_config):
        path = write_yaml(tmp_path, tiny_matrix_config)
        assert main(['train', '--config', str(path), '--seed', '4', '--steps', '8']) == EXIT_OK
        assert '-s4-' in run_dirs(tmp_path / 'runs')[0].name


class TestEvalAndCompare:
    """Test evaluation of a checkpoint and aggregation of finished runs"""

    def test_eval_checkpoint(self, tmp_path, tiny_matrix_config):
        path = write_yaml(tmp_path, tiny_matrix_config)
        assert main(['train', '--config', str(path), '--steps', '16']) == EXIT_OK
        checkpoint = run_dirs(tmp_path / 'runs')[0] / CHECKPOINT_FILE
        assert main(['eval', '--config', str(path), '--checkpoint', str(checkpoint),
                     '--episodes', '3']) == EXIT_OK
        summary = json.loads((tmp_path / 'runs' / 'eval_checkpoint.json').read_text())
        assert summary['mode'] == 'fixed:0,1'
        assert summary['episodes'] == 3

    def test_eval_wrong_environment(self, tmp_path, tiny_matrix_config, tiny_navigation_config):
        matrix = write_yaml(tmp_path, tiny_matrix_config)
        assert main(['train', '--config', str(matrix), '--steps', '8']) == EXIT_OK
        checkpoint = run_dirs(tmp_path / 'runs')[0] / CHECKPOINT_FILE
        navigation = write_yaml(tmp_path, tiny_navigation_config, name='nav.yaml')
        assert main(['eval', '--config', str(navigation), '--checkpoint', str(checkpoint)]) == EXIT_FAILURE

    def test_compare(self, tmp_path, tiny_matrix_config):
        path = write_yaml(tmp_path, tiny_matrix_config)
        assert main(['train', '--config', str(path), '--steps', '16']) == EXIT_OK
        assert main(['train', '--config', str(path), '--steps', '16', '--mode', 'simultaneous']) == EXIT_OK
        grouped = collect_metrics([str(tmp_path / 'runs')])
        assert set(grouped) == {'fixed:0,1', 'simultaneous'}
        assert main(['compare', '--runs', str(tmp_path / 'runs'), '--out', str(tmp_path / 'cmp')]) == EXIT_OK
        lines = (tmp_path / 'cmp' / 'curves.csv').read_text().splitlines()
        assert len(lines) == 3

    def test_compare_nothing(self, tmp_path):
        assert main(['compare', '--runs', str(tmp_path), '--out', str(tmp_path / 'cmp')]) == EXIT_FAILURE


class TestAblateCommand:
    """Test the ablation table"""

    def test_two_orders(self, tmp_path, tiny_matrix_config):
        path = write_yaml(tmp_path, tiny_matrix_config)
        code = main(['ablate', '--config', str(path), '--steps', '16',
                     '--modes', 'a_first=fixed:0,1', 'b_first=fixed:1,0'])
        assert code == EXIT_OK
        rows = (tmp_path / 'runs' / 'ablation.csv').read_text().splitlines()
        assert rows[1].startswith('a_first,fixed:0,1') or rows[1].startswith('a_first,"fixed:0,1"')
        assert len(rows) == 3
        assert (tmp_path / 'runs' / 'a_first').is_dir()
        assert (tmp_path / 'runs' / 'ablation.json').exists()


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
