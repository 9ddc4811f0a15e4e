#!/usr/bin/env python3
"""
Configuration Management Module
==================================
Loads an experiment description from a YAML file and turns it into typed,
validated settings.

Key Concepts:
- Config class: raw YAML access with dot notation (``config.get('ppo.gamma')``)
- Environment placeholders: ``${VAR}`` is replaced from the environment, but only
  in ``experiment.output_dir`` and ``experiment.seeds``
- ExperimentConfig: dataclass view of the whole file, validated before any run
- Unknown keys are rejected at every level; errors name the dotted key
"""

import copy
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from errors import ConfigError

# Keys that may carry ${VAR} placeholders
ENV_PLACEHOLDER_KEYS = ('experiment.output_dir', 'experiment.seeds')

# Environment variables that override the file
SEED_ENV_VAR = 'SEQCOMM_SEED'
OUTPUT_DIR_ENV_VAR = 'SEQCOMM_OUTPUT_DIR'

ENVIRONMENT_KINDS = ('matrix_game', 'navigation')
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')

# Full schema with defaults. Any key absent here is rejected.
DEFAULTS: Dict[str, Dict[str, Any]] = {
    'experiment': {
        'name': 'seqcomm',
        'seeds': [0],
        'output_dir': 'runs',
    },
    'environment': {
        'kind': 'navigation',
        'n_agents': 3,
        'episode_length': 20,
        'step_size': 0.1,
        'agent_radius': 0.15,
        'landmark_radius': 0.05,
        'world_bound': 1.0,
        'spawn_range': 0.9,
        'collision_penalty': -1.0,
        'agent_acceleration': 7.0,
    },
    'ordering': {
        'mode': 'seqcomm',
        'horizon': 10,
        'futures': 2,
        'greedy_rollouts': True,
    },
    'ppo': {
        'gamma': 0.95,
        'gae_lambda': 0.95,
        'clip_epsilon': 0.2,
        'epochs': 4,
        'minibatch_size': 64,
        'rollout_episodes': 1,
        'n_envs': 8,
        'total_env_steps': 300000,
        'actor_lr': 5e-4,
        'critic_lr': 5e-4,
        'entropy_coef': 0.01,
        'max_grad_norm': 0.5,
        'normalize_advantages': True,
        'check_consistency': False,
    },
    'network': {
        'hidden_width': 48,
        'mlp_width': 100,
        'key_width': 32,
        'action_embed_width': 16,
    },
    'world_model': {
        'lr': 1e-3,
        'capacity': 20000,
        'batch_size': 256,
        'epochs_per_update': 1,
        'warmup_steps': 2000,
        'warmup_epochs': 5,
        'train_in_all_modes': False,
    },
    'evaluation': {
        'every_updates': 10,
        'episodes': 16,
        'greedy': True,
        'final_window': 10,
        'monotonicity_warmup': 0.2,
    },
    'logging': {
        'level': 'INFO',
        'log_to_console': True,
        'log_to_file': True,
    },
}


class Config:
    """
    Manages configuration loading and retrieval

    This class:
    1. Reads settings from a YAML file
    2. Replaces ${VAR_NAME} placeholders where they are allowed
    3. Provides methods to safely retrieve configuration values
    """

    def __init__(self, config_path='config/navigation.yaml', raw_config=None):
        """
        Load configuration from YAML file or from an already parsed mapping

        Args:
            config_path (str): Path to the YAML configuration file
            raw_config (dict): Parsed mapping used instead of reading the file

        Raises:
            FileNotFoundError: If configuration file doesn't exist
            ConfigError: If the file is not a mapping or a placeholder is misplaced
        """
        self.config_path = Path(config_path) if config_path else None

        if raw_config is None:
            if not self.config_path.exists():
                raise FileNotFoundError(f"Configuration file not found: {config_path}")
            with open(self.config_path, 'r') as f:
                raw_config = yaml.safe_load(f) or {}

        if not isinstance(raw_config, dict):
            raise ConfigError('<root>', 'configuration must be a mapping')

        self.config = self._substitute_env_vars(raw_config, prefix='')

    def _substitute_env_vars(self, obj, prefix):
        """
        Recursively replace ${VAR_NAME} placeholders with environment values

        Args:
            obj: Object to process (dict, list, string, or other)
            prefix (str): dotted key of ``obj``

        Returns:
            Object with environment variables replaced

        Raises:
            ConfigError: placeholder outside ENV_PLACEHOLDER_KEYS or variable unset
        """
        if isinstance(obj, dict):
            return {k: self._substitute_env_vars(v, f"{prefix}.{k}" if prefix else str(k))
                    for k, v in obj.items()}
        if isinstance(obj, list):
            return [self._substitute_env_vars(item, prefix) for item in obj]
        if isinstance(obj, str) and obj.startswith('${') and obj.endswith('}'):
            if prefix not in ENV_PLACEHOLDER_KEYS:
                raise ConfigError(prefix, "environment placeholders are only allowed in "
                                          + ", ".join(ENV_PLACEHOLDER_KEYS))
            var_name = obj[2:-1]
            value = os.getenv(var_name)
            if value is None:
                raise ConfigError(prefix, f"environment variable not set: {var_name}")
            return value
        return obj

    def get(self, key, default=None):
        """
        Get configuration value using dot notation

        Examples:
            config.get('ppo.gamma')
            config.get('ordering.horizon', 10)
        """
        value = self.config
        for k in key.split('.'):
            if isinstance(value, dict):
                value = value.get(k)
                if value is None:
                    return default
            else:
                return default
        return value

    def section(self, name):
        """Section ``name`` merged over its defaults, after unknown-key checks"""
        raw = self.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(name, 'section must be a mapping')
        known = DEFAULTS[name]
        for key in raw:
            if key not in known:
                raise ConfigError(f"{name}.{key}", 'unknown key')
        merged = copy.deepcopy(known)
        merged.update(raw)
        return merged

    def check_sections(self):
        for name in self.config:
            if name not in DEFAULTS:
                raise ConfigError(str(name), 'unknown section')


# ============================================================================
# TYPED SETTINGS
# ============================================================================

def _require(condition, key, message):
    if not condition:
        raise ConfigError(key, message)


def _as_number(section, values, key, kind=float):
    value = values[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{section}.{key}", f"expected a number, got {value!r}")
    if kind is int:
        _require(float(value).is_integer(), f"{section}.{key}", f"expected an integer, got {value!r}")
        return int(value)
    return float(value)


def _as_bool(section, values, key):
    value = values[key]
    _require(isinstance(value, bool), f"{section}.{key}", f"expected true/false, got {value!r}")
    return value


@dataclass(frozen=True)
class EnvironmentConfig:
    kind: str = 'navigation'
    n_agents: int = 3
    episode_length: int = 20
    step_size: float = 0.1
    agent_radius: float = 0.15
    landmark_radius: float = 0.05
    world_bound: float = 1.0
    spawn_range: float = 0.9
    collision_penalty: float = -1.0
    agent_acceleration: float = 7.0

    def validate(self):
        _require(self.kind in ENVIRONMENT_KINDS, 'environment.kind',
                 f"must be one of {ENVIRONMENT_KINDS}")
        _require(self.n_agents >= 1, 'environment.n_agents', 'must be at least 1')
        if self.kind == 'matrix_game':
            _require(self.n_agents == 2, 'environment.n_agents', 'the matrix game has exactly 2 agents')
            _require(self.episode_length == 1, 'environment.episode_length',
                     'the matrix game lasts exactly 1 step')
        _require(self.episode_length >= 1, 'environment.episode_length', 'must be at least 1')
        _require(self.step_size > 0, 'environment.step_size', 'must be positive')
        _require(self.agent_radius > 0, 'environment.agent_radius', 'must be positive')
        _require(self.landmark_radius > 0, 'environment.landmark_radius', 'must be positive')
        _require(self.world_bound > 0, 'environment.world_bound', 'must be positive')
        _require(0 < self.spawn_range <= self.world_bound, 'environment.spawn_range',
                 'must lie in (0, world_bound]')


@dataclass(frozen=True)
class OrderingConfig:
    mode: str = 'seqcomm'
    horizon: int = 10
    futures: int = 2
    greedy_rollouts: bool = True

    def validate(self):
        from trainer import OrderingMode
        try:
            OrderingMode.parse(self.mode)
        except ValueError as e:
            raise ConfigError('ordering.mode', str(e))
        _require(self.horizon >= 1, 'ordering.horizon', 'must be at least 1')
        _require(self.futures >= 1, 'ordering.futures', 'must be at least 1')


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.95
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    epochs: int = 4
    minibatch_size: int = 64
    rollout_episodes: int = 1
    n_envs: int = 8
    total_env_steps: int = 300000
    actor_lr: float = 5e-4
    critic_lr: float = 5e-4
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True
    check_consistency: bool = False

    def validate(self):
        _require(0 < self.gamma <= 1, 'ppo.gamma', f"must lie in (0, 1], got {self.gamma}")
        _require(0 <= self.gae_lambda <= 1, 'ppo.gae_lambda', f"must lie in [0, 1], got {self.gae_lambda}")
        _require(self.clip_epsilon > 0, 'ppo.clip_epsilon', 'must be positive')
        _require(self.epochs >= 1, 'ppo.epochs', 'must be at least 1')
        _require(self.minibatch_size >= 1, 'ppo.minibatch_size', 'must be at least 1')
        _require(self.rollout_episodes >= 1, 'ppo.rollout_episodes', 'must be at least 1')
        _require(self.n_envs >= 1, 'ppo.n_envs', 'must be at least 1')
        _require(self.total_env_steps >= 1, 'ppo.total_env_steps', 'must be at least 1')
        _require(self.actor_lr >= 0, 'ppo.actor_lr', 'must be non-negative')
        _require(self.critic_lr >= 0, 'ppo.critic_lr', 'must be non-negative')
        _require(self.entropy_coef >= 0, 'ppo.entropy_coef', 'must be non-negative')
        _require(self.max_grad_norm >= 0, 'ppo.max_grad_norm', 'must be non-negative (0 disables)')


@dataclass(frozen=True)
class NetworkConfig:
    hidden_width: int = 48
    mlp_width: int = 100
    key_width: int = 32
    action_embed_width: int = 16

    def validate(self):
        for key in ('hidden_width', 'mlp_width', 'key_width', 'action_embed_width'):
            _require(getattr(self, key) >= 1, f"network.{key}", 'must be at least 1')


@dataclass(frozen=True)
class WorldModelConfig:
    lr: float = 1e-3
    capacity: int = 20000
    batch_size: int = 256
    epochs_per_update: int = 1
    warmup_steps: int = 2000
    warmup_epochs: int = 5
    train_in_all_modes: bool = False

    def validate(self):
        _require(self.lr >= 0, 'world_model.lr', 'must be non-negative')
        _require(self.capacity >= 1, 'world_model.capacity', 'must be at least 1')
        _require(self.batch_size >= 1, 'world_model.batch_size', 'must be at least 1')
        _require(self.epochs_per_update >= 0, 'world_model.epochs_per_update', 'must be non-negative')
        _require(self.warmup_steps >= 0, 'world_model.warmup_steps', 'must be non-negative')
        _require(self.warmup_epochs >= 0, 'world_model.warmup_epochs', 'must be non-negative')


@dataclass(frozen=True)
class EvaluationConfig:
    every_updates: int = 10
    episodes: int = 16
    greedy: bool = True
    final_window: int = 10
    monotonicity_warmup: float = 0.2

    def validate(self):
        _require(self.every_updates >= 1, 'evaluation.every_updates', 'must be at least 1')
        _require(self.episodes >= 1, 'evaluation.episodes', 'must be at least 1')
        _require(self.final_window >= 1, 'evaluation.final_window', 'must be at least 1')
        _require(0 <= self.monotonicity_warmup < 1, 'evaluation.monotonicity_warmup',
                 'must lie in [0, 1)')


@dataclass(frozen=True)
class LoggingConfig:
    level: str = 'INFO'
    log_to_console: bool = True
    log_to_file: bool = True

    def validate(self):
        _require(self.level in LOG_LEVELS, 'logging.level', f"must be one of {LOG_LEVELS}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; every field has been range-checked"""
    name: str
    seeds: Tuple[int, ...]
    output_dir: str
    environment: EnvironmentConfig
    ordering: OrderingConfig
    ppo: PpoConfig
    network: NetworkConfig
    world_model: WorldModelConfig
    evaluation: EvaluationConfig
    logging: LoggingConfig

    def validate(self):
        _require(len(self.seeds) >= 1, 'experiment.seeds', 'at least one seed is required')
        _require(len(set(self.seeds)) == len(self.seeds), 'experiment.seeds', 'seeds must be distinct')
        _require(bool(self.output_dir), 'experiment.output_dir', 'must not be empty')
        for part in (self.environment, self.ordering, self.ppo, self.network,
                     self.world_model, self.evaluation, self.logging):
            part.validate()
        from trainer import OrderingMode
        mode = OrderingMode.parse(self.ordering.mode)
        if mode.order is not None:
            _require(len(mode.order) == self.environment.n_agents, 'ordering.mode',
                     f"fixed order {list(mode.order)} does not cover {self.environment.n_agents} agents")
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['seeds'] = list(self.seeds)
        return data

    def replace(self, **changes) -> 'ExperimentConfig':
        """Copy with top-level fields or ``section__field`` entries replaced"""
        data = self.to_dict()
        for key, value in changes.items():
            if '__' in key:
                section, name = key.split('__', 1)
                data[section][name] = value
            else:
                data[key] = value
        return experiment_config_from_dict(data, source='<override>', apply_env=False)

    def hyperparameters(self) -> Dict[str, Any]:
        """Values recorded in the first metrics record of a run"""
        return {
            'gamma': self.ppo.gamma,
            'gae_lambda': self.ppo.gae_lambda,
            'clip_epsilon': self.ppo.clip_epsilon,
            'horizon': self.ordering.horizon,
            'futures': self.ordering.futures,
            'actor_lr': self.ppo.actor_lr,
            'critic_lr': self.ppo.critic_lr,
            'world_model_lr': self.world_model.lr,
            'entropy_coef': self.ppo.entropy_coef,
            'n_agents': self.environment.n_agents,
            'episode_length': self.environment.episode_length,
            'n_envs': self.ppo.n_envs,
        }


_SECTION_TYPES = {
    'environment': EnvironmentConfig,
    'ordering': OrderingConfig,
    'ppo': PpoConfig,
    'network': NetworkConfig,
    'world_model': WorldModelConfig,
    'evaluation': EvaluationConfig,
    'logging': LoggingConfig,
}


def _typed_section(name, values):
    cls = _SECTION_TYPES[name]
    kwargs = {}
    for key, default in DEFAULTS[name].items():
        if isinstance(default, bool):
            kwargs[key] = _as_bool(name, values, key)
        elif isinstance(default, int):
            kwargs[key] = _as_number(name, values, key, int)
        elif isinstance(default, float):
            kwargs[key] = _as_number(name, values, key, float)
        else:
            value = values[key]
            _require(isinstance(value, str), f"{name}.{key}", f"expected text, got {value!r}")
            kwargs[key] = value
    return cls(**kwargs)


def _parse_seeds(value) -> Tuple[int, ...]:
    if isinstance(value, (int, str)) and not isinstance(value, bool):
        value = [value]
    if not isinstance(value, list):
        raise ConfigError('experiment.seeds', f"expected a list of integers, got {value!r}")
    seeds = []
    for item in value:
        try:
            seeds.append(int(item))
        except (TypeError, ValueError):
            raise ConfigError('experiment.seeds', f"not an integer: {item!r}")
    return tuple(seeds)


def experiment_config_from_config(config: Config, apply_env: bool = True) -> ExperimentConfig:
    """Build and validate the typed view of a loaded Config"""
    config.check_sections()
    experiment = config.section('experiment')

    seeds = _parse_seeds(experiment['seeds'])
    output_dir = str(experiment['output_dir'])

    # Environment overrides: seed list and output directory only
    if apply_env and os.getenv(SEED_ENV_VAR):
        seeds = _parse_seeds(os.getenv(SEED_ENV_VAR).split(','))
    if apply_env and os.getenv(OUTPUT_DIR_ENV_VAR):
        output_dir = os.getenv(OUTPUT_DIR_ENV_VAR)

    sections = {name: _typed_section(name, config.section(name)) for name in _SECTION_TYPES}
    return ExperimentConfig(
        name=str(experiment['name']),
        seeds=seeds,
        output_dir=output_dir,
        **sections,
    ).validate()


def experiment_config_from_dict(data: Dict[str, Any], source='<dict>', apply_env: bool = True) -> ExperimentConfig:
    raw = copy.deepcopy(data)
    experiment = {k: raw.pop(k) for k in ('name', 'seeds', 'output_dir') if k in raw}
    if experiment:
        raw.setdefault('experiment', {}).update(experiment)
    return experiment_config_from_config(Config(None, raw_config=raw), apply_env)


def load_experiment_config(path) -> ExperimentConfig:
    """
    Load, substitute and validate an experiment file

    Raises:
        FileNotFoundError: If the file does not exist
        ConfigError: If any value is invalid; the message names the key
    """
    return experiment_config_from_config(Config(path))
