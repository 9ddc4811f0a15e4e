#!/usr/bin/env python3
"""
SeqComm Experiment Runner - Main Entry Point
============================================

Subcommands:
1. train   - train one run per seed, write metrics, checkpoints, probe and report
2. eval    - evaluate a checkpoint greedily on the configured environment
3. ablate  - run several ordering modes over the seed list and compare them
4. bound   - compute the return-gap bound from checkpoints or from raw inputs
5. compare - aggregate metrics streams of finished runs into learning curves

Usage:
    python3 main.py train --config ../config/matrix_game.yaml --mode fixed:0,1 --seed 7
    python3 main.py ablate --config ../config/matrix_game.yaml \\
        --modes a_first=fixed:0,1 b_first=fixed:1,0 simultaneous seqcomm --workers 4
    python3 main.py bound --epsilon-m 0.1 --epsilon-pi 0.05 --r-max 1 --gamma 0.95

Exit codes: 0 success, 1 failure, 2 invalid configuration.
"""

import argparse
import logging
import multiprocessing
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from analysis import (
    ABLATION_HEADER, CURVE_HEADER, BoundInputs, ProbeBatch, ablation_rows, build_training_report,
    estimate_divergences, format_bound_report, learning_curves, pairwise_ordering, return_gap_bound,
)
from config import ExperimentConfig, load_experiment_config
from environments import make_environment
from errors import ConfigError, InvalidArgumentError
from logger import get_logger, log_section, run_log_file, setup_logger
from networks import load_checkpoint, read_checkpoint_meta
from run_storage import (
    CHECKPOINT_FILE, INITIAL_CHECKPOINT_FILE, LOG_FILE, MANIFEST_FILE, METRICS_FILE, PREVIOUS_CHECKPOINT_FILE,
    REPORT_FILE, RunStorage, load_probe,
)
from trainer import OrderingMode, Trainer, evaluate
from utils import create_run_manifest, make_run_id, read_json_lines, sanitize_filename, write_csv

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

logger = get_logger(__name__)


# ============================================================================
# SINGLE RUN
# ============================================================================

def run_single(config: ExperimentConfig, seed: int, mode_text: str, output_dir: str,
               total_env_steps: Optional[int] = None) -> Dict[str, Any]:
    """
    Train one (config, mode, seed) job and store everything it produced

    Module-level so the ablate command can ship it to worker processes.

    Returns:
        dict: run id, directory, evaluation series and metrics records
    """
    mode = OrderingMode.parse(mode_text)
    storage = RunStorage(output_dir)
    run_id = make_run_id(config.to_dict(), str(mode), seed)
    run_dir = storage.run_dir(run_id)
    metrics = storage.metrics_writer(run_id)
    timing = storage.timing_writer(run_id)

    log_path = run_dir / LOG_FILE if config.logging.log_to_file else None
    with run_log_file(log_path) if log_path else nullcontext():
        log_section(logger, f"TRAIN: mode {mode}, seed {seed}, run {run_id}")
        trainer = Trainer(config, seed, mode, run_id)
        extra = {'run_id': run_id, 'mode': str(mode), 'env_kind': config.environment.kind}
        storage.save_checkpoint(run_id, trainer.networks, INITIAL_CHECKPOINT_FILE, extra)

        result = trainer.train(total_env_steps, on_record=metrics.write, on_timing=timing.write)

        artifacts = {
            'metrics': run_dir / METRICS_FILE,
            'initial_checkpoint': run_dir / INITIAL_CHECKPOINT_FILE,
            'checkpoint': storage.save_checkpoint(run_id, trainer.networks, CHECKPOINT_FILE, extra),
        }
        if result.pre_update_state is not None:
            previous = trainer.networks.clone()
            previous.load_state_dict(result.pre_update_state)
            artifacts['previous_checkpoint'] = storage.save_checkpoint(
                run_id, previous, PREVIOUS_CHECKPOINT_FILE, extra)
        if result.probe is not None:
            probe = ProbeBatch.from_buffer(result.probe, mode.share_hidden, str(mode), mode.share_actions)
            artifacts['probe'] = storage.save_probe(run_id, probe)

        report = build_training_report(str(mode), {seed: (result.eval_steps, result.eval_returns)},
                                       config.evaluation.final_window, config.evaluation.monotonicity_warmup)
        artifacts['report'] = storage.write_json(REPORT_FILE, report.to_dict(), run_id)
        manifest = create_run_manifest(run_id, seed, str(mode), config.to_dict(), artifacts,
                                       result.env_steps, result.updates)
        storage.write_json(MANIFEST_FILE, manifest, run_id)

        final = report.final_returns[seed]
        logger.info(f"Run {run_id} finished: {result.updates} updates, {result.env_steps} env steps, "
                    f"final return {final:.3f}")

    return {
        'run_id': run_id,
        'run_dir': str(run_dir),
        'seed': seed,
        'mode': str(mode),
        'eval_steps': result.eval_steps,
        'eval_returns': result.eval_returns,
        'final_return': final,
        'records': result.records,
    }


def parse_named_modes(items: Sequence[str]) -> List[Tuple[str, OrderingMode]]:
    """
    ``name=mode`` entries (a bare mode is named after itself)

    Raises:
        InvalidArgumentError: On fewer than two entries, a repeated name, or an unknown mode
    """
    named = []
    seen = set()
    for item in items:
        name, sep, text = item.partition('=')
        if not sep:
            name, text = item, item
        name = name.strip()
        if not name:
            raise InvalidArgumentError(f"empty mode name in {item!r}")
        if name in seen:
            raise InvalidArgumentError(f"duplicate mode entry {name!r}")
        seen.add(name)
        named.append((name, OrderingMode.parse(text)))
    if len(named) < 2:
        raise InvalidArgumentError("ablate needs at least two modes")
    return named


def collect_metrics(paths: Sequence[str]) -> Dict[str, List[dict]]:
    """
    Metrics records grouped by mode

    Each path is a metrics file, a run directory, or an output directory
    whose subdirectories are runs.

    Raises:
        FileNotFoundError: If a path holds no metrics stream
    """
    grouped = defaultdict(list)
    for raw in paths:
        path = Path(raw)
        if path.is_file():
            files = [path]
        elif (path / METRICS_FILE).exists():
            files = [path / METRICS_FILE]
        else:
            files = sorted(path.glob(f"*/{METRICS_FILE}"))
        if not files:
            raise FileNotFoundError(f"No metrics stream under {path}")
        for metrics_file in files:
            for record in read_json_lines(metrics_file):
                grouped[record['mode']].append(record)
    return dict(grouped)


# ============================================================================
# ORCHESTRATOR
# ============================================================================

class ExperimentRunner:
    """
    Orchestrates the subcommands

    Every method returns a result dict whose ``status`` is SUCCESS or FAILED;
    failures are logged with their traceback instead of propagating.
    """

    def __init__(self, config: Optional[ExperimentConfig], output_dir: Optional[str] = None):
        self.config = config
        self.output_dir = output_dir or (config.output_dir if config else 'runs')
        self.storage = RunStorage(self.output_dir)
        self.logger = get_logger("ExperimentRunner")

    def _require_config(self) -> ExperimentConfig:
        if self.config is None:
            raise InvalidArgumentError("this command needs --config")
        return self.config

    def _failed(self, what: str, error: Exception) -> Dict[str, Any]:
        self.logger.error(f"{what} failed: {error}", exc_info=True)
        return {'status': 'FAILED', 'error': str(error)}

    # --- train --------------------------------------------------------------

    def run_train(self, mode: Optional[str] = None, total_env_steps: Optional[int] = None) -> Dict[str, Any]:
        try:
            config = self._require_config()
            mode_text = str(OrderingMode.parse(mode or config.ordering.mode))
            self.storage.ensure_root()
            runs = []
            for seed in config.seeds:
                runs.append(run_single(config, seed, mode_text, str(self.storage.root), total_env_steps))

            log_section(self.logger, "TRAINING COMPLETED")
            for run in runs:
                self.logger.info(f"  seed {run['seed']}: final return {run['final_return']:.3f} ({run['run_dir']})")
            return {'status': 'SUCCESS', 'runs': [{k: v for k, v in r.items() if k != 'records'} for r in runs]}
        except Exception as e:
            return self._failed("Training", e)

    # --- eval ---------------------------------------------------------------

    def run_eval(self, checkpoint: str, mode: Optional[str] = None,
                 episodes: Optional[int] = None) -> Dict[str, Any]:
        try:
            config = self._require_config()
            log_section(self.logger, "EVALUATE CHECKPOINT")
            info = self.storage.validate_artifact(checkpoint)
            networks = load_checkpoint(checkpoint)
            meta = read_checkpoint_meta(checkpoint)
            env = make_environment(config.environment)
            if networks.obs_dim != env.obs_dim or networks.n_actions != env.n_actions:
                raise InvalidArgumentError(
                    f"checkpoint expects obs_dim={networks.obs_dim}, n_actions={networks.n_actions}; "
                    f"environment has {env.obs_dim}, {env.n_actions}")
            ordering = OrderingMode.parse(mode or meta.get('mode') or config.ordering.mode)
            seed = config.seeds[0]
            result = evaluate(networks, env, ordering, config, seed, episodes, greedy=True)

            summary = {
                'checkpoint': info['name'],
                'checkpoint_md5': info['md5'],
                'mode': str(ordering),
                'seed': seed,
                'episodes': len(result.episode_returns),
                'eval_return_mean': result.mean_return,
                'eval_return_std': result.std_return,
                'eval_step_reward_mean': result.mean_step_reward,
                'comm': result.comm.per_timestep(),
                'order_histogram': result.order_counts,
            }
            self.logger.info(f"Mode {ordering}: return {result.mean_return:.3f} +- {result.std_return:.3f} "
                             f"over {summary['episodes']} episodes")
            path = self.storage.write_json(f"eval_{sanitize_filename(Path(checkpoint).stem)}.json", summary)
            return {'status': 'SUCCESS', 'summary': summary, 'output': str(path)}
        except Exception as e:
            return self._failed("Evaluation", e)

    # --- ablate -------------------------------------------------------------

    def run_ablate(self, modes: Sequence[str], workers: int = 1,
                   total_env_steps: Optional[int] = None) -> Dict[str, Any]:
        try:
            config = self._require_config()
            named = parse_named_modes(modes)
            self.storage.ensure_root()
            jobs = [(name, str(mode), seed) for name, mode in named for seed in config.seeds]
            log_section(self.logger, f"ABLATION: {len(named)} modes x {len(config.seeds)} seeds")

            outputs = {}
            if workers > 1:
                context = multiprocessing.get_context('spawn')
                with ProcessPoolExecutor(max_workers=workers, mp_context=context) as pool:
                    futures = {
                        (name, seed): pool.submit(run_single, config, seed, mode_text,
                                                  str(self.storage.resolve(sanitize_filename(name))),
                                                  total_env_steps)
                        for name, mode_text, seed in jobs
                    }
                    outputs = {key: future.result() for key, future in futures.items()}
            else:
                for name, mode_text, seed in jobs:
                    outputs[(name, seed)] = run_single(config, seed, mode_text,
                                                       str(self.storage.resolve(sanitize_filename(name))),
                                                       total_env_steps)

            reports, records = {}, {}
            for name, mode in named:
                runs = {seed: (outputs[(name, seed)]['eval_steps'], outputs[(name, seed)]['eval_returns'])
                        for seed in config.seeds}
                reports[name] = build_training_report(str(mode), runs, config.evaluation.final_window,
                                                      config.evaluation.monotonicity_warmup)
                records[name] = [r for seed in config.seeds for r in outputs[(name, seed)]['records']]

            rows = ablation_rows(reports)
            table = write_csv(self.storage.resolve('ablation.csv'), ABLATION_HEADER, rows)
            curves = write_csv(self.storage.resolve('curves.csv'), CURVE_HEADER, learning_curves(records))
            ordering = pairwise_ordering(reports)
            self.storage.write_json('ablation.json', {
                'modes': {name: report.to_dict() for name, report in reports.items()},
                'pairwise': [{'a': a, 'b': b, 'difference': diff} for a, b, diff in ordering],
            })

            log_section(self.logger, "ABLATION RESULTS")
            for row in rows:
                self.logger.info(f"  {row[0]:<16} {row[1]:<14} {row[3]:9.3f} +- {row[4]:.3f} (n={row[2]})")
            for a, b, diff in ordering:
                self.logger.info(f"  {a} {'>=' if diff >= 0 else '<'} {b} ({diff:+.3f})")
            return {'status': 'SUCCESS', 'table': str(table), 'curves': str(curves), 'rows': rows}
        except Exception as e:
            return self._failed("Ablation", e)

    # --- bound --------------------------------------------------------------

    def run_bound(self, old: Optional[str] = None, new: Optional[str] = None, probe: Optional[str] = None,
                  epsilon_m: Optional[float] = None, epsilon_pi: Optional[Sequence[float]] = None,
                  r_max: Optional[float] = None, gamma: Optional[float] = None) -> Dict[str, Any]:
        try:
            log_section(self.logger, "RETURN-GAP BOUND")
            if gamma is None:
                if self.config is None:
                    raise InvalidArgumentError("give --gamma or --config")
                gamma = self.config.ppo.gamma
            if old or new or probe:
                if not (old and new and probe):
                    raise InvalidArgumentError("--old, --new and --probe are needed together")
                for path in (old, new, probe):
                    self.storage.validate_artifact(path)
                inputs = estimate_divergences(load_checkpoint(old), load_checkpoint(new), load_probe(probe),
                                              gamma, r_max=r_max)
            else:
                if epsilon_m is None or epsilon_pi is None or r_max is None:
                    raise InvalidArgumentError("give --old/--new/--probe or --epsilon-m, --epsilon-pi and --r-max")
                inputs = BoundInputs(epsilon_m, tuple(epsilon_pi), gamma, r_max)

            bound = return_gap_bound(inputs)
            report = format_bound_report(inputs, bound)
            print(report)
            self.storage.ensure_root()
            path = self.storage.write_json('bound.json', {**inputs.to_dict(), 'C': bound})
            return {'status': 'SUCCESS', 'inputs': inputs.to_dict(), 'C': bound, 'output': str(path)}
        except Exception as e:
            return self._failed("Bound computation", e)

    # --- compare ------------------------------------------------------------

    def run_compare(self, runs: Sequence[str]) -> Dict[str, Any]:
        try:
            log_section(self.logger, "COMPARE RUNS")
            grouped = collect_metrics(runs)
            rows = learning_curves(grouped)
            self.storage.ensure_root()
            path = write_csv(self.storage.resolve('curves.csv'), CURVE_HEADER, rows)
            for mode, records in grouped.items():
                self.logger.info(f"  {mode}: {len(records)} records from {len({r['seed'] for r in records})} seeds")
            return {'status': 'SUCCESS', 'curves': str(path), 'rows': len(rows)}
        except Exception as e:
            return self._failed("Comparison", e)


# ============================================================================
# COMMAND LINE
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=None, help='Experiment YAML file')
    common.add_argument('--seed', type=int, default=None, help='Run a single seed instead of the seed list')
    common.add_argument('--mode', default=None, help='Ordering mode (seqcomm, fixed[:perm], random, '
                                                     'simultaneous, nocomm)')
    common.add_argument('--out', default=None, help='Output directory')
    common.add_argument('--steps', type=int, default=None, help='Total environment steps per run')
    common.add_argument('--verbose', '-v', action='store_true', help='Enable verbose logging')

    parser = argparse.ArgumentParser(
        description="Sequential-communication multi-agent training workbench",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python3 main.py train --config ../config/navigation.yaml --mode seqcomm --seed 0
  python3 main.py eval --config ../config/navigation.yaml --checkpoint runs/<run>/checkpoint.npz
  python3 main.py compare --runs runs/ --out runs/
        """
    )
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('train', parents=[common], help='Train one run per seed')

    p = sub.add_parser('eval', parents=[common], help='Evaluate a checkpoint')
    p.add_argument('--checkpoint', required=True, help='Checkpoint .npz file')
    p.add_argument('--episodes', type=int, default=None, help='Evaluation episodes')

    p = sub.add_parser('ablate', parents=[common], help='Compare ordering modes over the seed list')
    p.add_argument('--modes', nargs='+', required=True, help='name=mode entries')
    p.add_argument('--workers', type=int, default=1, help='Parallel worker processes')

    p = sub.add_parser('bound', parents=[common], help='Return-gap bound')
    p.add_argument('--old', default=None, help='Checkpoint of the data-collecting policy')
    p.add_argument('--new', default=None, help='Checkpoint after the update')
    p.add_argument('--probe', default=None, help='Probe batch (.npz) collected by the old policy')
    p.add_argument('--epsilon-m', type=float, default=None)
    p.add_argument('--epsilon-pi', type=float, nargs='+', default=None, help='One value per level')
    p.add_argument('--r-max', type=float, default=None)
    p.add_argument('--gamma', type=float, default=None)

    p = sub.add_parser('compare', parents=[common], help='Aggregate metrics streams into curves.csv')
    p.add_argument('--runs', nargs='+', required=True, help='Metrics files, run or output directories')

    return parser


def load_config(args) -> Optional[ExperimentConfig]:
    """
    Load the config file and apply command-line overrides

    Raises:
        ConfigError: If the file or an override is invalid
    """
    if not args.config:
        return None
    config = load_experiment_config(args.config)
    changes = {}
    if args.seed is not None:
        changes['seeds'] = [args.seed]
    if args.out:
        changes['output_dir'] = args.out
    if args.mode:
        changes['ordering__mode'] = args.mode
    return config.replace(**changes) if changes else config


def dispatch(args, config: Optional[ExperimentConfig]) -> Dict[str, Any]:
    runner = ExperimentRunner(config, args.out)
    if args.command == 'train':
        return runner.run_train(args.mode, args.steps)
    if args.command == 'eval':
        return runner.run_eval(args.checkpoint, args.mode, args.episodes)
    if args.command == 'ablate':
        return runner.run_ablate(args.modes, args.workers, args.steps)
    if args.command == 'bound':
        return runner.run_bound(args.old, args.new, args.probe, args.epsilon_m, args.epsilon_pi,
                                args.r_max, args.gamma)
    return runner.run_compare(args.runs)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run the subcommand, return the exit code"""
    args = build_parser().parse_args(argv)
    setup_logger(logging.DEBUG if args.verbose else logging.INFO)

    try:
        config = load_config(args)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG
    except FileNotFoundError as e:
        logger.error(str(e))
        return EXIT_FAILURE

    if config is not None and not args.verbose:
        level = config.logging.level if config.logging.log_to_console else 'WARNING'
        setup_logger(level)

    result = dispatch(args, config)
    return EXIT_OK if result['status'] == 'SUCCESS' else EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
