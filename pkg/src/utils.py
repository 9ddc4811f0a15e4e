#!/usr/bin/env python3
"""
Utility Functions Module
=========================
Common helper functions for:
- Run identifiers and seeding
- JSON-lines and CSV files
- Checksums and run manifests
- Summary statistics
"""

import csv
import hashlib
import json
import re
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from logger import get_logger

logger = get_logger("Utils")


# ============================================================================
# RUN IDENTIFIERS AND SEEDING
# ============================================================================

def make_run_id(config_dict: Dict[str, Any], mode: str, seed: int) -> str:
    """
    Deterministic run identifier

    The same validated config, mode and seed always give the same id.

    Args:
        config_dict (dict): validated configuration as plain data
        mode (str): ordering mode text
        seed (int): run seed

    Returns:
        str: ``<mode>-s<seed>-<12 hex digits>``
    """
    payload = json.dumps({'config': config_dict, 'mode': mode, 'seed': seed}, sort_keys=True)
    digest = hashlib.sha256(payload.encode('utf-8')).hexdigest()[:12]
    return f"{sanitize_filename(mode)}-s{seed}-{digest}"


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    """Generator for one named random stream of a run"""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(stream,)))


def stream_rngs(seed: int, stream: int, count: int) -> List[np.random.Generator]:
    """
    One generator per environment for a random stream

    Generator ``i`` depends only on (seed, stream, i), never on ``count``.
    """
    return [np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(stream, i)))
            for i in range(count)]


# ============================================================================
# STATISTICS
# ============================================================================

def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and population standard deviation; (0.0, 0.0) for no values"""
    if len(values) == 0:
        return 0.0, 0.0
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


# ============================================================================
# FILE OPERATIONS
# ============================================================================

class JsonLinesWriter:
    """
    Append-only JSON-lines file

    Every record is written with sorted keys on its own line and flushed
    immediately, so a crashed run still leaves complete records.
    """

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.count = 0

    def write(self, record: Dict[str, Any]):
        line = json.dumps(record, sort_keys=True)
        with open(self.path, 'a') as f:
            f.write(line + '\n')
        self.count += 1


def read_json_lines(path: Path) -> List[Dict[str, Any]]:
    """
    Parse a JSON-lines file

    Raises:
        FileNotFoundError: If the file does not exist
        ValueError: If a line is not valid JSON (the message names the line)
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Metrics file not found: {path}")
    records = []
    with open(path, 'r') as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{number}: invalid JSON ({e.msg})")
    return records


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
    logger.info(f"Wrote {path}")
    return path


def write_json(path: Path, data: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(data, f, indent=2, sort_keys=True)
    return path


def calculate_file_md5(file_path: Path) -> str:
    """
    Calculate MD5 checksum of file

    Reads file in chunks for memory efficiency with large files.
    """
    md5_hash = hashlib.md5()
    with open(file_path, 'rb') as f:
        for chunk in iter(lambda: f.read(8192), b''):
            md5_hash.update(chunk)
    return md5_hash.hexdigest()


def format_bytes(bytes_value: int) -> str:
    """
    Format bytes to human-readable format

    Examples:
    - 1024 → "1.00 KB"
    - 1048576 → "1.00 MB"
    """
    for unit in ['B', 'KB', 'MB', 'GB', 'TB']:
        if bytes_value < 1024.0:
            return f"{bytes_value:.2f} {unit}"
        bytes_value /= 1024.0
    return f"{bytes_value:.2f} PB"


def sanitize_filename(filename: str) -> str:
    """
    Sanitize filename for safe use

    Keeps alphanumerics, dash, underscore and dot; everything else becomes
    an underscore.
    """
    return re.sub(r'[^\w\-.]', '_', filename)


# ============================================================================
# RUN MANIFEST
# ============================================================================

def create_run_manifest(run_id: str, seed: int, mode: str, config_dict: Dict[str, Any],
                        artifacts: Dict[str, Path], env_steps: int, updates: int,
                        timestamp: Optional[str] = None) -> Dict[str, Any]:
    """
    Record of what a run produced

    This creates a record of:
    - Run identity (id, seed, mode)
    - The validated configuration
    - Every artifact with its size and MD5 checksum

    Args:
        run_id (str): run identifier
        seed (int): run seed
        mode (str): ordering mode text
        config_dict (dict): validated configuration
        artifacts (dict): name -> path of files written by the run
        env_steps (int): environment steps collected
        updates (int): policy updates performed
        timestamp (str): ISO time; defaults to now (UTC)

    Returns:
        dict: manifest data
    """
    files = {}
    for name, path in sorted(artifacts.items()):
        path = Path(path)
        if path.exists():
            files[name] = {
                'path': path.name,
                'size': path.stat().st_size,
                'md5': calculate_file_md5(path),
            }
        else:
            logger.warning(f"Artifact missing from manifest: {path}")
    return {
        'timestamp': timestamp or datetime.now(timezone.utc).isoformat(),
        'run_id': run_id,
        'seed': seed,
        'mode': mode,
        'env_steps': env_steps,
        'updates': updates,
        'config': config_dict,
        'artifacts': files,
    }


def iter_metric_values(records: Iterable[Dict[str, Any]], key: str) -> Iterator[Tuple[int, float]]:
    """(env_steps, value) pairs for one metric"""
    for record in records:
        if key in record and record[key] is not None:
            yield int(record.get('env_steps', 0)), float(record[key])
