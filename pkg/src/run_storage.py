#!/usr/bin/env python3
"""
Run Storage Module
==================
This module handles:
1. Laying out one directory per run under the configured output directory
2. Refusing any path that would land outside that directory
3. Writing and reading checkpoints, probe batches and metrics streams
4. Validating stored artifacts (exists, readable, format signature, MD5)

Key Concepts:
- Run directory: <output_dir>/<run_id>/ holding every file of one run
- Format signature: .npz archives are ZIP files and start with 'PK'
"""

import os
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from analysis import ProbeBatch
from errors import InvalidArgumentError
from logger import get_logger
from networks import save_checkpoint
from utils import (
    JsonLinesWriter, calculate_file_md5, format_bytes, sanitize_filename, write_json,
)

METRICS_FILE = 'metrics.jsonl'
TIMING_FILE = 'timing.jsonl'
CHECKPOINT_FILE = 'checkpoint.npz'
INITIAL_CHECKPOINT_FILE = 'initial_checkpoint.npz'
PREVIOUS_CHECKPOINT_FILE = 'previous_checkpoint.npz'
PROBE_FILE = 'probe.npz'
LOG_FILE = 'train.log'
REPORT_FILE = 'report.json'
MANIFEST_FILE = 'manifest.json'

ZIP_SIGNATURE = b'PK'
PROBE_ARRAYS = ('observations', 'levels', 'actions', 'peer_slots', 'next_observations', 'rewards')


class RunStorage:
    """
    Owns the output directory of an experiment

    Methods:
    - resolve(): map a relative path into the output directory
    - run_dir(): directory of one run
    - metrics_writer() / timing_writer(): append-only JSON-lines streams
    - save_probe() / load_probe(): probe batches for divergence estimates
    - validate_artifact(): verify a stored file and return its metadata
    """

    def __init__(self, output_dir):
        self.root = Path(output_dir).resolve()
        self.log = get_logger(__name__)

    def resolve(self, *parts) -> Path:
        """
        Path inside the output directory

        Raises:
            InvalidArgumentError: If the path escapes the output directory
        """
        path = self.root.joinpath(*[str(p) for p in parts]).resolve()
        if path != self.root and self.root not in path.parents:
            raise InvalidArgumentError(f"refusing to write outside {self.root}: {path}")
        return path

    def ensure_root(self) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        return self.root

    def run_dir(self, run_id: str, create: bool = True) -> Path:
        path = self.resolve(sanitize_filename(run_id))
        if create:
            path.mkdir(parents=True, exist_ok=True)
        return path

    def run_file(self, run_id: str, name: str) -> Path:
        return self.resolve(sanitize_filename(run_id), name)

    # --- streams -----------------------------------------------------------

    def metrics_writer(self, run_id: str, fresh: bool = True) -> JsonLinesWriter:
        """Metrics stream of a run; ``fresh`` truncates a stream left by an earlier run"""
        return self._writer(run_id, METRICS_FILE, fresh)

    def timing_writer(self, run_id: str, fresh: bool = True) -> JsonLinesWriter:
        return self._writer(run_id, TIMING_FILE, fresh)

    def _writer(self, run_id: str, name: str, fresh: bool) -> JsonLinesWriter:
        path = self.run_file(run_id, name)
        path.parent.mkdir(parents=True, exist_ok=True)
        if fresh and path.exists():
            path.unlink()
        return JsonLinesWriter(path)

    def write_json(self, name: str, data: Dict, run_id: Optional[str] = None) -> Path:
        path = self.run_file(run_id, name) if run_id else self.resolve(name)
        return write_json(path, data)

    # --- checkpoints and probes ---------------------------------------------

    def save_checkpoint(self, run_id: str, networks, name: str = CHECKPOINT_FILE,
                        extra: Optional[Dict] = None) -> Path:
        path = save_checkpoint(self.run_file(run_id, name), networks, extra)
        self.log.info(f"Checkpoint written: {path.name} ({format_bytes(path.stat().st_size)})")
        return path

    def save_probe(self, run_id: str, probe: ProbeBatch) -> Path:
        path = self.run_file(run_id, PROBE_FILE)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {name: getattr(probe, name) for name in PROBE_ARRAYS}
        arrays['share_hidden'] = np.array(bool(probe.share_hidden))
        arrays['mode'] = np.array(probe.mode)
        with open(path, 'wb') as f:
            np.savez(f, **arrays)
        self.log.debug(f"Probe batch of {len(probe)} transitions written to {path}")
        return path

    # --- validation ---------------------------------------------------------

    def validate_artifact(self, artifact_path) -> Dict:
        """
        Validate that a stored artifact exists and is intact

        Validation steps:
        1. Check file exists
        2. Check file is readable
        3. Check the ZIP signature for .npz archives
        4. Calculate MD5 checksum

        Returns:
            dict: name, size, md5 and extension

        Raises:
            FileNotFoundError: If file doesn't exist
            PermissionError: If file not readable
            InvalidArgumentError: If an archive lacks the ZIP signature
        """
        path = Path(artifact_path)
        if not path.exists():
            raise FileNotFoundError(f"Artifact not found: {path}")
        if not os.access(path, os.R_OK):
            raise PermissionError(f"Artifact is not readable: {path}")
        if path.suffix == '.npz':
            with open(path, 'rb') as f:
                signature = f.read(2)
            if signature != ZIP_SIGNATURE:
                raise InvalidArgumentError(f"Invalid .npz file: expected ZIP signature (PK), got {signature}")
        size = path.stat().st_size
        return {
            'path': str(path),
            'name': path.name,
            'size': size,
            'md5': calculate_file_md5(path),
            'extension': path.suffix,
        }


def load_probe(path) -> ProbeBatch:
    """
    Raises:
        FileNotFoundError: If the file does not exist
        InvalidArgumentError: If arrays are missing
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Probe data not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        missing = [name for name in PROBE_ARRAYS if name not in archive.files]
        if missing:
            raise InvalidArgumentError(f"{path} is missing probe arrays {missing}")
        arrays = {name: archive[name] for name in PROBE_ARRAYS}
        share_hidden = bool(archive['share_hidden']) if 'share_hidden' in archive.files else True
        mode = str(archive['mode']) if 'mode' in archive.files else ''
    return ProbeBatch(share_hidden=share_hidden, mode=mode, **arrays)

