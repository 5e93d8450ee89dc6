"""Run manifests: what a CLI run consumed, produced and how long it took.

A manifest is written atomically (temp file + rename) as the last step of
every subcommand. Replaying it re-runs the subcommand with the recorded
effective config; ``verify_outputs`` compares the fresh outputs against the
recorded hashes.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import config
from errors import ValidationError

MANIFEST_NAME = 'run_manifest.json'
EVENT_LOG_NAME = 'events.log'
_NEVER_HASHED = (MANIFEST_NAME, EVENT_LOG_NAME)


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()


def hash_inputs(paths: Iterable[str]) -> Dict[str, str]:
    """sha256 of every existing input file; directories hash their manifest.json if any."""
    out: Dict[str, str] = {}
    for p in paths:
        if not p:
            continue
        if os.path.isdir(p):
            inner = os.path.join(p, 'manifest.json')
            if os.path.isfile(inner):
                out[inner] = file_sha256(inner)
        elif os.path.isfile(p):
            out[p] = file_sha256(p)
            sidecar = p + '.json'
            if os.path.isfile(sidecar):
                out[sidecar] = file_sha256(sidecar)
    return dict(sorted(out.items()))


def collect_outputs(root: str) -> Dict[str, str]:
    """Relative path -> sha256 for every file under ``root`` except the manifest and event log."""
    out: Dict[str, str] = {}
    for dirpath, _dirs, files in os.walk(root):
        for name in files:
            full = os.path.join(dirpath, name)
            rel = os.path.relpath(full, root).replace(os.sep, '/')
            if rel in _NEVER_HASHED or name.endswith('.tmp'):
                continue
            out[rel] = file_sha256(full)
    return dict(sorted(out.items()))


class PhaseTimer:
    def __init__(self):
        self.timings: Dict[str, float] = {}

    @contextmanager
    def phase(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start


@dataclass
class RunManifest:
    subcommand: str
    config: Dict
    input_hashes: Dict[str, str] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    volatile: List[str] = field(default_factory=list)   # outputs not expected to replay byte-identically
    tool: str = config.TOOL_NAME
    version: str = config.TOOL_VERSION

    def to_dict(self) -> Dict:
        return {'tool': self.tool, 'version': self.version, 'subcommand': self.subcommand,
                'config': dict(sorted(self.config.items())), 'input_hashes': self.input_hashes,
                'timings': self.timings, 'outputs': self.outputs, 'volatile': sorted(self.volatile)}

    @classmethod
    def from_dict(cls, data: Dict) -> 'RunManifest':
        try:
            return cls(subcommand=str(data['subcommand']), config=dict(data['config']),
                       input_hashes=dict(data.get('input_hashes', {})),
                       timings={k: float(v) for k, v in data.get('timings', {}).items()},
                       outputs=dict(data.get('outputs', {})), volatile=list(data.get('volatile', [])),
                       tool=str(data.get('tool', config.TOOL_NAME)),
                       version=str(data.get('version', '')))
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"malformed run manifest: {e}") from e


def write_manifest(root: str, manifest: RunManifest) -> str:
    os.makedirs(root, exist_ok=True)
    path = os.path.join(root, MANIFEST_NAME)
    tmp = path + '.tmp'
    with open(tmp, 'w', encoding='utf-8') as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    return path


def read_manifest(path: str) -> RunManifest:
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(path):
        raise ValidationError(f"run manifest not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: invalid JSON ({e})") from e
    return RunManifest.from_dict(data)


def verify_outputs(manifest: RunManifest, root: str) -> List[str]:
    """Output paths whose bytes differ from (or are missing vs) the manifest."""
    fresh = collect_outputs(root)
    bad = []
    for rel, digest in manifest.outputs.items():
        if rel in manifest.volatile:
            continue
        if fresh.get(rel) != digest:
            bad.append(rel)
    return sorted(bad)


def finalize(root: str, subcommand: str, effective: Dict, inputs: Iterable[str],
             timer: Optional[PhaseTimer] = None, volatile: Iterable[str] = ()) -> RunManifest:
    manifest = RunManifest(subcommand=subcommand, config=dict(effective), input_hashes=hash_inputs(inputs),
                           timings=dict(timer.timings) if timer else {},
                           outputs=collect_outputs(root), volatile=list(volatile))
    write_manifest(root, manifest)
    return manifest
