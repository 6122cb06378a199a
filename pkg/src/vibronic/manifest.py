"""Run manifests: what was run, with which inputs, producing which files."""

import hashlib
import json
import platform
import socket
import sys
from pathlib import Path

import numpy as np

from . import __version__

SCHEMA = "vibronic.manifest/1"


def sha256_file(path):
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _entry(path, base):
    path = Path(path)
    try:
        name = str(path.resolve().relative_to(Path(base).resolve()))
    except ValueError:
        name = str(path)
    return {"path": name, "sha256": sha256_file(path), "bytes": path.stat().st_size}


def build_manifest(command, config, seed, inputs, outputs, base_dir, started, wall_clock_s):
    """Manifest dict. ``started`` is an ISO timestamp string; only manifests carry timestamps."""
    return {
        "schema": SCHEMA,
        "tool": "vibronic",
        "version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": [_entry(p, base_dir) for p in inputs],
        "outputs": [_entry(p, base_dir) for p in outputs],
        "started_utc": started,
        "wall_clock_s": wall_clock_s,
        "host": {"hostname": socket.gethostname(), "platform": platform.platform(),
                 "python": sys.version.split()[0], "numpy": np.__version__},
    }


def write_manifest(path, manifest):
    Path(path).write_text(json.dumps(manifest, indent=1) + "\n")


def verify_manifest(path):
    """List of problems (missing or digest-mismatched outputs); empty when consistent."""
    path = Path(path)
    doc = json.loads(path.read_text())
    problems = []
    for entry in doc.get("outputs", []):
        target = Path(entry["path"])
        if not target.is_absolute():
            target = path.parent / target
        if not target.exists():
            problems.append(f"missing: {entry['path']}")
        elif sha256_file(target) != entry["sha256"]:
            problems.append(f"digest mismatch: {entry['path']}")
    return problems
