"""Run manifests: enough resolved state to reproduce a command bitwise.

Each CLI run writes exactly one manifest.json next to its outputs holding
the command name, every resolved config value, content digests of the
input files, the seed, and the artifact paths. No timestamps, so two
identical runs produce identical manifests.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


def file_digest(path) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            sha.update(chunk)
    return "sha256:" + sha.hexdigest()


def write_manifest(out_dir, command: str, config: dict, inputs: dict,
                   seed: int | None, outputs: list[str]) -> Path:
    """Write manifest.json into out_dir and return its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "config": config,
        "inputs": {name: {"path": str(p), "digest": file_digest(p)}
                   for name, p in inputs.items()},
        "seed": seed,
        "outputs": sorted(outputs),
    }
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
