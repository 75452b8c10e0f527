"""Content hashes and run manifests."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

MANIFEST_SCHEMA = 1
MANIFEST_NAME = "manifest.json"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_path(path) -> str:
    """Hash of a file, or of a directory tree (relative paths + contents).

    Manifests are skipped so a directory's hash covers only its payload.
    """
    p = Path(path)
    if p.is_file():
        return sha256_file(p)
    if not p.is_dir():
        raise FileNotFoundError(f"{p} does not exist")
    h = hashlib.sha256()
    for f in sorted(q for q in p.rglob("*") if q.is_file() and q.name != MANIFEST_NAME):
        h.update(f.relative_to(p).as_posix().encode())
        h.update(b"\0")
        h.update(sha256_file(f).encode())
    return h.hexdigest()


def write_manifest(directory, command: str, config: dict, inputs: dict, extra: dict | None = None,
                   elapsed: float | None = None) -> Path:
    """``inputs`` maps a label to a path; each is recorded with its content hash.

    Outputs are every other file in ``directory``. ``elapsed_seconds`` is the
    only field that changes between identical runs.
    """
    root = Path(directory)
    from . import __version__

    outputs = {
        f.relative_to(root).as_posix(): sha256_file(f)
        for f in sorted(root.rglob("*"))
        if f.is_file() and f.name != MANIFEST_NAME
    }
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "package_version": __version__,
        "command": command,
        "config": config,
        "inputs": {k: {"path": str(v), "sha256": hash_path(v)} for k, v in sorted(inputs.items())},
        "outputs": outputs,
        **(extra or {}),
    }
    if elapsed is not None:
        manifest["elapsed_seconds"] = round(float(elapsed), 3)
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(directory) -> dict:
    p = Path(directory)
    path = p / MANIFEST_NAME if p.is_dir() else p.parent / MANIFEST_NAME
    return json.loads(path.read_text()) if path.exists() else {}
