"""Artifact manifests: config snapshot plus content hashes of inputs and outputs."""

import hashlib
import json
import logging
import os
from datetime import datetime, timezone

from . import __version__
from .errors import ManifestMismatch

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def combined_hash(hashes: dict[str, str], config_snapshot: dict | None = None) -> str:
    """One hash over named file hashes and the config, independent of insertion order."""
    digest = hashlib.sha256()
    for name in sorted(hashes):
        digest.update(f"{name}:{hashes[name]}\n".encode("utf-8"))
    if config_snapshot is not None:
        digest.update(json.dumps(config_snapshot, sort_keys=True).encode("utf-8"))
    return digest.hexdigest()


def _relative(directory: str, path: str) -> str:
    return os.path.relpath(os.path.abspath(path), os.path.abspath(directory))


def write_manifest(directory: str, step: str, config_snapshot: dict, inputs: dict[str, str] | None = None,
                   outputs: dict[str, str] | None = None, extra: dict | None = None) -> dict:
    """
    Write manifest.json into an artifact directory.

    Args:
        directory: Artifact directory
        step: Command that produced the artifacts (e.g. "train-score")
        config_snapshot: Effective configuration of the step
        inputs: Name -> path of every file the step read
        outputs: Name -> path of every file the step wrote

    Returns:
        dict: The manifest as written
    """
    input_hashes = {name: sha256_file(path) for name, path in (inputs or {}).items()}
    output_hashes = {name: sha256_file(path) for name, path in (outputs or {}).items()}
    manifest = {
        "step": step,
        "version": __version__,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config": config_snapshot,
        "inputs": {name: {"path": os.path.abspath(path), "sha256": input_hashes[name]}
                   for name, path in (inputs or {}).items()},
        "outputs": {name: {"path": _relative(directory, path), "sha256": output_hashes[name]}
                    for name, path in (outputs or {}).items()},
        "input_hash": combined_hash(input_hashes, config_snapshot),
        **(extra or {}),
    }
    path = os.path.join(directory, MANIFEST_NAME)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    os.replace(tmp_path, path)
    logger.info(f"Wrote manifest for {step} in {directory}")
    return manifest


def read_manifest(directory: str) -> dict | None:
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(path):
        return None
    with open(path, "r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError:
            logger.warning(f"Unreadable manifest {path}")
            return None


def check_manifest(directory: str, config_snapshot: dict | None = None):
    """
    Re-hash every recorded file and compare with the manifest.

    Raises:
        ManifestMismatch: Missing manifest, missing or changed output, changed
            input, or a different configuration
    """
    manifest = read_manifest(directory)
    if manifest is None:
        raise ManifestMismatch(f"{directory}: no readable {MANIFEST_NAME}")
    if config_snapshot is not None and manifest.get("config") != config_snapshot:
        raise ManifestMismatch(f"{directory}: configuration differs from the manifest")
    for name, entry in manifest.get("outputs", {}).items():
        path = os.path.join(directory, entry["path"])
        if not os.path.exists(path):
            raise ManifestMismatch(f"{directory}: output '{name}' ({entry['path']}) is missing")
        if sha256_file(path) != entry["sha256"]:
            raise ManifestMismatch(f"{directory}: output '{name}' ({entry['path']}) has changed")
    for name, entry in manifest.get("inputs", {}).items():
        if os.path.exists(entry["path"]) and sha256_file(entry["path"]) != entry["sha256"]:
            raise ManifestMismatch(f"{directory}: input '{name}' ({entry['path']}) has changed")


def verify_manifest(directory: str, config_snapshot: dict | None = None) -> bool:
    """True when check_manifest passes; the reason for a failure is logged."""
    try:
        check_manifest(directory, config_snapshot)
    except ManifestMismatch as e:
        logger.info(f"Manifest check failed: {e}")
        return False
    return True
