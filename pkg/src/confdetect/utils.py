"""Utility helpers for confdetect."""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import os
import re
import shutil
import tempfile
from collections.abc import Iterator
from datetime import datetime
from pathlib import Path
from typing import Any

from rich.logging import RichHandler

LOGGER_NAME = "confdetect"
LOCK_FILENAME = ".lock"


def configure_logging(verbose: bool = False) -> logging.Logger:
    """Install a single rich handler on the package logger.

    Safe to call repeatedly (CLI tests invoke the group many times).
    """
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    if not any(isinstance(h, RichHandler) for h in logger.handlers):
        handler = RichHandler(show_path=False, rich_tracebacks=verbose, markup=False)
        handler.setFormatter(logging.Formatter("%(message)s", datefmt="[%X]"))
        logger.addHandler(handler)
    logger.propagate = False
    return logger


def sanitize_name(name: str, max_length: int = 60) -> str:
    """Sanitize a name for use as a directory component.

    Converts to lowercase, replaces non-alphanumeric characters with dashes,
    and truncates to max_length.
    """
    sanitized = re.sub(r"[^a-zA-Z0-9_]+", "-", name).strip("-").lower()
    if len(sanitized) > max_length:
        sanitized = sanitized[:max_length].rstrip("-")
    return sanitized


def canonical_hash(data: Any, length: int = 12) -> str:
    """Short SHA-256 of the canonical JSON form of ``data``."""
    payload = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:length]


def file_sha256(path: Path) -> str:
    """Return the hex SHA-256 of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@contextlib.contextmanager
def atomic_directory(target: Path) -> Iterator[Path]:
    """Yield a temporary sibling directory that replaces ``target`` on success.

    On any exception the temporary directory is removed and ``target`` is left untouched.
    """
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    os.replace(tmp, target)


@contextlib.contextmanager
def run_directory(output_root: Path, command: str, config_hash: str) -> Iterator[Path]:
    """Create ``runs/<command>-<hash>-<timestamp>/`` holding an exclusive lock file."""
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    run_dir = Path(output_root) / "runs" / f"{sanitize_name(command)}-{config_hash}-{stamp}"
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK_FILENAME
    # O_EXCL: a second writer fails here instead of interleaving files
    fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)
