"""Checkpoint container shared by classifiers and detectors.

A checkpoint is a directory::

    <dir>/metadata.toml   kind, architecture config, class count, provenance
    <dir>/weights.npz     one array per state-dict entry, keyed by layer path

Writes go to a temporary sibling directory that is renamed into place.
"""

from __future__ import annotations

import logging
import zipfile
from pathlib import Path
from typing import Any

import numpy as np
import toml
import torch
from torch import nn

from confdetect.errors import CheckpointLoadError
from confdetect.utils import atomic_directory

logger = logging.getLogger(__name__)

METADATA_FILENAME = "metadata.toml"
WEIGHTS_FILENAME = "weights.npz"


def state_to_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {key: value.detach().cpu().numpy() for key, value in module.state_dict().items()}


def save_checkpoint(directory: Path, module: nn.Module, metadata: dict[str, Any]) -> Path:
    """Write ``module``'s state and ``metadata`` atomically; returns the directory."""
    directory = Path(directory)
    with atomic_directory(directory) as tmp:
        with open(tmp / WEIGHTS_FILENAME, "wb") as f:
            np.savez(f, **state_to_arrays(module))
        with open(tmp / METADATA_FILENAME, "w") as f:
            toml.dump(metadata, f)
    logger.info("checkpoint written to %s", directory)
    return directory


def read_checkpoint(directory: Path) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    """Read metadata and weights fully into memory, or raise ``CheckpointLoadError``."""
    directory = Path(directory)
    meta_path = directory / METADATA_FILENAME
    weights_path = directory / WEIGHTS_FILENAME
    if not meta_path.is_file() or not weights_path.is_file():
        msg = f"no checkpoint at {directory} (expected {METADATA_FILENAME} and {WEIGHTS_FILENAME})"
        raise CheckpointLoadError(msg)
    try:
        metadata = toml.load(meta_path)
        with np.load(weights_path, allow_pickle=False) as arrays:
            state = {key: torch.from_numpy(np.array(arrays[key])) for key in arrays.files}
    except (OSError, ValueError, EOFError, zipfile.BadZipFile, toml.TomlDecodeError) as exc:
        msg = f"corrupt checkpoint at {directory}: {exc}"
        raise CheckpointLoadError(msg) from exc
    return metadata, state


def load_state(module: nn.Module, state: dict[str, torch.Tensor], *, source: str = "checkpoint") -> None:
    """Load a complete state dict after checking every key and shape up front.

    Nothing is copied unless the whole state matches.
    """
    expected = module.state_dict()
    problems: list[str] = []
    missing = sorted(set(expected) - set(state))
    unexpected = sorted(set(state) - set(expected))
    problems.extend(f"missing '{k}'" for k in missing)
    problems.extend(f"unexpected '{k}'" for k in unexpected)
    for key in sorted(set(expected) & set(state)):
        if tuple(expected[key].shape) != tuple(state[key].shape):
            problems.append(f"'{key}' has shape {tuple(state[key].shape)}, expected {tuple(expected[key].shape)}")
    if problems:
        msg = f"{source} does not match the architecture: " + "; ".join(problems)
        raise CheckpointLoadError(msg)
    module.load_state_dict(state, strict=True)
