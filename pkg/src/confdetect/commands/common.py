"""Helpers shared by the command implementations."""

from __future__ import annotations

import contextlib
import logging
from collections.abc import Iterator
from datetime import datetime
from pathlib import Path
from typing import Any

import toml
import torch
from rich.console import Console

from confdetect.archive import MANIFEST_FILENAME, load_archive
from confdetect.checkpoints import METADATA_FILENAME
from confdetect.classifiers import load_classifier
from confdetect.config import ExperimentConfig
from confdetect.core import ImageBatch
from confdetect.datasets import load_split
from confdetect.errors import ConfigError, MissingPrerequisiteError
from confdetect.gradients import ClassifierHandle
from confdetect.training import DetectionDataset
from confdetect.utils import run_directory

console = Console()
logger = logging.getLogger(__name__)

SUMMARY_FILENAME = "summary.toml"


def pick_device() -> str:
    return "cuda" if torch.cuda.is_available() else "cpu"


def classifier_prerequisite(config: ExperimentConfig) -> list[tuple[str, str]]:
    if (config.classifier_dir / METADATA_FILENAME).is_file():
        return []
    return [(str(config.classifier_dir), "confdetect classifier")]


def archive_prerequisites(config: ExperimentConfig, attacks: list[str]) -> list[tuple[str, str]]:
    return [
        (str(config.archive_dir(name)), f"confdetect attack --attack {name}")
        for name in attacks
        if not (config.archive_dir(name) / MANIFEST_FILENAME).is_file()
    ]


def detector_prerequisites(
    config: ExperimentConfig, variant: str, attack_sets: list[list[str]]
) -> list[tuple[str, str]]:
    missing = []
    for attacks in attack_sets:
        directory = config.detector_dir(variant, attacks)
        if not (directory / METADATA_FILENAME).is_file():
            flags = " ".join(f"--attack {a}" for a in attacks)
            missing.append((str(directory), f"confdetect train --variant {variant} {flags}"))
    return missing


def require(missing: list[tuple[str, str]]) -> None:
    """Raise one error listing every missing artifact and the command producing it."""
    if missing:
        raise MissingPrerequisiteError(missing)


def load_model(config: ExperimentConfig) -> ClassifierHandle:
    require(classifier_prerequisite(config))
    return load_classifier(config.classifier, config.classifier_dir, device=pick_device())


def load_pool(config: ExperimentConfig, limit: int | None = None) -> ImageBatch:
    pool = load_split(config.dataset, "pool", seed=config.stage_seed("data"))
    if limit is not None and limit < len(pool):
        pool = pool.subset(slice(0, limit))
    return pool


def load_detection_data(config: ExperimentConfig, attacks: list[str]) -> DetectionDataset:
    """Paired data from the archives of ``attacks``; all must share one classifier."""
    archives = [load_archive(config.archive_dir(name)) for name in attacks]
    checksums = {a.classifier_checksum for a in archives}
    if len(checksums) > 1:
        raise ConfigError(f"archives {', '.join(attacks)} were generated with different classifiers")
    return DetectionDataset.concat([DetectionDataset.from_archive(a) for a in archives])


def split_data(
    config: ExperimentConfig, data: DetectionDataset, training: dict[str, Any] | None = None
) -> dict[str, DetectionDataset]:
    """Train/val/test partition with the fractions recorded at training time when given."""
    training = training or config.training.to_dict()
    return data.split(
        test_fraction=float(training.get("test_fraction", config.training.test_fraction)),
        val_fraction=float(training.get("val_fraction", config.training.val_fraction)),
        seed=config.stage_seed("data"),
    )


def provenance(config: ExperimentConfig, **extra: Any) -> dict[str, Any]:
    return {
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "config_file": str(config.source or ""),
        **extra,
    }


@contextlib.contextmanager
def command_run(config: ExperimentConfig, command: str) -> Iterator[tuple[Path, dict[str, Any]]]:
    """Open a locked run directory; the yielded dict becomes ``summary.toml`` on success."""
    config_hash = config.config_hash()
    with run_directory(config.root, command, config_hash) as run_dir:
        results: dict[str, Any] = {}
        yield run_dir, results
        summary = {
            "run": {
                "command": command,
                "config_hash": config_hash,
                "finished": datetime.now().isoformat(timespec="seconds"),
            },
            "results": results,
            "config": config.to_dict(),
        }
        with open(run_dir / SUMMARY_FILENAME, "w") as f:
            toml.dump(summary, f)
        logger.info("run summary written to %s", run_dir / SUMMARY_FILENAME)
    console.print(f"[dim]Run directory: {run_dir}[/dim]")
