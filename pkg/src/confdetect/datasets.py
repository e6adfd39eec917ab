"""Desk-scale dataset ingestion: CIFAR-10 fetch helper and an offline synthetic set."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch

from confdetect.core import ImageBatch
from confdetect.errors import ConfigError, InvalidInputError, MissingPrerequisiteError

logger = logging.getLogger(__name__)

DATASETS = ("cifar10", "synthetic")
SPLITS = ("train", "test", "pool")

# The synthetic class templates never change between runs
_SYNTHETIC_TEMPLATE_SEED = 1234


@dataclass
class DatasetSpec:
    """Which dataset to read and how many images each split uses.

    ``pool`` holds the test-set images that attacks are run on.
    """

    name: str = "cifar10"
    root: str = "data"
    train_size: int = 50000
    test_size: int = 10000
    pool_size: int = 2000
    image_size: int = 32
    num_classes: int = 10

    def problems(self) -> list[str]:
        found: list[str] = []
        if self.name not in DATASETS:
            found.append(f"dataset.name must be one of {', '.join(DATASETS)}, got '{self.name}'")
        for key in ("train_size", "test_size", "pool_size"):
            if getattr(self, key) < 1:
                found.append(f"dataset.{key} must be positive")
        if self.name == "cifar10" and (self.image_size != 32 or self.num_classes != 10):
            found.append("cifar10 images are 32x32 with 10 classes")
        return found

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def synthetic_dataset(n: int, num_classes: int = 10, size: int = 32, seed: int = 0, channels: int = 3) -> ImageBatch:
    """Class-conditional smooth patterns plus pixel noise, deterministic in ``seed``."""
    if n < 1:
        raise InvalidInputError("synthetic dataset needs at least one image")
    template_rng = np.random.default_rng(_SYNTHETIC_TEMPLATE_SEED)
    coarse = template_rng.uniform(-1.0, 1.0, size=(num_classes, channels, 4, 4))
    templates = torch.nn.functional.interpolate(
        torch.from_numpy(coarse).float(), size=(size, size), mode="bilinear", align_corners=False
    )
    rng = np.random.default_rng(seed)
    labels = torch.from_numpy(rng.integers(0, num_classes, size=n)).long()
    noise = torch.from_numpy(rng.normal(0.0, 0.08, size=(n, channels, size, size))).float()
    pixels = (0.5 + 0.3 * templates[labels] + noise).clamp(0.0, 1.0)
    return ImageBatch(pixels=pixels, labels=labels)


def _cifar10(root: Path, train: bool, download: bool) -> Any:
    from torchvision.datasets import CIFAR10

    try:
        return CIFAR10(root=str(root), train=train, download=download)
    except RuntimeError as exc:
        raise MissingPrerequisiteError([(str(root), "confdetect classifier (downloads CIFAR-10)")]) from exc


def fetch_dataset(spec: DatasetSpec) -> Path:
    """Download the desk-scale dataset into ``spec.root`` (no-op for synthetic)."""
    root = Path(spec.root)
    if spec.name == "cifar10":
        root.mkdir(parents=True, exist_ok=True)
        _cifar10(root, train=True, download=True)
        _cifar10(root, train=False, download=True)
        logger.info("CIFAR-10 available under %s", root)
    return root


def load_split(spec: DatasetSpec, split: str, seed: int = 0) -> ImageBatch:
    """Load one split as a [0, 1] ``ImageBatch``."""
    found = spec.problems()
    if found:
        raise ConfigError(found)
    if split not in SPLITS:
        msg = f"Invalid split '{split}'. Must be one of: {', '.join(SPLITS)}"
        raise InvalidInputError(msg)
    size = {"train": spec.train_size, "test": spec.test_size, "pool": spec.pool_size}[split]

    if spec.name == "synthetic":
        # Distinct offsets keep the splits disjoint
        offset = {"train": 0, "test": 1, "pool": 2}[split]
        return synthetic_dataset(size, spec.num_classes, spec.image_size, seed=seed * 10 + offset)

    dataset = _cifar10(Path(spec.root), train=split == "train", download=False)
    images = torch.from_numpy(np.asarray(dataset.data[:size]))
    labels = torch.as_tensor(dataset.targets[:size])
    return ImageBatch.from_uint8(images, labels)
