"""Desk-scale target classifiers: construction, training, save/load."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import torch
import torch.nn.functional as F
from rich.progress import Progress
from torch import nn

from confdetect.checkpoints import load_state, read_checkpoint, save_checkpoint
from confdetect.core import ImageBatch, iter_batches
from confdetect.errors import CheckpointLoadError, ConfigError, NumericError
from confdetect.gradients import ClassifierHandle

logger = logging.getLogger(__name__)

ARCHITECTURES = ("small_conv", "resnet_small")


@dataclass
class ClassifierSpec:
    """Which classifier to build and where its checkpoint lives."""

    arch: str = "resnet_small"
    num_classes: int = 10
    input_size: list[int] = field(default_factory=lambda: [3, 32, 32])
    checkpoint: str = ""

    def problems(self) -> list[str]:
        found: list[str] = []
        if self.arch not in ARCHITECTURES:
            found.append(f"classifier.arch must be one of {', '.join(ARCHITECTURES)}, got '{self.arch}'")
        if self.num_classes < 2:
            found.append("classifier.num_classes must be at least 2")
        if len(self.input_size) != 3 or any(s < 1 for s in self.input_size):
            found.append(f"classifier.input_size must be [C, H, W], got {self.input_size}")
        return found

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class ClassifierTrainConfig:
    lr: float = 0.001
    epochs: int = 15
    batch_size: int = 128
    seed: int = 0


class SmallConvNet(nn.Module):
    """Three conv blocks with max pooling and a linear head."""

    def __init__(self, in_channels: int, num_classes: int) -> None:
        super().__init__()

        def block(c_in: int, c_out: int) -> nn.Sequential:
            return nn.Sequential(
                nn.Conv2d(c_in, c_out, 3, padding=1),
                nn.BatchNorm2d(c_out),
                nn.ReLU(),
                nn.MaxPool2d(2),
            )

        self.features = nn.Sequential(block(in_channels, 32), block(32, 64), block(64, 128))
        self.head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(128, num_classes))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class _BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut: nn.Module = nn.Identity()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetSmall(nn.Module):
    """A ResNet-ish classifier for 32x32 inputs (stand-in for ResNet34 / VGG16)."""

    def __init__(self, in_channels: int, num_classes: int, widths: tuple[int, ...] = (32, 64, 128)) -> None:
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(),
        )
        layers: list[nn.Module] = []
        c_in = widths[0]
        for i, width in enumerate(widths):
            stride = 1 if i == 0 else 2
            layers += [_BasicBlock(c_in, width, stride), _BasicBlock(width, width, 1)]
            c_in = width
        self.layers = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(c_in, num_classes))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.layers(self.stem(x)))


def build_classifier(spec: ClassifierSpec) -> nn.Module:
    found = spec.problems()
    if found:
        raise ConfigError(found)
    in_channels = spec.input_size[0]
    if spec.arch == "small_conv":
        return SmallConvNet(in_channels, spec.num_classes)
    return ResNetSmall(in_channels, spec.num_classes)


def accuracy(handle: ClassifierHandle, images: ImageBatch, batch_size: int = 256) -> float:
    """Exact-match fraction of predictions against the batch labels."""
    correct = 0
    for batch in iter_batches(images, batch_size):
        predicted = handle.predict(batch.pixels.to(handle.device))
        correct += int((predicted.cpu() == batch.labels).sum())
    return correct / len(images)


def train_classifier(
    spec: ClassifierSpec,
    train: ImageBatch,
    test: ImageBatch,
    cfg: ClassifierTrainConfig | None = None,
    device: str = "cpu",
) -> tuple[ClassifierHandle, float]:
    """Train with Adam and cross-entropy; returns the frozen handle and its test accuracy."""
    cfg = cfg or ClassifierTrainConfig()
    if tuple(train.image_shape) != tuple(spec.input_size):
        msg = f"classifier.input_size {spec.input_size} does not match the dataset shape {list(train.image_shape)}"
        raise ConfigError(msg)
    torch.manual_seed(cfg.seed)
    model = build_classifier(spec).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    generator = torch.Generator().manual_seed(cfg.seed)

    with Progress(transient=True) as progress:
        task = progress.add_task("Training classifier...", total=cfg.epochs)
        for epoch in range(cfg.epochs):
            model.train()
            order = torch.randperm(len(train), generator=generator)
            total_loss = 0.0
            for step, start in enumerate(range(0, len(train), cfg.batch_size)):
                index = order[start : start + cfg.batch_size]
                x = train.pixels[index].to(device)
                y = train.labels[index].to(device)
                loss = F.cross_entropy(model(x), y)
                if not torch.isfinite(loss):
                    msg = f"classifier training diverged at epoch {epoch}, step {step}"
                    raise NumericError(msg)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total_loss += float(loss) * len(index)
            logger.info("classifier epoch %d: loss %.4f", epoch, total_loss / len(train))
            progress.advance(task)

    handle = ClassifierHandle(model, spec.num_classes)
    test_accuracy = accuracy(handle, test)
    logger.info("classifier test accuracy: %.2f%%", 100 * test_accuracy)
    return handle, test_accuracy


def save_classifier(
    handle: ClassifierHandle, spec: ClassifierSpec, directory: Path, provenance: dict[str, Any] | None = None
) -> Path:
    metadata = {
        "kind": "classifier",
        "spec": {k: v for k, v in spec.to_dict().items() if k != "checkpoint"},
        "checksum": handle.checksum(),
        "provenance": provenance or {},
    }
    return save_checkpoint(directory, handle.module, metadata)


def load_classifier(spec: ClassifierSpec, directory: Path | None = None, device: str = "cpu") -> ClassifierHandle:
    """Load a frozen evaluation-mode classifier matching ``spec``."""
    if directory is None and not spec.checkpoint:
        raise CheckpointLoadError("classifier spec names no checkpoint")
    path = Path(directory or spec.checkpoint)
    metadata, state = read_checkpoint(path)
    if metadata.get("kind") != "classifier":
        raise CheckpointLoadError(f"{path} is not a classifier checkpoint")
    stored = metadata.get("spec", {})
    for key in ("arch", "num_classes", "input_size"):
        if key in stored and stored[key] != getattr(spec, key):
            msg = f"checkpoint {key}={stored[key]!r} does not match spec {key}={getattr(spec, key)!r}"
            raise CheckpointLoadError(msg)
    module = build_classifier(spec)
    load_state(module, state, source=str(path))
    handle = ClassifierHandle(module, spec.num_classes)
    if metadata.get("checksum") and metadata["checksum"] != handle.checksum():
        raise CheckpointLoadError(f"weights at {path} do not match the recorded checksum")
    handle.module.to(device)
    return handle
