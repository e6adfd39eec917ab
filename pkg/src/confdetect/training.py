"""Detector training: paired clean/adversarial data, balanced batches, warm starts."""

from __future__ import annotations

import bisect
import csv
import hashlib
import logging
import math
from collections.abc import Iterator
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import torch
import torch.nn.functional as F
from rich.progress import Progress
from torch import nn

from confdetect.archive import AdversarialArchive
from confdetect.checkpoints import load_state, read_checkpoint, save_checkpoint
from confdetect.detector import (
    ADVERSARIAL,
    CLEAN,
    VARIANTS,
    Detector,
    SubnetworkConfig,
    build_detector,
    set_bn_momentum,
)
from confdetect.errors import CheckpointLoadError, ConfigError, InvalidInputError, NumericError

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "step", "lr", "loss", "train_acc", "val_acc")


@dataclass
class TrainConfig:
    """Detector optimization recipe.

    The defaults are the desk-scale schedule; ``long_schedule()`` gives the
    200-epoch schedule with drops at 30, 70 and 150.
    """

    batch_size: int = 32
    lr: float = 1e-3
    lr_drops: list[int] = field(default_factory=lambda: [20, 40])
    lr_factor: float = 0.1
    epochs: int = 60
    bn_momentum: float = 0.05
    seed: int = 0
    init_from: str = ""
    balanced: bool = True
    drop_last: bool = False
    val_fraction: float = 0.1
    test_fraction: float = 0.2

    def problems(self) -> list[str]:
        found: list[str] = []
        if self.epochs < 1:
            found.append("training.epochs must be at least 1")
        if self.batch_size < 2 or self.batch_size % 2:
            found.append(f"training.batch_size must be a positive even number, got {self.batch_size}")
        if self.lr <= 0:
            found.append("training.lr must be positive")
        if any(b <= a for a, b in zip(self.lr_drops, self.lr_drops[1:], strict=False)):
            found.append("training.lr_drops must be strictly increasing")
        if any(d < 0 or d >= self.epochs for d in self.lr_drops):
            found.append(f"training.lr_drops must lie in [0, epochs={self.epochs})")
        if not 0 < self.bn_momentum < 1:
            found.append("training.bn_momentum must lie in (0, 1)")
        if self.val_fraction < 0 or self.test_fraction < 0 or self.val_fraction + self.test_fraction >= 1:
            found.append("training.val_fraction + training.test_fraction must be below 1")
        return found

    def validate(self) -> None:
        found = self.problems()
        if found:
            raise ConfigError(found)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown training key '{k}'" for k in unknown])
        values = dict(data)
        if "lr_drops" in values:
            values["lr_drops"] = [int(d) for d in values["lr_drops"]]
        return cls(**values)

    @classmethod
    def long_schedule(cls, **overrides: Any) -> TrainConfig:
        return cls(**{"epochs": 200, "lr_drops": [30, 70, 150], **overrides})


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate in effect during ``epoch`` (0-based)."""
    return cfg.lr * cfg.lr_factor ** bisect.bisect_right(cfg.lr_drops, epoch)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class DetectionDataset:
    """Images paired one-to-one with their confidence gradients and classifier logits.

    ``pair_ids`` ties an adversarial sample to the clean image it came from, so
    splits never separate the two.
    """

    images: torch.Tensor  # [M, C, H, W]
    gradients: torch.Tensor  # [M, C, H, W]
    logits: torch.Tensor  # [M, n]
    labels: torch.Tensor  # [M], 0 clean / 1 adversarial
    pair_ids: torch.Tensor  # [M]

    def __post_init__(self) -> None:
        M = self.images.shape[0]
        if self.gradients.shape != self.images.shape:
            msg = f"gradients {tuple(self.gradients.shape)} must pair with images {tuple(self.images.shape)}"
            raise InvalidInputError(msg)
        if self.logits.shape[0] != M or self.labels.shape[0] != M or self.pair_ids.shape[0] != M:
            raise InvalidInputError("logits, labels and pair ids must have one row per image")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.logits.shape[1])

    @property
    def clean_indices(self) -> torch.Tensor:
        return (self.labels == CLEAN).nonzero().flatten()

    @property
    def adversarial_indices(self) -> torch.Tensor:
        return (self.labels == ADVERSARIAL).nonzero().flatten()

    def counts(self) -> tuple[int, int]:
        return len(self.clean_indices), len(self.adversarial_indices)

    def subset(self, index: torch.Tensor) -> DetectionDataset:
        return DetectionDataset(
            images=self.images[index],
            gradients=self.gradients[index],
            logits=self.logits[index],
            labels=self.labels[index],
            pair_ids=self.pair_ids[index],
        )

    def to(self, device: torch.device | str) -> DetectionDataset:
        return DetectionDataset(
            images=self.images.to(device),
            gradients=self.gradients.to(device),
            logits=self.logits.to(device),
            labels=self.labels.to(device),
            pair_ids=self.pair_ids.to(device),
        )

    @classmethod
    def from_archive(cls, archive: AdversarialArchive) -> DetectionDataset:
        """Clean originals (label 0) followed by their successful adversarials (label 1)."""
        failed = [r["index"] for r in archive.records if not r.get("success", False)]
        if failed:
            raise InvalidInputError(f"archive holds unsuccessful records {failed[:5]}")
        K = len(archive)
        a = archive.arrays
        ids = torch.tensor([int(r["index"]) for r in archive.records], dtype=torch.long)
        return cls(
            images=torch.cat([a["original"], a["adversarial"]]),
            gradients=torch.cat([a["gradients/original"], a["gradients/adversarial"]]),
            logits=torch.cat([a["logits/original"], a["logits/adversarial"]]),
            labels=torch.cat([torch.full((K,), CLEAN), torch.full((K,), ADVERSARIAL)]).long(),
            pair_ids=torch.cat([ids, ids]),
        )

    @staticmethod
    def concat(parts: list[DetectionDataset]) -> DetectionDataset:
        """Join datasets built from different archives of the same image pool."""
        if not parts:
            raise InvalidInputError("nothing to concatenate")
        return DetectionDataset(
            images=torch.cat([p.images for p in parts]),
            gradients=torch.cat([p.gradients for p in parts]),
            logits=torch.cat([p.logits for p in parts]),
            labels=torch.cat([p.labels for p in parts]),
            pair_ids=torch.cat([p.pair_ids for p in parts]),
        )

    def split(
        self, test_fraction: float = 0.2, val_fraction: float = 0.1, seed: int = 0
    ) -> dict[str, DetectionDataset]:
        """Deterministic ``train`` / ``val`` / ``test`` partition over pair ids.

        Each pool index is assigned by a seeded hash, so an image lands in the same
        partition in every archive built from the pool. Partition sizes follow the
        fractions in expectation.
        """
        if test_fraction < 0 or val_fraction < 0 or test_fraction + val_fraction >= 1:
            raise InvalidInputError("test_fraction + val_fraction must lie in [0, 1)")
        draws = torch.tensor([_unit_hash(seed, int(i)) for i in self.pair_ids.tolist()], dtype=torch.float64)
        masks = {
            "test": draws < test_fraction,
            "val": (draws >= test_fraction) & (draws < test_fraction + val_fraction),
            "train": draws >= test_fraction + val_fraction,
        }
        return {name: self.subset(mask.nonzero().flatten()) for name, mask in masks.items()}


def _unit_hash(seed: int, index: int) -> float:
    digest = hashlib.sha256(f"{seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def _epoch_generator(seed: int, epoch: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 7919 + epoch)


def make_balanced_batches(
    data: DetectionDataset,
    batch_size: int,
    seed: int,
    *,
    epoch: int = 0,
    balanced: bool = True,
    drop_last: bool = False,
) -> Iterator[DetectionDataset]:
    """Yield shuffled mini-batches of ``batch_size / 2`` clean + ``batch_size / 2`` adversarial.

    One epoch covers ``min(#clean, #adversarial)`` samples per class, each at most
    once; the last batch may be smaller but stays balanced. ``drop_last`` skips that
    short batch so every batch holds exactly ``batch_size`` samples. With
    ``balanced=False`` the whole set is shuffled and chunked instead.
    """
    if batch_size < 2 or batch_size % 2:
        raise InvalidInputError(f"batch_size must be a positive even number, got {batch_size}")
    generator = _epoch_generator(seed, epoch)
    if not balanced:
        order = torch.randperm(len(data), generator=generator)
        stop = len(order) - len(order) % batch_size if drop_last else len(order)
        for start in range(0, stop, batch_size):
            yield data.subset(order[start : start + batch_size])
        return

    clean = data.clean_indices
    adversarial = data.adversarial_indices
    clean = clean[torch.randperm(len(clean), generator=generator)]
    adversarial = adversarial[torch.randperm(len(adversarial), generator=generator)]
    per_class = min(len(clean), len(adversarial))
    half = batch_size // 2
    last = per_class - per_class % half if drop_last else per_class
    for start in range(0, last, half):
        stop = min(start + half, per_class)
        index = torch.cat([clean[start:stop], adversarial[start:stop]])
        yield data.subset(index[torch.randperm(len(index), generator=generator)])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainedDetector:
    detector: Detector
    variant: str
    network: SubnetworkConfig
    train_config: TrainConfig
    num_classes: int
    metrics: list[dict[str, float]] = field(default_factory=list)

    @property
    def val_accuracy(self) -> float:
        return self.metrics[-1]["val_acc"] if self.metrics else math.nan


def score_dataset(
    detector: Detector, data: DetectionDataset, batch_size: int = 256
) -> torch.Tensor:
    """Fused detector logits ``[M, 2]`` for every sample, in evaluation mode."""
    device = next(detector.parameters(), torch.zeros(0)).device
    was_training = detector.training
    detector.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            part = data.subset(torch.arange(start, min(start + batch_size, len(data)))).to(device)
            scores.append(detector(part.images, part.gradients, part.logits).cpu())
    detector.train(was_training)
    if not scores:
        return torch.zeros(0, 2)
    return torch.cat(scores)


def _append_metrics(path: Path, row: dict[str, float]) -> None:
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_COLUMNS)
        if new:
            writer.writeheader()
        writer.writerow(row)


def train_detector(
    data: DetectionDataset,
    cfg: TrainConfig | None = None,
    variant: str = "full",
    *,
    network: SubnetworkConfig | None = None,
    val: DetectionDataset | None = None,
    metrics_path: Path | None = None,
    device: str = "cpu",
    show_progress: bool = False,
) -> TrainedDetector:
    """Train a detector variant with Adamax and cross-entropy on the fused logits.

    Stream ablations train on the single remaining stream, because an absent
    stream contributes zeros to the fused score.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    if variant not in VARIANTS:
        raise ConfigError(f"Invalid detector variant '{variant}'. Must be one of: {', '.join(VARIANTS)}")
    n_clean, n_adv = data.counts()
    if n_clean == 0 or n_adv == 0:
        msg = f"detector training needs both classes, got {n_clean} clean and {n_adv} adversarial"
        raise InvalidInputError(msg)
    if cfg.drop_last and min(n_clean, n_adv) < cfg.batch_size // 2:
        msg = f"drop_last leaves no full batch of {cfg.batch_size} with {min(n_clean, n_adv)} pairs per class"
        raise InvalidInputError(msg)
    network = network or SubnetworkConfig(in_channels=data.images.shape[1])

    torch.manual_seed(cfg.seed)
    detector = build_detector(variant, network, data.num_classes)
    if cfg.init_from:
        warm_start(detector, Path(cfg.init_from))
    set_bn_momentum(detector, cfg.bn_momentum)
    detector.to(device=device, dtype=data.images.dtype)
    optimizer = torch.optim.Adamax(detector.parameters(), lr=cfg.lr)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=cfg.lr_drops, gamma=cfg.lr_factor)

    trained = TrainedDetector(detector, variant, network, cfg, data.num_classes)
    global_step = 0
    with Progress(transient=True, disable=not show_progress) as progress:
        task = progress.add_task(f"Training {variant} detector...", total=cfg.epochs)
        for epoch in range(cfg.epochs):
            detector.train()
            lr = optimizer.param_groups[0]["lr"]
            total_loss, correct, seen = 0.0, 0, 0
            batches = make_balanced_batches(
                data, cfg.batch_size, cfg.seed, epoch=epoch, balanced=cfg.balanced, drop_last=cfg.drop_last
            )
            for step, batch in enumerate(batches):
                batch = batch.to(device)
                fused = detector(batch.images, batch.gradients, batch.logits)
                loss = F.cross_entropy(fused, batch.labels)
                if not torch.isfinite(loss):
                    msg = f"non-finite detector loss at epoch {epoch}, step {step}"
                    raise NumericError(msg)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total_loss += float(loss) * len(batch)
                correct += int((fused.detach().argmax(dim=1) == batch.labels).sum())
                seen += len(batch)
                global_step += 1
            scheduler.step()

            val_acc = math.nan
            if val is not None and len(val):
                predicted = score_dataset(detector, val).argmax(dim=1)
                val_acc = float((predicted == val.labels.cpu()).double().mean())
            row = {
                "epoch": epoch,
                "step": global_step,
                "lr": lr,
                "loss": total_loss / max(seen, 1),
                "train_acc": correct / max(seen, 1),
                "val_acc": val_acc,
            }
            trained.metrics.append(row)
            if metrics_path is not None:
                _append_metrics(Path(metrics_path), row)
            logger.info(
                "%s epoch %d: loss %.4f, train %.2f%%, val %.2f%%",
                variant,
                epoch,
                row["loss"],
                100 * row["train_acc"],
                100 * val_acc,
            )
            progress.advance(task)

    detector.eval()
    return trained


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _is_head(key: str) -> bool:
    """Final classification layers: a stream's ``fc`` or the last logits-MLP layer."""
    parts = key.split(".")
    return "fc" in parts or key.startswith("mlp.4.")


def warm_start(detector: Detector, directory: Path) -> list[str]:
    """Initialize ``detector`` from a checkpoint; returns the re-initialized head keys.

    Head layers whose shape differs are re-drawn with xavier-uniform (biases zero);
    any other mismatch raises ``CheckpointLoadError`` and leaves the detector untouched.
    """
    _, state = read_checkpoint(directory)
    expected = detector.state_dict()
    merged: dict[str, torch.Tensor] = {}
    reinit: list[str] = []
    problems: list[str] = []
    for key, current in expected.items():
        stored = state.get(key)
        if stored is not None and tuple(stored.shape) == tuple(current.shape):
            merged[key] = stored.to(current.dtype)
        elif _is_head(key):
            merged[key] = current
            reinit.append(key)
        elif stored is None:
            problems.append(f"missing '{key}'")
        else:
            problems.append(f"'{key}' has shape {tuple(stored.shape)}, expected {tuple(current.shape)}")
    if problems:
        msg = f"cannot warm-start from {directory}: " + "; ".join(problems)
        raise CheckpointLoadError(msg)
    detector.load_state_dict(merged, strict=True)
    for key in reinit:
        param = detector.get_parameter(key)
        with torch.no_grad():
            if param.ndim >= 2:
                nn.init.xavier_uniform_(param)
            else:
                param.zero_()
    if reinit:
        logger.info("warm start from %s re-initialized %s", directory, ", ".join(reinit))
    else:
        logger.info("warm start from %s loaded every layer", directory)
    return reinit


def save_detector(trained: TrainedDetector, directory: Path, provenance: dict[str, Any] | None = None) -> Path:
    metadata = {
        "kind": "detector",
        "variant": trained.variant,
        "num_classes": trained.num_classes,
        "network": trained.network.to_dict(),
        "training": trained.train_config.to_dict(),
        "val_accuracy": trained.val_accuracy,
        "provenance": provenance or {},
    }
    return save_checkpoint(directory, trained.detector, metadata)


def load_detector(directory: Path, device: str = "cpu") -> tuple[Detector, dict[str, Any]]:
    """Rebuild a detector from its checkpoint, in evaluation mode."""
    metadata, state = read_checkpoint(directory)
    if metadata.get("kind") != "detector":
        raise CheckpointLoadError(f"{directory} is not a detector checkpoint")
    try:
        network = SubnetworkConfig.from_dict(metadata.get("network", {}))
        detector = build_detector(metadata["variant"], network, int(metadata["num_classes"]))
    except (KeyError, ConfigError) as exc:
        raise CheckpointLoadError(f"detector metadata at {directory} is invalid: {exc}") from exc
    first = next(iter(state.values()), None)
    if first is not None and first.is_floating_point():
        detector.to(first.dtype)
    load_state(detector, state, source=str(directory))
    detector.to(device).eval()
    return detector, metadata
