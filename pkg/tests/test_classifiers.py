"""Tests for the target classifiers, checkpoints and datasets."""

from __future__ import annotations

from pathlib import Path

import pytest
import toml
import torch

from confdetect.checkpoints import METADATA_FILENAME, WEIGHTS_FILENAME
from confdetect.classifiers import (
    ClassifierSpec,
    ClassifierTrainConfig,
    accuracy,
    build_classifier,
    load_classifier,
    save_classifier,
    train_classifier,
)
from confdetect.datasets import DatasetSpec, load_split, synthetic_dataset
from confdetect.errors import CheckpointLoadError, ConfigError, InvalidInputError
from confdetect.gradients import ClassifierHandle

SPEC = ClassifierSpec(arch="small_conv", num_classes=3, input_size=[3, 8, 8])


def _handle(seed: int = 0) -> ClassifierHandle:
    torch.manual_seed(seed)
    return ClassifierHandle(build_classifier(SPEC), SPEC.num_classes)


def test_synthetic_dataset_is_deterministic() -> None:
    first = synthetic_dataset(10, num_classes=3, size=8, seed=2)
    second = synthetic_dataset(10, num_classes=3, size=8, seed=2)
    assert torch.equal(first.pixels, second.pixels)
    assert torch.equal(first.labels, second.labels)
    assert first.image_shape == (3, 8, 8)
    assert not torch.equal(first.pixels, synthetic_dataset(10, num_classes=3, size=8, seed=3).pixels)


def test_synthetic_splits_differ() -> None:
    spec = DatasetSpec(name="synthetic", train_size=6, test_size=6, pool_size=6, image_size=8, num_classes=3)
    train = load_split(spec, "train", seed=1)
    pool = load_split(spec, "pool", seed=1)
    assert not torch.equal(train.pixels, pool.pixels)
    with pytest.raises(InvalidInputError, match="Invalid split"):
        load_split(spec, "holdout")


def test_dataset_spec_problems() -> None:
    spec = DatasetSpec(name="mnist", pool_size=0)
    assert len(spec.problems()) == 2
    assert DatasetSpec(image_size=28).problems() == ["cifar10 images are 32x32 with 10 classes"]


def test_classifier_spec_problems() -> None:
    with pytest.raises(ConfigError, match="classifier.arch"):
        build_classifier(ClassifierSpec(arch="vgg"))


def test_classifiers_produce_logits() -> None:
    x = torch.rand(2, 3, 32, 32)
    for arch in ("small_conv", "resnet_small"):
        model = build_classifier(ClassifierSpec(arch=arch)).eval()
        assert model(x).shape == (2, 10)


def test_training_is_seeded() -> None:
    """Same data and seed give bit-identical weights."""
    train = synthetic_dataset(48, num_classes=3, size=8, seed=0)
    test = synthetic_dataset(16, num_classes=3, size=8, seed=1)
    cfg = ClassifierTrainConfig(epochs=2, batch_size=16)
    handle, test_accuracy = train_classifier(SPEC, train, test, cfg)
    again, _ = train_classifier(SPEC, train, test, cfg)
    assert not handle.module.training
    assert handle.checksum() == again.checksum()
    assert test_accuracy == accuracy(handle, test)
    assert 0.0 <= test_accuracy <= 1.0


def test_training_rejects_mismatched_input_size() -> None:
    train = synthetic_dataset(4, num_classes=3, size=16)
    with pytest.raises(ConfigError, match="input_size"):
        train_classifier(SPEC, train, train, ClassifierTrainConfig(epochs=1))


def test_checkpoint_round_trip(work_dir: Path) -> None:
    handle = _handle()
    save_classifier(handle, SPEC, work_dir / "clf", {"seed": 0})
    loaded = load_classifier(SPEC, work_dir / "clf")
    assert loaded.checksum() == handle.checksum()
    x = torch.rand(4, 3, 8, 8)
    assert torch.equal(loaded(x), handle(x))
    assert torch.equal(loaded(x), loaded(x))


def test_truncated_weights_fail_to_load(work_dir: Path) -> None:
    save_classifier(_handle(), SPEC, work_dir / "clf")
    weights = work_dir / "clf" / WEIGHTS_FILENAME
    weights.write_bytes(weights.read_bytes()[:100])
    with pytest.raises(CheckpointLoadError, match="corrupt checkpoint"):
        load_classifier(SPEC, work_dir / "clf")


def test_checksum_mismatch_fails_to_load(work_dir: Path) -> None:
    save_classifier(_handle(), SPEC, work_dir / "clf")
    meta_path = work_dir / "clf" / METADATA_FILENAME
    metadata = toml.load(meta_path)
    metadata["checksum"] = "0" * 64
    meta_path.write_text(toml.dumps(metadata))
    with pytest.raises(CheckpointLoadError, match="recorded checksum"):
        load_classifier(SPEC, work_dir / "clf")


def test_architecture_mismatch_fails_to_load(work_dir: Path) -> None:
    save_classifier(_handle(), SPEC, work_dir / "clf")
    other = ClassifierSpec(arch="small_conv", num_classes=4, input_size=[3, 8, 8])
    with pytest.raises(CheckpointLoadError, match="num_classes"):
        load_classifier(other, work_dir / "clf")


def test_missing_checkpoint(work_dir: Path) -> None:
    with pytest.raises(CheckpointLoadError, match="no checkpoint"):
        load_classifier(SPEC, work_dir / "absent")
    with pytest.raises(CheckpointLoadError, match="names no checkpoint"):
        load_classifier(SPEC)
