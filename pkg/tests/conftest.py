"""Shared test fixtures."""

from __future__ import annotations

import shutil
from pathlib import Path

import pytest
import torch
from torch import nn

from confdetect.core import ImageBatch
from confdetect.detector import SubnetworkConfig
from confdetect.gradients import ClassifierHandle

TESTS_DIR = Path(__file__).parent
LOCAL_TMP = TESTS_DIR / ".tmp"


@pytest.fixture()
def work_dir(request: pytest.FixtureRequest, monkeypatch: pytest.MonkeyPatch) -> Path:
    """Provide a local working directory under tests/.tmp/<test_name>/.

    Files are easy to inspect after a test run. The directory is cleaned
    and recreated at the start of each test.
    """
    test_name = request.node.name
    test_dir = LOCAL_TMP / test_name

    # Clean previous run
    if test_dir.exists():
        shutil.rmtree(test_dir)
    test_dir.mkdir(parents=True)

    monkeypatch.chdir(test_dir)
    return test_dir


class TinyClassifier(nn.Module):
    """Smooth two-layer network for 3x8x8 images (tanh keeps finite differences clean)."""

    def __init__(self, num_classes: int = 3, size: int = 8) -> None:
        super().__init__()
        self.conv = nn.Conv2d(3, 4, 3, padding=1)
        self.fc = nn.Linear(4 * size * size, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(torch.tanh(self.conv(x)).flatten(1))


def make_classifier(num_classes: int = 3, seed: int = 0, size: int = 8) -> ClassifierHandle:
    torch.manual_seed(seed)
    return ClassifierHandle(TinyClassifier(num_classes, size).double(), num_classes)


def make_images(n: int = 8, seed: int = 0, size: int = 8, num_classes: int = 3) -> ImageBatch:
    generator = torch.Generator().manual_seed(seed)
    pixels = torch.rand(n, 3, size, size, generator=generator, dtype=torch.float64)
    labels = torch.randint(0, num_classes, (n,), generator=generator)
    return ImageBatch(pixels=pixels, labels=labels)


@pytest.fixture()
def tiny_model() -> ClassifierHandle:
    return make_classifier()


@pytest.fixture()
def tiny_images() -> ImageBatch:
    return make_images()


@pytest.fixture()
def tiny_network() -> SubnetworkConfig:
    """A detector stream small enough for CPU tests on 8x8 inputs."""
    return SubnetworkConfig(stem_channels=4, block_channels=[4, 6])


SYNTHETIC_CONFIG = """
[experiment]
seed = 3
output_root = "output"

[dataset]
name = "synthetic"
train_size = 96
test_size = 32
pool_size = 48
image_size = 8
num_classes = 3

[classifier]
arch = "small_conv"
num_classes = 3
input_size = [3, 8, 8]
epochs = 2
batch_size = 32

[[attacks]]
name = "pgd"
epsilon = 0.25
alpha = 0.05
iterations = 5
batch_size = 16

[[attacks]]
name = "ddn"
iterations = 10
batch_size = 16

[detector]
variant = "full"
attacks = ["pgd"]

[detector.network]
stem_channels = 4
block_channels = [4, 6]

[training]
epochs = 2
lr_drops = [1]
batch_size = 8
val_fraction = 0.2
test_fraction = 0.2

[evaluation]
heatmap_attacks = ["pgd", "ddn"]
ablation_attacks = ["pgd"]
adaptive_images = 4
histogram_bins = 10
"""


@pytest.fixture()
def synthetic_config(work_dir: Path) -> Path:
    """A confdetect.toml on the synthetic dataset with tiny models and iteration counts."""
    path = work_dir / "confdetect.toml"
    path.write_text(SYNTHETIC_CONFIG)
    return path
