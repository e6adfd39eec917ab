"""confdetect classifier - Train and save the target classifier."""

from __future__ import annotations

from confdetect.classifiers import save_classifier, train_classifier
from confdetect.commands.common import command_run, console, pick_device, provenance
from confdetect.config import ExperimentConfig
from confdetect.datasets import fetch_dataset, load_split


def cmd_classifier(config: ExperimentConfig) -> None:
    """Train the configured classifier on the train split and report test accuracy."""
    fetch_dataset(config.dataset)
    seed = config.stage_seed("data")
    train = load_split(config.dataset, "train", seed=seed)
    test = load_split(config.dataset, "test", seed=seed)
    console.print(f"Training [bold]{config.classifier.arch}[/bold] on {len(train)} images...")

    with command_run(config, "classifier") as (_, results):
        handle, accuracy = train_classifier(
            config.classifier, train, test, config.classifier_training, device=pick_device()
        )
        directory = save_classifier(
            handle, config.classifier, config.classifier_dir, provenance(config, test_accuracy=accuracy)
        )
        results.update({"test_accuracy": accuracy, "checksum": handle.checksum(), "checkpoint": str(directory)})

    console.print(f"  [green]✓[/green] test accuracy {100 * accuracy:.2f}%, saved to {directory}")
