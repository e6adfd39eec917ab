"""confdetect train - Train a detector variant on the archived attacks."""

from __future__ import annotations

from dataclasses import replace

from confdetect.commands.common import (
    archive_prerequisites,
    command_run,
    console,
    load_detection_data,
    pick_device,
    provenance,
    require,
    split_data,
)
from confdetect.config import ExperimentConfig
from confdetect.training import TrainConfig, save_detector, train_detector


def resolve_training(config: ExperimentConfig, long_schedule: bool) -> TrainConfig:
    if not long_schedule:
        return config.training
    exact = TrainConfig.long_schedule()
    return replace(config.training, epochs=exact.epochs, lr_drops=exact.lr_drops)


def cmd_train(
    config: ExperimentConfig,
    variant: str | None = None,
    attacks: tuple[str, ...] = (),
    long_schedule: bool = False,
) -> None:
    """Train ``variant`` on the train split of the given (or configured) attack archives."""
    variant = variant or config.variant
    names = list(attacks) or list(config.detector_attacks)
    require(archive_prerequisites(config, names))
    training = resolve_training(config, long_schedule)
    training.validate()

    splits = split_data(config, load_detection_data(config, names), training.to_dict())
    train, val = splits["train"], splits["val"]
    console.print(
        f"Training [bold]{variant}[/bold] on {', '.join(names)}: "
        f"{len(train)} training and {len(val)} validation samples, {training.epochs} epochs"
    )

    with command_run(config, "train") as (run_dir, results):
        trained = train_detector(
            train,
            training,
            variant,
            network=config.network,
            val=val,
            metrics_path=run_dir / "metrics.csv",
            device=pick_device(),
            show_progress=True,
        )
        directory = save_detector(
            trained,
            config.detector_dir(variant, names),
            provenance(config, attacks=names, split_seed=config.stage_seed("data")),
        )
        last = trained.metrics[-1]
        results.update(
            {
                "variant": variant,
                "attacks": names,
                "epochs": training.epochs,
                "final_loss": last["loss"],
                "train_accuracy": last["train_acc"],
                "val_accuracy": last["val_acc"],
                "checkpoint": str(directory),
            }
        )

    console.print(f"  [green]✓[/green] validation accuracy {100 * trained.val_accuracy:.2f}%, saved to {directory}")
