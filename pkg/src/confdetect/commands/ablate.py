"""confdetect ablate - Train and compare every detector variant."""

from __future__ import annotations

from rich.table import Table

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
from confdetect.commands.train import resolve_training
from confdetect.config import ExperimentConfig
from confdetect.evaluation import ABLATION_ROWS, ablation_table, eval_detection, write_rows_csv
from confdetect.training import save_detector, train_detector


def cmd_ablate(config: ExperimentConfig, long_schedule: bool = False) -> None:
    """Train all six variants on the same archives and tabulate their test accuracy."""
    attacks = list(config.evaluation.ablation_attacks)
    require(archive_prerequisites(config, attacks))
    training = resolve_training(config, long_schedule)
    training.validate()
    splits = {a: split_data(config, load_detection_data(config, [a]), training.to_dict()) for a in attacks}
    device = pick_device()

    with command_run(config, "ablate") as (run_dir, results):
        accuracies: dict[str, dict[str, float]] = {}
        for variant in ABLATION_ROWS:
            accuracies[variant] = {}
            for attack in attacks:
                console.print(f"Training [bold]{variant}[/bold] on {attack}...")
                trained = train_detector(
                    splits[attack]["train"],
                    training,
                    variant,
                    network=config.network,
                    val=splits[attack]["val"],
                    metrics_path=run_dir / f"metrics-{variant}-{attack}.csv",
                    device=device,
                )
                save_detector(
                    trained,
                    config.detector_dir(variant, [attack]),
                    provenance(config, attacks=[attack], split_seed=config.stage_seed("data")),
                )
                report = eval_detection(trained.detector, splits[attack]["test"], attack=attack)
                accuracies[variant][attack] = report.accuracy
        rows = ablation_table(accuracies, attacks)
        write_rows_csv(rows, run_dir / "ablation.csv")
        results.update({"attacks": attacks, "rows": rows})

    table = Table(title="Detector ablation (test accuracy)")
    table.add_column("Variant")
    for attack in attacks:
        table.add_column(attack, justify="right")
    for row in rows:
        table.add_row(row["label"], *(f"{100 * row[a]:.2f}%" for a in attacks))
    console.print(table)
