"""confdetect eval - Detection accuracy of a trained detector per attack."""

from __future__ import annotations

from rich.table import Table

from confdetect.commands.common import (
    archive_prerequisites,
    command_run,
    console,
    detector_prerequisites,
    load_detection_data,
    pick_device,
    require,
    split_data,
)
from confdetect.config import ExperimentConfig
from confdetect.evaluation import eval_detection, write_rows_csv
from confdetect.training import load_detector

SPLITS = ("train", "val", "test")


def cmd_eval(
    config: ExperimentConfig,
    variant: str | None = None,
    attacks: tuple[str, ...] = (),
    split: str = "test",
) -> None:
    """Evaluate the detector trained on the configured attacks against each attack's archive."""
    variant = variant or config.variant
    trained_on = list(config.detector_attacks)
    tested_on = list(attacks) or trained_on
    require(detector_prerequisites(config, variant, [trained_on]) + archive_prerequisites(config, tested_on))

    detector, metadata = load_detector(config.detector_dir(variant, trained_on), device=pick_device())
    with command_run(config, "eval") as (run_dir, results):
        rows = []
        for name in tested_on:
            data = split_data(config, load_detection_data(config, [name]), metadata.get("training"))[split]
            report = eval_detection(detector, data, attack=name)
            rows.append(report.to_dict())
        write_rows_csv(rows, run_dir / "eval.csv")
        results.update({"variant": variant, "trained_on": trained_on, "split": split, "reports": rows})

    table = Table(title=f"Detection accuracy ({variant}, {split} split)")
    table.add_column("Attack")
    table.add_column("Accuracy", justify="right")
    table.add_column("AUC", justify="right")
    table.add_column("Pairs", justify="right")
    for row in rows:
        table.add_row(row["attack"], f"{100 * row['accuracy']:.2f}%", f"{row['auc']:.4f}", str(row["per_class"]))
    console.print(table)
