"""confdetect heatmap - Cross-attack generalization matrix."""

from __future__ import annotations

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
from confdetect.errors import ConfigError
from confdetect.evaluation import generalization_heatmap
from confdetect.training import load_detector


def cmd_heatmap(config: ExperimentConfig, variant: str | None = None) -> None:
    """Test every single-attack detector against every attack's test split."""
    variant = variant or config.variant
    attacks = list(config.evaluation.heatmap_attacks)
    if len(attacks) < 2:
        raise ConfigError("evaluation.heatmap_attacks must name at least two attacks")
    require(archive_prerequisites(config, attacks) + detector_prerequisites(config, variant, [[a] for a in attacks]))

    device = pick_device()
    detectors = {a: load_detector(config.detector_dir(variant, [a]), device=device)[0] for a in attacks}
    test_sets = {a: split_data(config, load_detection_data(config, [a]))["test"] for a in attacks}
    with command_run(config, "heatmap") as (run_dir, results):
        result = generalization_heatmap(detectors, test_sets, out_dir=run_dir)
        results.update(
            {
                "variant": variant,
                "attacks": attacks,
                "matrix": [[float(v) for v in row] for row in result.matrix],
            }
        )

    console.print(f"  [green]✓[/green] {len(attacks)}x{len(attacks)} matrix written to {run_dir / 'heatmap.csv'}")
