"""confdetect adaptive - Plain C&W against the detector-aware C&W."""

from __future__ import annotations

from dataclasses import replace

from confdetect.commands.common import (
    classifier_prerequisite,
    command_run,
    console,
    detector_prerequisites,
    load_model,
    load_pool,
    pick_device,
    require,
)
from confdetect.config import ExperimentConfig
from confdetect.evaluation import omniscient_eval
from confdetect.training import load_detector


def cmd_adaptive(config: ExperimentConfig, variant: str | None = None) -> None:
    """Attack the same pool images with and without the detector term."""
    variant = variant or config.variant
    trained_on = list(config.detector_attacks)
    require(classifier_prerequisite(config) + detector_prerequisites(config, variant, [trained_on]))

    model = load_model(config)
    detector, _ = load_detector(config.detector_dir(variant, trained_on), device=pick_device())
    images = load_pool(config, limit=config.evaluation.adaptive_images)
    plain = config.attack("cw")
    configured = {a.name for a in config.attacks}
    adaptive = config.attack("cw_paca") if "cw_paca" in configured else replace(plain, name="cw_paca")
    plain = replace(plain, seed=config.stage_seed("adaptive"))
    adaptive = replace(adaptive, seed=config.stage_seed("adaptive"))
    console.print(f"Running C&W and detector-aware C&W on {len(images)} images...")

    with command_run(config, "adaptive") as (_, results):
        report, _ = omniscient_eval(model, detector, images, plain, adaptive)
        results.update({"variant": variant, "trained_on": trained_on, **report.to_dict()})

    console.print(
        f"  C&W: {100 * report.success_rate_plain:.2f}% successful, mean l2 {report.mean_l2_plain:.4f}\n"
        f"  detector-aware C&W: {100 * report.success_rate_adaptive:.2f}% successful, "
        f"mean l2 {report.mean_l2_adaptive:.4f}"
    )
