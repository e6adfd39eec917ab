"""confdetect attack - Generate adversarial archives for the configured attacks."""

from __future__ import annotations

from confdetect.archive import build_archive
from confdetect.attacks import run_attack
from confdetect.commands.common import command_run, console, load_model, load_pool
from confdetect.config import ExperimentConfig
from confdetect.errors import ConfigError

# Needs a trained detector; generated by 'confdetect adaptive'
_DETECTOR_AWARE = {"cw_paca"}


def cmd_attack(config: ExperimentConfig, attacks: tuple[str, ...] = ()) -> None:
    """Attack the image pool, keep the successes and archive them with their gradients."""
    names = list(attacks) or [a.name for a in config.attacks if a.name not in _DETECTOR_AWARE]
    configured = {a.name for a in config.attacks}
    problems = [f"attack '{n}' is not configured in [[attacks]]" for n in names if n not in configured]
    problems += [f"attack '{n}' needs a detector; run 'confdetect adaptive'" for n in names if n in _DETECTOR_AWARE]
    if problems:
        raise ConfigError(problems)

    model = load_model(config)
    pool = load_pool(config)
    console.print(f"Attacking {len(pool)} pool images with {', '.join(names)}...")

    with command_run(config, "attack") as (_, results):
        for name in names:
            cfg = config.attack(name)
            result = run_attack(name, model, pool, cfg, show_progress=True)
            archive = build_archive(model, pool, result, cfg)
            directory = archive.save(config.archive_dir(name))
            results[name] = {**result.summary(), "archive": str(directory)}
            console.print(
                f"  [green]✓[/green] {name}: {len(result.successful)}/{len(result.records)} successful, "
                f"mean l2 {result.mean_l2:.4f} -> {directory}"
            )
