"""confdetect CLI - adversarial-example attacks and their two-stream detector."""

from __future__ import annotations

from collections.abc import Callable
from pathlib import Path
from typing import Any

import click
from rich.console import Console
from rich.markup import escape

from confdetect import __version__
from confdetect.detector import VARIANTS
from confdetect.errors import ConfdetectError, exit_code_for
from confdetect.utils import configure_logging

console = Console()


long_schedule_option = click.option(
    "--paper-exact",
    "--long-schedule",
    "long_schedule",
    is_flag=True,
    default=False,
    help="Full recipe: 200 epochs with drops at 30, 70 and 150",
)


def _run(obj: dict[str, Any], command: Callable[..., None], **kwargs: Any) -> None:
    """Load the config, run ``command`` and turn domain errors into exit codes."""
    from confdetect.config import ExperimentConfig

    try:
        config_path = obj.get("config")
        config = ExperimentConfig.load_from(Path(config_path)) if config_path else ExperimentConfig.load()
        config = config.with_overrides(seed=obj.get("seed"), output_root=obj.get("out"))
        command(config, **kwargs)
    except ConfdetectError as exc:
        console.print(f"[red]{escape(str(exc))}[/red]")
        if obj.get("verbose"):
            console.print_exception()
        click.get_current_context().exit(exit_code_for(exc))


@click.group()
@click.version_option(version=__version__, prog_name="confdetect")
@click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False),
    default=None,
    help="Experiment config file (default: confdetect.toml, searched upward)",
)
@click.option("--seed", type=int, default=None, help="Override the master seed")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Override the output root")
@click.option("--verbose", "-v", is_flag=True, default=False, help="Debug logging and tracebacks")
def main(config_path: str | None, seed: int | None, out: str | None, verbose: bool) -> None:
    """confdetect - detect adversarial examples from pixel and confidence artifacts.

    Typical pipeline: classifier -> attack -> train -> eval / heatmap / ablate / adaptive.
    """
    configure_logging(verbose)
    click.get_current_context().obj = {"config": config_path, "seed": seed, "out": out, "verbose": verbose}


@main.command()
@click.pass_obj
def classifier(obj: dict) -> None:
    """Train the target classifier and save its checkpoint."""
    from confdetect.commands.classifier import cmd_classifier

    _run(obj, cmd_classifier)


@main.command()
@click.option("--attack", "-a", "attacks", multiple=True, help="Attack to run (repeatable; default: all configured)")
@click.pass_obj
def attack(obj: dict, attacks: tuple[str, ...]) -> None:
    """Generate adversarial archives from the image pool."""
    from confdetect.commands.attack import cmd_attack

    _run(obj, cmd_attack, attacks=attacks)


@main.command()
@click.option("--variant", type=click.Choice(VARIANTS), default=None, help="Detector variant (default: configured)")
@click.option("--attack", "-a", "attacks", multiple=True, help="Train on this attack's archive (repeatable)")
@long_schedule_option
@click.pass_obj
def train(obj: dict, variant: str | None, attacks: tuple[str, ...], long_schedule: bool) -> None:
    """Train a detector on archived clean/adversarial pairs."""
    from confdetect.commands.train import cmd_train

    _run(obj, cmd_train, variant=variant, attacks=attacks, long_schedule=long_schedule)


@main.command("eval")
@click.option("--variant", type=click.Choice(VARIANTS), default=None, help="Detector variant (default: configured)")
@click.option("--attack", "-a", "attacks", multiple=True, help="Test against this attack (repeatable)")
@click.option(
    "--split",
    type=click.Choice(["train", "val", "test"]),
    default="test",
    help="Partition of the archived pairs to evaluate on (default: test)",
)
@click.pass_obj
def eval_cmd(obj: dict, variant: str | None, attacks: tuple[str, ...], split: str) -> None:
    """Detection accuracy of the configured detector."""
    from confdetect.commands.evaluate import cmd_eval

    _run(obj, cmd_eval, variant=variant, attacks=attacks, split=split)


@main.command()
@click.option("--variant", type=click.Choice(VARIANTS), default=None, help="Detector variant (default: configured)")
@click.pass_obj
def heatmap(obj: dict, variant: str | None) -> None:
    """Cross-attack generalization matrix (CSV and PNG)."""
    from confdetect.commands.heatmap import cmd_heatmap

    _run(obj, cmd_heatmap, variant=variant)


@main.command()
@long_schedule_option
@click.pass_obj
def ablate(obj: dict, long_schedule: bool) -> None:
    """Train every detector variant on the same archives and compare them."""
    from confdetect.commands.ablate import cmd_ablate

    _run(obj, cmd_ablate, long_schedule=long_schedule)


@main.command()
@click.option("--variant", type=click.Choice(VARIANTS), default=None, help="Detector variant (default: configured)")
@click.pass_obj
def adaptive(obj: dict, variant: str | None) -> None:
    """Plain C&W versus the detector-aware C&W on the same images."""
    from confdetect.commands.adaptive import cmd_adaptive

    _run(obj, cmd_adaptive, variant=variant)


@main.command()
@click.option("--attack", "-a", "attacks", multiple=True, help="Archive to verify (repeatable)")
@click.pass_obj
def verify(obj: dict, attacks: tuple[str, ...]) -> None:
    """Check archive integrity against manifests and the classifier."""
    from confdetect.commands.verify import cmd_verify

    _run(obj, cmd_verify, attacks=attacks)


@main.command()
@click.option("--attack", "-a", "attacks", multiple=True, help="Adversarial group to include (repeatable)")
@click.pass_obj
def confidence(obj: dict, attacks: tuple[str, ...]) -> None:
    """Prediction-confidence distributions of clean and adversarial images."""
    from confdetect.commands.confidence import cmd_confidence

    _run(obj, cmd_confidence, attacks=attacks)


if __name__ == "__main__":
    main()
