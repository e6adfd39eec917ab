"""confdetect verify - Integrity check of the adversarial archives."""

from __future__ import annotations

from confdetect.archive import verify_archive
from confdetect.commands.common import classifier_prerequisite, console, load_model
from confdetect.config import ExperimentConfig
from confdetect.errors import ArchiveError


def cmd_verify(config: ExperimentConfig, attacks: tuple[str, ...] = ()) -> None:
    """Check record counts, norms and (with a classifier) labels of every archive."""
    names = list(attacks) or [a.name for a in config.attacks if config.archive_dir(a.name).exists()]
    if not names:
        console.print("[yellow]No archives found. Run 'confdetect attack' first.[/yellow]")
        return
    model = None if classifier_prerequisite(config) else load_model(config)
    failed = []
    for name in names:
        problems = verify_archive(config.archive_dir(name), model)
        if problems:
            failed.append(name)
            console.print(f"  [red]✗[/red] {name}:")
            for problem in problems:
                console.print(f"      {problem}")
        else:
            console.print(f"  [green]✓[/green] {name}")
    if failed:
        raise ArchiveError(f"{len(failed)} archive(s) failed verification: {', '.join(failed)}")
