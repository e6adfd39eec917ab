"""confdetect confidence - Prediction-confidence distributions of clean and adversarial images."""

from __future__ import annotations

from rich.table import Table

from confdetect.archive import load_archive
from confdetect.commands.common import archive_prerequisites, command_run, console, load_model, load_pool, require
from confdetect.config import ExperimentConfig
from confdetect.evaluation import confidence_analysis, separability


def cmd_confidence(config: ExperimentConfig, attacks: tuple[str, ...] = ()) -> None:
    """Compare the classifier's confidence on pool images and on each attack's adversarials."""
    names = list(attacks) or [a.name for a in config.attacks if a.name != "cw_paca"]
    require(archive_prerequisites(config, names))
    model = load_model(config)
    groups = {"clean": load_pool(config).pixels}
    for name in names:
        groups[name] = load_archive(config.archive_dir(name)).arrays["adversarial"]

    with command_run(config, "confidence") as (run_dir, results):
        report = confidence_analysis(
            model,
            groups,
            kind=config.evaluation.confidence_kind,
            bins=config.evaluation.histogram_bins,
            out_dir=run_dir,
        )
        results.update(report.summary())

    table = Table(title=f"Prediction confidence ({report.kind})")
    table.add_column("Group")
    table.add_column("Images", justify="right")
    table.add_column("Mean", justify="right")
    table.add_column("Median", justify="right")
    table.add_column("AUC vs clean", justify="right")
    for name, stats in report.stats.items():
        auc = f"{report.auc[name]:.4f} ({separability(report.auc[name]):.4f})" if name in report.auc else ""
        table.add_row(name, str(stats["count"]), f"{stats['mean']:.4f}", f"{stats['median']:.4f}", auc)
    console.print(table)
