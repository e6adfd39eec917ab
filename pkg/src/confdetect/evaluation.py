"""Detection accuracy, cross-attack generalization, confidence analysis and the
omniscient-attack comparison.

All accuracies are measured on balanced sets: the larger class is truncated to the
size of the smaller one, keeping input order.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from scipy.stats import mannwhitneyu
from sklearn.metrics import roc_auc_score

from confdetect.attacks import AttackConfig, run_attack
from confdetect.attacks.base import detector_says_clean
from confdetect.core import ImageBatch, iter_batches, prediction_confidence
from confdetect.detector import ADVERSARIAL, CLEAN, Detector
from confdetect.errors import ConfigError, InvalidInputError, PreconditionError
from confdetect.gradients import ClassifierHandle
from confdetect.training import DetectionDataset, score_dataset

logger = logging.getLogger(__name__)

# Ablation variants in table order with their row labels
ABLATION_ROWS: dict[str, str] = {
    "full": "PACA",
    "image_only": "Remove image stream",
    "gradient_only": "Remove gradient stream",
    "gap": "GCP→GAP",
    "no_shortcut": "Remove short-cut connection",
    "logits_fc": "Single logits + FC",
}

# Fields that may differ between the plain and the detector-aware C&W configs
_ADAPTIVE_ONLY_FIELDS = {"name", "detector_weight", "second_order"}


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class Confusion:
    """Counts with 'adversarial' as the positive class."""

    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else math.nan

    @property
    def recall_adversarial(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else math.nan

    @property
    def recall_clean(self) -> float:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else math.nan


def confusion_counts(predicted: torch.Tensor, truth: torch.Tensor) -> Confusion:
    if predicted.shape != truth.shape:
        raise InvalidInputError(f"prediction shape {tuple(predicted.shape)} does not match {tuple(truth.shape)}")
    p = predicted == ADVERSARIAL
    t = truth == ADVERSARIAL
    return Confusion(
        tp=int((p & t).sum()),
        tn=int((~p & ~t).sum()),
        fp=int((p & ~t).sum()),
        fn=int((~p & t).sum()),
    )


def _as_array(values: torch.Tensor | np.ndarray | list[float]) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        return values.detach().cpu().double().numpy().ravel()
    return np.asarray(values, dtype=np.float64).ravel()


def rank_auc(negatives: Any, positives: Any) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie), via the Mann-Whitney U statistic."""
    neg, pos = _as_array(negatives), _as_array(positives)
    if not len(neg) or not len(pos):
        raise InvalidInputError("AUC needs at least one negative and one positive score")
    u = mannwhitneyu(pos, neg, alternative="two-sided").statistic
    return float(u) / (len(pos) * len(neg))


def trapezoid_auc(negatives: Any, positives: Any) -> float:
    """Area under the ROC curve by trapezoidal integration."""
    neg, pos = _as_array(negatives), _as_array(positives)
    if not len(neg) or not len(pos):
        raise InvalidInputError("AUC needs at least one negative and one positive score")
    labels = np.concatenate([np.zeros(len(neg)), np.ones(len(pos))])
    return float(roc_auc_score(labels, np.concatenate([neg, pos])))


def separability(auc: float) -> float:
    """Direction-free AUC: ``max(auc, 1 - auc)``."""
    return max(auc, 1.0 - auc)


# ---------------------------------------------------------------------------
# Detection accuracy
# ---------------------------------------------------------------------------


@dataclass
class DetectionReport:
    attack: str
    accuracy: float
    confusion: Confusion
    auc: float
    per_class: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "attack": self.attack,
            "accuracy": self.accuracy,
            "auc": self.auc,
            "per_class": self.per_class,
            "recall_clean": self.confusion.recall_clean,
            "recall_adversarial": self.confusion.recall_adversarial,
            **asdict(self.confusion),
        }


def balanced(data: DetectionDataset) -> DetectionDataset:
    """Truncate the larger class so both classes have the same count."""
    clean, adversarial = data.clean_indices, data.adversarial_indices
    k = min(len(clean), len(adversarial))
    return data.subset(torch.cat([clean[:k], adversarial[:k]]))


def eval_detection(
    detector: Detector, data: DetectionDataset, *, attack: str = "", batch_size: int = 256
) -> DetectionReport:
    """Accuracy, confusion counts and fused-score AUC on the balanced union."""
    if detector.training:
        raise PreconditionError("detector must be in evaluation mode; call .eval() first")
    n_clean, n_adv = data.counts()
    if n_clean == 0 or n_adv == 0:
        msg = f"evaluation needs clean and adversarial samples, got {n_clean} and {n_adv}"
        raise InvalidInputError(msg)
    data = balanced(data)
    fused = score_dataset(detector, data, batch_size)
    truth = data.labels.cpu()
    confusion = confusion_counts(fused.argmax(dim=1), truth)
    margin = fused[:, ADVERSARIAL] - fused[:, CLEAN]
    auc = rank_auc(margin[truth == CLEAN], margin[truth == ADVERSARIAL])
    report = DetectionReport(attack, confusion.accuracy, confusion, auc, len(data) // 2)
    logger.info(
        "%s: detection accuracy %.2f%% (AUC %.4f) on %d+%d",
        attack or "set",
        100 * report.accuracy,
        auc,
        report.per_class,
        report.per_class,
    )
    return report


# ---------------------------------------------------------------------------
# Generalization heatmap
# ---------------------------------------------------------------------------


@dataclass
class HeatmapResult:
    """``matrix[i, j]``: detector trained on ``attacks[j]`` tested on ``attacks[i]``."""

    attacks: list[str]
    matrix: np.ndarray

    def entry(self, train_attack: str, test_attack: str) -> float:
        return float(self.matrix[self.attacks.index(test_attack), self.attacks.index(train_attack)])


def generalization_heatmap(
    detectors: dict[str, Detector],
    test_sets: dict[str, DetectionDataset],
    out_dir: Path | None = None,
) -> HeatmapResult:
    attacks = list(detectors)
    if len(attacks) < 2:
        raise ConfigError("the generalization heatmap needs at least two attacks")
    missing = [a for a in attacks if a not in test_sets]
    if missing:
        raise ConfigError([f"no test set for attack '{a}'" for a in missing])
    matrix = np.zeros((len(attacks), len(attacks)))
    for j, trained_on in enumerate(attacks):
        for i, tested_on in enumerate(attacks):
            matrix[i, j] = eval_detection(detectors[trained_on], test_sets[tested_on], attack=tested_on).accuracy
    result = HeatmapResult(attacks, matrix)
    if out_dir is not None:
        write_heatmap_csv(result, Path(out_dir) / "heatmap.csv")
        render_heatmap(result, Path(out_dir) / "heatmap.png")
    return result


def write_heatmap_csv(result: HeatmapResult, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["tested_on\\trained_on", *result.attacks])
        for attack, row in zip(result.attacks, result.matrix, strict=True):
            writer.writerow([attack, *(repr(float(v)) for v in row)])
    return path


def read_heatmap_csv(path: Path) -> HeatmapResult:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    attacks = rows[0][1:]
    matrix = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    return HeatmapResult(attacks, matrix)


def _pyplot() -> Any:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_heatmap(result: HeatmapResult, path: Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(1.2 * len(result.attacks) + 2, 1.2 * len(result.attacks) + 1))
    image = ax.imshow(100 * result.matrix, vmin=0, vmax=100, cmap="viridis")
    ax.set_xticks(range(len(result.attacks)), result.attacks)
    ax.set_yticks(range(len(result.attacks)), result.attacks)
    ax.set_xlabel("trained on")
    ax.set_ylabel("tested on")
    for i in range(len(result.attacks)):
        for j in range(len(result.attacks)):
            ax.text(j, i, f"{100 * result.matrix[i, j]:.1f}", ha="center", va="center", color="white")
    fig.colorbar(image, ax=ax, label="detection accuracy (%)")
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# Prediction-confidence analysis
# ---------------------------------------------------------------------------


@dataclass
class ConfidenceReport:
    kind: str
    reference: str
    values: dict[str, np.ndarray]
    stats: dict[str, dict[str, float]]
    auc: dict[str, float] = field(default_factory=dict)
    histogram_edges: np.ndarray = field(default_factory=lambda: np.zeros(0))
    histograms: dict[str, np.ndarray] = field(default_factory=dict)

    def summary(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "reference": self.reference,
            "stats": self.stats,
            "auc": self.auc,
            "separability": {k: separability(v) for k, v in self.auc.items()},
        }


def _confidences(model: ClassifierHandle, images: ImageBatch | torch.Tensor, kind: str) -> np.ndarray:
    batch = images if isinstance(images, ImageBatch) else ImageBatch(images, torch.zeros(len(images), dtype=torch.long))
    values = []
    with torch.no_grad():
        for part in iter_batches(batch, 256):
            values.append(prediction_confidence(model(part.pixels.to(model.device)), kind).cpu().double())
    return torch.cat(values).numpy()


def confidence_analysis(
    model: ClassifierHandle,
    groups: dict[str, ImageBatch | torch.Tensor],
    *,
    kind: str = "logit",
    bins: int = 50,
    reference: str = "clean",
    out_dir: Path | None = None,
) -> ConfidenceReport:
    """Prediction-confidence statistics per group and AUC of every group against ``reference``."""
    if len(groups) < 2:
        raise InvalidInputError("confidence analysis needs at least two groups")
    small = [name for name, images in groups.items() if len(images) < 2]
    if small:
        raise InvalidInputError(f"groups with fewer than two images: {', '.join(small)}")
    if reference not in groups:
        reference = next(iter(groups))
    values = {name: _confidences(model, images, kind) for name, images in groups.items()}
    stats = {
        name: {
            "count": len(v),
            "mean": float(v.mean()),
            "median": float(np.median(v)),
            "std": float(v.std()),
        }
        for name, v in values.items()
    }
    auc = {name: rank_auc(values[reference], v) for name, v in values.items() if name != reference}
    edges = np.histogram_bin_edges(np.concatenate(list(values.values())), bins=bins)
    histograms = {name: np.histogram(v, bins=edges)[0] for name, v in values.items()}
    report = ConfidenceReport(kind, reference, values, stats, auc, edges, histograms)
    for name, s in stats.items():
        logger.info("%s: mean confidence %.4f, median %.4f (n=%d)", name, s["mean"], s["median"], s["count"])
    if out_dir is not None:
        write_confidence_csv(report, Path(out_dir) / "confidence.csv")
        render_confidence(report, Path(out_dir) / "confidence.png")
    return report


def write_confidence_csv(report: ConfidenceReport, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(report.histograms)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_low", "bin_high", *names])
        for b in range(len(report.histogram_edges) - 1):
            low, high = report.histogram_edges[b], report.histogram_edges[b + 1]
            writer.writerow([repr(float(low)), repr(float(high)), *(int(report.histograms[n][b]) for n in names)])
    return path


def render_confidence(report: ConfidenceReport, path: Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, v in report.values.items():
        ax.hist(v, bins=report.histogram_edges, alpha=0.5, label=name)
    ax.set_xlabel("prediction confidence" + (" (logit gap)" if report.kind == "logit" else " (probability gap)"))
    ax.set_ylabel("images")
    ax.legend()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# Omniscient attack
# ---------------------------------------------------------------------------


@dataclass
class OmniscientReport:
    success_rate_plain: float
    success_rate_adaptive: float
    mean_l2_plain: float
    mean_l2_adaptive: float
    # Plain C&W adversarials that also pass the detector
    evasion_rate_plain: float
    attempted: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def check_aligned(plain: AttackConfig, adaptive: AttackConfig) -> None:
    """Reject config pairs that differ in anything besides the detector term."""
    a = {k: v for k, v in plain.to_dict().items() if k not in _ADAPTIVE_ONLY_FIELDS}
    b = {k: v for k, v in adaptive.to_dict().items() if k not in _ADAPTIVE_ONLY_FIELDS}
    differing = sorted(k for k in a if a[k] != b[k])
    if differing:
        raise ConfigError([f"cw and cw_paca configs differ in '{k}' ({a[k]!r} vs {b[k]!r})" for k in differing])


def omniscient_eval(
    model: ClassifierHandle,
    detector: Detector,
    images: ImageBatch,
    plain: AttackConfig | None = None,
    adaptive: AttackConfig | None = None,
) -> tuple[OmniscientReport, dict[str, Any]]:
    """Run plain C&W and the detector-aware variant on the same images and seeds.

    Returns the report and both ``AttackResult`` objects keyed ``cw`` / ``cw_paca``.
    """
    plain = plain or AttackConfig.for_attack("cw")
    adaptive = adaptive or AttackConfig.for_attack("cw_paca")
    check_aligned(plain, adaptive)
    if detector.training:
        raise PreconditionError("detector must be in evaluation mode for the omniscient evaluation")
    plain_result = run_attack("cw", model, images, plain)
    adaptive_result = run_attack("cw_paca", model, images, adaptive, detector=detector)

    evading = 0
    if plain_result.successful:
        adversarial = torch.stack([r.adversarial for r in plain_result.successful]).to(model.device)
        evading = int(detector_says_clean(model, detector, adversarial).sum())
    report = OmniscientReport(
        success_rate_plain=plain_result.success_rate,
        success_rate_adaptive=adaptive_result.success_rate,
        mean_l2_plain=plain_result.mean_l2,
        mean_l2_adaptive=adaptive_result.mean_l2,
        evasion_rate_plain=evading / len(images),
        attempted=len(images),
    )
    logger.info(
        "C&W %.2f%% (l2 %.4f), detector-aware C&W %.2f%% (l2 %.4f)",
        100 * report.success_rate_plain,
        report.mean_l2_plain,
        100 * report.success_rate_adaptive,
        report.mean_l2_adaptive,
    )
    return report, {"cw": plain_result, "cw_paca": adaptive_result}


# ---------------------------------------------------------------------------
# Ablation table
# ---------------------------------------------------------------------------


def ablation_table(results: dict[str, dict[str, float]], attacks: list[str]) -> list[dict[str, Any]]:
    """One row per variant in table order: ``{"variant", "label", <attack>: accuracy, ...}``."""
    missing = [v for v in ABLATION_ROWS if v not in results]
    if missing:
        raise ConfigError([f"no ablation result for variant '{v}'" for v in missing])
    rows = []
    for variant, label in ABLATION_ROWS.items():
        row: dict[str, Any] = {"variant": variant, "label": label}
        for attack in attacks:
            row[attack] = results[variant].get(attack, math.nan)
        rows.append(row)
    return rows


def write_rows_csv(rows: list[dict[str, Any]], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return path
