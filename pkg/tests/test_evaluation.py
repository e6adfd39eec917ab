"""Tests for detection metrics, the heatmap, the ablation table and the omniscient comparison."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest
import torch
from torch import nn

from confdetect.attacks import AttackConfig
from confdetect.core import ImageBatch
from confdetect.detector import SubnetworkConfig, build_detector
from confdetect.errors import ConfigError, InvalidInputError, PreconditionError
from confdetect.evaluation import (
    ABLATION_ROWS,
    ablation_table,
    balanced,
    check_aligned,
    confidence_analysis,
    confusion_counts,
    eval_detection,
    generalization_heatmap,
    omniscient_eval,
    rank_auc,
    read_heatmap_csv,
    separability,
    trapezoid_auc,
    write_rows_csv,
)
from confdetect.gradients import ClassifierHandle
from confdetect.training import DetectionDataset


class AlwaysClean(nn.Module):
    def forward(self, images: torch.Tensor, gradients: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
        return images.new_tensor([1.0, 0.0]).expand(images.shape[0], 2)


class Oracle(nn.Module):
    """Reads the true label planted in the first logit column."""

    def forward(self, images: torch.Tensor, gradients: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
        label = logits[:, 0]
        return torch.stack([1 - label, label], dim=1)


def labelled_dataset(n_clean: int, n_adv: int, seed: int = 0) -> DetectionDataset:
    generator = torch.Generator().manual_seed(seed)
    M = n_clean + n_adv
    labels = torch.cat([torch.zeros(n_clean), torch.ones(n_adv)]).long()
    logits = torch.randn(M, 3, generator=generator)
    logits[:, 0] = labels.float()
    return DetectionDataset(
        images=torch.rand(M, 3, 4, 4, generator=generator),
        gradients=torch.rand(M, 3, 4, 4, generator=generator),
        logits=logits,
        labels=labels,
        pair_ids=torch.cat([torch.arange(n_clean), torch.arange(n_adv)]),
    )


def test_always_clean_detector_scores_half() -> None:
    report = eval_detection(AlwaysClean().eval(), labelled_dataset(10, 10))
    assert report.accuracy == 0.5
    assert report.auc == 0.5
    assert (report.confusion.tn, report.confusion.fn) == (10, 10)


def test_oracle_detector_scores_one() -> None:
    report = eval_detection(Oracle().eval(), labelled_dataset(12, 12), attack="pgd")
    assert report.accuracy == 1.0
    assert report.auc == 1.0
    assert report.to_dict()["recall_adversarial"] == 1.0


def test_evaluation_balances_classes() -> None:
    data = labelled_dataset(30, 10)
    assert balanced(data).counts() == (10, 10)
    report = eval_detection(AlwaysClean().eval(), data)
    assert report.per_class == 10
    assert report.accuracy == 0.5


def test_evaluation_preconditions() -> None:
    with pytest.raises(PreconditionError, match="evaluation mode"):
        eval_detection(AlwaysClean(), labelled_dataset(4, 4))
    with pytest.raises(InvalidInputError, match="clean and adversarial"):
        eval_detection(AlwaysClean().eval(), labelled_dataset(4, 0))


def test_confusion_counts_match_brute_force() -> None:
    generator = torch.Generator().manual_seed(0)
    predicted = torch.randint(0, 2, (200,), generator=generator)
    truth = torch.randint(0, 2, (200,), generator=generator)
    confusion = confusion_counts(predicted, truth)
    pairs = list(zip(predicted.tolist(), truth.tolist(), strict=True))
    assert confusion.tp == pairs.count((1, 1))
    assert confusion.tn == pairs.count((0, 0))
    assert confusion.fp == pairs.count((1, 0))
    assert confusion.fn == pairs.count((0, 1))
    assert confusion.accuracy == pytest.approx((confusion.tp + confusion.tn) / 200)


def test_rank_auc_agrees_with_trapezoid() -> None:
    rng = np.random.default_rng(3)
    negatives = rng.normal(0.0, 1.0, 300)
    positives = np.round(rng.normal(0.7, 1.0, 250), 1)
    assert rank_auc(negatives, positives) == pytest.approx(trapezoid_auc(negatives, positives), abs=1e-6)


def test_identical_groups_have_chance_auc() -> None:
    values = np.linspace(0, 1, 50)
    assert rank_auc(values, values) == pytest.approx(0.5)
    assert separability(0.2) == pytest.approx(0.8)
    assert separability(0.5) == 0.5


def test_auc_needs_both_groups() -> None:
    with pytest.raises(InvalidInputError):
        rank_auc([], [1.0])


def test_heatmap_csv_round_trip(work_dir: Path) -> None:
    """The CSV reproduces the in-memory matrix and its diagonal equals single-attack evaluation."""
    detectors = {"pgd": Oracle().eval(), "ddn": AlwaysClean().eval()}
    test_sets = {"pgd": labelled_dataset(8, 8, seed=1), "ddn": labelled_dataset(6, 9, seed=2)}
    result = generalization_heatmap(detectors, test_sets, out_dir=work_dir)

    assert (work_dir / "heatmap.png").is_file()
    parsed = read_heatmap_csv(work_dir / "heatmap.csv")
    assert parsed.attacks == ["pgd", "ddn"]
    assert np.allclose(parsed.matrix, result.matrix, atol=1e-9, rtol=0)
    for attack in result.attacks:
        direct = eval_detection(detectors[attack], test_sets[attack]).accuracy
        assert result.entry(attack, attack) == direct
    assert result.entry("pgd", "ddn") == 1.0
    assert result.entry("ddn", "pgd") == 0.5


def test_heatmap_needs_two_attacks() -> None:
    with pytest.raises(ConfigError, match="at least two attacks"):
        generalization_heatmap({"pgd": Oracle().eval()}, {"pgd": labelled_dataset(2, 2)})
    with pytest.raises(ConfigError, match="no test set for attack 'cw'"):
        generalization_heatmap({"pgd": Oracle().eval(), "cw": Oracle().eval()}, {"pgd": labelled_dataset(2, 2)})


def test_ablation_table_rows(work_dir: Path) -> None:
    results = {variant: {"cw": 0.9, "ddn": 0.8} for variant in ABLATION_ROWS}
    rows = ablation_table(results, ["cw", "ddn"])
    assert [r["label"] for r in rows] == [
        "PACA",
        "Remove image stream",
        "Remove gradient stream",
        "GCP→GAP",
        "Remove short-cut connection",
        "Single logits + FC",
    ]
    path = write_rows_csv(rows, work_dir / "ablation.csv")
    with open(path, newline="", encoding="utf-8") as f:
        parsed = list(csv.DictReader(f))
    assert len(parsed) == 6
    assert float(parsed[0]["cw"]) == 0.9

    del results["gap"]
    with pytest.raises(ConfigError, match="variant 'gap'"):
        ablation_table(results, ["cw"])


def test_confidence_analysis(work_dir: Path, tiny_model: ClassifierHandle, tiny_images: ImageBatch) -> None:
    shifted = (tiny_images.pixels * 0.5).clamp(0, 1)
    report = confidence_analysis(
        tiny_model, {"clean": tiny_images, "pgd": shifted}, bins=5, out_dir=work_dir
    )
    assert set(report.auc) == {"pgd"}
    assert 0.0 <= report.auc["pgd"] <= 1.0
    assert report.stats["clean"]["count"] == len(tiny_images)
    assert sum(report.histograms["clean"]) == len(tiny_images)
    assert report.summary()["separability"]["pgd"] >= 0.5
    assert (work_dir / "confidence.csv").is_file()
    assert (work_dir / "confidence.png").is_file()

    same = confidence_analysis(tiny_model, {"clean": tiny_images, "copy": tiny_images})
    assert same.auc["copy"] == pytest.approx(0.5)


def test_confidence_analysis_needs_two_groups(tiny_model: ClassifierHandle, tiny_images: ImageBatch) -> None:
    with pytest.raises(InvalidInputError, match="two groups"):
        confidence_analysis(tiny_model, {"clean": tiny_images})
    with pytest.raises(InvalidInputError, match="fewer than two images"):
        confidence_analysis(tiny_model, {"clean": tiny_images, "pgd": tiny_images.subset(slice(0, 1))})


def test_adaptive_configs_must_align() -> None:
    plain = AttackConfig.for_attack("cw", iterations=20)
    check_aligned(plain, AttackConfig.for_attack("cw_paca", iterations=20, detector_weight=3.0))
    with pytest.raises(ConfigError, match="differ in 'iterations'"):
        check_aligned(plain, AttackConfig.for_attack("cw_paca", iterations=30))


def test_omniscient_eval(
    tiny_model: ClassifierHandle, tiny_images: ImageBatch, tiny_network: SubnetworkConfig
) -> None:
    detector = build_detector("full", tiny_network).double().eval()
    images = tiny_images.subset(slice(0, 4))
    plain = AttackConfig.for_attack("cw", iterations=6, lr=0.05)
    adaptive = AttackConfig.for_attack("cw_paca", iterations=6, lr=0.05)
    report, results = omniscient_eval(tiny_model, detector, images, plain, adaptive)
    assert report.attempted == 4
    assert set(results) == {"cw", "cw_paca"}
    assert len(results["cw"].records) == len(results["cw_paca"].records) == 4
    assert 0.0 <= report.evasion_rate_plain <= report.success_rate_plain
    # Adaptive successes fool the classifier and the detector
    for record in results["cw_paca"].successful:
        assert record.adv_label != record.orig_label
