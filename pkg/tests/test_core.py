"""Tests for the shared types, confidence loss and perturbation norms."""

from __future__ import annotations

import math

import pytest
import torch

from confdetect.core import (
    AdversarialRecord,
    ImageBatch,
    confidence_loss,
    iter_batches,
    norms_consistent,
    one_hot_target,
    perturbation_norms,
    predicted_labels,
    prediction_confidence,
    rank1_advantage,
)
from confdetect.errors import InvalidInputError


def test_image_batch_rejects_out_of_range_pixels() -> None:
    """Pixels must lie in [0, 1]."""
    with pytest.raises(InvalidInputError, match=r"\[0, 1\]"):
        ImageBatch(pixels=torch.full((1, 3, 2, 2), 1.5), labels=torch.zeros(1, dtype=torch.long))


def test_image_batch_rejects_label_mismatch() -> None:
    with pytest.raises(InvalidInputError, match="labels length"):
        ImageBatch(pixels=torch.zeros(2, 3, 2, 2), labels=torch.zeros(3, dtype=torch.long))


def test_image_batch_rejects_empty_and_wrong_rank() -> None:
    with pytest.raises(InvalidInputError):
        ImageBatch(pixels=torch.zeros(0, 3, 2, 2), labels=torch.zeros(0, dtype=torch.long))
    with pytest.raises(InvalidInputError, match=r"\[N, C, H, W\]"):
        ImageBatch(pixels=torch.zeros(3, 2, 2), labels=torch.zeros(3, dtype=torch.long))


def test_from_uint8_converts_channels_last() -> None:
    """0-255 NHWC images become [0, 1] NCHW floats."""
    raw = torch.full((2, 4, 4, 3), 255, dtype=torch.uint8)
    raw[0, 0, 0, 1] = 0
    batch = ImageBatch.from_uint8(raw, torch.tensor([1, 2]))
    assert batch.pixels.shape == (2, 3, 4, 4)
    assert batch.pixels.max() == 1.0
    assert batch.pixels[0, 1, 0, 0] == 0.0
    assert batch.image_shape == (3, 4, 4)


def test_iter_batches_preserves_order(tiny_images: ImageBatch) -> None:
    parts = list(iter_batches(tiny_images, 3))
    assert [len(p) for p in parts] == [3, 3, 2]
    assert torch.equal(torch.cat([p.pixels for p in parts]), tiny_images.pixels)


def test_predicted_labels_ties_go_to_lowest_index() -> None:
    z = torch.tensor([[1.0, 3.0, 3.0], [2.0, 2.0, 2.0]])
    assert predicted_labels(z).tolist() == [1, 0]


def test_one_hot_target_marks_prediction() -> None:
    target = one_hot_target(torch.tensor([0.5, 2.0, -1.0]))
    assert target.tolist() == [0.0, 1.0, 0.0]


def test_confidence_loss_uniform_logits() -> None:
    """Uniform logits over 10 classes give log 10."""
    loss = confidence_loss(torch.full((10,), 0.7, dtype=torch.float64))
    assert float(loss) == pytest.approx(math.log(10), abs=1e-12)


def test_confidence_loss_two_classes() -> None:
    loss = confidence_loss(torch.tensor([3.0, 1.0], dtype=torch.float64))
    assert float(loss) == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-12)
    assert float(loss) == pytest.approx(0.126928, abs=1e-6)


def test_confidence_loss_near_certain_prediction_is_finite() -> None:
    loss = confidence_loss(torch.tensor([100.0, 0.0], dtype=torch.float64))
    assert torch.isfinite(loss)
    assert 0 <= float(loss) < 1e-40


def test_confidence_loss_matches_full_cross_entropy_sum() -> None:
    """-sum_i t_i log softmax(z)_i with t the one-hot of argmax, on random vectors."""
    generator = torch.Generator().manual_seed(7)
    z = torch.randn(1000, 6, generator=generator, dtype=torch.float64) * 4
    brute = -(one_hot_target(z) * torch.log(torch.softmax(z, dim=-1))).sum(dim=-1)
    assert torch.allclose(confidence_loss(z), brute, atol=1e-10, rtol=0)


def test_confidence_loss_shift_invariant_and_bounded() -> None:
    generator = torch.Generator().manual_seed(11)
    z = torch.randn(200, 5, generator=generator, dtype=torch.float64)
    loss = confidence_loss(z)
    assert torch.allclose(loss, confidence_loss(z + 12.5), atol=1e-8)
    assert (loss >= 0).all()
    assert (loss <= math.log(5) + 1e-12).all()


def test_confidence_loss_rejects_bad_logits() -> None:
    with pytest.raises(InvalidInputError):
        confidence_loss(torch.tensor([1.0]))
    with pytest.raises(InvalidInputError, match="finite"):
        confidence_loss(torch.tensor([1.0, math.nan]))


def test_rank1_advantage_examples() -> None:
    assert float(rank1_advantage(torch.tensor([3.0, 1.0, 0.5]))) == pytest.approx(2.0)
    assert float(rank1_advantage(torch.tensor([5.0, 5.0, 1.0]))) == 0.0
    z = torch.tensor([0.3, -2.0, 1.7, 0.9])
    assert float(rank1_advantage(z + 4.0)) == pytest.approx(float(rank1_advantage(z)))


def test_prediction_confidence_probability_kind() -> None:
    z = torch.tensor([2.0, 0.0], dtype=torch.float64)
    p = torch.softmax(z, dim=-1)
    assert float(prediction_confidence(z, "probability")) == pytest.approx(float(p[0] - p[1]))
    with pytest.raises(InvalidInputError, match="confidence kind"):
        prediction_confidence(z, "entropy")


def test_perturbation_norms_examples() -> None:
    clean = torch.zeros(3, 2, 2)
    assert perturbation_norms(clean, clean) == (0.0, 0.0, 0.0)

    one = clean.clone()
    one[1, 0, 1] = 0.5
    assert perturbation_norms(clean, one) == pytest.approx((0.5, 0.5, 0.5))

    two = clean.clone()
    two[0, 0, 0] = 0.3
    two[2, 1, 1] = 0.3
    l1, l2, linf = perturbation_norms(clean, two)
    assert (l1, l2, linf) == pytest.approx((0.6, 0.3 * math.sqrt(2), 0.3), abs=1e-7)

    with pytest.raises(InvalidInputError, match="shape mismatch"):
        perturbation_norms(clean, torch.zeros(3, 2, 3))


def test_record_rejects_success_without_label_change() -> None:
    """An untargeted success must change the label."""
    original = torch.zeros(3, 2, 2)
    with pytest.raises(InvalidInputError, match="must change the label"):
        AdversarialRecord.build(
            original=original,
            adversarial=original + 0.1,
            original_index=4,
            attack_name="pgd",
            orig_label=2,
            adv_label=2,
            success=True,
        )


def test_record_norms_consistent() -> None:
    original = torch.zeros(3, 2, 2)
    record = AdversarialRecord.build(
        original=original,
        adversarial=original + 0.25,
        original_index=0,
        attack_name="pgd",
        orig_label=0,
        adv_label=1,
        success=True,
    )
    assert record.dist_linf == pytest.approx(0.25)
    assert norms_consistent(record, original)
    record.dist_l2 += 1e-3
    assert not norms_consistent(record, original)
    assert record.to_metadata()["adv_label"] == 1
