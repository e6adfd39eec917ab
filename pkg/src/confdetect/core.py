"""Shared domain types, the prediction-confidence metric and the confidence loss."""

from __future__ import annotations

import math
from collections.abc import Iterator
from dataclasses import dataclass, field
from typing import Any

import torch
import torch.nn.functional as F

from confdetect.errors import InvalidInputError

# Recorded distances must match the recomputed norm within this tolerance
NORM_TOLERANCE = 1e-6


@dataclass
class ImageBatch:
    """A batch of channels-first images in [0, 1] with integer class labels."""

    pixels: torch.Tensor  # [N, C, H, W]
    labels: torch.Tensor  # [N]

    def __post_init__(self) -> None:
        if self.pixels.ndim != 4:
            msg = f"pixels must be [N, C, H, W], got shape {tuple(self.pixels.shape)}"
            raise InvalidInputError(msg)
        if self.pixels.shape[0] < 1:
            raise InvalidInputError("an image batch needs at least one image")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.pixels.shape[0]:
            msg = f"labels length {tuple(self.labels.shape)} does not match batch size {self.pixels.shape[0]}"
            raise InvalidInputError(msg)
        if not torch.is_floating_point(self.pixels):
            raise InvalidInputError("pixels must be floating point; use ImageBatch.from_uint8 for raw images")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise InvalidInputError("pixel values must lie in [0, 1]")

    @classmethod
    def from_uint8(cls, images: torch.Tensor, labels: torch.Tensor) -> ImageBatch:
        """Convert 0-255 integer images (NCHW or NHWC) into a [0, 1] float batch."""
        if images.ndim == 4 and images.shape[-1] in (1, 3) and images.shape[1] not in (1, 3):
            images = images.permute(0, 3, 1, 2)
        return cls(pixels=images.float().div(255.0).contiguous(), labels=labels.long())

    def __len__(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        _, C, H, W = self.pixels.shape
        return int(C), int(H), int(W)

    def subset(self, index: torch.Tensor | slice) -> ImageBatch:
        return ImageBatch(pixels=self.pixels[index], labels=self.labels[index])

    def to(self, device: torch.device | str) -> ImageBatch:
        return ImageBatch(pixels=self.pixels.to(device), labels=self.labels.to(device))

    @staticmethod
    def concat(batches: list[ImageBatch]) -> ImageBatch:
        return ImageBatch(
            pixels=torch.cat([b.pixels for b in batches]),
            labels=torch.cat([b.labels for b in batches]),
        )


def iter_batches(images: ImageBatch, batch_size: int) -> Iterator[ImageBatch]:
    """Yield consecutive sub-batches in input order."""
    if batch_size < 1:
        raise InvalidInputError(f"batch_size must be positive, got {batch_size}")
    for start in range(0, len(images), batch_size):
        yield images.subset(slice(start, start + batch_size))


@dataclass
class AdversarialRecord:
    """One adversarial image with its provenance and perturbation norms."""

    adversarial: torch.Tensor  # [C, H, W]
    original_index: int
    attack_name: str
    orig_label: int
    adv_label: int
    success: bool
    dist_l1: float
    dist_l2: float
    dist_linf: float
    params: dict[str, Any] = field(default_factory=dict)
    true_label: int = -1

    def __post_init__(self) -> None:
        if self.success and self.adv_label == self.orig_label:
            msg = f"record {self.original_index}: a successful untargeted attack must change the label"
            raise InvalidInputError(msg)

    @classmethod
    def build(
        cls,
        *,
        original: torch.Tensor,
        adversarial: torch.Tensor,
        original_index: int,
        attack_name: str,
        orig_label: int,
        adv_label: int,
        success: bool,
        params: dict[str, Any] | None = None,
        true_label: int = -1,
    ) -> AdversarialRecord:
        l1, l2, linf = perturbation_norms(original, adversarial)
        return cls(
            adversarial=adversarial.detach().clone(),
            original_index=original_index,
            attack_name=attack_name,
            orig_label=orig_label,
            adv_label=adv_label,
            success=success,
            dist_l1=l1,
            dist_l2=l2,
            dist_linf=linf,
            params=dict(params or {}),
            true_label=true_label,
        )

    def to_metadata(self) -> dict[str, Any]:
        """Manifest entry: everything but the pixel tensor."""
        return {
            "index": self.original_index,
            "true_label": self.true_label,
            "orig_label": self.orig_label,
            "adv_label": self.adv_label,
            "success": self.success,
            "dist_l1": self.dist_l1,
            "dist_l2": self.dist_l2,
            "dist_linf": self.dist_linf,
        }


def _check_logits(z: torch.Tensor) -> None:
    if z.ndim == 0 or z.shape[-1] < 2:
        raise InvalidInputError("logit vectors need at least two classes")
    if not torch.isfinite(z).all():
        raise InvalidInputError("logits must be finite")


def predicted_labels(z: torch.Tensor) -> torch.Tensor:
    """Argmax over the class axis; ties resolve to the lowest index."""
    _check_logits(z)
    # torch.argmax returns the first maximal index
    return z.argmax(dim=-1)


def one_hot_target(z: torch.Tensor) -> torch.Tensor:
    """One-hot vector of the *predicted* label (not the ground truth)."""
    return F.one_hot(predicted_labels(z), num_classes=z.shape[-1]).to(z.dtype)


def confidence_loss(z: torch.Tensor) -> torch.Tensor:
    """Cross-entropy between softmax(z) and the one-hot of argmax(z).

    Works on a single vector ``[n]`` (returns a scalar) or a batch ``[N, n]``
    (returns ``[N]``). The target is an integer index, so no gradient flows
    through the argmax.
    """
    _check_logits(z)
    target = z.detach().argmax(dim=-1, keepdim=True)
    # log_softmax subtracts the max internally
    return -F.log_softmax(z, dim=-1).gather(-1, target).squeeze(-1)


def rank1_advantage(z: torch.Tensor) -> torch.Tensor:
    """Largest logit minus the second largest; always >= 0."""
    _check_logits(z)
    top2 = z.topk(2, dim=-1).values
    return top2[..., 0] - top2[..., 1]


def prediction_confidence(z: torch.Tensor, kind: str = "logit") -> torch.Tensor:
    """Prediction confidence as a logit gap (default) or a softmax probability gap."""
    if kind == "logit":
        return rank1_advantage(z)
    if kind == "probability":
        _check_logits(z)
        top2 = F.softmax(z, dim=-1).topk(2, dim=-1).values
        return top2[..., 0] - top2[..., 1]
    msg = f"Invalid confidence kind '{kind}'. Must be one of: logit, probability"
    raise InvalidInputError(msg)


def perturbation_norms(clean: torch.Tensor, adv: torch.Tensor) -> tuple[float, float, float]:
    """Return the (l1, l2, linf) norms of the flattened difference."""
    if clean.shape != adv.shape:
        msg = f"shape mismatch: {tuple(clean.shape)} vs {tuple(adv.shape)}"
        raise InvalidInputError(msg)
    delta = (adv.detach().double() - clean.detach().double()).flatten()
    if delta.numel() == 0:
        return 0.0, 0.0, 0.0
    l1 = float(delta.abs().sum())
    l2 = float(torch.linalg.vector_norm(delta, ord=2))
    linf = float(delta.abs().max())
    return l1, l2, linf


def distances_match(original: torch.Tensor, adversarial: torch.Tensor, stored: tuple[float, float, float]) -> bool:
    """Whether stored (l1, l2, linf) distances match the norms recomputed from the images."""
    fresh = perturbation_norms(original, adversarial)
    return all(math.isclose(a, b, abs_tol=NORM_TOLERANCE) for a, b in zip(fresh, stored, strict=True))


def norms_consistent(record: AdversarialRecord, original: torch.Tensor) -> bool:
    """Whether a record's stored distances match the recomputed norms."""
    return distances_match(original, record.adversarial, (record.dist_l1, record.dist_l2, record.dist_linf))
