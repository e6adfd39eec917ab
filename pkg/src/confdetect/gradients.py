"""Confidence-gradient generation.

The confidence loss of the classifier's own prediction is back-propagated to the
input image and the absolute value of that gradient becomes the input of the
detector's gradient stream.
"""

from __future__ import annotations

import hashlib
import logging
from collections.abc import Iterable, Iterator

import torch
from torch import nn

from confdetect.core import ImageBatch, confidence_loss
from confdetect.errors import InvalidInputError, NumericError

logger = logging.getLogger(__name__)

# |dL/dx|, same shape as the source images, every entry >= 0
ConfidenceGradient = torch.Tensor


class ClassifierHandle:
    """A frozen, evaluation-mode classifier mapping images to logits."""

    def __init__(self, module: nn.Module, num_classes: int) -> None:
        if num_classes < 2:
            raise InvalidInputError(f"a classifier needs at least two classes, got {num_classes}")
        self.module = module.eval()
        self.num_classes = num_classes
        for param in self.module.parameters():
            param.requires_grad_(False)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if self.module.training:
            self.module.eval()
        return self.module(x)

    @property
    def device(self) -> torch.device:
        try:
            return next(self.module.parameters()).device
        except StopIteration:
            return torch.device("cpu")

    @property
    def dtype(self) -> torch.dtype:
        try:
            return next(self.module.parameters()).dtype
        except StopIteration:
            return torch.get_default_dtype()

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self(x).argmax(dim=-1)

    def checksum(self) -> str:
        """SHA-256 over every weight and buffer, in state-dict order."""
        digest = hashlib.sha256()
        for key, value in self.module.state_dict().items():
            digest.update(key.encode())
            digest.update(value.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


def _first_non_finite(values: torch.Tensor) -> int | None:
    finite = torch.isfinite(values.detach().flatten(1)).all(dim=1)
    if finite.all():
        return None
    return int((~finite).nonzero()[0])


def confidence_gradient(
    model: ClassifierHandle | nn.Module,
    x: torch.Tensor,
    *,
    create_graph: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(|dL/dx|, logits)`` for images ``x`` that may already be part of a graph.

    With ``create_graph=True`` the result stays differentiable w.r.t. ``x`` (used by
    the omniscient attack). The loss is summed over the batch; examples do not
    interact, so each per-example gradient equals the single-image one.
    Raises ``NumericError`` naming the first sample whose logits are not finite.
    """
    if not x.requires_grad:
        x = x.detach().requires_grad_(True)
    logits = model(x)
    bad = _first_non_finite(logits)
    if bad is not None:
        msg = f"non-finite classifier logits for sample {bad}"
        raise NumericError(msg)
    loss = confidence_loss(logits).sum()
    (grad,) = torch.autograd.grad(loss, x, create_graph=create_graph)
    return grad.abs(), logits


def generate_gradient(model: ClassifierHandle, images: ImageBatch | torch.Tensor) -> ConfidenceGradient:
    """Confidence gradient of every image in the batch.

    Raises ``NumericError`` naming the first sample whose logits or gradient are not finite.
    """
    pixels = images.pixels if isinstance(images, ImageBatch) else images
    grad, _ = generate_gradient_with_logits(model, pixels)
    return grad


def generate_gradient_with_logits(
    model: ClassifierHandle, pixels: torch.Tensor
) -> tuple[ConfidenceGradient, torch.Tensor]:
    """Like ``generate_gradient`` but also returns the (detached) classifier logits."""
    x = pixels.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        grad, logits = confidence_gradient(model, x)
    grad = grad.detach()
    bad = _first_non_finite(grad)
    if bad is not None:
        msg = f"non-finite confidence gradient for sample {bad}"
        raise NumericError(msg)
    return grad, logits.detach()


def generate_gradient_batched(
    model: ClassifierHandle, batches: Iterable[ImageBatch | torch.Tensor]
) -> Iterator[ConfidenceGradient]:
    """Stream gradients batch by batch, in input order."""
    for index, batch in enumerate(batches):
        try:
            yield generate_gradient(model, batch)
        except NumericError as exc:
            msg = f"batch {index}: {exc}"
            raise NumericError(msg) from exc
        logger.debug("confidence gradients for batch %d done", index)
