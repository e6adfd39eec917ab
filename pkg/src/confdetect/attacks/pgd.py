"""Projected gradient descent under an l-infinity budget."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from confdetect.attacks.base import AttackConfig, AttackResult, run_attack
from confdetect.core import ImageBatch
from confdetect.gradients import ClassifierHandle


def pgd_generate(
    model: ClassifierHandle,
    x: torch.Tensor,
    orig_labels: torch.Tensor,
    cfg: AttackConfig,
    *,
    detector: nn.Module | None = None,
) -> torch.Tensor:
    """Sign-gradient ascent on cross-entropy, projected onto the eps-ball and [0, 1]."""
    x = x.detach()
    eps = cfg.epsilon
    adv = x.clone()
    if cfg.random_start:
        generator = torch.Generator(device=x.device).manual_seed(cfg.seed)
        noise = torch.rand(x.shape, generator=generator, device=x.device, dtype=x.dtype)
        adv = (x + (2 * noise - 1) * eps).clamp(0.0, 1.0)
    for _ in range(cfg.iterations):
        adv.requires_grad_(True)
        with torch.enable_grad():
            loss = F.cross_entropy(model(adv), orig_labels, reduction="sum")
            (grad,) = torch.autograd.grad(loss, adv)
        stepped = adv.detach() + cfg.alpha * grad.sign()
        adv = (x + (stepped - x).clamp(-eps, eps)).clamp(0.0, 1.0)
    return adv.detach()


def pgd_attack(model: ClassifierHandle, images: ImageBatch, cfg: AttackConfig | None = None) -> AttackResult:
    return run_attack("pgd", model, images, cfg or AttackConfig.for_attack("pgd"))
