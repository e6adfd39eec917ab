"""Decoupled direction and norm attack (l2).

The gradient step sets the direction; the norm is steered separately: it shrinks
by ``(1 - gamma)`` while the current point is adversarial and grows by
``(1 + gamma)`` otherwise. The step size follows a cosine schedule from
``alpha`` down to ``alpha / 100``.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from confdetect.attacks.base import AttackConfig, AttackResult, run_attack
from confdetect.core import ImageBatch
from confdetect.gradients import ClassifierHandle


def _norms(t: torch.Tensor) -> torch.Tensor:
    return t.flatten(1).norm(p=2, dim=1)


def _expand(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return v.view(-1, *([1] * (like.ndim - 1)))


class DDN:
    """One DDN run; keeps the per-iteration target norms for inspection."""

    def __init__(self) -> None:
        self.norm_history: list[torch.Tensor] = []
        # l2 of every adversarial iterate, inf where the iterate was not adversarial
        self.adversarial_l2_trace: list[torch.Tensor] = []

    def __call__(
        self,
        model: ClassifierHandle,
        x: torch.Tensor,
        orig_labels: torch.Tensor,
        cfg: AttackConfig,
        *,
        detector: nn.Module | None = None,
    ) -> torch.Tensor:
        x = x.detach()
        N = x.shape[0]
        delta = torch.zeros_like(x)
        epsilon = torch.full((N,), cfg.init_norm, dtype=x.dtype, device=x.device)
        best_l2 = torch.full((N,), math.inf, dtype=x.dtype, device=x.device)
        best_adv = x.clone()
        self.norm_history = []
        self.adversarial_l2_trace = []

        for i in range(cfg.iterations + 1):
            delta.requires_grad_(True)
            with torch.enable_grad():
                point = (x + delta).clamp(0.0, 1.0)
                logits = model(point)
                loss = F.cross_entropy(logits, orig_labels, reduction="sum")
                (grad,) = torch.autograd.grad(loss, delta)
            delta = delta.detach()
            l2 = _norms(point.detach() - x)
            is_adv = logits.detach().argmax(dim=1) != orig_labels
            self.adversarial_l2_trace.append(torch.where(is_adv, l2, torch.full_like(l2, math.inf)))
            improved = is_adv & (l2 < best_l2)
            best_l2 = torch.where(improved, l2, best_l2)
            best_adv[improved] = point.detach()[improved]
            if i == cfg.iterations:
                break

            step = 0.01 * cfg.alpha + (cfg.alpha - 0.01 * cfg.alpha) * (1 + math.cos(math.pi * i / cfg.iterations)) / 2
            grad_norm = _norms(grad)
            direction = torch.where(
                _expand(grad_norm > 0, grad), grad / _expand(grad_norm.clamp_min(1e-12), grad), torch.zeros_like(grad)
            )
            delta = delta + step * direction
            epsilon = torch.where(is_adv, epsilon * (1 - cfg.gamma), epsilon * (1 + cfg.gamma))
            self.norm_history.append(epsilon.clone())
            delta_norm = _norms(delta)
            delta = delta * _expand(epsilon / delta_norm.clamp_min(1e-12), delta)
            delta = (x + delta).clamp(0.0, 1.0) - x

        return best_adv


def ddn_generate(
    model: ClassifierHandle,
    x: torch.Tensor,
    orig_labels: torch.Tensor,
    cfg: AttackConfig,
    *,
    detector: nn.Module | None = None,
) -> torch.Tensor:
    return DDN()(model, x, orig_labels, cfg)


def ddn_attack(model: ClassifierHandle, images: ImageBatch, cfg: AttackConfig | None = None) -> AttackResult:
    return run_attack("ddn", model, images, cfg or AttackConfig.for_attack("ddn"))
