"""Carlini-Wagner l2 attack and its detector-aware variant.

Both optimize in tanh space, ``x_adv = (tanh(w) + 1) / 2``, minimizing

    ||x_adv - x||^2 + c * max(Z_orig - max_{j != orig} Z_j + kappa, 0)

The detector-aware variant adds ``c * detector_weight * J_D`` where ``J_D`` is the
margin of the fused detector score toward its 'clean' class. The gradient-stream
input of the detector is recomputed from ``x_adv`` inside the objective, which
makes the objective a function of a gradient (differentiated twice when
``second_order`` is set, treated as a per-step constant otherwise).
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable

import torch
from torch import nn

from confdetect.attacks.base import AttackConfig, AttackResult, run_attack
from confdetect.core import ImageBatch
from confdetect.errors import InvalidInputError, NumericError, PreconditionError
from confdetect.gradients import ClassifierHandle, confidence_gradient

logger = logging.getLogger(__name__)

# Keeps atanh finite for pixels at exactly 0 or 1
_TANH_SCALE = 1 - 1e-6
_UPPER_BOUND_INIT = 1e10

# (x_adv, logits) -> (per-sample penalty, per-sample acceptance)
Penalty = Callable[[torch.Tensor, torch.Tensor], tuple[torch.Tensor, torch.Tensor]]


def classifier_margin(logits: torch.Tensor, orig_labels: torch.Tensor) -> torch.Tensor:
    """``max_{j != orig} Z_j - Z_orig`` per sample."""
    real = logits.gather(1, orig_labels[:, None]).squeeze(1)
    mask = torch.nn.functional.one_hot(orig_labels, logits.shape[1]).bool()
    other = logits.masked_fill(mask, -math.inf).max(dim=1).values
    return other - real


def _optimize(
    model: ClassifierHandle,
    x: torch.Tensor,
    orig_labels: torch.Tensor,
    cfg: AttackConfig,
    penalty: Penalty | None = None,
) -> torch.Tensor:
    """Shared C&W loop with binary search over the constant c.

    Returns the lowest-l2 iterate that reached the margin (and passed ``penalty``'s
    acceptance test); images with none keep their original pixels.
    """
    x = x.detach()
    N = x.shape[0]
    w0 = torch.atanh((2 * x - 1) * _TANH_SCALE)
    lower = torch.zeros(N, dtype=x.dtype, device=x.device)
    upper = torch.full((N,), _UPPER_BOUND_INIT, dtype=x.dtype, device=x.device)
    const = torch.full((N,), cfg.initial_const, dtype=x.dtype, device=x.device)
    best_l2 = torch.full((N,), math.inf, dtype=x.dtype, device=x.device)
    best_adv = x.clone()

    for search_step in range(cfg.binary_search_steps):
        w = w0.clone().requires_grad_(True)
        optimizer = torch.optim.Adam([w], lr=cfg.lr)
        found = torch.zeros(N, dtype=torch.bool, device=x.device)
        for iteration in range(cfg.iterations):
            with torch.enable_grad():
                adv = (torch.tanh(w) + 1) / 2
                logits = model(adv)
                l2sq = (adv - x).pow(2).flatten(1).sum(dim=1)
                margin = classifier_margin(logits, orig_labels)
                loss = l2sq + const * (cfg.kappa - margin).clamp_min(0)
                accepted = torch.ones(N, dtype=torch.bool, device=x.device)
                if penalty is not None:
                    extra, accepted = penalty(adv, logits)
                    loss = loss + const * extra
                if not torch.isfinite(loss).all():
                    bad = int((~torch.isfinite(loss)).nonzero()[0])
                    msg = f"non-finite attack objective for image {bad} (step {search_step}, iteration {iteration})"
                    raise NumericError(msg)
                (grad,) = torch.autograd.grad(loss.sum(), [w])
            with torch.no_grad():
                attained = (margin >= cfg.kappa) & accepted
                improved = attained & (l2sq < best_l2)
                best_l2 = torch.where(improved, l2sq, best_l2)
                best_adv[improved] = adv.detach()[improved]
                found |= attained
            w.grad = grad
            optimizer.step()

        upper = torch.where(found, torch.minimum(upper, const), upper)
        lower = torch.where(found, lower, torch.maximum(lower, const))
        bounded = upper < _UPPER_BOUND_INIT / 10
        const = torch.where(found | bounded, (lower + upper) / 2, const * 10)

    return best_adv.clamp(0.0, 1.0)


def cw_generate(
    model: ClassifierHandle,
    x: torch.Tensor,
    orig_labels: torch.Tensor,
    cfg: AttackConfig,
    *,
    detector: nn.Module | None = None,
) -> torch.Tensor:
    return _optimize(model, x, orig_labels, cfg)


def detector_penalty(model: ClassifierHandle, detector: nn.Module, cfg: AttackConfig) -> Penalty:
    """``detector_weight * max(D_adv - D_clean + kappa, 0)`` on the fused detector score."""

    def penalty(adv: torch.Tensor, logits: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if cfg.second_order:
            gradients, _ = confidence_gradient(model, adv, create_graph=True)
        else:
            gradients, _ = confidence_gradient(model, adv.detach())
            gradients = gradients.detach()
        fused = detector(adv, gradients, logits)
        j_d = (fused[:, 1] - fused[:, 0] + cfg.kappa).clamp_min(0)
        looks_clean = fused[:, 0].detach() >= fused[:, 1].detach()
        return cfg.detector_weight * j_d, looks_clean

    return penalty


def cw_paca_generate(
    model: ClassifierHandle,
    x: torch.Tensor,
    orig_labels: torch.Tensor,
    cfg: AttackConfig,
    *,
    detector: nn.Module | None = None,
) -> torch.Tensor:
    if detector is None:
        raise InvalidInputError("the detector-aware attack needs a trained detector")
    if detector.training:
        raise PreconditionError("detector must be in evaluation mode for the detector-aware attack")
    if cfg.detector_weight == 0:
        # Identical objective and trajectory to plain C&W
        return _optimize(model, x, orig_labels, cfg)
    return _optimize(model, x, orig_labels, cfg, detector_penalty(model, detector, cfg))


def cw_attack(model: ClassifierHandle, images: ImageBatch, cfg: AttackConfig | None = None) -> AttackResult:
    return run_attack("cw", model, images, cfg or AttackConfig.for_attack("cw"))


def cw_paca_attack(
    model: ClassifierHandle, detector: nn.Module, images: ImageBatch, cfg: AttackConfig | None = None
) -> AttackResult:
    """Omniscient attack; success means the classifier is fooled and the detector says 'clean'."""
    if detector.training:
        raise PreconditionError("detector must be in evaluation mode for the detector-aware attack")
    return run_attack("cw_paca", model, images, cfg or AttackConfig.for_attack("cw_paca"), detector=detector)
