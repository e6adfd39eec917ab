"""Attack configuration, results and the attack registry."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Protocol

import torch
from rich.progress import Progress
from torch import nn

from confdetect.core import AdversarialRecord, ImageBatch, iter_batches, norms_consistent
from confdetect.errors import ConfigError, InvalidInputError, RegistrationError
from confdetect.gradients import ClassifierHandle, generate_gradient_with_logits

logger = logging.getLogger(__name__)


@dataclass
class AttackConfig:
    """Attack family and hyperparameters; serialized verbatim into archive manifests."""

    name: str
    epsilon: float = 0.03
    alpha: float = 0.005
    iterations: int = 10
    kappa: float = 1.0
    binary_search_steps: int = 1
    initial_const: float = 1.0
    lr: float = 0.01
    init_norm: float = 1.0
    gamma: float = 0.05
    detector_weight: float = 1.0
    random_start: bool = False
    second_order: bool = True
    batch_size: int = 128
    seed: int = 0

    def problems(self) -> list[str]:
        found: list[str] = []
        if self.iterations < 1:
            found.append(f"attack '{self.name}': iterations must be >= 1")
        if self.binary_search_steps < 1:
            found.append(f"attack '{self.name}': binary_search_steps must be >= 1")
        if self.name == "pgd" and (self.epsilon < 0 or self.alpha <= 0):
            found.append("attack 'pgd': epsilon must be >= 0 and alpha > 0")
        if self.name == "ddn" and not 0 < self.gamma < 1:
            found.append("attack 'ddn': gamma must lie in (0, 1)")
        if self.batch_size < 1:
            found.append(f"attack '{self.name}': batch_size must be positive")
        if self.detector_weight < 0:
            found.append(f"attack '{self.name}': detector_weight must be >= 0")
        return found

    def validate(self) -> None:
        found = self.problems()
        if found:
            raise ConfigError(found)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AttackConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown attack key '{k}'" for k in unknown])
        if "name" not in data:
            raise ConfigError("every attack needs a name")
        return cls.for_attack(data["name"], **{k: v for k, v in data.items() if k != "name"})

    @classmethod
    def for_attack(cls, name: str, **overrides: Any) -> AttackConfig:
        """Config with the published defaults of ``name`` and any overrides applied."""
        values: dict[str, Any] = {**ATTACK_DEFAULTS.get(name, {}), **overrides}
        return cls(name=name, **values)


ATTACK_DEFAULTS: dict[str, dict[str, Any]] = {
    "pgd": {"epsilon": 0.03, "alpha": 0.005, "iterations": 10},
    "cw": {"kappa": 1.0, "binary_search_steps": 1, "iterations": 500, "initial_const": 1.0, "lr": 0.01},
    "ddn": {"iterations": 100, "init_norm": 1.0, "gamma": 0.05, "alpha": 1.0},
    "cw_paca": {"kappa": 1.0, "binary_search_steps": 1, "iterations": 500, "initial_const": 1.0, "lr": 0.01},
}


@dataclass
class AttackResult:
    """Records of one attack run plus its summary statistics."""

    attack_name: str
    records: list[AdversarialRecord] = field(default_factory=list)

    @property
    def successful(self) -> list[AdversarialRecord]:
        return [r for r in self.records if r.success]

    @property
    def success_rate(self) -> float:
        return len(self.successful) / len(self.records) if self.records else 0.0

    @property
    def mean_l2(self) -> float:
        """Mean l2 distance over successful records only (nan when none succeeded)."""
        ok = self.successful
        return sum(r.dist_l2 for r in ok) / len(ok) if ok else math.nan

    @property
    def mean_l2_all(self) -> float:
        return sum(r.dist_l2 for r in self.records) / len(self.records) if self.records else math.nan

    def summary(self) -> dict[str, Any]:
        return {
            "attack": self.attack_name,
            "attempted": len(self.records),
            "successful": len(self.successful),
            "success_rate": self.success_rate,
            "mean_l2": self.mean_l2,
            "mean_l2_all": self.mean_l2_all,
        }


class AttackGenerator(Protocol):
    """Returns adversarial pixels for ``x`` given the labels to move away from."""

    def __call__(
        self,
        model: ClassifierHandle,
        x: torch.Tensor,
        orig_labels: torch.Tensor,
        cfg: AttackConfig,
        *,
        detector: nn.Module | None = None,
    ) -> torch.Tensor: ...


_REGISTRY: dict[str, AttackGenerator] = {}


def register_attack(name: str, generator: AttackGenerator) -> None:
    """Make ``generator`` callable by name from ``run_attack`` and the pipeline."""
    if not name or name in _REGISTRY:
        raise RegistrationError(f"attack '{name}' is already registered")
    _REGISTRY[name] = generator


def unregister_attack(name: str) -> None:
    _REGISTRY.pop(name, None)


def list_attacks() -> list[str]:
    return sorted(_REGISTRY)


def get_attack(name: str) -> AttackGenerator:
    try:
        return _REGISTRY[name]
    except KeyError:
        msg = f"Unknown attack '{name}'. Registered: {', '.join(list_attacks())}"
        raise RegistrationError(msg) from None


def detector_says_clean(
    model: ClassifierHandle, detector: nn.Module, adversarial: torch.Tensor
) -> torch.Tensor:
    """Detector decision on freshly generated confidence gradients; True means 'clean'."""
    gradients, logits = generate_gradient_with_logits(model, adversarial)
    with torch.no_grad():
        fused = detector(adversarial, gradients, logits)
    return fused.argmax(dim=-1) == 0


def build_result(
    model: ClassifierHandle,
    images: ImageBatch,
    adversarial: torch.Tensor,
    orig_labels: torch.Tensor,
    cfg: AttackConfig,
    *,
    detector: nn.Module | None = None,
    index_offset: int = 0,
) -> AttackResult:
    """Re-verify every adversarial with a fresh forward pass and build its record.

    With a detector the success criterion is joint: the classifier is fooled and
    the detector answers 'clean'.
    """
    adversarial = adversarial.detach()
    if adversarial.min() < 0 or adversarial.max() > 1:
        raise InvalidInputError(f"attack '{cfg.name}' produced pixels outside [0, 1]")
    adv_labels = model.predict(adversarial)
    fooled = adv_labels != orig_labels
    if detector is not None:
        fooled &= detector_says_clean(model, detector, adversarial)
    params = cfg.to_dict()
    result = AttackResult(attack_name=cfg.name)
    for i in range(len(images)):
        result.records.append(
            AdversarialRecord.build(
                original=images.pixels[i].cpu(),
                adversarial=adversarial[i].cpu(),
                original_index=index_offset + i,
                attack_name=cfg.name,
                orig_label=int(orig_labels[i]),
                adv_label=int(adv_labels[i]),
                success=bool(fooled[i]),
                params=params,
                true_label=int(images.labels[i]),
            )
        )
    return result


def run_attack(
    name: str,
    model: ClassifierHandle,
    images: ImageBatch,
    cfg: AttackConfig | None = None,
    *,
    detector: nn.Module | None = None,
    show_progress: bool = False,
) -> AttackResult:
    """Run a registered attack shard by shard and collect verified records.

    The label each image is pushed away from is the classifier's clean prediction.
    """
    cfg = cfg or AttackConfig.for_attack(name)
    cfg.validate()
    generator = get_attack(name)
    device = model.device
    result = AttackResult(attack_name=cfg.name)
    started = time.perf_counter()
    shards = list(iter_batches(images, cfg.batch_size))
    with Progress(transient=True, disable=not show_progress) as progress:
        task = progress.add_task(f"Attacking with {name}...", total=len(shards))
        offset = 0
        for shard in shards:
            x = shard.pixels.to(device)
            orig_labels = model.predict(x)
            adversarial = generator(model, x, orig_labels, cfg, detector=detector)
            shard_result = build_result(
                model, shard.to(device), adversarial, orig_labels, cfg, detector=detector, index_offset=offset
            )
            result.records.extend(shard_result.records)
            offset += len(shard)
            progress.advance(task)
    logger.info(
        "%s: %d/%d successful (%.1f%%), mean l2 %.4f, %.1fs",
        name,
        len(result.successful),
        len(result.records),
        100 * result.success_rate,
        result.mean_l2,
        time.perf_counter() - started,
    )
    return result


def verify_records(
    model: ClassifierHandle,
    originals: torch.Tensor,
    records: list[AdversarialRecord],
) -> list[str]:
    """Re-check labels, pixel bounds and stored norms; returns a list of problems."""
    problems: list[str] = []
    if not records:
        return problems
    adversarial = torch.stack([r.adversarial for r in records]).to(model.device)
    fresh = model.predict(adversarial).cpu()
    for i, record in enumerate(records):
        if int(fresh[i]) != record.adv_label:
            problems.append(f"record {record.original_index}: stored label {record.adv_label}, fresh {int(fresh[i])}")
        if record.success and int(fresh[i]) == record.orig_label:
            problems.append(f"record {record.original_index}: marked successful but the label did not change")
        if record.adversarial.min() < 0 or record.adversarial.max() > 1:
            problems.append(f"record {record.original_index}: pixels outside [0, 1]")
        if not norms_consistent(record, originals[i].cpu()):
            problems.append(f"record {record.original_index}: stored distances do not match")
    return problems


