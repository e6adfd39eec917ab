"""Adversarial-example archive: one directory per (attack, classifier) pair.

Layout::

    <dir>/manifest.toml   [archive] summary + provenance, [attack] full AttackConfig,
                          [[records]] index, labels, success, l1/l2/linf per record
    <dir>/arrays.npz      original, adversarial          [K, C, H, W] float32
                          gradients/original, gradients/adversarial
                          logits/original, logits/adversarial   [K, n]

Only successful records are archived; K equals the manifest record count.
Gradients are classifier-specific, so the manifest carries the classifier checksum.
"""

from __future__ import annotations

import logging
import zipfile
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any

import numpy as np
import toml
import torch

from confdetect.attacks import AttackConfig, AttackResult
from confdetect.core import ImageBatch, distances_match
from confdetect.errors import ArchiveError
from confdetect.gradients import ClassifierHandle, generate_gradient_with_logits
from confdetect.utils import atomic_directory

logger = logging.getLogger(__name__)

MANIFEST_FILENAME = "manifest.toml"
ARRAYS_FILENAME = "arrays.npz"
FORMAT_VERSION = 1
ARRAY_KEYS = (
    "original",
    "adversarial",
    "gradients/original",
    "gradients/adversarial",
    "logits/original",
    "logits/adversarial",
)


@dataclass
class AdversarialArchive:
    attack: AttackConfig
    classifier_checksum: str
    records: list[dict[str, Any]]
    arrays: dict[str, torch.Tensor]
    summary: dict[str, Any] = field(default_factory=dict)
    created: str = ""

    def __len__(self) -> int:
        return len(self.records)

    @property
    def attack_name(self) -> str:
        return self.attack.name

    def manifest(self) -> dict[str, Any]:
        return {
            "archive": {
                "format_version": FORMAT_VERSION,
                "attack_name": self.attack.name,
                "classifier_checksum": self.classifier_checksum,
                "created": self.created,
                **self.summary,
            },
            "attack": self.attack.to_dict(),
            "records": self.records,
        }

    def problems(self) -> list[str]:
        found: list[str] = []
        missing = [k for k in ARRAY_KEYS if k not in self.arrays]
        found.extend(f"array '{k}' is missing" for k in missing)
        for key, value in self.arrays.items():
            if value.shape[0] != len(self.records):
                msg = f"array '{key}' has {value.shape[0]} rows but the manifest lists {len(self.records)} records"
                found.append(msg)
        failed = [r["index"] for r in self.records if not r.get("success", False)]
        if failed:
            found.append(f"records {failed[:5]} are not successful adversarials")
        paired = "original" in self.arrays and "adversarial" in self.arrays
        if paired and self.arrays["adversarial"].shape[0] == self.arrays["original"].shape[0] == len(self.records):
            for row, record in enumerate(self.records):
                stored = (record["dist_l1"], record["dist_l2"], record["dist_linf"])
                if not distances_match(self.arrays["original"][row], self.arrays["adversarial"][row], stored):
                    found.append(f"record {record['index']}: stored distances do not match the arrays")
        return found

    def save(self, directory: Path) -> Path:
        """Write atomically; a failure leaves no partial archive behind."""
        directory = Path(directory)
        self.created = self.created or datetime.now().isoformat(timespec="seconds")
        with atomic_directory(directory) as tmp:
            with open(tmp / ARRAYS_FILENAME, "wb") as f:
                np.savez(f, **{k: v.detach().cpu().numpy() for k, v in self.arrays.items()})
            with open(tmp / MANIFEST_FILENAME, "w") as f:
                toml.dump(self.manifest(), f)
        logger.info("archive with %d records written to %s", len(self), directory)
        return directory


def build_archive(
    model: ClassifierHandle,
    images: ImageBatch,
    result: AttackResult,
    cfg: AttackConfig,
    batch_size: int = 128,
) -> AdversarialArchive:
    """Keep successful records only and compute confidence gradients for both sides."""
    successful = result.successful
    originals = [images.pixels[r.original_index] for r in successful]
    adversarials = [r.adversarial for r in successful]
    arrays: dict[str, torch.Tensor] = {}
    if successful:
        for side, tensors in (("original", originals), ("adversarial", adversarials)):
            stacked = torch.stack(tensors).cpu()
            grads: list[torch.Tensor] = []
            logits: list[torch.Tensor] = []
            for start in range(0, len(stacked), batch_size):
                chunk = stacked[start : start + batch_size].to(model.device)
                g, z = generate_gradient_with_logits(model, chunk)
                grads.append(g.cpu())
                logits.append(z.cpu())
            arrays[side] = stacked
            arrays[f"gradients/{side}"] = torch.cat(grads)
            arrays[f"logits/{side}"] = torch.cat(logits)
    else:
        C, H, W = images.image_shape
        empty = torch.zeros(0, C, H, W)
        arrays = {k: empty.clone() for k in ARRAY_KEYS if not k.startswith("logits")}
        arrays["logits/original"] = torch.zeros(0, model.num_classes)
        arrays["logits/adversarial"] = torch.zeros(0, model.num_classes)
    return AdversarialArchive(
        attack=cfg,
        classifier_checksum=model.checksum(),
        records=[r.to_metadata() for r in successful],
        arrays=arrays,
        summary=result.summary(),
    )


def load_archive(directory: Path, *, check: bool = True) -> AdversarialArchive:
    """Read an archive; with ``check`` the count/consistency checks must pass."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_FILENAME
    arrays_path = directory / ARRAYS_FILENAME
    if not manifest_path.is_file() or not arrays_path.is_file():
        raise ArchiveError(f"no archive at {directory}")
    try:
        manifest = toml.load(manifest_path)
        with np.load(arrays_path, allow_pickle=False) as data:
            arrays = {key: torch.from_numpy(np.array(data[key])) for key in data.files}
    except (OSError, ValueError, EOFError, zipfile.BadZipFile, toml.TomlDecodeError) as exc:
        raise ArchiveError(f"corrupt archive at {directory}: {exc}") from exc
    header = dict(manifest.get("archive", {}))
    archive = AdversarialArchive(
        attack=AttackConfig.from_dict(manifest.get("attack", {"name": header.get("attack_name", "")})),
        classifier_checksum=header.pop("classifier_checksum", ""),
        created=header.pop("created", ""),
        records=list(manifest.get("records", [])),
        arrays=arrays,
        summary={k: v for k, v in header.items() if k not in ("format_version", "attack_name")},
    )
    if check:
        found = archive.problems()
        if found:
            raise ArchiveError(f"archive {directory} is inconsistent: " + "; ".join(found))
    return archive


def verify_archive(directory: Path, model: ClassifierHandle | None = None) -> list[str]:
    """List every problem with an archive (empty list when it is sound)."""
    try:
        archive = load_archive(directory, check=False)
    except ArchiveError as exc:
        return [str(exc)]
    found = archive.problems()
    if model is not None and not found:
        if archive.classifier_checksum != model.checksum():
            found.append("classifier checksum does not match the configured classifier")
        elif len(archive):
            adversarial = archive.arrays["adversarial"].to(model.device)
            fresh = model.predict(adversarial).cpu()
            stored = torch.tensor([r["adv_label"] for r in archive.records])
            orig = torch.tensor([r["orig_label"] for r in archive.records])
            if not torch.equal(fresh, stored):
                found.append("stored adversarial labels do not re-verify on a fresh forward pass")
            if (fresh == orig).any():
                found.append("some archived adversarials no longer fool the classifier")
    return found
