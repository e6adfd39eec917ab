"""Experiment configuration stored in confdetect.toml."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import toml

from confdetect.attacks import AttackConfig, list_attacks
from confdetect.classifiers import ClassifierSpec, ClassifierTrainConfig
from confdetect.datasets import DatasetSpec
from confdetect.detector import VARIANTS, SubnetworkConfig
from confdetect.errors import ConfigError
from confdetect.training import TrainConfig
from confdetect.utils import canonical_hash, sanitize_name

CONFIG_FILENAME = "confdetect.toml"

STAGES = ("data", "classifier", "attack", "train", "eval", "adaptive")
STAGE_INDEX = {stage: i for i, stage in enumerate(STAGES)}

CONFIDENCE_KINDS = ("logit", "probability")

_SECTIONS = ("experiment", "dataset", "classifier", "attacks", "detector", "training", "evaluation")


def stage_seed(master: int, stage: str) -> int:
    """Per-stage seed derived from the master seed."""
    return (master * 1_000_003 + STAGE_INDEX[stage]) % 2**31


@dataclass
class EvaluationConfig:
    heatmap_attacks: list[str] = field(default_factory=lambda: ["pgd", "cw", "ddn"])
    ablation_attacks: list[str] = field(default_factory=lambda: ["cw", "ddn"])
    adaptive_images: int = 500
    confidence_kind: str = "logit"
    histogram_bins: int = 50

    def problems(self) -> list[str]:
        found: list[str] = []
        if self.confidence_kind not in CONFIDENCE_KINDS:
            found.append(f"evaluation.confidence_kind must be one of {', '.join(CONFIDENCE_KINDS)}")
        if self.adaptive_images < 1:
            found.append("evaluation.adaptive_images must be positive")
        if self.histogram_bins < 1:
            found.append("evaluation.histogram_bins must be positive")
        return found


def default_attacks() -> list[AttackConfig]:
    return [AttackConfig.for_attack(name) for name in ("pgd", "cw", "ddn")]


def _strict(
    section: str, data: Any, allowed: set[str], problems: list[str], *, table: bool = True
) -> dict[str, Any]:
    """Return ``data`` as a dict after recording every unknown key under its dotted path."""
    if not isinstance(data, dict):
        if table:
            problems.append(f"[{section}] must be a table")
        return {}
    for key in sorted(set(data) - allowed):
        problems.append(f"unknown config key '{section}.{key}'")
    return {k: v for k, v in data.items() if k in allowed}


def _names(cls: type) -> set[str]:
    return {f.name for f in fields(cls)}


def _build(section: str, cls: type, values: dict[str, Any], problems: list[str]) -> Any:
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        problems.append(f"[{section}] {exc}")
        return cls()


@dataclass
class ExperimentConfig:
    """Everything one experiment needs; stage seeds derive from ``seed``."""

    seed: int = 0
    output_root: str = "output"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)
    classifier_training: ClassifierTrainConfig = field(default_factory=ClassifierTrainConfig)
    attacks: list[AttackConfig] = field(default_factory=default_attacks)
    variant: str = "full"
    detector_attacks: list[str] = field(default_factory=lambda: ["pgd"])
    network: SubnetworkConfig = field(default_factory=SubnetworkConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    source: Path | None = None

    def __post_init__(self) -> None:
        self._propagate_seeds()

    def _propagate_seeds(self) -> None:
        self.classifier_training.seed = stage_seed(self.seed, "classifier")
        self.training.seed = stage_seed(self.seed, "train")
        for attack in self.attacks:
            attack.seed = stage_seed(self.seed, "attack")

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        # Stage seeds derive from the master seed and are never written back
        classifier_training = asdict(self.classifier_training)
        classifier_training.pop("seed")
        training = self.training.to_dict()
        training.pop("seed")
        return {
            "experiment": {"seed": self.seed, "output_root": self.output_root},
            "dataset": self.dataset.to_dict(),
            "classifier": {**self.classifier.to_dict(), **classifier_training},
            "attacks": [{k: v for k, v in a.to_dict().items() if k != "seed"} for a in self.attacks],
            "detector": {
                "variant": self.variant,
                "attacks": list(self.detector_attacks),
                "network": self.network.to_dict(),
            },
            "training": training,
            "evaluation": asdict(self.evaluation),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], source: Path | None = None) -> ExperimentConfig:
        """Parse and validate; every problem is collected before one ``ConfigError``."""
        problems: list[str] = []
        for key in sorted(set(data) - set(_SECTIONS)):
            problems.append(f"unknown config section '{key}'")

        experiment = _strict("experiment", data.get("experiment", {}), {"seed", "output_root"}, problems)
        dataset = _build(
            "dataset", DatasetSpec, _strict("dataset", data.get("dataset", {}), _names(DatasetSpec), problems), problems
        )

        classifier_data = _strict(
            "classifier",
            data.get("classifier", {}),
            _names(ClassifierSpec) | (_names(ClassifierTrainConfig) - {"seed"}),
            problems,
        )
        spec_keys = _names(ClassifierSpec)
        classifier = _build(
            "classifier", ClassifierSpec, {k: v for k, v in classifier_data.items() if k in spec_keys}, problems
        )
        classifier_training = _build(
            "classifier",
            ClassifierTrainConfig,
            {k: v for k, v in classifier_data.items() if k not in spec_keys},
            problems,
        )

        attacks: list[AttackConfig] = []
        raw_attacks = data.get("attacks")
        if raw_attacks is None:
            attacks = default_attacks()
        elif not isinstance(raw_attacks, list):
            problems.append("[[attacks]] must be an array of tables")
        else:
            for i, entry in enumerate(raw_attacks):
                entry = _strict(f"attacks[{i}]", entry, _names(AttackConfig) - {"seed"}, problems)
                try:
                    attacks.append(AttackConfig.from_dict(entry))
                except (ConfigError, TypeError) as exc:
                    problems.append(f"attacks[{i}]: {exc}")

        detector_data = _strict("detector", data.get("detector", {}), {"variant", "attacks", "network"}, problems)
        network = _build(
            "detector.network",
            SubnetworkConfig,
            _strict("detector.network", detector_data.get("network", {}), _names(SubnetworkConfig), problems),
            problems,
        )
        training = _build(
            "training",
            TrainConfig,
            _strict("training", data.get("training", {}), _names(TrainConfig) - {"seed"}, problems),
            problems,
        )
        evaluation = _build(
            "evaluation",
            EvaluationConfig,
            _strict("evaluation", data.get("evaluation", {}), _names(EvaluationConfig), problems),
            problems,
        )

        config = cls(
            seed=int(experiment.get("seed", 0)),
            output_root=str(experiment.get("output_root", "output")),
            dataset=dataset,
            classifier=classifier,
            classifier_training=classifier_training,
            attacks=attacks,
            variant=str(detector_data.get("variant", "full")),
            detector_attacks=list(detector_data.get("attacks", ["pgd"])),
            network=network,
            training=training,
            evaluation=evaluation,
            source=source,
        )
        problems.extend(config.problems())
        if problems:
            raise ConfigError(problems)
        return config

    def problems(self) -> list[str]:
        found: list[str] = []
        found.extend(self.dataset.problems())
        found.extend(self.classifier.problems())
        expected_shape = [3, self.dataset.image_size, self.dataset.image_size]
        if list(self.classifier.input_size) != expected_shape:
            msg = f"classifier.input_size {self.classifier.input_size} does not match the dataset {expected_shape}"
            found.append(msg)
        if self.classifier.num_classes != self.dataset.num_classes:
            found.append("classifier.num_classes does not match dataset.num_classes")
        registered = set(list_attacks())
        names = [a.name for a in self.attacks]
        for attack in self.attacks:
            if attack.name not in registered:
                found.append(f"attack '{attack.name}' is not registered (known: {', '.join(sorted(registered))})")
            found.extend(attack.problems())
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            found.append(f"attacks configured more than once: {', '.join(duplicates)}")
        if self.variant not in VARIANTS:
            found.append(f"detector.variant must be one of {', '.join(VARIANTS)}, got '{self.variant}'")
        if not self.detector_attacks:
            found.append("detector.attacks must name at least one attack")
        for section, referenced in (
            ("detector.attacks", self.detector_attacks),
            ("evaluation.heatmap_attacks", self.evaluation.heatmap_attacks),
            ("evaluation.ablation_attacks", self.evaluation.ablation_attacks),
        ):
            unknown = [n for n in referenced if n not in names]
            if unknown:
                found.append(f"{section} names attacks that are not configured: {', '.join(unknown)}")
        found.extend(self.network.problems())
        found.extend(self.training.problems())
        found.extend(self.evaluation.problems())
        if self.classifier.checkpoint and not Path(self.classifier.checkpoint).exists():
            found.append(f"classifier.checkpoint '{self.classifier.checkpoint}' does not exist")
        if self.training.init_from and not Path(self.training.init_from).exists():
            found.append(f"training.init_from '{self.training.init_from}' does not exist")
        return found

    def validate(self) -> None:
        found = self.problems()
        if found:
            raise ConfigError(found)

    def save(self, path: Path) -> Path:
        """Save configuration to ``path`` (a directory or a file name)."""
        config_path = path / CONFIG_FILENAME if path.is_dir() else path
        with open(config_path, "w") as f:
            toml.dump(self.to_dict(), f)
        return config_path

    @classmethod
    def load(cls, path: Path | None = None) -> ExperimentConfig:
        """Load configuration from confdetect.toml, searching upward from path."""
        if path is None:
            path = Path.cwd()
        config_path = find_config(path)
        if config_path is None:
            msg = f"No {CONFIG_FILENAME} found in {path} or any parent directory. Pass --config PATH."
            raise ConfigError(msg)
        return cls.load_from(config_path)

    @classmethod
    def load_from(cls, config_path: Path) -> ExperimentConfig:
        """Load configuration from a specific file."""
        try:
            with open(config_path) as f:
                data = toml.load(f)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {config_path} does not exist") from exc
        except toml.TomlDecodeError as exc:
            raise ConfigError(f"config file {config_path} is not valid TOML: {exc}") from exc
        return cls.from_dict(data, source=Path(config_path))

    # -- derived values ----------------------------------------------------

    def with_overrides(self, *, seed: int | None = None, output_root: str | None = None) -> ExperimentConfig:
        updated = replace(
            self,
            seed=self.seed if seed is None else seed,
            output_root=self.output_root if output_root is None else output_root,
            classifier_training=replace(self.classifier_training),
            training=replace(self.training),
            attacks=[replace(a) for a in self.attacks],
        )
        return updated

    def config_hash(self) -> str:
        return canonical_hash(self.to_dict())

    def stage_seed(self, stage: str) -> int:
        return stage_seed(self.seed, stage)

    def attack(self, name: str) -> AttackConfig:
        """The configured attack ``name`` (published defaults when not configured)."""
        for attack in self.attacks:
            if attack.name == name:
                return attack
        return AttackConfig.for_attack(name, seed=self.stage_seed("attack"))

    @property
    def root(self) -> Path:
        return Path(self.output_root)

    @property
    def classifier_dir(self) -> Path:
        return Path(self.classifier.checkpoint) if self.classifier.checkpoint else self.root / "classifier"

    def archive_dir(self, attack: str) -> Path:
        return self.root / "archives" / sanitize_name(attack)

    def detector_dir(self, variant: str | None = None, attacks: list[str] | None = None) -> Path:
        variant = variant or self.variant
        trained_on = "+".join(attacks or self.detector_attacks)
        return self.root / "detectors" / f"{variant}-{trained_on}"


def find_config(start: Path | None = None) -> Path | None:
    """Find confdetect.toml by searching upward from start directory."""
    if start is None:
        start = Path.cwd()

    current = start.resolve()
    while True:
        config_path = current / CONFIG_FILENAME
        if config_path.exists():
            return config_path
        parent = current.parent
        if parent == current:
            return None
        current = parent
