"""Two-stream detection network, global covariance pooling and the score fuser.

The image stream looks for pixel artifacts, the gradient stream for confidence
artifacts. Both streams share one architecture (never weights):

    stem 5x5 conv + BN + ReLU            (no pooling)
    residual blocks, strided downsampling (no average pooling)
    GCP (or GAP for the ablation)
    bias-free FC -> 2 logits

Their 2-class logits are summed to give the fused score.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import torch
import torch.nn.functional as F
from torch import nn

from confdetect.errors import ConfigError, InvalidInputError, NumericError, PreconditionError

logger = logging.getLogger(__name__)

POOLINGS = ("gcp", "gap")

# "full" is the complete two-stream detector; the rest are its ablations
VARIANTS = ("full", "image_only", "gradient_only", "gap", "no_shortcut", "logits_fc")

CLEAN, ADVERSARIAL = 0, 1


@dataclass
class SubnetworkConfig:
    """Architecture of one detector stream."""

    in_channels: int = 3
    stem_kernel: int = 5
    stem_channels: int = 32
    block_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    use_shortcuts: bool = True
    pooling: str = "gcp"
    gcp_normalize: bool = True
    newton_schulz_steps: int = 5
    num_classes: int = 2

    def problems(self) -> list[str]:
        found: list[str] = []
        if self.stem_kernel < 1 or self.stem_kernel % 2 == 0:
            found.append(f"stem_kernel must be a positive odd integer, got {self.stem_kernel}")
        if not self.block_channels:
            found.append("block_channels must not be empty")
        if any(c < 1 for c in self.block_channels):
            found.append("block_channels entries must be positive")
        if self.pooling not in POOLINGS:
            found.append(f"pooling must be one of {', '.join(POOLINGS)}, got '{self.pooling}'")
        if self.num_classes != 2:
            found.append(f"num_classes is fixed to 2 for a detector, got {self.num_classes}")
        if self.newton_schulz_steps < 1:
            found.append("newton_schulz_steps must be at least 1")
        if self.in_channels < 1 or self.stem_channels < 1:
            found.append("in_channels and stem_channels must be positive")
        return found

    def validate(self) -> None:
        found = self.problems()
        if found:
            raise ConfigError(found)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SubnetworkConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown network key '{k}'" for k in unknown])
        values = dict(data)
        if "block_channels" in values:
            values["block_channels"] = [int(c) for c in values["block_channels"]]
        return cls(**values)


# ---------------------------------------------------------------------------
# Global covariance pooling
# ---------------------------------------------------------------------------


def _newton_schulz_sqrt(cov: torch.Tensor, steps: int) -> torch.Tensor:
    """Approximate matrix square root of a batch of SPD matrices.

    Pre-scales by the trace so the iteration converges, then compensates
    by sqrt(trace). A zero matrix maps to zero.
    """
    N, C, _ = cov.shape
    eye = torch.eye(C, dtype=cov.dtype, device=cov.device).expand(N, C, C)
    trace = cov.diagonal(dim1=1, dim2=2).sum(dim=1).view(N, 1, 1)
    scale = trace.clamp_min(torch.finfo(cov.dtype).tiny)
    y = cov / scale
    z = eye
    for _ in range(steps):
        t = 0.5 * (3.0 * eye - z.bmm(y))
        y = y.bmm(t)
        z = t.bmm(z)
    return y * scale.sqrt()


def gcp_pool(features: torch.Tensor, *, normalize: bool = True, steps: int = 5) -> torch.Tensor:
    """Global covariance pooling: ``[N, C, H, W] -> [N, C(C+1)/2]``.

    Per sample the channels are centred over spatial positions, their covariance
    is square-root normalized (optional) and the upper triangle, diagonal
    included, is returned row by row.
    """
    if features.ndim != 4:
        raise InvalidInputError(f"features must be [N, C, H, W], got {tuple(features.shape)}")
    N, C, H, W = features.shape
    M = H * W
    if M < 2:
        msg = f"covariance pooling needs at least two spatial positions, got {H}x{W}"
        raise InvalidInputError(msg)
    x = features.reshape(N, C, M)
    centred = x - x.mean(dim=2, keepdim=True)
    cov = centred.bmm(centred.transpose(1, 2)) / (M - 1)
    if normalize:
        cov = _newton_schulz_sqrt(cov, steps)
    rows, cols = torch.triu_indices(C, C, device=features.device)
    return cov[:, rows, cols]


def triangle_to_matrix(triangle: torch.Tensor, channels: int) -> torch.Tensor:
    """Rebuild the symmetric ``[N, C, C]`` matrices from ``gcp_pool`` output."""
    N = triangle.shape[0]
    rows, cols = torch.triu_indices(channels, channels, device=triangle.device)
    full = triangle.new_zeros(N, channels, channels)
    full[:, rows, cols] = triangle
    full[:, cols, rows] = triangle
    return full


class CovariancePooling(nn.Module):
    def __init__(self, normalize: bool = True, steps: int = 5) -> None:
        super().__init__()
        self.normalize = normalize
        self.steps = steps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return gcp_pool(x, normalize=self.normalize, steps=self.steps)


# ---------------------------------------------------------------------------
# Stream network
# ---------------------------------------------------------------------------


class ResidualBlock(nn.Module):
    """Two 3x3 conv + BN, identity or 1x1-projection shortcut, strided downsampling."""

    def __init__(self, in_channels: int, out_channels: int, stride: int, use_shortcut: bool) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.shortcut: nn.Module | None = None
        if use_shortcut:
            if stride != 1 or in_channels != out_channels:
                self.shortcut = nn.Sequential(
                    nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                    nn.BatchNorm2d(out_channels),
                )
            else:
                self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        if self.shortcut is not None:
            out = out + self.shortcut(x)
        return F.relu(out)


class StreamNetwork(nn.Module):
    """One detector stream: ``[N, C, H, W] -> [N, 2]``."""

    def __init__(self, cfg: SubnetworkConfig) -> None:
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, cfg.stem_channels, cfg.stem_kernel, padding=cfg.stem_kernel // 2, bias=False),
            nn.BatchNorm2d(cfg.stem_channels),
            nn.ReLU(),
        )
        blocks: list[nn.Module] = []
        in_channels = cfg.stem_channels
        for i, out_channels in enumerate(cfg.block_channels):
            stride = 1 if i == 0 else 2
            blocks.append(ResidualBlock(in_channels, out_channels, stride, cfg.use_shortcuts))
            in_channels = out_channels
        self.blocks = nn.Sequential(*blocks)
        last = cfg.block_channels[-1]
        if cfg.pooling == "gcp":
            self.pool: nn.Module = CovariancePooling(cfg.gcp_normalize, cfg.newton_schulz_steps)
            pooled = last * (last + 1) // 2
        else:
            self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten())
            pooled = last
        self.fc = nn.Linear(pooled, cfg.num_classes, bias=False)
        nn.init.xavier_uniform_(self.fc.weight)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-pooling feature maps."""
        return self.blocks(self.stem(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.pool(self.features(x)))


def build_subnetwork(cfg: SubnetworkConfig) -> StreamNetwork:
    return StreamNetwork(cfg)


def layer_census(module: nn.Module) -> dict[str, int]:
    """Count residual add junctions and average-pooling operators before the head.

    ``avg_pools_before_head`` only counts pools outside a stream's final
    ``pool`` stage.
    """
    residual_adds = 0
    avg_pools = 0
    head_pools: set[int] = set()
    for sub in module.modules():
        if isinstance(sub, StreamNetwork):
            head_pools.update(id(m) for m in sub.pool.modules())
    for sub in module.modules():
        if isinstance(sub, ResidualBlock) and sub.shortcut is not None:
            residual_adds += 1
        if isinstance(sub, nn.AvgPool2d | nn.AdaptiveAvgPool2d) and id(sub) not in head_pools:
            avg_pools += 1
    return {"residual_adds": residual_adds, "avg_pools_before_head": avg_pools}


def set_bn_momentum(module: nn.Module, momentum: float) -> None:
    """Running stats become ``(1 - momentum) * old + momentum * batch``."""
    for sub in module.modules():
        if isinstance(sub, nn.modules.batchnorm._BatchNorm):
            sub.momentum = momentum


# ---------------------------------------------------------------------------
# Score fusion and detectors
# ---------------------------------------------------------------------------


@dataclass
class DetectorScore:
    """Per-stream and fused 2-class logits for a batch (``[N, 2]`` each)."""

    z_image: torch.Tensor
    z_gradient: torch.Tensor
    z_fused: torch.Tensor

    @property
    def labels(self) -> torch.Tensor:
        """1 = adversarial; ties resolve to clean (index 0)."""
        return self.z_fused.argmax(dim=-1)

    def __len__(self) -> int:
        return int(self.z_fused.shape[0])


def fuse_scores(z_image: torch.Tensor, z_gradient: torch.Tensor) -> DetectorScore:
    """Additive score fusion ``z' = z_I + z_G``."""
    if z_image.shape != z_gradient.shape or z_image.shape[-1] != 2:
        msg = f"stream scores must both be [..., 2], got {tuple(z_image.shape)} and {tuple(z_gradient.shape)}"
        raise InvalidInputError(msg)
    if not (torch.isfinite(z_image).all() and torch.isfinite(z_gradient).all()):
        raise NumericError("non-finite stream score")
    return DetectorScore(z_image=z_image, z_gradient=z_gradient, z_fused=z_image + z_gradient)


class TwoStreamDetector(nn.Module):
    """Image stream + gradient stream with additive fusion.

    Either stream can be absent (stream ablations); an absent stream scores zeros.
    """

    def __init__(self, cfg: SubnetworkConfig, *, image_stream: bool = True, gradient_stream: bool = True) -> None:
        super().__init__()
        if not (image_stream or gradient_stream):
            raise ConfigError("a detector needs at least one stream")
        self.cfg = cfg
        self.image_stream = build_subnetwork(cfg) if image_stream else None
        self.gradient_stream = build_subnetwork(cfg) if gradient_stream else None

    def score(
        self, images: torch.Tensor, gradients: torch.Tensor, logits: torch.Tensor | None = None
    ) -> DetectorScore:
        N = images.shape[0]
        zeros = images.new_zeros(N, 2)
        z_image = self.image_stream(images) if self.image_stream is not None else zeros
        z_gradient = self.gradient_stream(gradients) if self.gradient_stream is not None else zeros
        return fuse_scores(z_image, z_gradient)

    def forward(
        self, images: torch.Tensor, gradients: torch.Tensor, logits: torch.Tensor | None = None
    ) -> torch.Tensor:
        return self.score(images, gradients, logits).z_fused


class LogitsDetector(nn.Module):
    """Baseline reading only the classifier logits: n -> 512 -> 32 -> 2."""

    def __init__(self, num_classes: int) -> None:
        super().__init__()
        self.num_classes = num_classes
        self.mlp = nn.Sequential(
            nn.Linear(num_classes, 512),
            nn.ReLU(),
            nn.Linear(512, 32),
            nn.ReLU(),
            nn.Linear(32, 2),
        )

    def score(
        self, images: torch.Tensor, gradients: torch.Tensor, logits: torch.Tensor | None = None
    ) -> DetectorScore:
        if logits is None:
            raise InvalidInputError("the logits baseline needs classifier logits")
        z = self.mlp(logits)
        return fuse_scores(z, torch.zeros_like(z))

    def forward(
        self, images: torch.Tensor, gradients: torch.Tensor, logits: torch.Tensor | None = None
    ) -> torch.Tensor:
        return self.score(images, gradients, logits).z_fused


def build_logits_fc_baseline(num_classes: int) -> LogitsDetector:
    if num_classes < 2:
        raise ConfigError(f"classifier class count must be at least 2, got {num_classes}")
    return LogitsDetector(num_classes)


Detector = TwoStreamDetector | LogitsDetector


def build_detector(variant: str, cfg: SubnetworkConfig | None = None, num_classes: int = 10) -> Detector:
    """Construct the full detector or one of its ablation variants."""
    cfg = cfg or SubnetworkConfig()
    if variant not in VARIANTS:
        msg = f"Invalid detector variant '{variant}'. Must be one of: {', '.join(VARIANTS)}"
        raise ConfigError(msg)
    if variant == "logits_fc":
        return build_logits_fc_baseline(num_classes)
    if variant == "gap":
        cfg = SubnetworkConfig(**{**cfg.to_dict(), "pooling": "gap"})
    elif variant == "no_shortcut":
        cfg = SubnetworkConfig(**{**cfg.to_dict(), "use_shortcuts": False})
    return TwoStreamDetector(
        cfg,
        image_stream=variant != "gradient_only",
        gradient_stream=variant != "image_only",
    )


def detect(
    detector: Detector,
    images: torch.Tensor,
    gradients: torch.Tensor,
    logits: torch.Tensor | None = None,
) -> tuple[DetectorScore, torch.Tensor]:
    """Score a batch and return ``(scores, decisions)``; 1 means adversarial."""
    if detector.training:
        raise PreconditionError("detector must be in evaluation mode; call .eval() first")
    if images.shape != gradients.shape:
        msg = f"images {tuple(images.shape)} and gradients {tuple(gradients.shape)} must align"
        raise InvalidInputError(msg)
    if logits is not None and logits.shape[0] != images.shape[0]:
        raise InvalidInputError("logits batch size does not match images")
    with torch.no_grad():
        score = detector.score(images, gradients, logits)
    return score, score.labels
