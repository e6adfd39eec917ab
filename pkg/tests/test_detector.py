"""Tests for the detector streams, covariance pooling and score fusion."""

from __future__ import annotations

import pytest
import torch
import torch.nn.functional as F
from torch import nn

from confdetect.detector import (
    VARIANTS,
    StreamNetwork,
    SubnetworkConfig,
    TwoStreamDetector,
    build_detector,
    detect,
    fuse_scores,
    gcp_pool,
    layer_census,
    set_bn_momentum,
    triangle_to_matrix,
)
from confdetect.errors import ConfigError, InvalidInputError, PreconditionError


def _inputs(n: int = 4, seed: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    generator = torch.Generator().manual_seed(seed)
    images = torch.rand(n, 3, 8, 8, generator=generator)
    gradients = torch.rand(n, 3, 8, 8, generator=generator) * 1e-2
    return images, gradients


def test_fuse_scores_adds_streams() -> None:
    score = fuse_scores(torch.tensor([[1.0, 2.0]]), torch.tensor([[3.0, -1.0]]))
    assert score.z_fused.tolist() == [[4.0, 1.0]]
    assert score.labels.tolist() == [0]


def test_fuse_scores_tie_is_clean() -> None:
    score = fuse_scores(torch.zeros(3, 2), torch.zeros(3, 2))
    assert score.labels.tolist() == [0, 0, 0]


def test_fuse_scores_rejects_mismatched_shapes() -> None:
    with pytest.raises(InvalidInputError):
        fuse_scores(torch.zeros(2, 2), torch.zeros(3, 2))


def test_full_detector_scores_batch(tiny_network: SubnetworkConfig) -> None:
    detector = build_detector("full", tiny_network).eval()
    images, gradients = _inputs()
    score, decisions = detect(detector, images, gradients)
    assert score.z_fused.shape == (4, 2)
    assert score.z_image.shape == score.z_gradient.shape == (4, 2)
    assert set(decisions.tolist()) <= {0, 1}


def test_detect_requires_eval_mode(tiny_network: SubnetworkConfig) -> None:
    detector = build_detector("full", tiny_network)
    images, gradients = _inputs()
    with pytest.raises(PreconditionError, match="evaluation mode"):
        detect(detector, images, gradients)


def test_detect_rejects_misaligned_inputs(tiny_network: SubnetworkConfig) -> None:
    detector = build_detector("full", tiny_network).eval()
    images, gradients = _inputs()
    with pytest.raises(InvalidInputError, match="must align"):
        detect(detector, images, gradients[:2])


def test_streams_share_no_weights(tiny_network: SubnetworkConfig) -> None:
    detector = build_detector("full", tiny_network)
    assert isinstance(detector, TwoStreamDetector)
    image_ptrs = {p.data_ptr() for p in detector.image_stream.parameters()}
    gradient_ptrs = {p.data_ptr() for p in detector.gradient_stream.parameters()}
    assert not image_ptrs & gradient_ptrs


def test_layer_census(tiny_network: SubnetworkConfig) -> None:
    """Each block contributes one residual add per stream; no average pooling before the head."""
    full = layer_census(build_detector("full", tiny_network))
    assert full == {"residual_adds": 4, "avg_pools_before_head": 0}
    assert layer_census(build_detector("no_shortcut", tiny_network))["residual_adds"] == 0
    assert layer_census(build_detector("gap", tiny_network))["avg_pools_before_head"] == 0


def test_head_sizes_for_gap_and_gcp(tiny_network: SubnetworkConfig) -> None:
    """The head sees C features after GAP and C(C+1)/2 after GCP."""
    gcp = build_detector("full", tiny_network)
    gap = build_detector("gap", tiny_network)
    assert gcp.image_stream.fc.weight.shape == (2, 21)
    assert gap.image_stream.fc.weight.shape == (2, 6)
    assert gcp.image_stream.fc.bias is None


def test_gcp_of_constant_maps_is_zero() -> None:
    features = torch.full((2, 3, 4, 4), 0.7, dtype=torch.float64)
    pooled = gcp_pool(features)
    assert pooled.shape == (2, 6)
    assert torch.count_nonzero(pooled) == 0


def test_gcp_single_channel_is_standard_deviation() -> None:
    generator = torch.Generator().manual_seed(1)
    features = torch.randn(3, 1, 5, 5, generator=generator, dtype=torch.float64)
    pooled = gcp_pool(features)
    expected = features.flatten(1).var(dim=1).sqrt()
    assert torch.allclose(pooled[:, 0], expected, rtol=1e-10)
    unnormalized = gcp_pool(features, normalize=False)
    assert torch.allclose(unnormalized[:, 0], features.flatten(1).var(dim=1), rtol=1e-10)


def test_gcp_ignores_spatial_order() -> None:
    generator = torch.Generator().manual_seed(2)
    features = torch.randn(2, 4, 3, 3, generator=generator, dtype=torch.float64)
    perm = torch.randperm(9, generator=generator)
    shuffled = features.flatten(2)[:, :, perm].view_as(features)
    assert torch.allclose(gcp_pool(features), gcp_pool(shuffled), atol=1e-12)


def test_gcp_output_is_positive_semidefinite() -> None:
    generator = torch.Generator().manual_seed(4)
    features = torch.randn(5, 4, 6, 6, generator=generator, dtype=torch.float64)
    for normalize in (False, True):
        matrices = triangle_to_matrix(gcp_pool(features, normalize=normalize), 4)
        assert torch.allclose(matrices, matrices.transpose(1, 2))
        assert (torch.linalg.eigvalsh(matrices) > -1e-8).all()


def test_gcp_square_root_converges() -> None:
    """With enough iterations the normalized covariance squares back to the covariance."""
    generator = torch.Generator().manual_seed(5)
    features = torch.randn(2, 3, 8, 8, generator=generator, dtype=torch.float64)
    root = triangle_to_matrix(gcp_pool(features, steps=40), 3)
    cov = triangle_to_matrix(gcp_pool(features, normalize=False), 3)
    assert torch.allclose(root.bmm(root), cov, atol=1e-8)


def test_gcp_needs_two_positions() -> None:
    with pytest.raises(InvalidInputError, match="two spatial positions"):
        gcp_pool(torch.ones(1, 3, 1, 1))


def test_shortcut_preserves_stem_features_when_convs_are_zero() -> None:
    """With zeroed block convolutions the identity shortcut passes features through."""
    cfg = SubnetworkConfig(stem_channels=4, block_channels=[4])
    stream = StreamNetwork(cfg).eval()
    for block in stream.blocks:
        nn.init.zeros_(block.conv1.weight)
        nn.init.zeros_(block.conv2.weight)
    images, _ = _inputs(2)
    with torch.no_grad():
        assert torch.allclose(stream.features(images), stream.stem(images), atol=1e-6)

    plain = StreamNetwork(SubnetworkConfig(stem_channels=4, block_channels=[4], use_shortcuts=False)).eval()
    for block in plain.blocks:
        nn.init.zeros_(block.conv1.weight)
        nn.init.zeros_(block.conv2.weight)
    with torch.no_grad():
        assert torch.count_nonzero(plain.features(images)) == 0


def test_stream_ablations_ignore_the_missing_input(tiny_network: SubnetworkConfig) -> None:
    images, gradients = _inputs()
    other_images, other_gradients = _inputs(seed=9)

    gradient_only = build_detector("gradient_only", tiny_network).eval()
    a, _ = detect(gradient_only, images, gradients)
    b, _ = detect(gradient_only, other_images, gradients)
    assert torch.equal(a.z_fused, b.z_fused)
    assert torch.count_nonzero(a.z_image) == 0

    image_only = build_detector("image_only", tiny_network).eval()
    c, _ = detect(image_only, images, gradients)
    d, _ = detect(image_only, images, other_gradients)
    assert torch.equal(c.z_fused, d.z_fused)


def test_logits_baseline_shape_and_size() -> None:
    n = 10
    detector = build_detector("logits_fc", num_classes=n).eval()
    expected = n * 512 + 512 + 512 * 32 + 32 + 32 * 2 + 2
    assert sum(p.numel() for p in detector.parameters()) == expected
    images, gradients = _inputs()
    score, _ = detect(detector, images, gradients, torch.randn(4, n))
    assert score.z_fused.shape == (4, 2)
    with pytest.raises(InvalidInputError, match="needs classifier logits"):
        detect(detector, images, gradients)


def test_every_variant_builds(tiny_network: SubnetworkConfig) -> None:
    for variant in VARIANTS:
        assert isinstance(build_detector(variant, tiny_network, num_classes=3), nn.Module)
    with pytest.raises(ConfigError, match="Invalid detector variant"):
        build_detector("three_streams", tiny_network)


def test_network_config_problems() -> None:
    cfg = SubnetworkConfig(stem_kernel=4, block_channels=[], pooling="max", num_classes=3)
    assert len(cfg.problems()) == 4
    with pytest.raises(ConfigError):
        SubnetworkConfig.from_dict({"stem_channels": 8, "depth": 3})


def test_set_bn_momentum(tiny_network: SubnetworkConfig) -> None:
    detector = build_detector("full", tiny_network)
    set_bn_momentum(detector, 0.05)
    momenta = {m.momentum for m in detector.modules() if isinstance(m, nn.BatchNorm2d)}
    assert momenta == {0.05}


def test_detector_loss_matches_central_differences(tiny_network: SubnetworkConfig) -> None:
    """Backprop through both streams, GCP included, agrees with finite differences in float64."""
    torch.manual_seed(0)
    detector = build_detector("full", tiny_network).double().eval()
    images, gradients = (t.double() for t in _inputs(n=2))
    labels = torch.tensor([0, 1])

    def loss(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        return F.cross_entropy(detector(x, g), labels, reduction="sum")

    x = images.clone().requires_grad_(True)
    g = gradients.clone().requires_grad_(True)
    analytic_x, analytic_g = torch.autograd.grad(loss(x, g), (x, g))

    h = 1e-6
    for which, analytic in (("image", analytic_x), ("gradient", analytic_g)):
        index = int(analytic.abs().flatten().argmax())
        step = torch.zeros(images.numel(), dtype=torch.float64)
        step[index] = h
        step = step.view_as(images)
        with torch.no_grad():
            if which == "image":
                numeric = (loss(images + step, gradients) - loss(images - step, gradients)) / (2 * h)
            else:
                numeric = (loss(images, gradients + step) - loss(images, gradients - step)) / (2 * h)
        exact = analytic.flatten()[index]
        assert abs(float(numeric - exact)) / abs(float(exact)) < 1e-3, which
