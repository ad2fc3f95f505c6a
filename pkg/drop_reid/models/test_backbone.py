import pytest
import torch

from drop_reid.config import BackboneConfig
from drop_reid.errors import ConfigError
from drop_reid.models.backbone import Backbone, forward_backbone


def test_default_scale_stage_sizes():
    config = BackboneConfig(input_height=256, input_width=128, stem_stride=4)
    assert config.stage_sizes() == [(64, 32), (32, 16), (16, 8), (8, 4)]


def test_desk_scale_pyramid_shapes():
    config = BackboneConfig(input_height=64, input_width=32, stage_channels=[8, 16, 32, 64])
    backbone = Backbone(config).eval()
    pyramid = forward_backbone(torch.rand(3, 64, 32), backbone)
    shapes = [tuple(s.shape[1:]) for s in pyramid.stages]
    assert shapes == [(8, 16, 8), (16, 8, 4), (32, 4, 2), (64, 2, 1)]


@pytest.mark.parametrize("height,width,stride", [(64, 32, 4), (128, 64, 4), (32, 32, 2), (64, 64, 8), (16, 8, 1)])
def test_resolution_contract_sweep(height, width, stride):
    config = BackboneConfig(input_height=height, input_width=width, stem_stride=stride,
                            stage_channels=[8, 16, 32, 64])
    pyramid = Backbone(config).eval()(torch.rand(2, 3, height, width))
    assert pyramid.spatial_sizes == config.stage_sizes()
    for stage, channels in zip(pyramid.stages, config.stage_channels):
        assert stage.shape[1] == channels


def test_zero_image_is_finite():
    config = BackboneConfig(input_height=64, input_width=32, stage_channels=[8, 16, 32, 64])
    pyramid = Backbone(config).eval()(torch.zeros(1, 3, 64, 32))
    assert all(torch.isfinite(s).all() for s in pyramid.stages)


def test_eval_mode_is_deterministic():
    torch.manual_seed(0)
    config = BackboneConfig(input_height=64, input_width=32, stage_channels=[8, 16, 32, 64])
    backbone = Backbone(config).eval()
    image = torch.rand(2, 3, 64, 32)
    first = backbone(image)
    second = backbone(image)
    for a, b in zip(first.stages, second.stages):
        assert torch.equal(a, b)


def test_gradient_reaches_input():
    config = BackboneConfig(input_height=64, input_width=32, stage_channels=[8, 16, 32, 64])
    backbone = Backbone(config)
    image = torch.rand(2, 3, 64, 32, requires_grad=True)
    pyramid = backbone(image)
    sum(s.sum() for s in pyramid.stages).backward()
    assert image.grad.abs().sum() > 0


def test_wrong_input_size_is_config_error():
    config = BackboneConfig(input_height=64, input_width=32, stage_channels=[8, 16, 32, 64])
    with pytest.raises(ConfigError):
        Backbone(config)(torch.rand(1, 3, 32, 32))


@pytest.mark.parametrize("kwargs", [
    {"stage_channels": [16, 16, 32, 64]},
    {"stage_channels": [8, 16, 32]},
    {"input_height": 60},
    {"stem_stride": 3},
])
def test_invalid_backbone_config(kwargs):
    with pytest.raises(ValueError):
        BackboneConfig(**kwargs)
