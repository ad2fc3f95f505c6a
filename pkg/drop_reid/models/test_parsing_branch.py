import pytest
import torch

from drop_reid.config import DPUConfig, PositionEncodingConfig
from drop_reid.models.backbone import FeaturePyramid
from drop_reid.models.parsing_branch import (DetailPreservingUpsample, ParsingBranch, PositionEncoder,
                                             build_coordinate_map, detail_preserving_upsample,
                                             make_parsing_prediction, parse, position_embedding)

CHANNELS = [8, 16, 32, 64]


def random_pyramid(batch=2, h1=16, w1=8, channels=CHANNELS):
    return FeaturePyramid([torch.randn(batch, c, h1 >> i, w1 >> i) for i, c in enumerate(channels)])


@pytest.mark.parametrize("mode", ["cascade", "direct"])
def test_dpu_output_at_stage_one_resolution(mode):
    dpu = DetailPreservingUpsample(CHANNELS, DPUConfig(reduced_channels=8, fusion_mode=mode))
    out = detail_preserving_upsample(random_pyramid(), dpu)
    assert out.shape == (2, 8, 16, 8)


def test_default_scale_dpu_shape():
    pyramid = random_pyramid(batch=1, h1=64, w1=32, channels=[32, 64, 128, 256])
    dpu = DetailPreservingUpsample([32, 64, 128, 256], DPUConfig(reduced_channels=32))
    assert dpu(pyramid).shape == (1, 32, 64, 32)


@pytest.mark.parametrize("mode", ["cascade", "direct"])
def test_zero_pyramid_gives_zero_output(mode):
    dpu = DetailPreservingUpsample(CHANNELS, DPUConfig(reduced_channels=8, fusion_mode=mode)).eval()
    pyramid = FeaturePyramid([torch.zeros(1, c, 16 >> i, 8 >> i) for i, c in enumerate(CHANNELS)])
    assert torch.count_nonzero(dpu(pyramid)) == 0


def _bilinear_reference(value, src_h, src_w, dst_h, dst_w, row, col):
    """角点对齐双线性插值的逐像素参考实现（单个非零源像素）"""
    out = torch.zeros(dst_h, dst_w, dtype=torch.float64)
    for y in range(dst_h):
        sy = y * (src_h - 1) / (dst_h - 1) if dst_h > 1 else 0.0
        for x in range(dst_w):
            sx = x * (src_w - 1) / (dst_w - 1) if dst_w > 1 else 0.0
            wy = max(0.0, 1.0 - abs(sy - row))
            wx = max(0.0, 1.0 - abs(sx - col))
            out[y, x] = value * wy * wx
    return out


def test_direct_fusion_one_hot_matches_bilinear_oracle():
    h1, w1 = 16, 8
    reduced = [torch.zeros(1, 1, h1 >> i, w1 >> i, dtype=torch.float64) for i in range(4)]
    reduced[3][0, 0, 0, 0] = 1.0
    out = DetailPreservingUpsample.fuse(reduced, "direct")[0, 0]
    expected = _bilinear_reference(1.0, h1 >> 3, w1 >> 3, h1, w1, 0, 0)
    assert torch.allclose(out, expected, atol=1e-12)


def test_fusion_output_shape_independent_of_mode():
    reduced = [torch.randn(1, 4, 16 >> i, 8 >> i) for i in range(4)]
    assert DetailPreservingUpsample.fuse(reduced, "cascade").shape == \
        DetailPreservingUpsample.fuse(reduced, "direct").shape


def test_coordinate_rows():
    coords = build_coordinate_map(4, 3, "1d_height")
    assert coords.shape == (1, 4, 3)
    assert torch.allclose(coords[0, :, 0], torch.tensor([0.0, 1 / 3, 2 / 3, 1.0]))
    assert torch.equal(coords[0, :, 0], coords[0, :, 2])


def test_degenerate_height_coordinate_is_zero():
    assert torch.count_nonzero(build_coordinate_map(1, 5, "2d")[0]) == 0


def test_position_none_is_zero():
    encoder = PositionEncoder(PositionEncodingConfig(mode="none"), 8)
    emb = position_embedding(16, 8, encoder)
    assert emb.shape == (8, 16, 8) and torch.count_nonzero(emb) == 0


def test_1d_position_constant_along_width():
    torch.manual_seed(0)
    encoder = PositionEncoder(PositionEncodingConfig(mode="1d_height"), 8)
    for module in encoder.modules():
        if isinstance(module, torch.nn.Conv2d):
            torch.nn.init.normal_(module.weight)
    emb = encoder(16, 8)
    assert torch.allclose(emb, emb[:, :, :1].expand_as(emb), atol=1e-6)


def test_2d_position_varies_along_width():
    torch.manual_seed(0)
    emb = PositionEncoder(PositionEncodingConfig(mode="2d"), 8)(16, 8)
    assert not torch.allclose(emb, emb[:, :, :1].expand_as(emb))


def test_uniform_logits_all_parts_invisible():
    logits = torch.zeros(1, 9, 4, 2)
    pred = make_parsing_prediction(logits, 0.4)
    assert torch.allclose(pred.part_probs, torch.full_like(pred.part_probs, 1 / 9))
    assert torch.allclose(pred.visibility_scores, torch.full((1, 8), 1 / 9))
    assert not pred.visibility.any()


def test_crafted_logit_makes_one_part_visible():
    # 像素 (0,0) 上部件 3 的概率 0.41，其余类别均分剩余概率
    k = 8
    rest = (1 - 0.41) / k
    probs = torch.full((1, k + 1, 2, 2), 1 / (k + 1))
    probs[0, :, 0, 0] = rest
    probs[0, 3, 0, 0] = 0.41
    pred = make_parsing_prediction(probs.log(), 0.4)
    assert pred.visibility[0, 2].item()
    assert pred.visibility.sum() == 1


def test_probabilities_sum_to_one_and_foreground_is_max():
    torch.manual_seed(0)
    for _ in range(20):
        pred = make_parsing_prediction(torch.randn(2, 6, 5, 3) * 4)
        assert torch.allclose(pred.part_probs.sum(dim=1), torch.ones(2, 5, 3), atol=1e-5)
        assert torch.allclose(pred.foreground, pred.part_probs[:, 1:].max(dim=1).values, atol=1e-6)
        assert torch.equal(pred.visibility, pred.visibility_scores > 0.4)


def test_parse_output_channels():
    branch = ParsingBranch(CHANNELS, DPUConfig(reduced_channels=8), PositionEncodingConfig(), num_parts=8)
    pred = parse(random_pyramid(), branch)
    assert pred.part_probs.shape == (2, 9, 16, 8)
    assert pred.visibility.shape == (2, 8)


def test_parse_without_position_is_pure_function_of_pyramid():
    branch = ParsingBranch(CHANNELS, DPUConfig(reduced_channels=8), PositionEncodingConfig(mode="none"),
                           num_parts=4).eval()
    pyramid = random_pyramid()
    assert torch.equal(branch(pyramid).logits, branch(pyramid).logits)
    assert branch.ppe.encoder is None


def test_coupled_branch_reads_shared_features():
    branch = ParsingBranch(CHANNELS, DPUConfig(reduced_channels=8), PositionEncodingConfig(),
                           num_parts=4, decouple=False)
    pyramid = random_pyramid()
    p_reid = torch.randn(2, sum(CHANNELS[1:]), 8, 4)
    assert branch.dpu is None
    assert branch(pyramid, p_reid=p_reid).part_probs.shape == (2, 5, 16, 8)


def test_parsing_loss_gradients_match_finite_differences():
    from drop_reid.losses import parsing_loss

    torch.manual_seed(0)
    channels = [2, 3, 4, 5]
    branch = ParsingBranch(channels, DPUConfig(reduced_channels=2), PositionEncodingConfig(mode="1d_height"),
                           num_parts=2).double().eval()
    sizes = [(4, 2), (2, 1), (1, 1), (1, 1)]
    pyramid = FeaturePyramid([torch.randn(1, c, h, w, dtype=torch.float64)
                              for c, (h, w) in zip(channels, sizes)])
    gt = torch.tensor([[[0, 1], [1, 2], [2, 2], [0, 0]]])

    def loss_fn():
        return parsing_loss(branch(pyramid).part_probs, gt, epsilon=0.1, gamma=0.5)

    params = [p for p in branch.parameters() if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    h = 1e-6
    for param, grad in zip(params, grads):
        flat = param.data.view(-1)
        for i in range(min(flat.numel(), 6)):
            original = flat[i].item()
            flat[i] = original + h
            plus = loss_fn().item()
            flat[i] = original - h
            minus = loss_fn().item()
            flat[i] = original
            numeric = (plus - minus) / (2 * h)
            analytic = grad.view(-1)[i].item()
            assert abs(numeric - analytic) <= 1e-3 * max(1e-6, abs(numeric), abs(analytic)) + 1e-8
