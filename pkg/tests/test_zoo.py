import json

import pytest
import torch
from torch import nn

from microseg import zoo
from microseg.inference import predict_full
from microseg.profiler import (ProfileReport, UnsupportedLayerError, count_flops, count_params, interpolation_nodes,
                               profile, resampling_calls)
from microseg.unetr import UNETR2D


def meta_build(name, scale="paper"):
    with torch.device("meta"):
        return zoo.build(zoo.variant_spec(name, scale))


# ---------------------------------------------------------------- specs

@pytest.mark.parametrize("name,row", [
    ("SwinS", (4, False, False, 0)),
    ("SwinS_PS2", (2, False, False, 0)),
    ("SwinS_Conv", (4, True, True, 0)),
    ("SwinS_Pyramid", (1, False, True, 2)),
    ("SwinS_TB", (2, True, False, 1)),
    ("SwinS_TB_Skip", (2, True, True, 1)),
])
def test_variant_flags(name, row):
    s = zoo.variant_spec(name)
    assert (s.patch_size, s.deconv_head, s.input_skip, s.extra_stages) == row


@pytest.mark.parametrize("name", zoo.VARIANTS)
def test_tiny_keeps_structural_flags(name):
    paper, tiny = zoo.variant_spec(name), zoo.variant_spec(name, "tiny")
    assert (paper.patch_size, paper.deconv_head, paper.input_skip, paper.extra_stages) == \
           (tiny.patch_size, tiny.deconv_head, tiny.input_skip, tiny.extra_stages)


def test_unknown_variant_lists_names():
    with pytest.raises(ValueError, match="SwinS_TB_Skip"):
        zoo.variant_spec("SwinL")
    with pytest.raises(ValueError):
        zoo.VariantSpec("SwinS", scale="huge")


def test_tb_has_one_same_resolution_stage():
    cfg = zoo.encoder_config(zoo.variant_spec("SwinS_TB"))
    assert [s.dim for s in cfg.stages] == [96, 96, 192, 384, 768]
    assert [s.depth for s in cfg.stages] == [2, 2, 2, 18, 2]
    assert cfg.level_strides == [2, 2, 4, 8, 16]


def test_pyramid_stage_plan():
    cfg = zoo.encoder_config(zoo.variant_spec("SwinS_Pyramid"))
    assert [s.dim for s in cfg.stages] == [24, 48, 96, 192, 384, 768]
    assert [s.heads for s in cfg.stages] == [1, 2, 3, 6, 12, 24]
    assert [s.depth for s in cfg.stages] == [2, 2, 2, 2, 18, 2]
    assert zoo.decoder_config(zoo.variant_spec("SwinS_Pyramid")).head == "pyramid_native"


def test_drop_path_by_scale():
    assert zoo.encoder_config(zoo.variant_spec("SwinS")).drop_path_rate == 0.2
    assert zoo.encoder_config(zoo.variant_spec("SwinS", "tiny")).drop_path_rate == 0.0


# ---------------------------------------------------------------- build / shapes

def test_tiny_swin_s_on_32_pixels():
    model = zoo.build(zoo.variant_spec("SwinS", "tiny"), seed=0).eval()
    out = predict_full(model, torch.randn(3, 32, 32), activation=None)
    assert tuple(out.shape) == (1, 32, 32)


@pytest.mark.parametrize("name", zoo.ABLATION_VARIANTS)
@pytest.mark.parametrize("side", [224, 448])
def test_paper_scale_full_resolution(name, side):
    model = meta_build(name).eval()
    with torch.no_grad():
        out = model(torch.zeros(1, 3, side, side, device="meta"))
    assert tuple(out.shape) == (1, 1, side, side)


@pytest.mark.parametrize("name", ["UNet", "UNETR2D"])
def test_baselines_full_resolution(name):
    model = meta_build(name).eval()
    with torch.no_grad():
        out = model(torch.zeros(1, 3, 224, 224, device="meta"))
    assert tuple(out.shape) == (1, 1, 224, 224)


def test_unetr_base_configuration():
    model = meta_build("UNETR2D")
    assert isinstance(model, UNETR2D)
    assert model.patch == 16 and model.taps == (3, 6, 9, 12)
    assert len(model.layers) == 12 and model.layers[0].attn.heads == 12
    assert model.patch_embed.out_channels == 768


def test_unet_has_five_downsampling_stages():
    model = meta_build("UNet")
    assert sum(isinstance(m, nn.MaxPool2d) for m in model.modules()) == 1
    assert len(model.down) == 6 and model.size_multiple == 32


@pytest.mark.parametrize("name", ["SwinS_TB", "SwinS_TB_Skip", "SwinS_Pyramid", "SwinS_Conv"])
@pytest.mark.parametrize("scale", ["tiny", "paper"])
def test_no_interpolation_in_decoder(name, scale):
    assert interpolation_nodes(meta_build(name, scale), (3, 224, 224)) == []


def test_pyramid_decoder_has_no_head_resampling():
    calls = resampling_calls(meta_build("SwinS_Pyramid"), (3, 224, 224), within="decoder")
    assert all(path.startswith("decoder.fpn") for path, _ in calls)


def test_swin_s_decoder_uses_bilinear_head():
    assert interpolation_nodes(meta_build("SwinS"), (3, 224, 224)) == [("decoder.upsample", "bilinear")]


def test_same_seed_same_weights():
    a = zoo.build(zoo.variant_spec("SwinS_TB_Skip", "tiny"), seed=7).state_dict()
    b = zoo.build(zoo.variant_spec("SwinS_TB_Skip", "tiny"), seed=7).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


# ---------------------------------------------------------------- profiler

def test_dense_layer_params():
    assert count_params(nn.Linear(7, 5)) == 7 * 5 + 5


def test_one_by_one_conv_flops():
    conv = nn.Conv2d(1, 1, 1)
    assert count_flops(conv, (1, 1, 1)) == 2


def test_conv_flop_formula():
    conv = nn.Conv2d(3, 4, 3, padding=1)
    assert count_flops(conv, (3, 10, 10)) == 2 * 9 * 3 * 4 * 100


def test_ps2_param_difference_is_patch_embedding():
    s, ps2 = count_params(meta_build("SwinS")), count_params(meta_build("SwinS_PS2"))
    assert s - ps2 == (16 - 4) * 3 * 96
    assert round(s / 1e6, 0) == round(ps2 / 1e6, 0)


def test_params_independent_of_input():
    model = meta_build("SwinS")
    assert profile(model, (3, 224, 224)).params == profile(model, (3, 448, 448)).params


def test_flops_deterministic():
    model = meta_build("SwinS_TB_Skip")
    assert count_flops(model, (3, 224, 224)) == count_flops(model, (3, 224, 224))


def test_unet_flops_scale_with_pixels():
    model = meta_build("UNet")
    ratio = count_flops(model, (3, 448, 448)) / count_flops(model, (3, 224, 224))
    assert abs(ratio - 4) <= 0.04


def test_unsupported_layer_is_named():
    model = nn.Sequential(nn.Conv2d(3, 4, 1), nn.PixelShuffle(2))
    with pytest.raises(UnsupportedLayerError, match="1"):
        count_flops(model, (3, 4, 4))


def test_report_round_trip(tmp_path):
    rep = profile(meta_build("SwinS", "tiny"), (3, 64, 64), "SwinS")
    rep.save(tmp_path / "r.json")
    back = ProfileReport.load(tmp_path / "r.json")
    assert back.params == rep.params and back.flops == rep.flops and back.variant == "SwinS"
    fields = set(json.loads((tmp_path / "r.json").read_text()))
    assert {"variant", "params", "flops", "input_shape", "per_layer"} <= fields
    assert sum(r.params for r in rep.per_layer) == rep.params
    assert "SwinS" in rep.table(top=3)
