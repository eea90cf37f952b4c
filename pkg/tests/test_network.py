from __future__ import annotations

import numpy as np
import pytest
import torch

from glandseg.network import (BN_EPS, ConvBlock, DualDecoderUNet, NetworkConfig,
                              ProbabilityPair, UpconvBlock, forward_infer, init_params,
                              load_checkpoint, output_gradients, save_checkpoint)

TINY = NetworkConfig(depth=2, base_filters=4, kernel=3, input_size=32, channels_in=3)


def tiny_model(seed=0, cfg=TINY) -> DualDecoderUNet:
    return init_params(DualDecoderUNet(cfg), seed)


def expected_state_shapes(cfg: NetworkConfig) -> dict[str, tuple]:
    """Independent shape arithmetic for every tensor in the state dict."""
    shapes: dict[str, tuple] = {}

    def conv_block(prefix, in_ch, f):
        shapes[f"{prefix}.conv1.weight"] = (f, in_ch, cfg.kernel, cfg.kernel)
        shapes[f"{prefix}.conv1.bias"] = (f,)
        shapes[f"{prefix}.conv2.weight"] = (f, f, cfg.kernel, cfg.kernel)
        shapes[f"{prefix}.conv2.bias"] = (f,)
        for bn in ("bn1", "bn2"):
            for name in ("weight", "bias", "running_mean", "running_var"):
                shapes[f"{prefix}.{bn}.{name}"] = (f,)

    in_ch = cfg.channels_in
    for i in range(cfg.depth):
        conv_block(f"encoder.{i}", in_ch, cfg.base_filters * 2 ** i)
        in_ch = cfg.base_filters * 2 ** i
    conv_block("bottleneck", in_ch, cfg.base_filters * 2 ** cfg.depth)
    for d in ("gland_decoder", "contour_decoder"):
        in_ch = cfg.base_filters * 2 ** cfg.depth
        for j, i in enumerate(reversed(range(cfg.depth))):
            f = cfg.base_filters * 2 ** i
            shapes[f"{d}.{j}.conv.weight"] = (f, in_ch, 2, 2)
            shapes[f"{d}.{j}.conv.bias"] = (f,)
            for name in ("weight", "bias", "running_mean", "running_var"):
                shapes[f"{d}.{j}.bn.{name}"] = (f,)
            conv_block(f"{d}.{j}.block", 2 * f, f)
            in_ch = f
    for head in ("gland_head", "contour_head"):
        shapes[f"{head}.weight"] = (2, cfg.base_filters, 1, 1)
        shapes[f"{head}.bias"] = (2,)
    return shapes


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def test_conv_block_preserves_spatial_dims():
    torch.manual_seed(0)
    block = ConvBlock(3, 32)
    out = block(torch.rand(1, 3, 256, 256))
    assert out.shape == (1, 32, 256, 256)


def test_bn_infer_mode_with_unit_stats_is_identity():
    block = ConvBlock(3, 8).eval()
    x = torch.randn(2, 8, 10, 10)
    # running mean 0, var 1, scale 1, offset 0 after construction
    out = block.bn1(x)
    assert torch.allclose(out, x / np.sqrt(1.0 + BN_EPS))
    assert torch.allclose(out, x, rtol=2e-3, atol=1e-6)


def test_bn_train_mode_standardizes_each_channel():
    torch.manual_seed(1)
    block = ConvBlock(3, 8)
    with torch.no_grad():
        block.bn1.weight.fill_(1.5)
        block.bn1.bias.fill_(0.3)
    captured = {}
    block.bn1.register_forward_hook(lambda m, i, o: captured.update(out=o))
    block.train()
    block(torch.randn(8, 3, 16, 16) * 50.0)  # large variance makes eps negligible
    out = captured["out"]
    mean = out.mean(dim=(0, 2, 3))
    var = out.var(dim=(0, 2, 3), unbiased=False)
    assert torch.allclose(mean, torch.full_like(mean, 0.3), atol=1e-3)
    assert torch.allclose(var, torch.full_like(var, 1.5 ** 2), atol=1e-3)


def test_conv_block_rejects_non_finite_activations():
    block = ConvBlock(3, 4)
    with torch.no_grad():
        block.conv1.weight[0, 0, 0, 0] = float("inf")
    with pytest.raises(FloatingPointError, match="non-finite"):
        block(torch.rand(1, 3, 8, 8))


def test_upconv_block_shapes():
    torch.manual_seed(0)
    block = UpconvBlock(256, 128, 128)
    x = torch.rand(1, 256, 16, 16)
    skip = torch.rand(1, 128, 32, 32)
    assert block(x, skip).shape == (1, 128, 32, 32)
    # concatenated tensor feeds filters + skip channels into the conv block
    assert block.block.conv1.in_channels == 128 + 128


def test_upconv_block_upsamples_constants_to_constants():
    block = UpconvBlock(4, 2, 2)
    captured = {}
    block.upsample.register_forward_hook(lambda m, i, o: captured.update(out=o))
    block(torch.full((1, 4, 8, 8), 3.25), torch.rand(1, 2, 16, 16))
    assert (captured["out"] == 3.25).all()
    assert captured["out"].shape == (1, 4, 16, 16)


def test_upconv_block_rejects_bad_skip():
    block = UpconvBlock(4, 2, 2)
    with pytest.raises(ValueError, match="skip spatial dims"):
        block(torch.rand(1, 4, 8, 8), torch.rand(1, 2, 15, 16))


# ---------------------------------------------------------------------------
# full network
# ---------------------------------------------------------------------------

def test_forward_output_shapes_and_range():
    model = tiny_model()
    model.train()
    gland, contour = model(torch.rand(2, 3, 32, 32))
    assert gland.shape == contour.shape == (2, 32, 32)
    for t in (gland, contour):
        assert (t > 0).all() and (t < 1).all()


def test_encoder_stage_sizes_halve():
    cfg = NetworkConfig(depth=4, base_filters=4, kernel=3, input_size=64, channels_in=3)
    model = tiny_model(cfg=cfg).eval()
    sizes = []
    for block in model.encoder:
        block.register_forward_hook(lambda m, i, o: sizes.append(o.shape[-1]))
    bottleneck_sizes = []
    model.bottleneck.register_forward_hook(lambda m, i, o: bottleneck_sizes.append(o.shape[-1]))
    with torch.no_grad():
        model(torch.rand(1, 3, 64, 64))
    assert sizes == [64, 32, 16, 8]
    assert bottleneck_sizes == [4]


def test_zeroed_head_outputs_half():
    model = tiny_model().eval()
    with torch.no_grad():
        model.gland_head.weight.zero_()
        model.gland_head.bias.zero_()
        gland, contour = model(torch.rand(1, 3, 32, 32))
    assert (gland == 0.5).all()
    assert not (contour == 0.5).all()


def test_forward_rejects_wrong_shape():
    model = tiny_model()
    with pytest.raises(ValueError, match="expected"):
        model(torch.rand(1, 3, 16, 32))
    with pytest.raises(ValueError, match="expected"):
        model(torch.rand(1, 1, 32, 32))


def test_infer_forward_is_pure():
    model = tiny_model(seed=3)
    x = np.random.default_rng(0).integers(0, 256, size=(2, 32, 32, 3)).astype(np.uint8)
    first = forward_infer(model, x)
    second = forward_infer(model, x)
    for a, b in zip(first, second):
        assert np.array_equal(a.gland, b.gland)
        assert np.array_equal(a.contour, b.contour)


def test_ablating_one_decoder_leaves_the_other_head_unchanged():
    model = tiny_model(seed=5)
    x = np.random.default_rng(1).integers(0, 256, size=(1, 32, 32, 3)).astype(np.uint8)
    before = forward_infer(model, x)[0]
    with torch.no_grad():
        for p in model.contour_decoder.parameters():
            p.zero_()
        model.contour_head.weight.zero_()
        model.contour_head.bias.zero_()
    after = forward_infer(model, x)[0]
    assert np.array_equal(before.gland, after.gland)
    assert not np.array_equal(before.contour, after.contour)


def test_state_dict_shapes_match_config_arithmetic():
    for cfg in (TINY,
                NetworkConfig(depth=1, base_filters=4, kernel=3, input_size=16),
                NetworkConfig(depth=3, base_filters=8, kernel=5, input_size=64)):
        model = DualDecoderUNet(cfg)
        expected = expected_state_shapes(cfg)
        actual = {k: tuple(v.shape) for k, v in model.state_dict().items()
                  if not k.endswith("num_batches_tracked")}
        assert actual == expected


def test_output_gradients_shapes_and_zero_case():
    model = tiny_model()
    model.train()
    x = torch.rand(2, 3, 32, 32)
    outputs = model(x)
    zeros = (torch.zeros_like(outputs[0]), torch.zeros_like(outputs[1]))
    grads = output_gradients(model, outputs, zeros)
    param_shapes = {n: tuple(p.shape) for n, p in model.named_parameters()}
    assert {n: tuple(g.shape) for n, g in grads.items()} == param_shapes
    assert all(torch.count_nonzero(g) == 0 for g in grads.values())


def test_network_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        NetworkConfig(depth=4, input_size=100)
    with pytest.raises(ValueError, match="odd"):
        NetworkConfig(kernel=4)
    with pytest.raises(ValueError, match="depth"):
        NetworkConfig(depth=0)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = tiny_model(seed=11)
    model.train()
    model(torch.rand(2, 3, 32, 32))  # move BN running stats off their init
    path = tmp_path / "model.pt"
    save_checkpoint(path, model)
    loaded = load_checkpoint(path)
    assert loaded.cfg == model.cfg
    original = model.state_dict()
    restored = loaded.state_dict()
    assert set(original) == set(restored)
    for key in original:
        assert torch.equal(original[key], restored[key]), key
        if key.endswith("running_var"):
            assert (restored[key] >= 0).all()


def test_checkpoint_missing_file():
    with pytest.raises(FileNotFoundError):
        load_checkpoint("/nonexistent/model.pt")


def test_probability_pair_validates_shapes():
    with pytest.raises(ValueError, match="shape"):
        ProbabilityPair(np.zeros((4, 4), np.float32), np.zeros((4, 5), np.float32))
