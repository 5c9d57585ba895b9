import pytest
import torch
from torch import nn

from hfrae.decoder import Decoder, DecoderSpec, build_decoder, reconstruct
from hfrae.encoder import BackboneSpec, build_encoder, extract_features
from hfrae.errors import ConfigError, ShapeError
from hfrae.residual import hierarchical_loss

TINY_SHAPES = [(4, 8, 8), (6, 4, 4), (8, 2, 2)]


def tiny_decoder(seed=0, dtype=torch.float64):
    dec = build_decoder(DecoderSpec((4, 6, 8)), TINY_SHAPES, seed=seed).to(dtype)
    return dec


@pytest.mark.parametrize("arch", ["resnet18", "wide_resnet50"])
def test_reconstruction_shapes_match_encoder_at_256(arch):
    enc = build_encoder(BackboneSpec(arch, "random"))
    feats = extract_features(enc, torch.randn(1, 3, 256, 256))
    dec = build_decoder(DecoderSpec(enc.channels), feats.shapes, seed=0)
    out = reconstruct(dec, feats.levels[-1])
    assert [tuple(o.shape) for o in out] == [tuple(f.shape) for f in feats.levels]


def test_resnet18_output_shapes_deep_to_shallow():
    shapes = [(64, 64, 64), (128, 32, 32), (256, 16, 16)]
    dec = build_decoder(DecoderSpec((64, 128, 256)), shapes, seed=0)
    out = dec(torch.randn(1, 256, 16, 16))
    assert [tuple(o.shape[1:]) for o in reversed(out)] == [(256, 16, 16), (128, 32, 32), (64, 64, 64)]


def test_upsample_factor_three_misaligns():
    with pytest.raises(ShapeError):
        build_decoder(DecoderSpec((4, 6, 8), upsample_factor=3), TINY_SHAPES)


def test_wrong_number_of_shapes():
    with pytest.raises(ConfigError):
        build_decoder(DecoderSpec((4, 6, 8)), TINY_SHAPES[:2])
    with pytest.raises(ConfigError):
        DecoderSpec((4, 6))


def test_input_shape_checked():
    dec = tiny_decoder()
    with pytest.raises(ShapeError):
        dec(torch.zeros(1, 5, 2, 2, dtype=torch.float64))


def test_stage_structure():
    dec = tiny_decoder()
    assert len(dec.stages) == 3
    for stage in dec.stages:
        kernels = [blk[0].kernel_size for blk in stage.blocks]
        assert kernels == [(1, 1), (3, 3), (1, 1)]
        assert all(isinstance(blk[1], nn.BatchNorm2d) for blk in stage.blocks)
        assert stage.head.kernel_size == (1, 1)


def test_leaky_slope():
    act = tiny_decoder().stages[0].blocks[0][2]
    x = torch.tensor([-2.0, -0.5, 0.0, 3.0], dtype=torch.float64)
    assert act(x).tolist() == [-0.2, -0.05, 0.0, 3.0]


def test_nearest_upsample_example():
    dec = tiny_decoder()
    x = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).view(1, 1, 2, 2)
    expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
    assert dec.upsample(x)[0, 0].tolist() == expected
    assert torch.equal(dec.upsample(torch.full((1, 2, 3, 3), 0.7)), torch.full((1, 2, 6, 6), 0.7))


def test_zero_input_with_zeroed_heads_gives_bias_constants():
    dec = tiny_decoder().eval()
    for stage in dec.stages:
        nn.init.zeros_(stage.head.weight)
        nn.init.uniform_(stage.head.bias)
    out = dec(torch.zeros(2, 8, 2, 2, dtype=torch.float64))
    for o, stage in zip(out, reversed(dec.stages)):
        assert torch.isfinite(o).all()
        assert torch.allclose(o, stage.head.bias.view(1, -1, 1, 1).expand_as(o))


def test_seeded_build_is_reproducible_and_leaves_global_rng():
    state = torch.get_rng_state()
    a, b = tiny_decoder(seed=5), tiny_decoder(seed=5)
    assert torch.equal(state, torch.get_rng_state())
    for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(pa, pb)


def _loss(dec, enc_feats):
    return hierarchical_loss(enc_feats, dec(enc_feats[-1]))[0]


def test_every_parameter_gets_gradient():
    g = torch.Generator().manual_seed(0)
    feats = [torch.randn(3, *s, generator=g, dtype=torch.float64) for s in TINY_SHAPES]
    dec = tiny_decoder()
    _loss(dec, feats).backward()
    for name, p in dec.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_gradients_match_central_differences():
    g = torch.Generator().manual_seed(1)
    feats = [torch.randn(3, *s, generator=g, dtype=torch.float64) for s in TINY_SHAPES]
    dec = tiny_decoder()
    n_params = sum(p.numel() for p in dec.parameters())
    assert n_params <= 10_000
    dec.train()  # batch statistics, as during training
    dec.zero_grad()
    _loss(dec, feats).backward()
    params = dict(dec.named_parameters())
    picks = torch.Generator().manual_seed(2)
    h = 1e-6
    checked = 0
    for name, p in params.items():
        for _ in range(2):
            idx = int(torch.randint(p.numel(), (1,), generator=picks))
            analytic = p.grad.view(-1)[idx].item()
            flat = p.data.view(-1)
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + h
                up = _loss(dec, feats).item()
                flat[idx] = orig - h
                down = _loss(dec, feats).item()
                flat[idx] = orig
            numeric = (up - down) / (2 * h)
            denom = max(abs(analytic), abs(numeric), 1e-8)
            assert abs(analytic - numeric) / denom < 1e-3, (name, idx, analytic, numeric)
            checked += 1
    assert checked == 2 * len(params)


def test_epochs_trained_buffer_persists():
    dec = tiny_decoder()
    assert int(dec.epochs_trained) == 0
    dec.epochs_trained += 4
    fresh = Decoder(dec.spec, dec.encoder_shapes).to(torch.float64)
    fresh.load_state_dict(dec.state_dict())
    assert int(fresh.epochs_trained) == 4
