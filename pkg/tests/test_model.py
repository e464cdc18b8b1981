import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from distl.errors import InvalidInputError, InvalidSpecError
from distl.model import (
    ModelSpec,
    build_cnn,
    build_model,
    count_parameters,
    extract_attention,
    forward,
    gradcam,
    gradcam_combine,
    normalize_per_head,
)


def closed_form_params(s: ModelSpec) -> int:
    d, h, H, g = s.embed_dim, int(s.embed_dim * s.mlp_ratio), s.head_hidden, s.grid
    block = 2 * 2 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d)
    embed = s.patch_side ** 2 * d + d + d + (g * g + 1) * d
    cls_head = (d * H + H) + (H * H + H) + (H * s.num_classes + s.num_classes)
    proj_head = (d * H + H) + (H * H + H) + (H * s.proj_bottleneck + s.proj_bottleneck) \
        + s.proj_bottleneck * s.proj_dim
    return embed + s.depth * block + 2 * d + cls_head + proj_head


def test_toy_parameter_count_closed_form():
    spec = ModelSpec()
    assert count_parameters(build_model(spec)) == closed_form_params(spec) == 279_938


def test_paper_scale_constructs():
    spec = ModelSpec.vit_small()
    assert (spec.depth, spec.heads, spec.embed_dim, spec.grid) == (12, 6, 384, 16)
    model = build_model(spec)
    assert count_parameters(model) == closed_form_params(spec)
    amap = extract_attention(model, np.random.default_rng(0).random((256, 256)).astype(np.float32))
    assert amap.per_head.shape == (6, 16, 16)


def test_single_token_model_runs():
    spec = ModelSpec(input_side=8, patch_side=8, depth=1, heads=1, embed_dim=8,
                     head_hidden=8, proj_bottleneck=4, proj_dim=16)
    logits, proj = forward(build_model(spec), np.zeros((3, 8, 8), np.float32))
    assert logits.shape == (3, 2) and proj.shape == (3, 16)


@pytest.mark.parametrize("kw", [dict(input_side=30, patch_side=4), dict(embed_dim=63, heads=2),
                                dict(depth=0), dict(init="xavier")])
def test_invalid_specs(kw):
    with pytest.raises(InvalidSpecError):
        ModelSpec(**kw)


def test_forward_shapes_full_and_local():
    model = build_model(ModelSpec(), seed=1)
    rng = np.random.default_rng(0)
    logits, proj = forward(model, rng.random((16, 32, 32)).astype(np.float32))
    assert logits.shape == (16, 2) and proj.shape == (16, 256)
    logits, proj = forward(model, rng.random((1, 16, 16)).astype(np.float32))
    assert logits.shape == (1, 2) and proj.shape == (1, 256)
    with pytest.raises(InvalidInputError):
        forward(model, rng.random((1, 24, 24)).astype(np.float32))


def test_build_is_deterministic_and_seed_dependent():
    a, b, c = build_model(ModelSpec(), 3), build_model(ModelSpec(), 3), build_model(ModelSpec(), 4)
    for (n, pa), pb in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(pa, pb), n
    assert not torch.equal(a.patch_embed.weight, c.patch_embed.weight)


def test_trunc_normal_scheme_bounds():
    model = build_model(ModelSpec(init="trunc_normal"), 0)
    w = model.blocks[0].attn.qkv.weight.detach()
    assert w.abs().max() <= 0.04 and abs(float(w.std()) - 0.02) < 0.004
    assert torch.all(model.blocks[0].attn.qkv.bias == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_softmax_rows_sum_to_one(seed, scale):
    model = build_model(ModelSpec(), 0)
    x = np.random.default_rng(seed).normal(size=(4, 32, 32)).astype(np.float32) * scale
    logits, _ = forward(model, x)
    assert torch.allclose(logits.double().softmax(-1).sum(-1), torch.ones(4, dtype=torch.float64), atol=1e-6)


def test_inference_forward_bit_identical():
    model = build_model(ModelSpec(), 0)
    x = np.random.default_rng(1).random((5, 32, 32)).astype(np.float32)
    a, b = forward(model, x), forward(model, x)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_attention_rows_are_distributions():
    model = build_model(ModelSpec(), 2)
    amap = extract_attention(model, np.random.default_rng(0).random((32, 32)).astype(np.float32))
    assert amap.per_head.shape == (2, 8, 8)
    assert np.all(amap.rows >= 0)
    np.testing.assert_allclose(amap.rows.sum(axis=1), 1.0, atol=1e-5)
    flat = amap.per_head.reshape(2, -1)
    assert np.allclose(flat.min(axis=1), 0.0) and np.allclose(flat.max(axis=1), 1.0)
    assert amap.upsample(32).shape == (2, 32, 32)


def test_uniform_attention_normalizes_to_zeros():
    model = build_model(ModelSpec(), 0)
    with torch.no_grad():
        model.blocks[-1].attn.qkv.weight.zero_()
        model.blocks[-1].attn.qkv.bias.zero_()
    amap = extract_attention(model, np.random.default_rng(0).random((32, 32)).astype(np.float32))
    np.testing.assert_allclose(amap.rows, 1.0 / 65, atol=1e-7)
    assert np.all(amap.per_head == 0.0) and np.isfinite(amap.per_head).all()
    assert np.all(normalize_per_head(np.ones((2, 3, 3))) == 0.0)


def test_gradient_check_double_precision():
    torch.manual_seed(0)
    model = build_model(ModelSpec(), 5).double()
    x = torch.from_numpy(np.random.default_rng(0).random((2, 1, 32, 32)))
    y = torch.tensor([0, 1])

    def loss_fn():
        logits, proj = model(x)
        return F.cross_entropy(logits, y) + 0.1 * proj.pow(2).mean()

    model.zero_grad()
    loss_fn().backward()
    params = [p for p in model.parameters()]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(0)
    picks = rng.choice(sizes.sum(), size=120, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    eps, worst = 1e-6, 0.0
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            p, i = params[k].view(-1), int(flat - offsets[k])
            analytic = float(params[k].grad.view(-1)[i])
            orig = float(p[i])
            p[i] = orig + eps
            up = float(loss_fn())
            p[i] = orig - eps
            down = float(loss_fn())
            p[i] = orig
            numeric = (up - down) / (2 * eps)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, rel)
    assert worst < 1e-3


def test_gradcam_zero_gradients_give_zero_map():
    feats = np.random.default_rng(0).random((4, 8, 8))
    assert np.all(gradcam_combine(feats, np.zeros_like(feats), side=32) == 0.0)


def test_gradcam_single_active_map_proportional():
    rng = np.random.default_rng(1)
    feats = rng.random((3, 8, 8))
    grads = np.zeros_like(feats)
    grads[1] = 0.7  # only channel 1 gets weight
    heat = gradcam_combine(feats, grads)
    np.testing.assert_allclose(heat, feats[1] / feats[1].max(), atol=1e-12)


def test_gradcam_untrained_flagged_and_shape():
    cnn = build_cnn(2, seed=0)
    img = np.random.default_rng(0).random((32, 32)).astype(np.float32)
    heat, meta = gradcam(cnn, img, 1)
    assert heat.shape == (32, 32) and heat.min() >= 0 and heat.max() <= 1
    assert meta["trained"] is False and "warning" in meta
    cnn.trained = True
    assert "warning" not in gradcam(cnn, img, 0)[1]
    with pytest.raises(InvalidInputError):
        gradcam(cnn, img, 5)
    mask = heat >= 0.6
    assert mask.dtype == bool
