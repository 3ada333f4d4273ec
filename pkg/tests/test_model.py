import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY, central_difference, randomized, rel_err
from customttt.data import concept_prompt, embed_prompt
from customttt.model import (
    CROSS_ATTN_LAYERS,
    Denoiser,
    DenoiserConfig,
    LayerSpec,
    PromptRouting,
    build_denoiser,
    param_count,
    param_shapes,
)


def _routing(model, a=1, m=0):
    return PromptRouting.uniform(embed_prompt(concept_prompt(a, m), model.config.embed_dim, dtype=model.dtype))


def test_default_layout():
    cfg = DenoiserConfig()
    specs = cfg.layer_specs
    assert len(specs) == 9
    assert {s.index for s in specs if s.has_cross_attn} == {0, 1, 2, 4, 6, 7, 8}
    assert {s.index for s in specs if not s.has_temporal} == {4}
    assert CROSS_ATTN_LAYERS == (0, 1, 2, 4, 6, 7, 8)


def test_weight_names_address_layer_kind_matrix():
    shapes = param_shapes(DenoiserConfig())
    for i in range(9):
        assert f"layer{i}.spatial.self_attn.wq" in shapes
        assert (f"layer{i}.spatial.cross_attn.wk" in shapes) == (i not in (3, 5))
        assert (f"layer{i}.temporal.attn.wv" in shapes) == (i != 4)
    # skips: up layer 8-i reads down layer i
    w = [s.width for s in DenoiserConfig().layer_specs]
    for i in range(5, 9):
        assert shapes[f"layer{i}.spatial.res.conv1"][1] == w[i - 1] + w[8 - i]


def test_build_is_deterministic_and_zero_inits_outputs():
    a, b = build_denoiser(seed=1), build_denoiser(seed=1)
    assert a.checksum() == b.checksum()
    assert a.checksum() != build_denoiser(seed=2).checksum()
    for k, v in a.params.items():
        if k.endswith(".wo") or v.dim() == 1:
            assert not v.any(), k
    assert param_count(a) == sum(int(np.prod(s)) for s in param_shapes(a.config).values())


@pytest.mark.parametrize("bad", [
    dict(layer_specs=tuple(LayerSpec(i, i not in (3, 5), True, 32) for i in range(9))),
    dict(layer_specs=tuple(LayerSpec(i, i != 3, i != 4, 32) for i in range(9))),
    dict(base_width=12),
    dict(height=18),
])
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        build_denoiser(DenoiserConfig(**bad))


def test_forward_shape_and_purity(tiny32):
    z = torch.randn(tiny32.video_shape)
    r = _routing(tiny32)
    out = tiny32(z, 50, r)
    assert out.shape == z.shape
    assert torch.equal(out, tiny32(z, 50, r))
    batched = tiny32(torch.stack([z, z]), torch.tensor([50, 50]), r)
    assert batched.shape == (2, *z.shape)


def test_uniform_routing_equals_explicit_per_layer(tiny64):
    emb = embed_prompt(concept_prompt(2, 1), TINY.embed_dim, dtype=torch.float64)
    z = torch.randn(TINY.video_shape, dtype=torch.float64)
    explicit = PromptRouting({i: emb.clone() for i in CROSS_ATTN_LAYERS})
    assert torch.equal(tiny64(z, 10, PromptRouting.uniform(emb)), tiny64(z, 10, explicit))


def test_routing_errors(tiny32):
    emb = embed_prompt(concept_prompt(1, 0), TINY.embed_dim)
    with pytest.raises(ValueError):
        PromptRouting({i: emb for i in CROSS_ATTN_LAYERS if i != 2})
    with pytest.raises(ValueError):
        PromptRouting.inject(emb, emb, {3})
    with pytest.raises(ValueError):
        tiny32(torch.zeros(2, 3, 8, 8), 0, PromptRouting.uniform(emb))


def test_prompt_changes_output(tiny64):
    z = torch.randn(TINY.video_shape, dtype=torch.float64)
    a, b = tiny64(z, 30, _routing(tiny64, 1, 0)), tiny64(z, 30, _routing(tiny64, 4, 2))
    assert float((a - b).norm() / a.norm()) > 1e-3


@settings(max_examples=10, deadline=None)
@given(perm=st.permutations(range(TINY.frames)))
def test_frames_independent_without_temporal(tiny64, perm):
    z = torch.randn(TINY.video_shape, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    r = _routing(tiny64)
    out = tiny64(z, 20, r, temporal_identity=True)
    out_p = tiny64(z[list(perm)], 20, r, temporal_identity=True)
    assert torch.allclose(out_p, out[list(perm)], atol=1e-12)


def _grad_check_weight(model, name, n_entries=2, seed=0):
    z = torch.randn(model.video_shape, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    r = _routing(model)
    W = model.params[name]

    def f():
        return float((model(z, 40, r) ** 2).mean())

    W.requires_grad_(True)
    g = torch.autograd.grad((model(z, 40, r) ** 2).mean(), W)[0]
    W.requires_grad_(False)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_entries):
        idx = tuple(int(rng.integers(s)) for s in W.shape)
        worst = max(worst, rel_err(g[idx], central_difference(f, W, idx)))
    return worst


@pytest.mark.parametrize("name", [
    "layer0.spatial.res.conv1", "layer5.spatial.res.skip", "layer2.spatial.self_attn.wk",
    "layer6.spatial.cross_attn.wv", "layer7.temporal.attn.wq", "layer3.temporal.attn.wo", "time.mlp.w1",
])
def test_weight_gradients_match_finite_differences(tiny64, name):
    assert _grad_check_weight(tiny64, name) < 1e-4


def test_checkpoint_roundtrip(tmp_path, tiny32):
    p = tmp_path / "m.cttt"
    tiny32.save(p)
    m = Denoiser.load(p)
    assert m.config == tiny32.config and m.checksum() == tiny32.checksum()
