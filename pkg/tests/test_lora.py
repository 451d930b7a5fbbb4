import numpy as np
import pytest

from tslora import numerics as nx
from tslora.errors import ConfigError, InjectionError, RankError
from tslora.lora import (
    AdaptedModel,
    LoraAdapter,
    adapter_forward,
    inject_lora,
    load_adapters,
    lora_count_formula,
    merge_adapter,
    save_adapters,
    trainable_param_count,
)
from tslora.model import ModelConfig, build_model, forward_dist
from tslora.numerics import Node

from .conftest import perturb

HAND_W = np.eye(2)
HAND = LoraAdapter(A=np.array([[0.0, 1.0]]), B=np.array([[1.0], [0.0]]), alpha=2.0, target="w")


def test_merge_hand_case():
    np.testing.assert_array_equal(merge_adapter(HAND_W, HAND), [[1.0, 2.0], [0.0, 1.0]])


def test_adapter_forward_hand_case():
    out = adapter_forward(np.array([[1.0, 1.0]]), HAND_W, HAND).value
    np.testing.assert_array_equal(out, [[3.0, 1.0]])


def test_merge_leaves_base_untouched():
    W = np.eye(2)
    merge_adapter(W, HAND)
    np.testing.assert_array_equal(W, np.eye(2))


def test_zero_b_is_identity(rng):
    W = rng.normal(size=(5, 4))
    ad = LoraAdapter(rng.normal(size=(2, 4)), np.zeros((5, 2)), 16.0, "w")
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(adapter_forward(x, W, ad).value, x @ W.T)
    np.testing.assert_array_equal(merge_adapter(W, ad), W)


def test_merge_equals_parallel_path_8x8(rng):
    W = rng.normal(size=(8, 8))
    ad = LoraAdapter(rng.normal(size=(2, 8)), rng.normal(size=(8, 2)), 16.0, "w")
    x = rng.normal(size=(6, 8))
    merged = x @ merge_adapter(W, ad).T
    assert np.max(np.abs(merged - adapter_forward(x, W, ad).value)) < 1e-10


def test_gradients_only_reach_adapter(rng):
    W = Node(rng.normal(size=(4, 3)), requires_grad=False)
    A = Node(rng.normal(size=(2, 3)), requires_grad=True)
    B = Node(rng.normal(size=(4, 2)), requires_grad=True)
    x = rng.normal(size=(5, 3))
    nx.backward(nx.sum_all(nx.square(adapter_forward(x, W, A, B, 8.0))))
    assert not W.grad.any()
    assert A.grad.any() and B.grad.any()


def test_adapter_gradient_matches_finite_differences(rng):
    W = rng.normal(size=(4, 3))
    x = rng.normal(size=(5, 3))
    f = lambda p: nx.sum_all(nx.square(adapter_forward(x, W, p["A"], p["B"], 4.0)))
    params = {"A": rng.normal(size=(2, 3)), "B": rng.normal(size=(4, 2))}
    assert nx.finite_diff_check(f, params, n_coords=None) < 1e-7


def test_shape_mismatch_is_injection_error(rng):
    ad = LoraAdapter(rng.normal(size=(1, 3)), rng.normal(size=(2, 1)), 1.0, "w")
    with pytest.raises(InjectionError):
        merge_adapter(np.eye(2), ad)
    with pytest.raises(InjectionError):
        adapter_forward(np.ones((1, 2)), np.eye(2), ad)


def test_scale_doubles_with_alpha(rng):
    W = rng.normal(size=(6, 6))
    A, B = rng.normal(size=(2, 6)), rng.normal(size=(6, 2))
    x = rng.normal(size=(4, 6))
    base = x @ W.T
    d1 = adapter_forward(x, W, LoraAdapter(A, B, 3.0, "w")).value - base
    d2 = adapter_forward(x, W, LoraAdapter(A, B, 6.0, "w")).value - base
    np.testing.assert_allclose(d2, 2 * d1, rtol=1e-12, atol=1e-13)


def test_inject_default_configuration():
    model = build_model(ModelConfig(), 0)
    adapted = inject_lora(model, "qkvo", r=2, alpha=16)
    assert len(adapted.adapters) == 4 * model.config.n_layers
    for ad in adapted.adapters.values():
        assert ad.rank == 2 and ad.scale == 8.0
        assert not ad.B.any()
        assert 0.01 < ad.A.std() < 0.03


def test_inject_subset_and_errors(small_model):
    adapted = inject_lora(small_model, ["q", "v"], r=1)
    assert sorted(adapted.adapters) == [
        "layers.0.attn.q", "layers.0.attn.v", "layers.1.attn.q", "layers.1.attn.v"]
    with pytest.raises(RankError):
        inject_lora(small_model, r=small_model.config.d_model + 1)
    with pytest.raises(RankError):
        inject_lora(small_model, r=0)
    with pytest.raises(ConfigError):
        inject_lora(small_model, [], r=1)
    with pytest.raises(ConfigError):
        inject_lora(small_model, ["x"], r=1)


def test_adapter_must_target_attention(small_model):
    ad = LoraAdapter(np.zeros((1, 8)), np.zeros((16, 1)), 1.0, "layers.0.ff.w1")
    with pytest.raises(InjectionError):
        AdaptedModel(small_model, {"layers.0.ff.w1": ad})


def test_injection_output_identity(small_model, rng):
    perturb(small_model)
    adapted = inject_lora(small_model, r=4, alpha=32, seed=3)
    ctx = rng.random(12)
    a, b = forward_dist(small_model, ctx), forward_dist(adapted, ctx)
    assert a.mean[0] == b.mean[0] and a.log_std[0] == b.log_std[0]


def test_merged_model_matches_adapted(small_model, rng):
    perturb(small_model)
    adapted = inject_lora(small_model, r=2, seed=1)
    for ad in adapted.adapters.values():
        ad.B[...] = rng.normal(0, 0.05, size=ad.B.shape)
    ctx = rng.random(12)
    a, b = forward_dist(adapted.merged(), ctx), forward_dist(adapted, ctx)
    assert abs(a.mean[0] - b.mean[0]) < 1e-10


@pytest.mark.parametrize("r, expected", [(1, 1024), (2, 2048), (4, 4096), (8, 8192), (16, 16384)])
def test_lora_count_default_model(r, expected):
    model = build_model(ModelConfig(), 0)
    adapted = inject_lora(model, r=r)
    assert trainable_param_count(adapted, "lora") == expected == lora_count_formula(model.config, r)


def test_single_adapter_counts():
    assert LoraAdapter(np.zeros((2, 64)), np.zeros((64, 2)), 16, "w").num_params() == 256
    assert LoraAdapter(np.zeros((1, 64)), np.zeros((64, 1)), 16, "w").num_params() == 128


def test_count_is_linear_in_rank():
    model = build_model(ModelConfig(), 0)
    counts = [trainable_param_count(inject_lora(model, r=r), "lora") for r in range(1, 6)]
    slope = 8 * (64 + 64)
    assert np.all(np.diff(counts) == slope)


def test_full_count_is_theta(small_model):
    adapted = inject_lora(small_model, r=1)
    assert trainable_param_count(small_model, "full") == small_model.num_params()
    assert trainable_param_count(adapted, "full") == small_model.num_params()
    assert trainable_param_count(small_model, "lora") == 0


def test_adapter_file_round_trip(tmp_path, small_model, rng):
    adapted = inject_lora(small_model, "qv", r=2, alpha=4.0, seed=5)
    for ad in adapted.adapters.values():
        ad.B[...] = rng.normal(size=ad.B.shape)
    path = tmp_path / "a.lora"
    save_adapters(adapted, path)
    back = load_adapters(path, small_model)
    assert sorted(back.adapters) == sorted(adapted.adapters)
    for k, ad in adapted.adapters.items():
        assert back.adapters[k].A.tobytes() == ad.A.tobytes()
        assert back.adapters[k].B.tobytes() == ad.B.tobytes()
        assert back.adapters[k].alpha == ad.alpha


def test_adapter_file_needs_matching_base(tmp_path, small_model):
    path = tmp_path / "a.lora"
    save_adapters(inject_lora(small_model, r=1), path)
    other = build_model(ModelConfig(d_model=16, n_heads=2, d_ff=16, context_length=12), 0)
    with pytest.raises(InjectionError):
        load_adapters(path, other)
