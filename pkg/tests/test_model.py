import numpy as np
import pytest

from tslora import numerics as nx
from tslora.errors import ConfigError, ContractError, FormatError
from tslora.lora import inject_lora
from tslora.model import (
    AttentionWeights,
    ModelConfig,
    attention_forward,
    build_model,
    closed_form_param_count,
    forward_dist,
    load_checkpoint,
    param_shapes,
    predict_step,
    sample_forecast,
    save_checkpoint,
)
from tslora.numerics import Node
from tslora.training import gaussian_nll

from .conftest import SMALL, perturb


def test_build_is_deterministic():
    a = build_model(ModelConfig(), 3)
    b = build_model(ModelConfig(), 3)
    assert list(a.params) == list(b.params)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_default_param_count_matches_walk():
    cfg = ModelConfig()
    model = build_model(cfg, 0)
    walked = sum(int(np.prod(s)) for s in param_shapes(cfg).values())
    assert model.num_params() == walked == closed_form_param_count(cfg) == 104322


def test_init_statistics():
    model = build_model(ModelConfig(), 0)
    assert np.all(model.params["layers.0.ln1.gamma"] == 1.0)
    assert np.all(model.params["layers.1.ln2.beta"] == 0.0)
    assert abs(model.params["layers.0.ff.w1"].std() - 0.02) < 1e-3


def test_heads_must_divide_width():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=64, n_heads=3)


def _weights(rng, d):
    return AttentionWeights(*(Node(rng.normal(size=(d, d))) for _ in range(4)))


def test_single_token_attention_is_value_output_path(rng):
    d = 8
    w = _weights(rng, d)
    x = rng.normal(size=(1, d))
    out = attention_forward(Node(x), w, n_heads=2).value
    np.testing.assert_allclose(out, x @ w.v.value.T @ w.o.value.T, atol=1e-14)


def test_causal_mask_blocks_future(rng):
    d, n = 8, 3
    w = _weights(rng, d)
    x = rng.normal(size=(n, d))
    base = attention_forward(Node(x), w, n_heads=2).value
    for j in range(n):
        x2 = x.copy()
        x2[j] += 1.0
        out = attention_forward(Node(x2), w, n_heads=2).value
        # rows before j are untouched, row j onward change
        np.testing.assert_array_equal(out[:j], base[:j])
        assert np.all(np.abs(out[j:] - base[j:]).max(axis=1) > 0)


def test_last_only_matches_full_last_row(rng):
    w = _weights(rng, 8)
    x = rng.normal(size=(2, 5, 8))
    full = attention_forward(Node(x), w, 2).value
    last = attention_forward(Node(x), w, 2, last_only=True).value
    np.testing.assert_allclose(last[:, 0], full[:, -1], atol=1e-13)


def test_forward_dist_deterministic_and_boundaries(small_model, rng):
    ctx = rng.random(SMALL.context_length)
    a, b = forward_dist(small_model, ctx), forward_dist(small_model, ctx)
    assert a.mean.tobytes() == b.mean.tobytes() and a.log_std.tobytes() == b.log_std.tobytes()
    forward_dist(small_model, [0.3])
    with pytest.raises(ContractError):
        forward_dist(small_model, [])
    with pytest.raises(ContractError):
        forward_dist(small_model, np.zeros(SMALL.context_length + 1))


def test_positional_embedding_breaks_permutation_invariance(small_model, rng):
    perturb(small_model)
    ctx = np.linspace(0.0, 1.0, SMALL.context_length)
    shuffled = rng.permutation(ctx)
    assert forward_dist(small_model, ctx).mean != forward_dist(small_model, shuffled).mean


def test_sample_forecast_shape_and_determinism():
    model = build_model(ModelConfig(), 0)
    ctx = np.linspace(0.2, 0.8, 72)
    a = sample_forecast(model, ctx, h=36, n_samples=20, seed=5)
    b = sample_forecast(model, ctx, h=36, n_samples=20, seed=5)
    assert a.shape == (20, 36)
    assert a.tobytes() == b.tobytes()


def test_degenerate_std_collapses_paths(small_model, rng):
    small_model.params["head.weight"][1] = 0.0
    small_model.params["head.bias"][1] = -1e9  # clamped to std = 1e-6
    paths = sample_forecast(small_model, rng.random(12), h=6, n_samples=20, seed=0)
    assert np.max(np.abs(paths - paths.mean(axis=0))) < 1e-5


def test_sample_forecast_contracts(small_model):
    with pytest.raises(ContractError):
        sample_forecast(small_model, [0.1], h=0, n_samples=2, seed=0)
    with pytest.raises(ContractError):
        sample_forecast(small_model, [0.1], h=3, n_samples=0, seed=0)


def test_zero_init_lora_leaves_output_unchanged(small_model, rng):
    perturb(small_model)
    adapted = inject_lora(small_model, r=3, alpha=7.0, seed=1)
    for _ in range(5):
        ctx = rng.random(rng.integers(1, 13))
        a, b = forward_dist(small_model, ctx), forward_dist(adapted, ctx)
        assert abs(a.mean[0] - b.mean[0]) <= 1e-12
        assert abs(a.log_std[0] - b.log_std[0]) <= 1e-12


def test_full_model_gradient_check(small_model, rng):
    perturb(small_model, scale=0.2)
    ctx = rng.random((3, 12))
    target = rng.random(3)

    def loss(p):
        mean, log_std = predict_step(SMALL, p, ctx)
        return gaussian_nll(mean, log_std, target)

    assert nx.finite_diff_check(loss, small_model.params, step=1e-6, n_coords=80) < 1e-4


def test_checkpoint_round_trip(tmp_path, small_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_model, path)
    assert path.read_bytes().startswith(b"tslora-ckpt v1\n")
    back = load_checkpoint(path)
    assert back.config == small_model.config
    for k in small_model.params:
        assert back.params[k].tobytes() == small_model.params[k].tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint\n{}\n")
    with pytest.raises(FormatError):
        load_checkpoint(path)
