"""
Tests for channel statistics, tweaking losses, the layer lr schedule, Adam and the pipeline
"""

import json
from dataclasses import replace

import pytest
import torch

from conftest import random_tokens, token_calibration
from normtweak.core.errors import (
    ConfigValidationError,
    ContractError,
    DimensionError,
    LayerError,
    NonFiniteGradientError,
    NumericError,
)
from normtweak.core.numerics import GradTape, Rng, backward
from normtweak.models.quantized import QuantizedLinear
from normtweak.models.transformer import LINEAR_NAMES, ModelConfig, block_forward, embed, forward, init_model
from normtweak.services import norm_tweaking
from normtweak.services.norm_tweaking import (
    ActivationStats,
    AdamState,
    LossKind,
    TweakConfig,
    TweakSchedule,
    adam_step,
    channel_stats,
    layer_lr,
    loss_dist,
    loss_kl,
    loss_mse,
    tweak_loss,
    tweak_model,
)
from normtweak.services.quantization import QuantConfig, QuantMethod, rtn_quantize


def _stats(mu, var):
    return ActivationStats(torch.tensor(mu, dtype=torch.float64), torch.tensor(var, dtype=torch.float64))


def test_channel_stats_of_constant_tensor():
    stats = channel_stats(torch.full((2, 3, 4), 2.5))
    assert torch.equal(stats.mu, torch.full((4,), 2.5))
    assert torch.equal(stats.var, torch.zeros(4))


def test_channel_stats_population_variance():
    stats = channel_stats(torch.tensor([[[1.0], [3.0]]]))
    assert stats.mu.tolist() == [2.0]
    assert stats.var.tolist() == [1.0]


def test_channel_stats_ignore_position_order():
    t = Rng(0).normal((3, 5, 6), 1.0, torch.float64)
    shuffled = t.reshape(15, 6)[torch.randperm(15, generator=torch.Generator().manual_seed(0))].reshape(5, 3, 6)
    a, b = channel_stats(t), channel_stats(shuffled)
    assert torch.allclose(a.mu, b.mu) and torch.allclose(a.var, b.var)


def test_channel_stats_contract():
    with pytest.raises(ContractError):
        channel_stats(torch.zeros(1, 1, 4))
    with pytest.raises(ContractError):
        channel_stats(torch.zeros(2, 3, 4), expected_channels=8)
    with pytest.raises(DimensionError):
        channel_stats(torch.zeros(4))


def test_loss_dist_examples():
    assert float(loss_dist(_stats([1.0, 2.0], [0.5, 0.5]), _stats([1.0, 2.0], [0.5, 0.5]))) == 0.0
    assert float(loss_dist(_stats([0.0], [1.0]), _stats([1.0], [1.0]))) == 1.0
    f, q = _stats([0.5, -0.5], [1.25, 1.0]), _stats([0.0, 0.0], [1.0, 1.0])
    assert float(loss_dist(f, q)) == pytest.approx(0.625)
    with pytest.raises(ContractError):
        loss_dist(_stats([0.0], [1.0]), _stats([0.0, 0.0], [1.0, 1.0]))


def test_loss_dist_channel_permutation_symmetry():
    rng = Rng(1)
    f = channel_stats(rng.normal((4, 8, 16), 1.0, torch.float64))
    q = channel_stats(rng.normal((4, 8, 16), 1.5, torch.float64))
    perm = torch.randperm(16, generator=torch.Generator().manual_seed(1))
    permuted = loss_dist(ActivationStats(f.mu[perm], f.var[perm]), ActivationStats(q.mu[perm], q.var[perm]))
    assert float(permuted) == pytest.approx(float(loss_dist(f, q)), rel=1e-12)


def test_mse_and_kl():
    zeros, ones = torch.zeros(1, 2), torch.ones(1, 2)
    assert float(loss_mse(zeros, ones)) == 1.0
    assert float(loss_mse(ones, ones)) == 0.0
    assert float(loss_kl(ones, ones)) == 0.0
    rng = Rng(2)
    for _ in range(10):
        assert float(loss_kl(rng.normal((3, 4, 8)), rng.normal((3, 4, 8)))) >= 0.0
    with pytest.raises(DimensionError):
        loss_mse(zeros, torch.zeros(2, 2))


def test_layer_lr_schedule():
    cfg = TweakConfig()
    assert layer_lr(cfg, 0, 4) == 1e-5
    assert layer_lr(cfg, 4, 4) == pytest.approx(2e-5)
    assert layer_lr(cfg, 2, 4) == 1e-5 * (1 + 1.0 * (2 / 4))
    flat = TweakConfig(scale=0.0)
    assert all(layer_lr(flat, i, 6) == flat.lr_0 for i in range(6))

    lrs = TweakSchedule.from_config(TweakConfig(lr_0=3e-5, scale=0.7), 8).lrs
    assert lrs == sorted(lrs)
    with pytest.raises(ContractError):
        layer_lr(cfg, 0, 0)


def test_adam_zero_gradient_keeps_parameters():
    params = {"g": torch.tensor([1.0, 2.0])}
    updated, state = adam_step(params, {"g": torch.zeros(2)}, AdamState(), 1e-3)
    assert torch.equal(updated["g"], params["g"])
    assert state.step == 1


def test_adam_first_step_with_bias_correction():
    params = {"g": torch.zeros(1, dtype=torch.float64)}
    updated, _ = adam_step(params, {"g": torch.ones(1, dtype=torch.float64)}, AdamState(), 1e-3)
    assert float(updated["g"]) == pytest.approx(-9.99999e-4, rel=1e-6)


def test_adam_identical_gradients_update_identically():
    params = {"a": torch.tensor([0.3]), "b": torch.tensor([0.3])}
    grads = {"a": torch.tensor([0.7]), "b": torch.tensor([0.7])}
    state = AdamState()
    for _ in range(3):
        params, state = adam_step(params, grads, state, 1e-2)
    assert torch.equal(params["a"], params["b"])


def test_adam_rejects_bad_gradients():
    params = {"g": torch.zeros(2)}
    with pytest.raises(NonFiniteGradientError):
        adam_step(params, {"g": torch.tensor([0.0, float("inf")])}, AdamState(), 1e-3)
    with pytest.raises(ContractError):
        adam_step(params, {}, AdamState(), 1e-3)
    with pytest.raises(DimensionError):
        adam_step(params, {"g": torch.zeros(3)}, AdamState(), 1e-3)


def test_tweak_config_validation():
    violations = TweakConfig(lr_0=0.0, scale=-1.0, iters=-1, lr_search=[]).validate()
    assert len(violations) == 4
    assert TweakConfig(loss_kind="kl").loss_kind is LossKind.KL


def _quantized_block_setup(seed):
    config = ModelConfig(vocab_size=32, hidden=32, n_layers=2, n_heads=4, max_seq_len=8)
    model = init_model(config, Rng(seed), std=0.3, dtype=torch.float64)
    rng = Rng(seed).spawn("norms")
    for block in model.blocks:
        for norm in block.norms().values():
            norm.gamma = 1.0 + rng.normal((32,), 0.2, torch.float64)
            norm.beta = rng.normal((32,), 0.2, torch.float64)
    x = embed(model, random_tokens(seed, 2, 6, config.vocab_size))
    return config, model, x


def _numeric_gradient(loss_of, tensor, step=1e-6):
    grad = torch.zeros_like(tensor)
    for j in range(tensor.numel()):
        original = float(tensor[j])
        tensor[j] = original + step
        plus = float(loss_of())
        tensor[j] = original - step
        minus = float(loss_of())
        tensor[j] = original
        grad[j] = (plus - minus) / (2 * step)
    return grad


@pytest.mark.parametrize("loss_kind", [LossKind.DIST, LossKind.MSE, LossKind.KL])
def test_norm_gradients_match_finite_differences(loss_kind):
    qcfg = QuantConfig(bits=4, group_size=16)
    for seed in range(20):
        config, model, x = _quantized_block_setup(seed)
        for block in model.blocks:
            f_out = block_forward(block, x, config)
            q_block = replace(block, **{name: rtn_quantize(w, qcfg) for name, w in block.linears().items()})

            with GradTape() as tape:
                analytic = backward(tape, tweak_loss(loss_kind, f_out, block_forward(q_block, x, config, tape=tape)))

            def loss_of():
                with torch.no_grad():
                    return tweak_loss(loss_kind, f_out, block_forward(q_block, x, config))

            for norm_name, norm in q_block.norms().items():
                for param_name, tensor in norm.tensors().items():
                    numeric = _numeric_gradient(loss_of, tensor)
                    exact = analytic[f"{norm_name}.{param_name}"]
                    scale = max(float(numeric.norm()), 1e-12)
                    assert float((exact - numeric).norm()) / scale < 1e-4, (seed, norm_name, param_name)
            x = block_forward(q_block, x, config).detach()


def _tweak(model, calib, quantizer=QuantMethod.RTN, qcfg=None, **tweak):
    return tweak_model(model, quantizer, calib, qcfg or QuantConfig(bits=4, group_size=16), TweakConfig(**tweak))


def test_passthrough_tweak_stays_at_float(tiny_model64, calib_set, tiny_config):
    result = _tweak(tiny_model64, calib_set, qcfg=QuantConfig(bits=16), lr_0=1e-5)
    tokens = random_tokens(20, 2, 12, tiny_config.vocab_size)
    assert float((forward(result.model, tokens) - forward(tiny_model64, tokens)).abs().max()) < 1e-4
    for layer in result.report.layers:
        assert layer.post_loss < 1e-3
    for tweaked, original in zip(result.model.blocks, tiny_model64.blocks):
        assert float((tweaked.ln1.gamma - original.ln1.gamma).abs().max()) <= 1e-4


def test_linear_weights_stay_frozen_rtn(tiny_model64, calib_set):
    qcfg = QuantConfig(bits=2, group_size=16)
    result = _tweak(tiny_model64, calib_set, qcfg=qcfg, lr_0=1e-3, iters=3)
    assert torch.equal(result.model.tok_emb, tiny_model64.tok_emb)
    assert torch.equal(result.model.pos_emb, tiny_model64.pos_emb)
    for tweaked, original in zip(result.model.blocks, tiny_model64.blocks):
        for name in LINEAR_NAMES:
            fresh = rtn_quantize(getattr(original, name), qcfg)
            assert torch.equal(getattr(tweaked, name).codes, fresh.codes)
            assert torch.equal(getattr(tweaked, name).scales, fresh.scales)
    assert not torch.equal(result.model.blocks[0].ln1.gamma, tiny_model64.blocks[0].ln1.gamma)


def test_linear_weights_stay_frozen_gptq(tiny_model64, calib_set, monkeypatch):
    fresh = []
    original_quantize_block = norm_tweaking.quantize_block

    def recording_quantize_block(*args, **kwargs):
        block = original_quantize_block(*args, **kwargs)
        fresh.append(block)
        return block

    monkeypatch.setattr(norm_tweaking, "quantize_block", recording_quantize_block)
    result = _tweak(tiny_model64, calib_set, quantizer=QuantMethod.GPTQ, lr_0=1e-3)
    assert len(fresh) == len(result.model.blocks)
    for tweaked, quantized in zip(result.model.blocks, fresh):
        for name in LINEAR_NAMES:
            assert getattr(tweaked, name) is getattr(quantized, name)
            assert isinstance(getattr(tweaked, name), QuantizedLinear)


def test_tweaking_reduces_distribution_loss():
    config = ModelConfig(vocab_size=64, hidden=32, n_layers=5, n_heads=4, max_seq_len=16)
    model = init_model(config, Rng(4), std=0.2, dtype=torch.float64)
    calib = token_calibration(5, 8, 16, config.vocab_size)
    result = _tweak(model, calib, quantizer=QuantMethod.GPTQ, qcfg=QuantConfig(bits=2, group_size=16), lr_0=1e-4)
    improved = sum(layer.post_loss < layer.pre_loss for layer in result.report.layers)
    assert improved >= 0.8 * config.n_layers


def test_tweaking_is_deterministic(tiny_model64, calib_set):
    first = _tweak(tiny_model64, calib_set, quantizer=QuantMethod.GPTQ, lr_0=1e-3)
    second = _tweak(tiny_model64, calib_set, quantizer=QuantMethod.GPTQ, lr_0=1e-3)
    for (name, a), (_, b) in zip(first.model.named_tensors(), second.model.named_tensors()):
        if isinstance(a, QuantizedLinear):
            assert torch.equal(a.codes, b.codes) and torch.equal(a.scales, b.scales), name
        else:
            assert torch.equal(a, b), name
    assert first.report.to_json() == second.report.to_json()


def test_report_schedule_and_cost(tiny_model64, calib_set, tiny_config):
    cfg = TweakConfig(lr_0=2e-5, scale=0.5)
    result = tweak_model(tiny_model64, QuantMethod.RTN, calib_set, QuantConfig(bits=4), cfg)
    report = result.report
    assert len(report.layers) == tiny_config.n_layers
    assert report.lrs == [layer_lr(cfg, i, tiny_config.n_layers) for i in range(tiny_config.n_layers)]
    h = tiny_config.hidden
    assert report.norm_parameters_per_block == 4 * h
    assert report.linear_parameters_per_block == 12 * h * h

    payload = json.loads(report.to_json())
    assert "quant_seconds" not in payload["layers"][0]
    assert "tweak_seconds" in report.to_dict(include_timing=True)["layers"][0]


def test_iters_zero_is_plain_quantization(tiny_model64, calib_set):
    result = _tweak(tiny_model64, calib_set, iters=0)
    for tweaked, original in zip(result.model.blocks, tiny_model64.blocks):
        assert torch.equal(tweaked.ln1.gamma, original.ln1.gamma)
        assert torch.equal(tweaked.ln2.beta, original.ln2.beta)
        assert isinstance(tweaked.wq, QuantizedLinear)
    assert all(layer.steps == 0 for layer in result.report.layers)


def test_final_norm_is_tweaked_with_last_block(tiny_model64, calib_set):
    result = _tweak(tiny_model64, calib_set, qcfg=QuantConfig(bits=2, group_size=16), lr_0=1e-3)
    assert not torch.equal(result.model.final_norm.gamma, tiny_model64.final_norm.gamma)


def test_smoothquant_pipeline_quantizes_activations(tiny_model64, calib_set):
    result = _tweak(tiny_model64, calib_set, quantizer=QuantMethod.SMOOTHQUANT, lr_0=1e-4)
    assert result.report.act_bits == 8
    assert all(block.wq.act_bits == 8 for block in result.model.blocks)


def test_rmsnorm_models_tweak_gamma_only(rms_model64):
    calib = token_calibration(3, 4, 12, rms_model64.config.vocab_size)
    result = _tweak(rms_model64, calib, qcfg=QuantConfig(bits=2, group_size=16), lr_0=1e-3)
    assert result.model.blocks[0].ln1.beta is None
    assert result.report.norm_parameters_per_block == 2 * rms_model64.config.hidden
    assert not torch.equal(result.model.blocks[0].ln1.gamma, rms_model64.blocks[0].ln1.gamma)


@pytest.mark.parametrize("loss_kind", ["mse", "kl"])
def test_alternative_losses_run(tiny_model64, calib_set, loss_kind):
    result = _tweak(tiny_model64, calib_set, loss_kind=loss_kind, lr_0=1e-4)
    assert result.report.loss_kind == loss_kind


def test_lr_grid_search_picks_a_candidate(tiny_model64, calib_set, tiny_config):
    grid = [1e-6, 1e-4, 1e-3]
    result = _tweak(tiny_model64, calib_set, qcfg=QuantConfig(bits=2, group_size=16), lr_search=grid)
    L = tiny_config.n_layers
    for i, layer in enumerate(result.report.layers):
        assert layer.lr in [0.0] + [lr0 * (1 + i / L) for lr0 in grid]
        assert (layer.lr == 0.0) == (layer.steps == 0)


def test_lr_grid_search_keeps_quantized_norms_when_no_candidate_helps(tiny_model64, calib_set):
    plain = _tweak(tiny_model64, calib_set, qcfg=QuantConfig(bits=2, group_size=16), iters=0)
    result = _tweak(tiny_model64, calib_set, qcfg=QuantConfig(bits=2, group_size=16), lr_search=[10.0])
    assert all(layer.lr == 0.0 and layer.steps == 0 for layer in result.report.layers)
    for kept, quantized in zip(result.model.blocks, plain.model.blocks):
        assert torch.equal(kept.ln1.gamma, quantized.ln1.gamma)
        assert torch.equal(kept.ln2.beta, quantized.ln2.beta)
    assert torch.equal(result.model.final_norm.gamma, tiny_model64.final_norm.gamma)


def test_reference_input_from_quantized_path(tiny_model64, calib_set):
    result = _tweak(tiny_model64, calib_set, reference_input="quantized", lr_0=1e-4)
    assert len(result.report.layers) == 2


def test_non_finite_gradient_leaves_layer_untweaked(tiny_model64, calib_set, monkeypatch):
    def failing_adam_step(*args, **kwargs):
        raise NonFiniteGradientError("gradient for ln1.gamma is not finite")

    monkeypatch.setattr(norm_tweaking, "adam_step", failing_adam_step)
    result = _tweak(tiny_model64, calib_set, lr_0=1e-3)
    assert all(layer.skipped and "not finite" in layer.warning for layer in result.report.layers)
    for tweaked, original in zip(result.model.blocks, tiny_model64.blocks):
        assert torch.equal(tweaked.ln1.gamma, original.ln1.gamma)


def test_failures_carry_the_layer_index(tiny_model64, calib_set, monkeypatch):
    original_quantize_block = norm_tweaking.quantize_block
    calls = []

    def quantize_then_fail(*args, **kwargs):
        calls.append(1)
        if len(calls) == 2:
            raise NumericError("Hessian is not positive definite")
        return original_quantize_block(*args, **kwargs)

    monkeypatch.setattr(norm_tweaking, "quantize_block", quantize_then_fail)
    with pytest.raises(LayerError) as info:
        _tweak(tiny_model64, calib_set)
    assert info.value.layer == 1
    assert isinstance(info.value.cause, NumericError)
    assert str(info.value).startswith("layer 1: NumericError")


def test_invalid_configuration_lists_all_violations(tiny_model64, calib_set):
    with pytest.raises(ConfigValidationError) as info:
        tweak_model(tiny_model64, QuantMethod.RTN, calib_set, QuantConfig(bits=5, group_size=5), TweakConfig(lr_0=-1.0))
    assert len(info.value.violations) == 3
