"""
Tests for tensor math, the gradient tape and seeded random streams
"""

import pytest
import torch

from normtweak.core.errors import ContractError, DimensionError, NumericError
from normtweak.core.numerics import (
    GradTape,
    Rng,
    add,
    assert_finite,
    backward,
    gelu,
    layernorm_forward,
    linear,
    matmul,
    reduce_mean,
    reduce_var,
    reshape,
    rmsnorm_forward,
    softmax,
    transpose,
)


def test_matmul_rejects_mismatched_shapes():
    with pytest.raises(DimensionError, match="matmul shape mismatch"):
        matmul(torch.zeros(2, 3), torch.zeros(4, 5))


def test_linear_applies_out_by_in_weight():
    x = torch.tensor([[1.0, 2.0]])
    weight = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert torch.equal(linear(x, weight), torch.tensor([[1.0, 2.0, 3.0]]))
    with pytest.raises(DimensionError):
        linear(torch.zeros(1, 3), weight)


def test_layernorm_normalizes_last_axis():
    x = Rng(0).normal((4, 5, 16), 3.0, torch.float64) + 2.0
    out = layernorm_forward(x, torch.ones(16, dtype=torch.float64), torch.zeros(16, dtype=torch.float64), 1e-12)
    assert torch.allclose(out.mean(-1), torch.zeros(4, 5, dtype=torch.float64), atol=1e-12)
    assert torch.allclose(out.var(-1, correction=0), torch.ones(4, 5, dtype=torch.float64), atol=1e-9)


def test_layernorm_constant_row_maps_to_beta():
    beta = torch.arange(4, dtype=torch.float64)
    out = layernorm_forward(torch.full((1, 4), 7.0, dtype=torch.float64), torch.ones(4, dtype=torch.float64), beta, 1e-5)
    assert torch.allclose(out[0], beta)


def test_rmsnorm_has_unit_root_mean_square():
    x = Rng(1).normal((3, 8), 2.0, torch.float64)
    out = rmsnorm_forward(x, torch.ones(8, dtype=torch.float64), 1e-12)
    assert torch.allclose((out * out).mean(-1), torch.ones(3, dtype=torch.float64))


def test_softmax_is_stable_and_normalized():
    probs = softmax(torch.tensor([[1000.0, 1000.0], [0.0, -1000.0]]), -1)
    assert torch.allclose(probs[0], torch.tensor([0.5, 0.5]))
    assert torch.allclose(probs.sum(-1), torch.ones(2))
    with pytest.raises(DimensionError):
        softmax(torch.zeros(2, 2), axis=2)


def test_gelu_fixed_points():
    assert float(gelu(torch.tensor(0.0))) == 0.0
    assert float(gelu(torch.tensor(10.0))) == pytest.approx(10.0)


def test_population_variance():
    assert float(reduce_var(torch.tensor([1.0, 3.0]))) == 1.0


def test_shape_helpers_raise_dimension_errors():
    with pytest.raises(DimensionError):
        add(torch.zeros(2, 3), torch.zeros(4))
    with pytest.raises(DimensionError):
        reshape(torch.zeros(6), (4, 2))
    with pytest.raises(DimensionError):
        transpose(torch.zeros(3), 0, 1)


def test_assert_finite():
    assert_finite(torch.ones(3), "ok")
    with pytest.raises(NumericError, match="activations"):
        assert_finite(torch.tensor([1.0, float("nan")]), "activations")


def test_tape_gradient_of_weighted_sum():
    x = torch.tensor([1.0, -2.0, 3.0])
    with GradTape() as tape:
        gamma = tape.watch("gamma", torch.ones(3))
        grads = backward(tape, (gamma * x).sum())
    assert torch.equal(grads["gamma"], x)


def test_tape_only_differentiates_watched_tensors():
    weight = torch.ones(3)
    with GradTape() as tape:
        gamma = tape.watch("gamma", torch.ones(3))
        unused = tape.watch("unused", torch.ones(2))
        grads = backward(tape, (gamma * weight).sum())
    assert not weight.requires_grad
    assert torch.equal(grads["unused"], torch.zeros(2))
    assert unused.requires_grad


def test_backward_contract_errors():
    with GradTape() as tape:
        gamma = tape.watch("gamma", torch.ones(3))
        with pytest.raises(ContractError, match="scalar"):
            backward(tape, gamma * 2)
        with pytest.raises(ContractError, match="empty"):
            backward(tape, torch.tensor(1.0))
    with GradTape() as empty:
        with pytest.raises(ContractError, match="no watched"):
            backward(empty, torch.tensor(1.0))


def test_rng_streams_are_reproducible():
    a, b = Rng(42), Rng(42)
    assert torch.equal(a.normal((5,)), b.normal((5,)))
    assert torch.equal(Rng(42).spawn("gendata").normal((5,)), Rng(42).spawn("gendata").normal((5,)))
    assert not torch.equal(Rng(42).spawn("gendata").normal((5,)), Rng(42).spawn("tweak").normal((5,)))
    assert Rng(42).spawn(0).seed != Rng(42).spawn(1).seed


def test_rng_accepts_full_u64_seed():
    rng = Rng(2 ** 64 - 1)
    assert rng.randint(10, (3,)).shape == (3,)


def test_matmul_examples_and_loop_oracle():
    assert torch.equal(matmul(torch.eye(2), torch.tensor([[3.0, 4.0], [5.0, 6.0]])), torch.tensor([[3.0, 4.0], [5.0, 6.0]]))
    assert matmul(torch.tensor([[1.0, 2.0]]), torch.tensor([[3.0], [4.0]])).tolist() == [[11.0]]

    rng = Rng(2)
    a, b = rng.normal((8, 8), 1.0, torch.float64), rng.normal((8, 8), 1.0, torch.float64)
    oracle = torch.zeros(8, 8, dtype=torch.float64)
    for i in range(8):
        for j in range(8):
            oracle[i, j] = sum(float(a[i, k]) * float(b[k, j]) for k in range(8))
    assert torch.allclose(matmul(a, b), oracle, rtol=1e-6, atol=0)


def test_norm_hand_computations():
    ones = torch.ones(3, dtype=torch.float64)
    out = layernorm_forward(torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64), ones, torch.zeros(3, dtype=torch.float64), 0.0)
    assert out.tolist() == pytest.approx([-1.2247, 0.0, 1.2247], abs=1e-4)

    beta = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
    x = Rng(3).normal((2, 3), 1.0, torch.float64)
    assert torch.allclose(layernorm_forward(x, torch.zeros(3, dtype=torch.float64), beta, 1e-5), beta.expand(2, 3))

    rms = rmsnorm_forward(torch.tensor([3.0, 4.0], dtype=torch.float64), torch.ones(2, dtype=torch.float64), 0.0)
    assert rms.tolist() == pytest.approx([0.8485, 1.1314], abs=1e-4)
    assert torch.equal(rmsnorm_forward(x, torch.zeros(3, dtype=torch.float64), 1e-5), torch.zeros(2, 3, dtype=torch.float64))


def test_small_reductions():
    assert softmax(torch.tensor([0.0, 0.0]), -1).tolist() == [0.5, 0.5]
    x = torch.tensor([[1.0, 2.0, 3.0], [5.0, 7.0, 9.0]], dtype=torch.float64)
    assert float(reduce_mean(x)) == pytest.approx(4.5)
    assert reduce_mean(x, -1).tolist() == [2.0, 7.0]
    assert reduce_mean(x, 0, keepdim=True).shape == (1, 3)
    with pytest.raises(DimensionError):
        reduce_mean(x, 2)
    assert float(reduce_var(torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64))) == pytest.approx(2 / 3)


def test_unused_parameter_gets_zero_gradient():
    x = torch.tensor([[1.0, 2.0, 4.0]], dtype=torch.float64)
    with GradTape() as tape:
        gamma = tape.watch("gamma", torch.ones(3, dtype=torch.float64))
        tape.watch("beta", torch.zeros(3, dtype=torch.float64))
        grads = backward(tape, (x * gamma).sum())
    assert torch.equal(grads["beta"], torch.zeros(3, dtype=torch.float64))
