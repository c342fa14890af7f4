import math

import numpy as np
import pytest
import torch

from src.nncore import MultiHeadAttention
from src.numcheck import (
    GradReport,
    attention_params,
    brute_force_attention,
    brute_force_infonce,
    check_gradients,
    finite_diff_grad,
    non_smooth_elements,
    relative_error,
)


def gen(seed):
    return torch.Generator().manual_seed(seed)


def test_square_at_three(float64):
    theta = torch.tensor([3.0], requires_grad=True)
    grad = finite_diff_grad(lambda: (theta ** 2).sum(), [theta])[0]
    assert abs(grad[0] - 6.0) < 1e-8
    assert theta.item() == 3.0


def test_constant_loss_has_zero_gradient(float64):
    theta = torch.randn(3, 2, generator=gen(0), requires_grad=True)
    grad = finite_diff_grad(lambda: torch.tensor(4.0), {"theta": theta})[0]
    assert grad.shape == (3, 2)
    assert np.all(grad == 0.0)


def test_check_gradients_reports_per_parameter(float64):
    a = torch.randn(4, generator=gen(1), requires_grad=True)
    b = torch.randn(2, 3, generator=gen(2), requires_grad=True)
    report = check_gradients(lambda: (a.sin() ** 2).sum() + (b * b.exp()).sum(), {"a": a, "b": b}, eps=1e-6)
    assert isinstance(report, GradReport)
    assert report.passed, report.summary()
    assert set(report.max_rel_error) == {"a", "b"}
    assert report.summary().startswith("PASS")


def test_check_gradients_catches_a_wrong_gradient(float64):
    class Doubled(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x.clone()

        @staticmethod
        def backward(ctx, grad):
            return 2 * grad

    x = torch.randn(3, generator=gen(3), requires_grad=True)
    report = check_gradients(lambda: Doubled.apply(x).sum(), [x])
    assert not report.passed
    assert report.max_rel_error["param0"] == pytest.approx(0.5)
    assert report.summary().startswith("FAIL")


def test_absolute_value_is_flagged_at_zero(float64):
    theta = torch.tensor([0.0, 1.5], requires_grad=True)
    flagged = non_smooth_elements(lambda: theta.abs().sum(), {"theta": theta})
    assert flagged == [("theta", (0,))]


def test_non_finite_loss_raises(float64):
    theta = torch.tensor([0.0], requires_grad=True)
    with pytest.raises(FloatingPointError):
        finite_diff_grad(lambda: (1.0 / theta.abs()).sum(), [theta], eps=0.0)


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-4)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


def test_brute_force_infonce_with_zero_weights_gives_log_b():
    q = np.random.default_rng(0).standard_normal((5, 3))
    k = np.random.default_rng(1).standard_normal((5, 3))
    assert abs(brute_force_infonce(q, k, np.zeros((3, 3))) - math.log(5)) < 1e-12


def test_brute_force_infonce_overflow():
    big = 30.0 * np.eye(2)
    with pytest.raises(OverflowError):
        brute_force_infonce(big, big, np.eye(2))


@pytest.mark.parametrize("n_tokens", [1, 4])
def test_attention_matches_pairwise_loops(float64, n_tokens):
    torch.manual_seed(n_tokens)
    attn = MultiHeadAttention(8, 2)
    with torch.no_grad():
        for p in attn.parameters():
            p.normal_(0.0, 0.3, generator=gen(n_tokens + 7))
    x = torch.randn(n_tokens, 8, generator=gen(n_tokens))
    expected = brute_force_attention(x, attention_params(attn))
    assert np.allclose(attn(x).detach().numpy(), expected, atol=1e-10, rtol=0)


def test_brute_force_attention_is_permutation_equivariant(float64):
    torch.manual_seed(5)
    attn = MultiHeadAttention(4, 2)
    with torch.no_grad():
        for p in attn.parameters():
            p.normal_(0.0, 0.5, generator=gen(11))
    x = torch.randn(5, 4, generator=gen(12))
    params = attention_params(attn)
    perm = [3, 0, 4, 1, 2]
    out = brute_force_attention(x, params)
    assert np.allclose(brute_force_attention(x[perm], params), out[perm], atol=1e-12)
