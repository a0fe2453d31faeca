import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wavlink import diffcore as dc
from wavlink.errors import DimensionError, NumericError, TokenIndexError


def rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(*shape, generator=g, dtype=dc.DTYPE) * 2 - 1


def test_matmul_identity_and_annihilator():
    a = dc.tensor([[1, 2], [3, 4]])
    assert torch.equal(dc.matmul(torch.eye(2, dtype=dc.DTYPE), a), a)
    out = dc.matmul(dc.tensor([[1, 0], [0, 0]]), dc.tensor([[0], [5]]))
    assert torch.equal(out, dc.tensor([[0], [0]]))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        dc.matmul(rand(2, 3), rand(2, 3))


def test_layernorm_examples():
    one, zero = torch.ones(3, dtype=dc.DTYPE), torch.zeros(3, dtype=dc.DTYPE)
    assert torch.equal(dc.layernorm(torch.full((1, 3), 2.5, dtype=dc.DTYPE), one, zero), torch.zeros(1, 3, dtype=dc.DTYPE))
    out = dc.layernorm(dc.tensor([[1.0, -1.0]]), torch.ones(2, dtype=dc.DTYPE), torch.zeros(2, dtype=dc.DTYPE), eps=1e-14)
    assert np.allclose(out.numpy(), [[1.0, -1.0]], atol=1e-12)
    with pytest.raises(DimensionError):
        dc.layernorm(rand(2, 4), one, zero)


def test_cross_entropy_examples():
    assert dc.softmax_cross_entropy(torch.zeros(1, 4, dtype=dc.DTYPE), [2]).item() == pytest.approx(math.log(4), abs=1e-12)
    stable = dc.softmax_cross_entropy(dc.tensor([[1000.0, 0.0]]), [0])
    assert math.isfinite(stable.item()) and stable.item() == pytest.approx(0.0, abs=1e-300)
    with pytest.raises(TokenIndexError):
        dc.softmax_cross_entropy(torch.zeros(2, 3, dtype=dc.DTYPE), [0, 3])


def test_cross_entropy_matches_high_precision_formula():
    logits = rand(3, 3, seed=4) * 5
    target = [2, 0, 1]
    mpmath.mp.dps = 50
    total = mpmath.mpf(0)
    for row, t in zip(logits.tolist(), target):
        lse = mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(v)) for v in row))
        total += lse - mpmath.mpf(row[t])
    expected = float(total / 3)
    assert abs(dc.softmax_cross_entropy(logits, target).item() - expected) <= 1e-10


@pytest.mark.parametrize("name,fn,shapes", [
    ("matmul", lambda a, b: dc.matmul(a, b), [(3, 4), (4, 2)]),
    ("linear", lambda x, w, b: dc.linear(x, w, b), [(3, 4), (5, 4), (5,)]),
    ("layernorm", lambda x, g, b: dc.layernorm(x, g, b), [(3, 5), (5,), (5,)]),
    ("gelu", dc.gelu, [(4, 3)]),
    ("softmax", lambda x: dc.softmax(x), [(3, 4)]),
    ("softplus", dc.softplus, [(7,)]),
    ("cross_entropy", lambda x: dc.softmax_cross_entropy(x, [0, 2, 1]), [(3, 3)]),
])
def test_primitive_gradients_match_finite_differences(name, fn, shapes):
    inputs = [rand(*s, seed=i + 11) for i, s in enumerate(shapes)]
    report = dc.grad_check(fn, inputs, tolerance=1e-6, op_name=name)
    assert report.passed, report


def test_grad_check_linear_map_is_exact():
    w = rand(4, seed=3)
    report = dc.grad_check(lambda x: (x * w).sum(), [rand(4, seed=5)], tolerance=1e-6)
    assert report.max_relative_error < 1e-9


class _DoubledGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return (x * x).sum()

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return 2.0 * (2.0 * x * g)


def test_grad_check_rejects_corrupted_gradient():
    report = dc.grad_check(_DoubledGrad.apply, [rand(5, seed=1)], tolerance=1e-4, op_name="corrupted")
    assert not report.passed
    assert report.max_relative_error > 0.4


def test_grad_check_raises_on_non_finite_gradient():
    with pytest.raises(NumericError):
        dc.grad_check(lambda x: torch.sqrt(x).sum(), [torch.zeros(2, dtype=dc.DTYPE)], tolerance=1e-6)


def test_report_passed_iff_error_within_tolerance():
    report = dc.grad_check(lambda x: (x ** 3).sum(), [rand(3, seed=2)], tolerance=0.0)
    assert report.passed == (report.max_relative_error <= 0.0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-30, 30, allow_nan=False)))
def test_softmax_rows_sum_to_one_and_ce_nonnegative(x):
    t = torch.as_tensor(x)
    rows = dc.softmax(t).sum(dim=-1)
    assert torch.allclose(rows, torch.ones_like(rows), atol=1e-12, rtol=0)
    assert dc.softmax_cross_entropy(t, [0] * t.shape[0]).item() >= 0.0


def test_ops_are_deterministic():
    x, g, b = rand(4, 6, seed=9), rand(6, seed=10), rand(6, seed=12)
    first = dc.layernorm(dc.gelu(dc.matmul(x, x.T) @ x), g, b)
    second = dc.layernorm(dc.gelu(dc.matmul(x, x.T) @ x), g, b)
    assert torch.equal(first, second)
