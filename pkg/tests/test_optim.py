"""Adam, the cosine schedule, and the gradient checker itself."""

import math

import numpy as np
import pytest

from mvprod import autodiff as ad
from mvprod.autodiff import NonFiniteError, ShapeMismatchError, Tensor
from mvprod.optim import AdamState, adam_step, cosine_lr, grad_check, max_relative_error


def test_adam_zero_grad_no_decay_leaves_param():
    p = np.array([1.5, -2.0])
    st = AdamState.for_param(p)
    out = adam_step(p, np.zeros(2), st, lr=0.1, weight_decay=0.0)
    assert np.array_equal(out, p)
    assert st.step == 1


def test_adam_zero_lr_updates_moments_only():
    p = np.array([1.0])
    st = AdamState.for_param(p)
    out = adam_step(p, np.array([3.0]), st, lr=0.0, weight_decay=0.5)
    assert np.array_equal(out, p)
    assert st.exp_avg[0] != 0.0 and st.exp_avg_sq[0] != 0.0


def test_adam_first_step_hand_trace():
    # m=0.1, v=0.001; bias-corrected both become 1.0; delta = lr*1/(1+eps)
    p = np.array([1.0])
    st = AdamState.for_param(p)
    out = adam_step(p, np.array([1.0]), st, lr=0.1, weight_decay=0.0)
    assert math.isclose(float(out[0]), 0.9, abs_tol=1e-8)


def test_adam_decoupled_weight_decay_scales_before_delta():
    p = np.array([2.0])
    st = AdamState.for_param(p)
    out = adam_step(p, np.array([1.0]), st, lr=0.1, weight_decay=0.01)
    expected = 2.0 * (1.0 - 0.1 * 0.01) - 0.1 * 1.0 / (1.0 + 1e-8)
    assert math.isclose(float(out[0]), expected, abs_tol=1e-9)


def test_adam_rejects_nonfinite_grad_and_bad_shapes():
    p = np.array([1.0])
    st = AdamState.for_param(p)
    with pytest.raises(NonFiniteError):
        adam_step(p, np.array([np.nan]), st, lr=0.1)
    with pytest.raises(ShapeMismatchError):
        adam_step(p, np.ones(2), AdamState.for_param(p), lr=0.1)


def test_cosine_lr_endpoints_and_midpoint():
    assert cosine_lr(0, 100, 0.5) == 0.5
    assert math.isclose(cosine_lr(100, 100, 0.5), 0.0, abs_tol=1e-17)
    assert math.isclose(cosine_lr(50, 100, 0.5), 0.25, abs_tol=1e-15)


def test_cosine_lr_monotone_nonincreasing():
    values = [cosine_lr(s, 333, 1e-3) for s in range(334)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert all(0.0 <= v <= 1e-3 for v in values)


def test_cosine_lr_domain_errors():
    with pytest.raises(ValueError):
        cosine_lr(-1, 10, 0.1)
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 0.1)


def test_grad_check_exact_for_linear():
    rng = np.random.default_rng(8)
    w = Tensor(rng.standard_normal(6), requires_grad=True)
    x = Tensor(np.sign(rng.standard_normal(6)) * rng.uniform(0.5, 2.0, 6))
    assert grad_check(lambda: ad.matmul(w, x), [w], eps=1e-5) < 1e-10


def test_grad_check_flags_corrupted_gradient():
    # Doubling the analytic gradient trips the checker: by the error
    # formula |2a - a| / max(|2a|, |a|) the reported error is 0.5,
    # orders of magnitude above any honest pass.
    rng = np.random.default_rng(9)
    analytic = rng.standard_normal(20)
    err = max_relative_error(2.0 * analytic, analytic)
    assert math.isclose(err, 0.5, rel_tol=1e-12)
    assert err > 0.4


def test_grad_check_requires_float64():
    w = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: ad.reduce_sum(w), [w])
