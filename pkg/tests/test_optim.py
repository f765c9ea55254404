import math

import numpy as np
import pytest

from absorbkit.experiments.optim import AdamW, lr_at
from absorbkit.tensor import Tensor


def scalar_adamw(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    """Plain-float AdamW for a single scalar parameter."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        p = p * (1 - lr * wd)
        p = p - lr * mh / (math.sqrt(vh) + eps)
    return p


def _param(value, shape=(1, 1), name="w"):
    t = Tensor(np.full(shape, value), requires_grad=True, name=name)
    return name, t


def test_three_steps_match_scalar_reference():
    for wd in (0.0, 0.01):
        name, t = _param(0.7)
        opt = AdamW([(name, t)], weight_decay=wd, grad_clip=None)
        grads = [0.3, -1.1, 0.05]
        for g in grads:
            t.grad[...] = g
            opt.step(1e-2)
        assert abs(t.data.item() - scalar_adamw(0.7, grads, 1e-2, wd=wd)) <= 1e-12


def test_zero_gradient_leaves_parameter_unchanged_without_decay():
    name, t = _param(1.5, shape=(3,))
    opt = AdamW([(name, t)])
    opt.step(0.1)
    assert np.array_equal(t.data, np.full(3, 1.5))


def test_frozen_tensor_is_skipped():
    name, t = _param(2.0)
    t.requires_grad = False
    opt = AdamW([(name, t)])
    opt.step(0.1)
    assert t.data.item() == 2.0 and not opt.state


def test_decay_applies_to_matrices_only_and_never_to_gates():
    opt = AdamW([], weight_decay=0.01)
    assert opt._decay("layers.0.attn.wq", Tensor(np.zeros((2, 2)))) == 0.01
    assert opt._decay("layers.0.ln1.g", Tensor(np.zeros(2))) == 0.0
    assert opt._decay("gate.0.wq", Tensor(np.zeros((2, 2)))) == 0.0


def test_global_clipping_scales_update_direction():
    a_name, a = _param(0.0, name="a")
    b_name, b = _param(0.0, name="b")
    opt = AdamW([(a_name, a), (b_name, b)], grad_clip=1.0, weight_decay=0.0)
    a.grad[...] = 3.0
    b.grad[...] = 4.0
    assert opt.step(1e-3) == pytest.approx(5.0)
    # first Adam step moves each coordinate by about lr regardless of scale
    assert a.data.item() == pytest.approx(-1e-3, rel=1e-6)
    assert opt.state["a"].m.item() == pytest.approx(0.1 * 0.6)


def test_lr_schedule_shape():
    total, peak = 1000, 3e-3
    warm = 20
    assert lr_at(0, total, peak) == pytest.approx(peak / warm)
    assert lr_at(warm - 1, total, peak) == pytest.approx(peak)
    assert lr_at(warm, total, peak) == pytest.approx(peak)
    assert lr_at(total, total, peak) == pytest.approx(0.1 * peak)
    mid = warm + (total - warm) // 2
    assert lr_at(mid, total, peak) == pytest.approx(0.55 * peak)
    lrs = [lr_at(s, total, peak) for s in range(warm, total + 1)]
    assert all(b <= a + 1e-18 for a, b in zip(lrs, lrs[1:]))
