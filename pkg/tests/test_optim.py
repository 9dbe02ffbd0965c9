import numpy as np
import pytest

from mtlf.autograd import Tensor
from mtlf.errors import OptimizerError
from mtlf.optim import AdamW, AdamWState, adamw_step


def scalar_adamw_reference(w, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8, decay=0.0):
    """Standalone scalar AdamW oracle, written independently of the library."""
    m = v = 0.0
    trace = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        w = w - lr * mhat / (vhat**0.5 + eps)
        w = w - lr * decay * w
        trace.append(w)
    return trace


def test_first_step_equals_lr_times_sign():
    w = Tensor([1.0], requires_grad=True)
    state = AdamWState(learning_rate=0.01, weight_decay=0.0)
    state.register({"w": w})
    adamw_step(state, {"w": w}, {"w": np.array([1.0], dtype=np.float32)})
    assert abs(w.item() - 0.99) < 1e-6
    assert state.step_count == 1


def test_pure_decoupled_decay():
    w = Tensor([1.0], requires_grad=True)
    state = AdamWState(learning_rate=0.1, weight_decay=0.01)
    state.register({"w": w})
    adamw_step(state, {"w": w}, {"w": np.zeros(1, dtype=np.float32)})
    assert abs(w.item() - 0.999) < 1e-7


def test_five_step_trace_matches_scalar_oracle():
    # gradient of f(w) = (w - 3)^2 evaluated at the oracle's own iterates
    lr, decay = 0.05, 0.0
    w_ref = 0.0
    grads = []
    m = v = 0.0
    ws = []
    for t in range(1, 6):
        grads.append(2.0 * (w_ref - 3.0))
        m = 0.9 * m + 0.1 * grads[-1]
        v = 0.999 * v + 0.001 * grads[-1] ** 2
        w_ref = w_ref - lr * (m / (1 - 0.9**t)) / ((v / (1 - 0.999**t)) ** 0.5 + 1e-8)
        ws.append(w_ref)

    w = Tensor(np.zeros(1, dtype=np.float64), requires_grad=True)
    state = AdamWState(learning_rate=lr, weight_decay=decay)
    state.register({"w": w})
    for t in range(5):
        g = np.array([2.0 * (w.item() - 3.0)])
        adamw_step(state, {"w": w}, {"w": g})
        assert abs(w.item() - ws[t]) < 1e-10


def test_decay_trace_matches_reference():
    grads = [0.4, -1.2, 0.9, 0.0, 2.0]
    expected = scalar_adamw_reference(1.0, grads, lr=0.01, decay=0.05)
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW({"w": w}, learning_rate=0.01, weight_decay=0.05)
    for g, e in zip(grads, expected):
        w.grad = np.array([g], dtype=np.float32)
        opt.step()
        assert abs(w.item() - e) < 1e-6


def test_zero_grad_zero_decay_bit_identical():
    data = np.array([0.123456, -9.7], dtype=np.float32)
    w = Tensor(data.copy(), requires_grad=True)
    state = AdamWState(learning_rate=0.5, weight_decay=0.0)
    state.register({"w": w})
    adamw_step(state, {"w": w}, {"w": np.zeros(2, dtype=np.float32)})
    assert np.array_equal(w.data.view(np.uint32), data.view(np.uint32))


def test_missing_gradient_names_parameter():
    w = Tensor([1.0], requires_grad=True)
    b = Tensor([0.0], requires_grad=True)
    opt = AdamW({"weight": w, "bias": b}, learning_rate=0.1)
    w.grad = np.array([1.0], dtype=np.float32)
    with pytest.raises(OptimizerError, match="bias"):
        opt.step()


def test_unregistered_parameter_rejected():
    w = Tensor([1.0], requires_grad=True)
    state = AdamWState()
    with pytest.raises(OptimizerError, match="w"):
        adamw_step(state, {"w": w}, {"w": np.array([1.0])})


def test_step_count_increments_by_one():
    w = Tensor([1.0], requires_grad=True)
    opt = AdamW({"w": w}, learning_rate=0.01)
    for expected in (1, 2, 3):
        w.grad = np.array([0.5], dtype=np.float32)
        opt.step()
        assert opt.state.step_count == expected


def test_grad_clip_scales_global_norm():
    w = Tensor(np.zeros(4, dtype=np.float32), requires_grad=True)
    opt = AdamW({"w": w}, learning_rate=1.0, weight_decay=0.0, max_grad_norm=1.0)
    w.grad = np.full(4, 10.0, dtype=np.float32)
    opt.step()  # direction preserved, no blow-up past lr-scale
    assert np.all(np.abs(w.data) <= 1.0 + 1e-6)
