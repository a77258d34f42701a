import numpy as np
import pytest

from cpgan import tensor as T
from cpgan.gradcheck import grad_check
from cpgan.nn import LSTM, Conv2d, Linear, Module
from cpgan.optim import Adam
from cpgan.tensor import Tensor


class _Net(Module):
    def __init__(self, rng):
        self.a = Linear(3, 4, rng)
        self.blocks = [Conv2d(2, 2, 3, rng), Linear(4, 1, rng, bias=False)]


def test_parameter_names_follow_definition_order(rng):
    names = [n for n, _ in _Net(rng).named_parameters()]
    assert names == ["a.weight", "a.bias", "blocks.0.weight", "blocks.0.bias", "blocks.1.weight"]


def test_freeze_keeps_parameters_listed(rng):
    net = _Net(rng)
    net.freeze()
    assert len(net.parameters()) == 5
    assert not any(p.requires_grad for p in net.parameters())
    net.unfreeze()
    assert all(p.requires_grad for p in net.parameters())


def test_state_dict_round_trip(rng):
    a, b = _Net(rng), _Net(np.random.default_rng(99))
    b.load_state_dict(a.state_dict())
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)


def test_load_state_dict_rejects_missing_and_bad_shape(rng):
    net = _Net(rng)
    state = net.state_dict()
    with pytest.raises(KeyError):
        net.load_state_dict({k: v for k, v in state.items() if k != "a.bias"})
    state["a.bias"] = np.zeros(7)
    with pytest.raises(ValueError):
        net.load_state_dict(state)


def test_lstm_padded_steps_hold_state(f64, rng):
    lstm = LSTM(3, 4, rng)
    xs = [Tensor(rng.standard_normal((2, 3))) for _ in range(4)]
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=float)
    outs = lstm.run(xs, mask)
    np.testing.assert_array_equal(outs[3].data[1], outs[1].data[1])
    back = lstm.run(xs, mask, reverse=True)
    # reversed pass of the short sequence starts fresh at its last real token
    alone = lstm.run([Tensor(x.data[1:2]) for x in xs[:2]], np.ones((1, 2)), reverse=True)
    np.testing.assert_allclose(back[0].data[1], alone[0].data[0], atol=1e-12)


def test_lstm_gradients(f64, rng):
    lstm = LSTM(2, 3, rng)
    xs = [Tensor(rng.standard_normal((2, 2))) for _ in range(3)]
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=float)
    w = rng.standard_normal((2, 3))
    rep = grad_check(lambda: T.sum_(lstm.run(xs, mask)[-1] * Tensor(w)), lstm.parameters())
    assert rep.passed, rep


def test_adam_matches_hand_update(f64):
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True, name="param")
    opt = Adam([("p", p)], lr=0.1, betas=(0.5, 0.999), eps=1e-8)
    g = np.array([0.3, -0.4])
    p.grad = g.copy()
    opt.step()
    m = 0.5 * g
    v = 0.001 * g * g
    expect = np.array([1.0, -2.0]) - 0.1 * (m / 0.5) / (np.sqrt(v / 0.001) + 1e-8)
    np.testing.assert_allclose(p.data, expect, rtol=1e-12)


def test_adam_zero_lr_leaves_parameters_bitwise(rng):
    p = Tensor(rng.standard_normal(5), requires_grad=True, name="param")
    before = p.data.copy()
    opt = Adam([("p", p)], lr=0.0)
    for _ in range(3):
        p.grad = rng.standard_normal(5).astype(np.float32)
        opt.step()
    assert p.data.tobytes() == before.tobytes()


def test_adam_state_round_trip(rng):
    p = Tensor(rng.standard_normal(3), requires_grad=True, name="param")
    opt = Adam([("p", p)], lr=0.01)
    p.grad = np.ones(3, dtype=np.float32)
    opt.step()
    other = Adam([("p", p)], lr=0.01)
    other.load_state(opt.state())
    assert other.t == 1
    np.testing.assert_array_equal(other.m["p"], opt.m["p"])
