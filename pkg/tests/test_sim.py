import numpy as np
import pytest

from ssm3dcd import tensor as T
from ssm3dcd.gradcheck import grad_check
from ssm3dcd.sim import SimParams, dynamic_gate, extract_global_local, sim_forward
from ssm3dcd.tensor import Linear
from conftest import WIDE, leaf, probe_loss
from test_tensor import conv_loop


def gate_with(alpha, C, dtype=np.float64):
    g = Linear(np.random.default_rng(0), 2 * C, 2, dtype=dtype)
    g.weight.assign(np.zeros((2 * C, 2)))
    g.bias.assign(np.asarray(alpha, dtype=float))
    return g


def softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def test_extract_global_local_shapes_zero_and_loop(rng):
    shape = (4, 4, 4)
    p = SimParams(rng, shape, d_state=2, dtype=np.float64)
    F = rng.normal(size=(1,) + shape)
    G, L = extract_global_local(T.Tensor(F), p)
    assert G.shape == L.shape == (1,) + shape
    impulse = np.zeros((1,) + shape)
    impulse[0, 2, 1, 3] = 1.0
    _, L_imp = extract_global_local(T.Tensor(impulse), p)
    mid = conv_loop(impulse, p.local1.kernel.data, p.local1.bias.data, 1, 1)
    mid = mid / (1 + np.exp(-mid))
    ref = conv_loop(mid, p.local2.kernel.data, p.local2.bias.data, 1, 1)
    assert np.max(np.abs(L_imp.data - ref)) < 1e-6
    for name, prm in p.named_parameters():
        if name.endswith("bias") or name.endswith(".beta"):
            prm.assign(np.zeros_like(prm.data))
    G0, L0 = extract_global_local(T.Tensor(np.zeros((1,) + shape)), p)
    assert not G0.data.any() and not L0.data.any()
    with pytest.raises(ValueError, match="channels"):
        extract_global_local(T.Tensor(np.zeros((1, 4, 4, 3))), p)


def test_dynamic_gate_selector_and_average(rng):
    F1, F2 = rng.normal(size=(2, 3, 3, 4)), rng.normal(size=(2, 3, 3, 4))
    assert np.array_equal(dynamic_gate(T.Tensor(F1), T.Tensor(F2), gate_with((1.0, 0.0), 4)).data, F1)
    avg = dynamic_gate(T.Tensor(F1), T.Tensor(F2), gate_with((0.5, 0.5), 4)).data
    assert np.allclose(avg, (F1 + F2) / 2)
    with pytest.raises(ValueError):
        dynamic_gate(T.Tensor(F1), T.Tensor(F2[:, :2]), gate_with((1, 0), 4))


def test_dynamic_gate_arithmetic_oracle(rng):
    F1, F2 = rng.normal(size=(2, 2, 3)), rng.normal(size=(2, 2, 3))
    g = Linear(rng, 6, 2, dtype=np.float64)
    g.bias.assign(rng.normal(size=2))
    m = [F1[:, :, c].sum() / 4 for c in range(3)] + [F2[:, :, c].sum() / 4 for c in range(3)]
    a1 = sum(m[i] * g.weight.data[i, 0] for i in range(6)) + g.bias.data[0]
    a2 = sum(m[i] * g.weight.data[i, 1] for i in range(6)) + g.bias.data[1]
    out = dynamic_gate(T.Tensor(F1), T.Tensor(F2), g).data
    assert np.allclose(out, a1 * F1 + a2 * F2)
    soft = dynamic_gate(T.Tensor(F1), T.Tensor(F2), g, normalize=True).data
    w = softmax(np.array([a1, a2]))
    assert np.allclose(soft, w[0] * F1 + w[1] * F2)


def test_sim_symmetry_exact(rng):
    shape = (4, 4, 8)
    for trial in range(4):
        p = SimParams(np.random.default_rng(trial), shape, d_state=2)
        F1 = rng.normal(size=(2,) + shape).astype(np.float32)
        F2 = rng.normal(size=(2,) + shape).astype(np.float32)
        assert not sim_forward(T.Tensor(F1), T.Tensor(F1), p).data.any()
        a = sim_forward(T.Tensor(F1), T.Tensor(F2), p).data
        b = sim_forward(T.Tensor(F2), T.Tensor(F1), p).data
        assert np.array_equal(a, b)
        assert (a >= 0).all()


def test_sim_compositional_oracle(rng):
    shape = (4, 4, 8)
    p = SimParams(rng, shape, d_state=2, dtype=np.float64)
    F1, F2 = rng.normal(size=(1,) + shape), rng.normal(size=(1,) + shape)
    G1, L1 = (t.data for t in extract_global_local(T.Tensor(F1), p))
    G2, L2 = (t.data for t in extract_global_local(T.Tensor(F2), p))
    W, b = p.gate.weight.data, p.gate.bias.data

    def dg(x, y):
        m = np.concatenate([x.mean(axis=(1, 2)), y.mean(axis=(1, 2))], -1)
        a = m @ W + b
        return a[:, 0, None, None, None] * x + a[:, 1, None, None, None] * y

    GL1 = dg(softmax(G2) * G1, softmax(L2) * G1)
    GL2 = dg(softmax(G1) * G2, softmax(L1) * G2)
    out = sim_forward(T.Tensor(F1), T.Tensor(F2), p).data
    assert np.max(np.abs(out - np.abs(GL1 - GL2))) < 1e-6


def test_sim_shape_mismatch(rng):
    p = SimParams(rng, (4, 4, 4), d_state=2)
    with pytest.raises(ValueError):
        sim_forward(T.Tensor(np.zeros((1, 4, 4, 4))), T.Tensor(np.zeros((1, 4, 2, 4))), p)


def test_sim_gradients_widest(rng):
    p = SimParams(rng, (4, 4, 8), d_state=2, dtype=WIDE)
    F1, F2 = leaf(rng, (1, 4, 4, 8)), leaf(rng, (1, 4, 4, 8))
    err = grad_check(lambda: probe_loss(sim_forward(F1, F2, p)), [F1, F2] + p.parameters(), max_entries=200)
    assert err < 1e-4
