import numpy as np
import pytest

from trapmpc.nets import (Adam, Mlp, backward, forward, load_mlp,
                          load_mlp_file, save_mlp, save_mlp_file)


def tiny_net():
    """2-2-1 net with hand-set weights for desk-checkable forwards."""
    net = Mlp([2, 2, 1], slope=0.1, rng=np.random.default_rng(0))
    net.weights[0] = np.array([[1.0, -1.0], [0.5, 2.0]])
    net.biases[0] = np.array([0.0, -0.5])
    net.weights[1] = np.array([[2.0], [3.0]])
    net.biases[1] = np.array([0.25])
    return net


# ---------------------------------------------------------------------------
# forward oracles


def test_forward_hand_oracle_positive_branch():
    net = tiny_net()
    # x=(1,1): z1 = (1.5, 0.5) both positive -> out = 2*1.5 + 3*0.5 + 0.25
    assert net.forward(np.array([1.0, 1.0]))[0] == pytest.approx(4.75)


def test_forward_hand_oracle_leaky_branch():
    net = tiny_net()
    # x=(1,0): z1 = (1, -1.5); leaky: (1, -0.15) -> 2*1 + 3*(-0.15) + 0.25
    assert net.forward(np.array([1.0, 0.0]))[0] == pytest.approx(1.8)


def test_forward_batch_matches_single():
    net = Mlp([3, 8, 2], rng=np.random.default_rng(1))
    X = np.random.default_rng(2).standard_normal((5, 3))
    batch = net.forward(X)
    for i in range(5):
        # BLAS may pick different kernels for different batch shapes, so
        # exact bit equality is not guaranteed — but the results must agree
        # to rounding noise
        assert np.allclose(batch[i], net.forward(X[i]), rtol=0, atol=1e-14)


def test_forward_cached_matches_forward():
    net = Mlp([4, 6, 6, 3], rng=np.random.default_rng(3))
    x = np.random.default_rng(4).standard_normal((7, 4))
    out, _ = net.forward_cached(x)
    assert np.array_equal(out, net.forward(x))


def test_forward_rejects_wrong_width():
    net = Mlp([3, 4, 2], rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        net.forward(np.zeros(5))


# ---------------------------------------------------------------------------
# gradients vs central finite differences


def _fd_param_grad(net, x, upstream, h=1e-6):
    flat = net.get_flat()
    g = np.zeros_like(flat)
    for i in range(flat.size):
        for sgn in (1.0, -1.0):
            flat[i] += sgn * h
            net.set_flat(flat)
            g[i] += sgn * float(np.sum(upstream * net.forward(x)))
            flat[i] -= sgn * h
    net.set_flat(flat)
    return g / (2 * h)


def _flatten_grads(grads):
    return np.concatenate([np.concatenate([dW.ravel(), db])
                           for dW, db in grads])


def test_backward_param_grads_match_fd_100_instances():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(100):
        widths = [int(rng.integers(1, 5)) for _ in range(int(rng.integers(2, 5)))]
        net = Mlp(widths, slope=0.01, rng=rng)
        x = rng.standard_normal((int(rng.integers(1, 4)), widths[0]))
        up = rng.standard_normal((x.shape[0], widths[-1]))
        grads, _ = backward(net, x, up)
        ana = _flatten_grads(grads)
        num = _fd_param_grad(net, x, up)
        denom = max(np.linalg.norm(num), 1e-8)
        worst = max(worst, np.linalg.norm(ana - num) / denom)
    assert worst < 1e-4


def test_backward_input_grad_matches_fd():
    rng = np.random.default_rng(7)
    net = Mlp([3, 8, 2], rng=rng)
    x = rng.standard_normal(3)
    up = rng.standard_normal(2)
    _, dx = backward(net, x, up)
    h = 1e-6
    num = np.zeros(3)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        num[i] = (np.sum(up * net.forward(x + e)) - np.sum(up * net.forward(x - e))) / (2 * h)
    assert np.linalg.norm(dx - num) / np.linalg.norm(num) < 1e-6


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_oracle():
    # with a single scalar parameter the first update is exactly
    # -lr * g / (|g| + eps) regardless of g's magnitude
    p = np.array([1.0])
    opt = Adam(lr=0.1, eps=1e-8)
    g = np.array([7.0])
    opt.step([p], [g])
    assert p[0] == pytest.approx(1.0 - 0.1 * 7.0 / (7.0 + 1e-8), abs=1e-14)


def test_adam_two_step_hand_recursion():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    p = np.array([0.5])
    opt = Adam(lr=lr, beta1=b1, beta2=b2, eps=eps)
    gs = [np.array([2.0]), np.array([-1.0])]
    m = v = 0.0
    ref = 0.5
    for t, g in enumerate(gs, start=1):
        opt.step([p], [g])
        m = b1 * m + (1 - b1) * g[0]
        v = b2 * v + (1 - b2) * g[0] ** 2
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        ref -= lr * mh / (np.sqrt(vh) + eps)
        assert p[0] == pytest.approx(ref, abs=1e-14)


def test_adam_minimizes_quadratic():
    p = np.array([5.0, -3.0])
    opt = Adam(lr=0.1)
    for _ in range(500):
        opt.step([p], [2.0 * p])
    assert np.linalg.norm(p) < 1e-3


# ---------------------------------------------------------------------------
# parameter plumbing and checkpoints


def test_flat_roundtrip_and_param_count():
    net = Mlp([4, 16, 32, 4], rng=np.random.default_rng(5))
    flat = net.get_flat()
    assert flat.size == net.n_params == (4 + 1) * 16 + (16 + 1) * 32 + (32 + 1) * 4
    net2 = Mlp([4, 16, 32, 4], rng=np.random.default_rng(99))
    net2.set_flat(flat)
    assert np.array_equal(net2.get_flat(), flat)
    x = np.random.default_rng(6).standard_normal(4)
    assert np.array_equal(net.forward(x), net2.forward(x))


def test_set_flat_size_mismatch_raises():
    net = Mlp([2, 3, 1], rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        net.set_flat(np.zeros(net.n_params + 1))


def test_copy_is_independent():
    net = Mlp([2, 4, 1], rng=np.random.default_rng(8))
    dup = net.copy()
    net.weights[0][0, 0] += 1.0
    assert dup.weights[0][0, 0] != net.weights[0][0, 0]


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    net = Mlp([4, 8, 3], slope=0.02, rng=np.random.default_rng(11))
    p = tmp_path / "net.json"
    save_mlp_file(net, p)
    net2 = load_mlp_file(p)
    x = np.random.default_rng(12).standard_normal((6, 4))
    assert np.array_equal(net.forward(x), net2.forward(x))
    assert net2.slope == net.slope and net2.widths == net.widths


def test_checkpoint_version_guard():
    d = save_mlp(Mlp([2, 2], rng=np.random.default_rng(0)))
    d["version"] = 99
    with pytest.raises(ValueError):
        load_mlp(d)


def test_mlp_needs_two_widths():
    with pytest.raises(ValueError):
        Mlp([4])


def test_forward_convenience_wrapper():
    net = Mlp([2, 3, 2], rng=np.random.default_rng(13))
    x = np.array([0.1, -0.2])
    assert np.array_equal(forward(net, x), net.forward(x))
