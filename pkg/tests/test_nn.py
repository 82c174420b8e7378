"""Autodiff tape, layer kernels and Adam against finite-difference and naive oracles."""

import numpy as np

from vqwgan import nn


def numeric_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar f at array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * h)
    return g


def check_grads(build_loss, tensors, rtol=1e-5, atol=1e-8):
    loss = build_loss()
    nn.backward(loss)
    got = [t.grad.copy() for t in tensors]
    for t, g in zip(tensors, got):
        want = numeric_grad(lambda: build_loss().item(), t.data)
        np.testing.assert_allclose(g, want, rtol=rtol, atol=atol)


def test_elementwise_ops_and_broadcasting():
    rng = np.random.default_rng(0)
    a = nn.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = nn.Tensor(rng.normal(size=(4,)), requires_grad=True)

    def loss():
        a.zero_grad(); b.zero_grad()
        return nn.tsum(nn.mul(nn.add(a, b), nn.sub(a, 0.5)))

    check_grads(loss, [a, b])


def test_matmul_and_dense_grads():
    rng = np.random.default_rng(1)
    x = nn.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    w = nn.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = nn.Tensor(rng.normal(size=(2,)), requires_grad=True)

    def loss():
        for t in (x, w, b):
            t.zero_grad()
        return nn.tsum(nn.square(nn.dense(x, w, b)))

    check_grads(loss, [x, w, b])
    # dense equals x @ w.T + b computed directly
    got = nn.dense(x, w, b).data
    np.testing.assert_allclose(got, x.data @ w.data.T + b.data, atol=1e-14)


def test_reductions_exp_sqrt_square():
    rng = np.random.default_rng(2)
    x = nn.Tensor(rng.uniform(0.5, 2.0, size=(4, 3)), requires_grad=True)

    def loss():
        x.zero_grad()
        s = nn.tsum(nn.texp(x), axis=1)
        return nn.tmean(nn.tsqrt(nn.square(s)))

    check_grads(loss, [x])


def test_leaky_relu_values_and_grad():
    x = nn.Tensor(np.array([-2.0, -0.5, 0.0, 0.5, 2.0]), requires_grad=True)
    y = nn.leaky_relu(x, slope=0.2)
    np.testing.assert_allclose(y.data, [-0.4, -0.1, 0.0, 0.5, 2.0], atol=1e-15)
    nn.backward(nn.tsum(y))
    np.testing.assert_allclose(x.grad, [0.2, 0.2, 0.2, 1.0, 1.0], atol=1e-15)


def test_shared_node_accumulates_once_per_path():
    """y = x * x must give dy/dx = 2x, not x."""
    x = nn.Tensor(np.array([3.0]), requires_grad=True)
    y = nn.tsum(nn.mul(x, x))
    nn.backward(y)
    np.testing.assert_allclose(x.grad, [6.0], atol=1e-15)


def naive_conv2d(x, w, b, stride, padding):
    B, C, H, W = x.shape
    F, _, k, _ = w.shape
    oh = (H + 2 * padding - k) // stride + 1
    ow = (W + 2 * padding - k) // stride + 1
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + W] = x
    out = np.zeros((B, F, oh, ow))
    for bi in range(B):
        for f in range(F):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[bi, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[bi, f, i, j] = (patch * w[f]).sum() + b[f]
    return out


def test_conv2d_matches_naive_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 4, 4))
    b = rng.normal(size=(4,))
    got = nn.conv2d(nn.Tensor(x), nn.Tensor(w), nn.Tensor(b), stride=2, padding=1).data
    want = naive_conv2d(x, w, b, 2, 1)
    assert got.shape == (2, 4, 4, 4)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_conv2d_grads():
    rng = np.random.default_rng(4)
    x = nn.Tensor(rng.normal(size=(2, 2, 6, 6)), requires_grad=True)
    w = nn.Tensor(rng.normal(size=(3, 2, 4, 4)), requires_grad=True)
    b = nn.Tensor(rng.normal(size=(3,)), requires_grad=True)

    def loss():
        for t in (x, w, b):
            t.zero_grad()
        return nn.tsum(nn.square(nn.conv2d(x, w, b, stride=2, padding=1)))

    check_grads(loss, [x, w, b], rtol=1e-4, atol=1e-7)


def test_conv2d_output_size_chain():
    """28 -> 14 -> 7 -> 3 under kernel 4, stride 2, padding 1."""
    rng = np.random.default_rng(5)
    x = nn.Tensor(rng.normal(size=(1, 1, 28, 28)))
    w1 = nn.Tensor(rng.normal(size=(8, 1, 4, 4)))
    w2 = nn.Tensor(rng.normal(size=(8, 8, 4, 4)))
    z = np.zeros(8)
    h1 = nn.conv2d(x, w1, nn.Tensor(z))
    h2 = nn.conv2d(h1, w2, nn.Tensor(z))
    h3 = nn.conv2d(h2, w2, nn.Tensor(z))
    assert h1.shape[-2:] == (14, 14)
    assert h2.shape[-2:] == (7, 7)
    assert h3.shape[-2:] == (3, 3)


def test_composed_network_gradient():
    """conv -> leaky -> flatten -> dense, checked end to end."""
    rng = np.random.default_rng(6)
    x = nn.Tensor(rng.normal(size=(2, 1, 6, 6)))
    w1 = nn.Tensor(rng.normal(size=(2, 1, 4, 4)) * 0.5, requires_grad=True)
    b1 = nn.Tensor(np.zeros(2), requires_grad=True)
    w2 = nn.Tensor(rng.normal(size=(1, 18)) * 0.5, requires_grad=True)
    b2 = nn.Tensor(np.zeros(1), requires_grad=True)

    def loss():
        for t in (w1, b1, w2, b2):
            t.zero_grad()
        h = nn.leaky_relu(nn.conv2d(x, w1, b1, stride=2, padding=1), 0.2)
        h = nn.reshape(h, (2, 18))
        return nn.tmean(nn.square(nn.dense(h, w2, b2)))

    check_grads(loss, [w1, b1, w2, b2], rtol=1e-4, atol=1e-7)


def test_kaiming_normal_statistics():
    rng = np.random.default_rng(7)
    w = nn.kaiming_normal(rng, (400, 200), fan_in=200)
    assert abs(w.mean()) < 0.01
    np.testing.assert_allclose(w.std(), np.sqrt(2.0 / 200), rtol=0.05)


def reference_adam(params, grads_seq, lr, b1, b2, eps):
    """Independent Adam transcription used as an oracle."""
    p = [x.copy() for x in params]
    m = [np.zeros_like(x) for x in params]
    v = [np.zeros_like(x) for x in params]
    for t, grads in enumerate(grads_seq, start=1):
        for i, g in enumerate(grads):
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            mhat = m[i] / (1 - b1 ** t)
            vhat = v[i] / (1 - b2 ** t)
            p[i] = p[i] - lr * mhat / (np.sqrt(vhat) + eps)
    return p


def test_adam_matches_reference():
    rng = np.random.default_rng(8)
    shapes = [(3, 2), (4,)]
    init = [rng.normal(size=s) for s in shapes]
    grads_seq = [[rng.normal(size=s) for s in shapes] for _ in range(5)]

    params = [nn.Tensor(x.copy(), requires_grad=True) for x in init]
    opt = nn.Adam(params, lr=0.01, beta1=0.0, beta2=0.9, eps=1e-8)
    for grads in grads_seq:
        for p, g in zip(params, grads):
            p.grad = g
        opt.step()
        opt.zero_grad()

    want = reference_adam(init, grads_seq, 0.01, 0.0, 0.9, 1e-8)
    for p, w in zip(params, want):
        np.testing.assert_allclose(p.data, w, atol=1e-12)


def test_adam_state_roundtrip():
    rng = np.random.default_rng(9)
    params = [nn.Tensor(rng.normal(size=(2, 2)), requires_grad=True)]
    opt = nn.Adam(params, lr=0.1)
    params[0].grad = rng.normal(size=(2, 2))
    opt.step()
    arrays, t = opt.state_arrays()
    saved = [a.copy() for a in arrays]

    opt2 = nn.Adam([nn.Tensor(params[0].data.copy(), requires_grad=True)], lr=0.1)
    opt2.load_state(saved, t)
    assert opt2.t == opt.t
    for a, b in zip(opt2.m + opt2.v, opt.m + opt.v):
        np.testing.assert_array_equal(a, b)
