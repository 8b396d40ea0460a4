import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weakseg import diffnet as dn
from weakseg.diffnet import Graph, Tensor


def naive_conv(x, k, b, stride, pad):
    n, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    xp = np.zeros((n, h + 2 * pad[0], w + 2 * pad[1], cin))
    xp[:, pad[0]:pad[0] + h, pad[1]:pad[1] + w] = x
    ho = (xp.shape[1] - kh) // stride[0] + 1
    wo = (xp.shape[2] - kw) // stride[1] + 1
    out = np.zeros((n, ho, wo, cout))
    for a in range(n):
        for i in range(ho):
            for j in range(wo):
                for o in range(cout):
                    s = b[o]
                    for u in range(kh):
                        for v in range(kw):
                            for c in range(cin):
                                s += xp[a, i * stride[0] + u, j * stride[1] + v, c] * k[u, v, c, o]
                    out[a, i, j, o] = s
    return out


def fd_check(fn, arrays, eps=1e-6):
    """Max relative error of backprop vs central differences for fn(*tensors) -> scalar."""
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*ts).backward()
    worst = 0.0
    for t in ts:
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = fn(*ts).item()
            flat[k] = orig - eps
            down = fn(*ts).item()
            flat[k] = orig
            num = (up - down) / (2 * eps)
            a = t.grad.reshape(-1)[k]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-6))
    return worst


def rand(rng, *shape):
    return rng.uniform(-1, 1, size=shape)


def weighted_sum(out, w):
    return dn.sum(dn.mul(out, w))


# ------------------------------------------------------------------ conv2d

def test_conv_identity_1x1():
    x = np.array([[[[0.25]]]])
    out = dn.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    assert out.data.tolist() == x.tolist()


def test_conv_zero_input_gives_bias():
    b = np.array([0.5, -1.5, 2.0])
    out = dn.conv2d(Tensor(np.zeros((2, 4, 6, 2))), Tensor(np.ones((3, 3, 2, 3))), Tensor(b), pad=(1, 1))
    assert np.all(out.data == b)


@pytest.mark.parametrize("stride,pad", [((1, 1), (0, 0)), ((1, 1), (1, 1)), ((2, 1), (1, 0)), ((2, 2), (1, 1))])
def test_conv_matches_naive_oracle(stride, pad):
    rng = np.random.default_rng(3)
    x, k, b = rand(rng, 1, 5, 5, 2), rand(rng, 3, 3, 2, 3), rand(rng, 3)
    got = dn.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, pad=pad).data
    np.testing.assert_allclose(got, naive_conv(x, k, b, stride, pad), rtol=0, atol=1e-12)


def test_conv_shape_errors_name_dimension():
    with pytest.raises(ValueError, match="channels"):
        dn.conv2d(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((3, 3, 3, 1))))
    with pytest.raises(ValueError, match="kernel height"):
        dn.conv2d(Tensor(np.zeros((1, 2, 4, 1))), Tensor(np.zeros((3, 3, 1, 1))))
    with pytest.raises(ValueError, match="kernel width"):
        dn.conv2d(Tensor(np.zeros((1, 4, 2, 1))), Tensor(np.zeros((3, 3, 1, 1))))


def test_conv_gradients():
    rng = np.random.default_rng(0)
    x, k, b = rand(rng, 2, 5, 6, 2), rand(rng, 3, 3, 2, 3), rand(rng, 3)
    w = rand(rng, 2, 3, 6, 3)
    err = fd_check(lambda a, kk, bb: weighted_sum(dn.conv2d(a, kk, bb, stride=(2, 1), pad=(1, 1)), w), [x, k, b])
    assert err < 1e-4


# ------------------------------------------------------------------ other primitives

@pytest.mark.parametrize("name", ["relu", "sigmoid", "tanh", "softmax", "square", "log", "maxpool"])
def test_pointwise_gradients(name):
    rng = np.random.default_rng(1)
    x = rand(rng, 1, 4, 4, 3)
    w = rand(rng, *({"maxpool": (1, 2, 2, 3)}.get(name, x.shape)))
    ops = {
        "relu": dn.relu, "sigmoid": dn.sigmoid, "tanh": dn.tanh, "square": dn.square,
        "softmax": dn.softmax, "maxpool": dn.maxpool2d,
        "log": lambda t: dn.log(dn.add(dn.square(t), 0.5)),
    }
    assert fd_check(lambda t: weighted_sum(ops[name](t), w), [x]) < 1e-4


def test_affine_take_concat_getitem_gradients():
    rng = np.random.default_rng(2)
    x, wt, b = rand(rng, 3, 4), rand(rng, 4, 5), rand(rng, 5)
    idx = np.array([0, 7, 7, 14])

    def f(a, ww, bb):
        y = dn.affine(a, ww, bb)
        z = dn.concat([y, dn.sigmoid(y)], axis=-1)
        return dn.sum(dn.take(z, idx)) + dn.mean(dn.square(z[1:, :3]))

    assert fd_check(f, [x, wt, b]) < 1e-4


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(4)
    out = dn.softmax(Tensor(rng.normal(scale=20, size=(50, 13)))).data
    assert np.all(out >= 0)
    assert np.max(np.abs(out.sum(-1) - 1)) < 1e-9


# ------------------------------------------------------------------ recurrence

def lstm_params(rng, cin, hid):
    return [rand(rng, cin, 4 * hid), rand(rng, hid, 4 * hid), rand(rng, 4 * hid)]


def test_birecur_single_step_deterministic():
    rng = np.random.default_rng(5)
    p = lstm_params(rng, 3, 2) + lstm_params(rng, 3, 2)
    x = rand(rng, 1, 1, 3)
    a = dn.birecur(Tensor(x), p[:3], p[3:]).data
    b = dn.birecur(Tensor(x), p[:3], p[3:]).data
    assert a.shape == (1, 1, 4)
    assert np.array_equal(a, b)
    # with tied weights both directions see the same single step
    tied = dn.birecur(Tensor(x), p[:3], p[:3]).data
    assert np.array_equal(tied[..., :2], tied[..., 2:])


def test_birecur_reversal_swaps_halves():
    rng = np.random.default_rng(6)
    p = lstm_params(rng, 3, 4)
    x = rand(rng, 2, 7, 3)
    out = dn.birecur(Tensor(x), p, p).data
    rev = dn.birecur(Tensor(x[:, ::-1]), p, p).data[:, ::-1]
    np.testing.assert_allclose(out[..., :4], rev[..., 4:], atol=1e-14)
    np.testing.assert_allclose(out[..., 4:], rev[..., :4], atol=1e-14)


def test_birecur_gradients():
    rng = np.random.default_rng(7)
    p = lstm_params(rng, 3, 2) + lstm_params(rng, 3, 2)
    x = rand(rng, 2, 4, 3)
    w = rand(rng, 2, 4, 4)
    err = fd_check(lambda xx, *ps: weighted_sum(dn.birecur(xx, ps[:3], ps[3:], lengths=[4, 3]), w), [x, *p])
    assert err < 1e-4


def test_birecur_masking_ignores_padding():
    rng = np.random.default_rng(8)
    p = lstm_params(rng, 3, 2) + lstm_params(rng, 3, 2)
    x = rand(rng, 1, 3, 3)
    padded = np.concatenate([x, rand(rng, 1, 2, 3)], axis=1)
    short = dn.birecur(Tensor(x), p[:3], p[3:]).data
    long = dn.birecur(Tensor(padded), p[:3], p[3:], lengths=[3]).data
    np.testing.assert_allclose(long[:, :3], short, atol=1e-14)
    assert np.all(long[:, 3:] == 0)


# ------------------------------------------------------------------ optimisation

def test_sgd_lr_zero_keeps_params():
    g = Graph()
    p = g.add("p", np.array([1.0, 2.0]))
    dn.sum(dn.square(p)).backward()
    sgd_before = p.data.copy()
    dn.sgd_step(g, 0.0)
    assert np.array_equal(p.data, sgd_before)
    assert p.grad is None


def test_sgd_scalar_quadratic():
    g = Graph()
    p = g.add("p", np.array(1.0))
    dn.square(p).backward()
    dn.sgd_step(g, 0.1)
    assert p.data == pytest.approx(0.8, abs=1e-15)


def test_sgd_rejects_non_finite():
    g = Graph()
    p = g.add("weight", np.array([1.0]))
    p.grad = np.array([np.nan])
    with pytest.raises(dn.NonFiniteGradient, match="weight"):
        dn.sgd_step(g, 0.1)
    assert p.data[0] == 1.0


def test_sgd_rejects_non_finite_update_atomically():
    g = Graph()
    a = g.add("a", np.array([1.0]))
    b = g.add("b", np.array([2.0]))
    a.grad, b.grad = np.array([0.5]), np.array([1e308])
    vel = {}
    with pytest.raises(dn.NonFiniteGradient, match="b"):
        dn.sgd_step(g, 10.0, momentum=0.9, velocity=vel)
    assert a.data[0] == 1.0 and b.data[0] == 2.0 and vel == {}


def test_sgd_small_net_loss_decreases():
    rng = np.random.default_rng(9)
    g = Graph(seed=1)
    w1 = g.init_param("w1", (4, 8))
    b1 = g.init_param("b1", (8,), zero=True)
    w2 = g.init_param("w2", (8, 3))
    x = rand(rng, 16, 4)
    y = rng.integers(0, 3, size=16)
    onehot_idx = np.arange(16) * 3 + y

    def loss():
        p = dn.softmax(dn.affine(dn.relu(dn.affine(x, w1, b1)), w2))
        return -dn.mean(dn.log(dn.take(p, onehot_idx)))

    losses = []
    for _ in range(100):
        l = loss()
        losses.append(l.item())
        g.backward(l)
        dn.sgd_step(g, 0.2)
    assert losses[-1] < 0.75 * losses[0]
    # smoothed trend is monotone
    smooth = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(smooth[::10]) < 0)


# ------------------------------------------------------------------ grad_check

def test_grad_check_linear():
    rng = np.random.default_rng(10)
    g = Graph(seed=0)
    w = g.init_param("w", (3, 2))
    x = rand(rng, 5, 3)
    t = rand(rng, 5, 2)
    g.loss_fn = lambda: dn.sum(dn.mul(dn.affine(x, w), t))
    assert dn.grad_check(g) < 1e-6


def test_grad_check_composite():
    rng = np.random.default_rng(11)
    g = Graph(seed=2)
    k = g.init_param("k", (3, 3, 1, 4))
    kb = g.init_param("kb", (4,), zero=True)
    fw = [g.init_param(f"f{i}", s) for i, s in enumerate([(4, 12), (3, 12), (12,)])]
    bw = [g.init_param(f"b{i}", s) for i, s in enumerate([(4, 12), (3, 12), (12,)])]
    wc = g.init_param("wc", (6, 5))
    x = rand(rng, 2, 3, 6, 1)
    idx = np.array([1, 8, 17, 30, 44, 59])

    def loss():
        f = dn.relu(dn.conv2d(x, k, kb, pad=(0, 1)))  # (2,1,6,4)
        r = dn.birecur(dn.reshape(f, (2, 6, 4)), fw, bw)
        p = dn.softmax(dn.affine(r, wc))
        return -dn.mean(dn.log(dn.take(p, idx)))

    g.loss_fn = loss
    assert dn.grad_check(g) < 1e-4


def test_grad_check_empty_graph():
    assert dn.grad_check(Graph()) == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_forward_deterministic(seed):
    rng = np.random.default_rng(seed)
    x, k = rand(rng, 1, 4, 6, 2), rand(rng, 3, 3, 2, 2)
    a = dn.softmax(dn.conv2d(x, k, pad=(1, 1))).data
    b = dn.softmax(dn.conv2d(x, k, pad=(1, 1))).data
    assert a.tobytes() == b.tobytes()


# ------------------------------------------------------------------ container

def test_container_roundtrip(tmp_path):
    rng = np.random.default_rng(12)
    arrays = {"a": rng.normal(size=(2, 3)), "b/c": rng.normal(size=(4,)), "s": np.array(1.5)}
    path = tmp_path / "x.ckpt"
    dn.save_container(path, arrays, {"k": 1})
    header, back = dn.load_container(path)
    assert header == {"k": 1}
    for k, v in arrays.items():
        assert back[k].tobytes() == v.tobytes()


def test_container_rejects_bad_files(tmp_path):
    path = tmp_path / "x.ckpt"
    dn.save_container(path, {"a": np.ones(3)})
    raw = path.read_bytes()
    (tmp_path / "trunc").write_bytes(raw[:-5])
    with pytest.raises(dn.CheckpointError, match="truncated"):
        dn.load_container(tmp_path / "trunc")
    (tmp_path / "magic").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(dn.CheckpointError, match="magic"):
        dn.load_container(tmp_path / "magic")
    (tmp_path / "ver").write_bytes(raw[:8] + (99).to_bytes(4, "little") + raw[12:])
    with pytest.raises(dn.CheckpointError, match="version"):
        dn.load_container(tmp_path / "ver")


def test_container_byte_fixture(tmp_path):
    # hand-assembled little-endian file: one 1-D tensor "w" = [1.0, -2.0]
    raw = (b"DNETCKPT" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + b"{}"
           + (1).to_bytes(4, "little") + (1).to_bytes(2, "little") + bytes([1]) + b"w"
           + (2).to_bytes(8, "little") + np.array([1.0, -2.0], dtype="<f8").tobytes())
    (tmp_path / "f").write_bytes(raw)
    _, tensors = dn.load_container(tmp_path / "f")
    assert tensors["w"].tolist() == [1.0, -2.0]
