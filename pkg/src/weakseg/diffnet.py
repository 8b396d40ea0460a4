"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Only the primitives the recognizer needs are provided: 2-D convolution,
max pooling, affine maps, pointwise activations, softmax, a fused
bidirectional LSTM, and a handful of reductions / indexing ops.

Layout convention for images is NHWC.
"""
from __future__ import annotations

import contextlib
import json
import struct
from collections import Counter

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

# per-op invocation counter, used to audit which ops a forward pass ran
OP_COUNTS: Counter = Counter()


@contextlib.contextmanager
def count_ops():
    """Yield a Counter that collects op invocations inside the block."""
    before = OP_COUNTS.copy()
    delta: Counter = Counter()
    try:
        yield delta
    finally:
        after = OP_COUNTS.copy()
        after.subtract(before)
        delta.update({k: v for k, v in after.items() if v})


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return order

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __getitem__(self, index):
        return getitem(self, index)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    OP_COUNTS[op] += 1
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data ** 2, (x,), lambda g: (2.0 * x.data * g,), "square")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out ** 2),), "tanh")


def log(x, floor=0.0) -> Tensor:
    """Natural log; values below ``floor`` are clamped (zero gradient there)."""
    x = as_tensor(x)
    if floor > 0:
        live = x.data > floor
        safe = np.where(live, x.data, floor)
        return _make(np.log(safe), (x,), lambda g: (g * live / safe,), "log")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


# ---------------------------------------------------------------- reductions / shape

def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (x,), backward, "getitem")


def take(x, flat_index) -> Tensor:
    """Gather entries of ``x`` by flat (raveled) index."""
    x = as_tensor(x)
    idx = np.asarray(flat_index, dtype=np.int64)
    out = x.data.reshape(-1)[idx]

    def backward(g):
        full = np.zeros(x.data.size, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full.reshape(x.shape),)

    return _make(out, (x,), backward, "take")


def concat(xs, axis=-1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(xs), backward, "concat")


# ---------------------------------------------------------------- layers

def affine(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"affine: input features {x.shape[-1]} != weight rows {weight.shape[0]}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents = (x, weight, bias)
    out = out.reshape(x.shape[:-1] + (weight.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        grads = [(g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None,
                 x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, backward, "affine")


def conv2d(x, kernel, bias=None, stride=(1, 1), pad=(0, 0)) -> Tensor:
    """Cross-correlation of NHWC ``x`` with a (kh, kw, cin, cout) kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be N×H×W×C, got rank {x.ndim}")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d: kernel must be kh×kw×cin×cout, got rank {kernel.ndim}")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    sh, sw = stride
    ph, pw = pad
    if cin != kcin:
        raise ValueError(f"conv2d: input channels {cin} != kernel input channels {kcin}")
    if kh > h + 2 * ph:
        raise ValueError(f"conv2d: kernel height {kh} exceeds padded input height {h + 2 * ph}")
    if kw > w + 2 * pw:
        raise ValueError(f"conv2d: kernel width {kw} exceeds padded input width {w + 2 * pw}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d: bias length {bias.shape} != output channels {cout}")

    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    pointwise = kh == 1 and kw == 1 and sh == 1 and sw == 1 and ph == 0 and pw == 0
    if pointwise:
        cols = x.data.reshape(-1, cin)
    else:
        xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw][:, :ho, :wo]
        # (n, ho, wo, cin, kh, kw) -> rows ordered (kh, kw, cin) to match kmat
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * cin)
    out = cols @ kmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.reshape(-1, cout)
        dk = (cols.T @ g2).reshape(kernel.shape)
        dx = None
        if x.requires_grad:
            dcols = g2 @ kmat.T
            if pointwise:
                dx = dcols.reshape(x.shape)
            else:
                dcols = dcols.reshape(n, ho, wo, kh, kw, cin)
                dxp = np.zeros((n, h + 2 * ph, w + 2 * pw, cin), dtype=DTYPE)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i:i + sh * ho:sh, j:j + sw * wo:sw, :] += dcols[:, :, :, i, j, :]
                dx = dxp[:, ph:ph + h, pw:pw + w, :]
        grads = [dx, dk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, backward, "conv2d")


def maxpool2d(x, size=(2, 2)) -> Tensor:
    """Non-overlapping max pooling; H and W must be multiples of the window."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    ph, pw = size
    if h % ph or w % pw:
        raise ValueError(f"maxpool2d: input {h}×{w} not divisible by window {ph}×{pw}")
    blocks = x.data.reshape(n, h // ph, ph, w // pw, pw, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // ph, w // pw, c, ph * pw)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=DTYPE)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, h // ph, w // pw, c, ph, pw).transpose(0, 1, 4, 2, 5, 3)
        return (gb.reshape(x.shape),)

    return _make(out, (x,), backward, "maxpool2d")


def _lstm_pass(x, wx, wh, b, mask, reverse):
    n, t_len, _ = x.shape
    hid = wh.shape[0]
    h = np.zeros((n, hid), dtype=DTYPE)
    c = np.zeros((n, hid), dtype=DTYPE)
    out = np.zeros((n, t_len, hid), dtype=DTYPE)
    xw = x @ wx + b  # input projections for all steps at once
    steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
    cache = []
    for t in steps:
        a = xw[:, t] + h @ wh
        i = 0.5 * (1.0 + np.tanh(0.5 * a[:, :hid]))
        f = 0.5 * (1.0 + np.tanh(0.5 * a[:, hid:2 * hid]))
        gg = np.tanh(a[:, 2 * hid:3 * hid])
        o = 0.5 * (1.0 + np.tanh(0.5 * a[:, 3 * hid:]))
        cn = f * c + i * gg
        tc = np.tanh(cn)
        hn = o * tc
        m = mask[:, t:t + 1]
        cache.append((t, h, c, i, f, gg, o, tc, m))
        h = m * hn + (1.0 - m) * h
        c = m * cn + (1.0 - m) * c
        out[:, t] = m * h
    return out, cache


def _lstm_backward(gout, x, wx, wh, cache):
    n, t_len, _ = x.shape
    hid = wh.shape[0]
    dwx = np.zeros_like(wx)
    dwh = np.zeros_like(wh)
    db = np.zeros(4 * hid, dtype=DTYPE)
    dx = np.zeros_like(x)
    dh = np.zeros((n, hid), dtype=DTYPE)
    dc = np.zeros((n, hid), dtype=DTYPE)
    for t, hp, cp, i, f, gg, o, tc, m in reversed(cache):
        dh = dh + m * gout[:, t]
        dhn = m * dh
        dcn = m * dc + dhn * o * (1.0 - tc ** 2)
        da = np.concatenate([
            dcn * gg * i * (1.0 - i),
            dcn * cp * f * (1.0 - f),
            dcn * i * (1.0 - gg ** 2),
            dhn * tc * o * (1.0 - o),
        ], axis=1)
        dwx += x[:, t].T @ da
        dwh += hp.T @ da
        db += da.sum(axis=0)
        dx[:, t] = da @ wx.T
        dh = (1.0 - m) * dh + da @ wh.T
        dc = (1.0 - m) * dc + dcn * f
    return dx, dwx, dwh, db


def birecur(x, fwd, bwd, lengths=None) -> Tensor:
    """Bidirectional LSTM over axis 1 of an (N, T, C) tensor.

    ``fwd`` and ``bwd`` are (w_in, w_hidden, bias) triples with gate order
    (input, forget, cell, output). Steps at or beyond ``lengths[i]`` are
    masked: they emit zeros and do not feed the right-to-left pass.
    Output is (N, T, 2*hidden) with the left-to-right half first.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"birecur: input must be N×T×C, got rank {x.ndim}")
    n, t_len, c_in = x.shape
    if t_len < 1:
        raise ValueError("birecur: sequence length must be >= 1")
    params = [as_tensor(p) for p in (*fwd, *bwd)]
    for wx in (params[0], params[3]):
        if wx.shape[0] != c_in:
            raise ValueError(f"birecur: input features {c_in} != recurrent input weight rows {wx.shape[0]}")
    if lengths is None:
        mask = np.ones((n, t_len), dtype=DTYPE)
    else:
        mask = (np.arange(t_len)[None, :] < np.asarray(lengths)[:, None]).astype(DTYPE)
    out_f, cache_f = _lstm_pass(x.data, params[0].data, params[1].data, params[2].data, mask, False)
    out_b, cache_b = _lstm_pass(x.data, params[3].data, params[4].data, params[5].data, mask, True)
    hid = params[1].shape[0]
    out = np.concatenate([out_f, out_b], axis=2)

    def backward(g):
        dxf, *gf = _lstm_backward(g[:, :, :hid], x.data, params[0].data, params[1].data, cache_f)
        dxb, *gb = _lstm_backward(g[:, :, hid:], x.data, params[3].data, params[4].data, cache_b)
        return (dxf + dxb, *gf, *gb)

    return _make(out, (x, *params), backward, "birecur")


# ---------------------------------------------------------------- graph / optimisation

class NonFiniteGradient(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class Graph:
    """Named parameter registry plus the node order of the last backward pass.

    ``loss_fn`` (optional) rebuilds the scalar loss from the current
    parameter values; :func:`grad_check` needs it.
    """

    def __init__(self, seed=0, loss_fn=None):
        self.params: dict[str, Tensor] = {}
        self.nodes: list[Tensor] = []
        self.rng = np.random.default_rng(seed)
        self.loss_fn = loss_fn

    def add(self, name, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} registered twice")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self.params[name] = t
        return t

    def init_param(self, name, shape, fan_in=None, zero=False) -> Tensor:
        """Uniform fan-in init, U(-sqrt(6/fan_in), sqrt(6/fan_in)); biases zero."""
        if zero:
            return self.add(name, np.zeros(shape, dtype=DTYPE))
        fan_in = fan_in or int(np.prod(shape[:-1]))
        lim = np.sqrt(6.0 / fan_in)
        return self.add(name, self.rng.uniform(-lim, lim, size=shape))

    def backward(self, loss: Tensor):
        self.nodes = loss.backward()
        return self.nodes

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state, strict=True):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if strict and (missing or extra):
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, value in state.items():
            if name not in self.params:
                continue
            p = self.params[name]
            if p.shape != value.shape:
                raise ValueError(f"parameter {name!r}: shape {value.shape} != expected {p.shape}")
            p.data = np.array(value, dtype=DTYPE)


def sgd_step(graph: Graph, lr: float, momentum: float = 0.0, velocity=None):
    """Plain SGD (optionally heavy-ball momentum); grads are cleared afterwards.

    Raises NonFiniteGradient without touching any parameter or velocity if a
    grad, or the update it produces, is NaN/inf.
    """
    for name, p in graph.params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(name)
    new_data, new_vel = {}, {}
    for name, p in graph.params.items():
        if p.grad is None:
            continue
        step = p.grad
        if momentum and velocity is not None:
            v = velocity.get(name)
            step = new_vel[name] = step.copy() if v is None else momentum * v + step
        with np.errstate(invalid="ignore", over="ignore"):
            new_data[name] = p.data - lr * step
        if not np.all(np.isfinite(new_data[name])):
            raise NonFiniteGradient(f"{name} (update)")
    for name, data in new_data.items():
        graph.params[name].data = data
        graph.params[name].grad = None
    if velocity is not None:
        velocity.update(new_vel)


def grad_check(graph: Graph, eps=1e-6, loss_fn=None, max_coords=None, seed=0) -> float:
    """Max relative error between backprop and central finite differences.

    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-6).
    ``max_coords`` limits the checked coordinates per parameter (random
    subset); None checks all of them.
    """
    loss_fn = loss_fn or graph.loss_fn
    if not graph.params:
        return 0.0
    if loss_fn is None:
        raise ValueError("grad_check needs a loss function")
    graph.zero_grad()
    loss = loss_fn()
    graph.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in graph.params.values():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + eps
            up = loss_fn().item()
            flat[k] = orig - eps
            down = loss_fn().item()
            flat[k] = orig
            num = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[k]
            err = abs(a - num) / max(abs(a), abs(num), 1e-6)
            worst = max(worst, err)
    graph.zero_grad()
    return worst


# ---------------------------------------------------------------- checkpoint container

MAGIC = b"DNETCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_container(path, tensors: dict[str, np.ndarray], header: dict | None = None):
    """Write named float64 arrays plus a JSON header; see README for layout."""
    head = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(head)), head,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        key = name.encode("utf-8")
        parts.append(struct.pack("<HB", len(key), arr.ndim) + key)
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def read(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated file (needed {n} bytes at offset {pos})")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    magic = read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version, head_len = struct.unpack("<II", read(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    header = json.loads(read(head_len).decode("utf-8"))
    (count,) = struct.unpack("<I", read(4))
    tensors = {}
    for _ in range(count):
        key_len, ndim = struct.unpack("<HB", read(3))
        name = read(key_len).decode("utf-8")
        shape = struct.unpack(f"<{ndim}Q", read(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(read(8 * size), dtype="<f8").reshape(shape).astype(DTYPE)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return header, tensors
