"""Dense float64 tensors with a reverse-mode autodiff tape.

A ``Node`` wraps a numpy array (``value``) and remembers how it was produced
so gradients can be pushed back through the graph. Leaves created with
``requires_grad=True`` act as trainable parameters. Two gradient entry
points exist:

  * ``backward(root)`` accumulates into ``.grad`` (repeated calls add up
    until ``zero_grad``), used for training losses;
  * ``grad_of(root, wrt)`` returns gradients in a dict and never touches
    ``.grad``, used for gradient probes that must not contaminate the
    parameter gradients.

Convolution and pooling dispatch to the selected kernel backend.
"""

import struct

import numpy as np

from .backend import kernels


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "_grad", "parents", "vjps", "requires_grad")

    def __init__(self, value, parents=(), vjps=(), requires_grad=None):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad = None
        self.parents = tuple(parents)
        self.vjps = tuple(vjps)
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = g

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self._grad = None

    # arithmetic sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


def as_node(x):
    return x if isinstance(x, Node) else Node(x, requires_grad=False)


def parameter(value, rng=None):
    """A trainable leaf."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def _unbroadcast(g, shape):
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _pullback(root):
    """Run the chain rule from a scalar root; returns ({id: grad}, order)."""
    if root.value.size != 1:
        raise ValueError(f"need a scalar root, got shape {root.value.shape}")
    order = _toposort(root)
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            if not parent.requires_grad:
                continue
            contrib = vjp(g)
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + contrib
            else:
                grads[pid] = contrib
    return grads, order


def backward(root):
    """Accumulate d(root)/d(node) into ``.grad`` for every reachable node.

    ``root`` must be scalar; repeated calls without zeroing add up.
    """
    grads, order = _pullback(root)
    for node in order:
        g = grads.get(id(node))
        if g is None:
            continue
        if node._grad is None:
            node._grad = np.array(g)
        else:
            node._grad = node._grad + g


def grad_of(root, wrt):
    """Gradients of a scalar root w.r.t. selected nodes, without touching .grad.

    This is the probe entry point: masks and activation maps query gradients
    through here so training gradients stay clean.
    """
    grads, _ = _pullback(root)
    return [grads.get(id(n), np.zeros_like(n.value)) for n in wrt]


def zero_grad(params):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = as_node(a), as_node(b)
    return Node(
        a.value + b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.value.shape), lambda g: _unbroadcast(g, b.value.shape)),
    )


def sub(a, b):
    a, b = as_node(a), as_node(b)
    return Node(
        a.value - b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.value.shape), lambda g: _unbroadcast(-g, b.value.shape)),
    )


def mul(a, b):
    a, b = as_node(a), as_node(b)
    return Node(
        a.value * b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.value, a.value.shape),
            lambda g: _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def div(a, b):
    a, b = as_node(a), as_node(b)
    return Node(
        a.value / b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.value, a.value.shape),
            lambda g: _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        ),
    )


def exp(a):
    a = as_node(a)
    out = np.exp(a.value)
    return Node(out, (a,), (lambda g: g * out,))


def log(a):
    a = as_node(a)
    return Node(np.log(a.value), (a,), (lambda g: g / a.value,))


def sqrt(a):
    a = as_node(a)
    out = np.sqrt(a.value)
    return Node(out, (a,), (lambda g: g * 0.5 / out,))


def relu(a):
    a = as_node(a)
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0.0), (a,), (lambda g: g * mask,))


def sigmoid(a):
    a = as_node(a)
    v = a.value
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return Node(out, (a,), (lambda g: g * out * (1.0 - out),))


def detach(a):
    """Constant copy of a node's value (blocks gradient flow)."""
    return Node(np.array(as_node(a).value), requires_grad=False)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims=False):
    a = as_node(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, a.value.shape).copy()

    return Node(out, (a,), (vjp,))


def mean(a, axis=None, keepdims=False):
    a = as_node(a)
    n = a.value.size if axis is None else np.prod(
        [a.value.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def _extreme(a, axis, keepdims, use_max):
    a = as_node(a)
    fn = np.max if use_max else np.min
    argfn = np.argmax if use_max else np.argmin
    out = fn(a.value, axis=axis, keepdims=keepdims)
    arg = argfn(a.value, axis=axis)

    def vjp(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        dx = np.zeros_like(a.value)
        np.put_along_axis(dx, np.expand_dims(arg, axis), g, axis=axis)
        return dx

    return Node(out, (a,), (vjp,))


def max_(a, axis, keepdims=False):
    """Max over one axis; ties route the gradient to the first winner."""
    return _extreme(a, axis, keepdims, use_max=True)


def min_(a, axis, keepdims=False):
    return _extreme(a, axis, keepdims, use_max=False)


def reshape(a, shape):
    a = as_node(a)
    old = a.value.shape
    return Node(a.value.reshape(shape), (a,), (lambda g: g.reshape(old),))


def transpose(a, axes=None):
    a = as_node(a)
    if axes is None:
        axes = tuple(reversed(range(a.value.ndim)))
    inv = np.argsort(axes)
    return Node(a.value.transpose(axes), (a,), (lambda g: g.transpose(inv),))


def slice_rows(a, start, stop):
    """Contiguous slice along axis 0."""
    a = as_node(a)
    shape = a.value.shape

    def vjp(g):
        dx = np.zeros(shape)
        dx[start:stop] = g
        return dx

    return Node(a.value[start:stop], (a,), (vjp,))


def slice_cols(a, col):
    """Select one column of a 2-D node: [B,C] -> [B]."""
    a = as_node(a)
    shape = a.value.shape

    def vjp(g):
        dx = np.zeros(shape)
        dx[:, col] = g
        return dx

    return Node(a.value[:, col], (a,), (vjp,))


def stack_cols(nodes):
    """Stack 1-D nodes of equal length into the columns of a 2-D node."""
    nodes = [as_node(n) for n in nodes]
    value = np.stack([n.value for n in nodes], axis=1)
    vjps = tuple((lambda g, i=i: g[:, i]) for i in range(len(nodes)))
    return Node(value, tuple(nodes), vjps)


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value

    def vjp_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)

    def vjp_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)

    return Node(np.matmul(av, bv), (a, b), (vjp_a, vjp_b))


# ---------------------------------------------------------------------------
# neural primitives


def conv2d(x, kernels_node, bias, stride=1, pad=0):
    """2-D cross-correlation of x[B,C,H,W] with kernels[K,C,kh,kw] + bias[K].

    Output spatial size is floor((H + 2*pad - kh)/stride) + 1 (same for W).
    Differentiable w.r.t. x, kernels, and bias.
    """
    x, w, b = as_node(x), as_node(kernels_node), as_node(bias)
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ValueError(
            f"conv2d expects x[B,C,H,W] and kernels[K,C,kh,kw], got {x.value.shape} and {w.value.shape}"
        )
    B, C, H, W = x.value.shape
    K, Cw, kh, kw = w.value.shape
    if Cw != C:
        raise ValueError(f"conv2d channel mismatch: input has {C}, kernels expect {Cw}")
    if b.value.shape != (K,):
        raise ValueError(f"conv2d bias must have shape ({K},), got {b.value.shape}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if kh > Hp or kw > Wp:
        raise ValueError(
            f"conv2d kernel {kh}x{kw} larger than padded input {Hp}x{Wp}"
        )
    xp = np.pad(x.value, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.value
    out = kernels.conv2d_forward(xp, w.value, b.value, stride)

    def vjp_x(g):
        dxp = kernels.conv2d_backward_input(np.ascontiguousarray(g), w.value, Hp, Wp, stride)
        return dxp[:, :, pad : Hp - pad, pad : Wp - pad] if pad else dxp

    def vjp_w(g):
        return kernels.conv2d_backward_kernel(np.ascontiguousarray(g), xp, kh, kw, stride)

    def vjp_b(g):
        return g.sum(axis=(0, 2, 3))

    return Node(out, (x, w, b), (vjp_x, vjp_w, vjp_b))


def maxpool2(x):
    """2x2 max pooling with stride 2; odd trailing row/col dropped."""
    x = as_node(x)
    B, C, H, W = x.value.shape
    out, arg = kernels.maxpool2_forward(x.value)

    def vjp(g):
        return kernels.maxpool2_backward(np.ascontiguousarray(g), arg, H, W)

    return Node(out, (x,), (vjp,))


def global_avg_pool(z):
    """Spatial mean per channel: [B,K,H,W] -> [B,K]."""
    z = as_node(z)
    if z.value.ndim != 4:
        raise ValueError(f"global_avg_pool expects [B,K,H,W], got {z.value.shape}")
    return mean(z, axis=(2, 3))


def linear(x, weight, bias):
    """Affine map: x[B,d] @ weight[out,d]^T + bias[out]."""
    return add(matmul(x, transpose(weight)), bias)


def softmax(logits, axis=-1):
    """Row-stable softmax along ``axis``."""
    logits = as_node(logits)
    shift = detach(max_(logits, axis=axis, keepdims=True))
    e = exp(sub(logits, shift))
    return div(e, sum_(e, axis=axis, keepdims=True))


def log_softmax(logits, axis=-1):
    logits = as_node(logits)
    shift = detach(max_(logits, axis=axis, keepdims=True))
    d = sub(logits, shift)
    return sub(d, log(sum_(exp(d), axis=axis, keepdims=True)))


def check_onehot(onehot):
    oh = np.asarray(onehot, dtype=np.float64)
    ok = np.all(np.isin(oh, (0.0, 1.0))) and np.all(oh.sum(axis=-1) == 1.0)
    if not ok:
        raise ValueError("onehot rows must contain exactly one 1 and zeros elsewhere")
    return oh


def softmax_cross_entropy(logits, onehot):
    """Mean over the batch of -sum_c y_c * log softmax(logits)_c."""
    oh = check_onehot(as_node(onehot).value)
    ls = log_softmax(logits, axis=-1)
    picked = sum_(mul(ls, Node(oh)), axis=-1)
    return mul(mean(picked), -1.0)


def onehot_encode(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# model parts


def _init_conv(rng, out_ch, in_ch, kh, kw):
    fan_in = in_ch * kh * kw
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, kh, kw))


def _init_linear(rng, out_d, in_d):
    return rng.normal(0.0, np.sqrt(2.0 / in_d), size=(out_d, in_d))


class Featurizer:
    """Stack of (conv3x3 pad 1 -> relu -> maxpool2) blocks."""

    def __init__(self, in_channels, channels=64, blocks=3, rng=None):
        rng = rng or np.random.default_rng(0)
        self.blocks = []
        c = in_channels
        for _ in range(blocks):
            w = parameter(_init_conv(rng, channels, c, 3, 3))
            b = parameter(np.zeros(channels))
            self.blocks.append((w, b))
            c = channels
        self.channels = channels

    def forward(self, x):
        """Returns (z, z_prev): last-block features and the block before."""
        h = as_node(x)
        acts = []
        for w, b in self.blocks:
            h = maxpool2(relu(conv2d(h, w, b, stride=1, pad=1)))
            acts.append(h)
        z_prev = acts[-2] if len(acts) > 1 else None
        return acts[-1], z_prev

    def forward_values(self, x):
        """Graph-free forward for evaluation."""
        h = np.asarray(x, dtype=np.float64)
        for w, b in self.blocks:
            h = kernels.conv2d_forward(np.pad(h, ((0, 0), (0, 0), (1, 1), (1, 1))), w.value, b.value, 1)
            h = np.where(h > 0, h, 0.0)
            h, _ = kernels.maxpool2_forward(h)
        return h

    def parameters(self):
        out = {}
        for i, (w, b) in enumerate(self.blocks):
            out[f"feat.block{i}.w"] = w
            out[f"feat.block{i}.b"] = b
        return out


class LinearClassifier:
    """Pooling followed by one affine layer; the ``w`` of f = w o phi."""

    def __init__(self, in_features, classes, rng=None, pool=None):
        rng = rng or np.random.default_rng(0)
        self.weight = parameter(_init_linear(rng, classes, in_features))
        self.bias = parameter(np.zeros(classes))
        self.pool = pool or global_avg_pool

    def logits_from_features(self, z):
        return linear(self.pool(z), self.weight, self.bias)

    def logits_from_pooled(self, pooled):
        return linear(pooled, self.weight, self.bias)

    def logits_values(self, z_values):
        pooled = np.asarray(z_values, dtype=np.float64).mean(axis=(2, 3))
        return pooled @ self.weight.value.T + self.bias.value

    def parameters(self):
        return {"clf.weight": self.weight, "clf.bias": self.bias}


class ModelParts:
    """Featurizer phi plus classifier w."""

    def __init__(self, featurizer, classifier):
        self.featurizer = featurizer
        self.classifier = classifier

    def forward(self, x):
        z, z_prev = self.featurizer.forward(x)
        return self.classifier.logits_from_features(z), z, z_prev

    def predict_values(self, x):
        return self.classifier.logits_values(self.featurizer.forward_values(x))

    def parameters(self):
        out = dict(self.featurizer.parameters())
        out.update(self.classifier.parameters())
        return out


def build_cnn(in_channels, classes, channels=64, blocks=3, seed=0):
    rng = np.random.default_rng(seed)
    feat = Featurizer(in_channels, channels=channels, blocks=blocks, rng=rng)
    clf = LinearClassifier(channels, classes, rng=rng)
    return ModelParts(feat, clf)


# ---------------------------------------------------------------------------
# checkpoint container
#
# Layout (all integers little-endian uint32, floats little-endian float64):
#   magic  b"XDG1"
#   u32    entry count
#   per entry:
#     u32 name length, name bytes (utf-8)
#     u32 ndim, u32 x ndim dims
#     float64 x prod(dims) row-major payload

MAGIC = b"XDG1"


def save_arrays(path, arrays):
    """Write named float64 arrays in the XDG1 container format."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f8").tobytes())


def load_arrays(path):
    """Read an XDG1 container back into an ordered name->array dict."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ValueError(f"bad checkpoint magic {data[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ValueError(f"truncated checkpoint at offset {pos}")
        out = data[pos : pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).copy()
        arrays[name] = arr
    return arrays
