"""Small reverse-mode autodiff on numpy arrays.

Only the operations the recommender, classifier and critic need are
provided: affine maps, tanh/relu/logistic, masked softmax, reductions and
concatenation.  Everything computes in float64.
"""

import contextlib
import json
import logging
from collections import OrderedDict
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1

_grad_enabled = True


class GraphError(RuntimeError):
    """Raised when backward is requested on a value with no recorded graph."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Tensor):
    """A leaf tensor with a gradient slot of the same shape."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad.fill(0.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    """Wrap an op result, recording the graph only when it matters."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def square(a):
    a = as_tensor(a)

    def backward(g):
        return (2.0 * a.data * g,)

    return _make(a.data * a.data, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), backward)


def relu(a):
    a = as_tensor(a)
    positive = a.data > 0

    def backward(g):
        return (g * positive,)

    return _make(np.where(positive, a.data, 0.0), (a,), backward)


def stable_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = as_tensor(a)
    out = stable_sigmoid(a.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward)


def identity(a):
    return as_tensor(a)


ACTIVATIONS = {"tanh": tanh, "relu": relu, "logistic": sigmoid, "identity": identity}


# ------------------------------------------------------------ shape & reduce

def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` over any number of leading dimensions."""
    x, weight = as_tensor(x), as_tensor(weight)
    out_dim, in_dim = weight.shape
    if x.shape[-1] != in_dim:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight fan-in {in_dim}")
    out = x.data @ weight.data.T
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (out_dim,):
            raise ValueError(f"linear: bias shape {bias.shape} != ({out_dim},)")
        out = out + bias.data
        parents = (x, weight, bias)

    def backward(g):
        flat_g = g.reshape(-1, out_dim)
        grads = [g @ weight.data, flat_g.T @ x.data.reshape(-1, in_dim)]
        if bias is not None:
            grads.append(flat_g.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, backward)


def dense(x, weight, bias, activation="identity"):
    """``activation(x @ weight.T + bias)`` as a single op."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    out_dim, in_dim = weight.shape
    if x.shape[-1] != in_dim:
        raise ValueError(f"dense: input width {x.shape[-1]} != weight fan-in {in_dim}")
    pre = x.data @ weight.data.T + bias.data
    if activation == "identity":
        out, slope = pre, None
    elif activation == "relu":
        out = np.maximum(pre, 0.0)
        slope = pre > 0
    elif activation == "tanh":
        out = np.tanh(pre)
        slope = 1.0 - out * out
    elif activation == "logistic":
        out = stable_sigmoid(pre)
        slope = out * (1.0 - out)
    else:
        raise ValueError(f"unknown activation {activation!r}")

    def backward(g):
        if slope is not None:
            g = g * slope
        flat_g = g.reshape(-1, out_dim)
        g_x = g @ weight.data if x.requires_grad else None
        return g_x, flat_g.T @ x.data.reshape(-1, in_dim), flat_g.sum(axis=0)

    return _make(out, (x, weight, bias), backward)


def reshape(a, shape):
    a = as_tensor(a)
    original = a.shape

    def backward(g):
        return (g.reshape(original),)

    return _make(a.data.reshape(shape), (a,), backward)


def tsum(a, axis=None):
    a = as_tensor(a)
    original = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, original).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), original).copy(),)

    return _make(a.data.sum(axis=axis), (a,), backward)


def mean(a):
    a = as_tensor(a)
    n = a.data.size

    def backward(g):
        return (np.full(a.shape, g / n),)

    return _make(a.data.mean(), (a,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def masked_softmax(scores, mask):
    """Softmax over the last axis restricted to ``mask``; all-masked rows give zeros."""
    scores = as_tensor(scores)
    mask = np.asarray(mask, dtype=bool)
    s = np.where(mask, scores.data, -np.inf)
    top = s.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(s - top), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    out = np.divide(e, total, out=np.zeros_like(e), where=total > 0)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (scores,), backward)


# ------------------------------------------------------------------ backward

def backward(loss, accumulate=False):
    """Populate ``.grad`` of every Parameter reachable from scalar ``loss``.

    With ``accumulate=False`` the participating gradient slots are zeroed
    first, so repeated calls give identical gradients.
    """
    if not isinstance(loss, Tensor) or not loss.requires_grad:
        raise GraphError("backward() called on a value with no recorded forward graph")
    if loss.data.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")

    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    leaves = [n for n in order if isinstance(n, Parameter)]
    if not accumulate:
        for leaf in leaves:
            leaf.zero_grad()

    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg
    return leaves


# ------------------------------------------------------------- parameter sets

class ParameterSet:
    """Ordered, uniquely named collection of Parameters."""

    def __init__(self, items=None):
        self._params = OrderedDict()
        for name, value in (items or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._params[name] = value if isinstance(value, Parameter) else Parameter(value)
        return self._params[name]

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def copy(self):
        return ParameterSet({k: p.data.copy() for k, p in self._params.items()})

    def constants(self):
        """Gradient-free views of the values, for passes that must not train this set."""
        return {k: Tensor(p.data) for k, p in self._params.items()}

    def values_equal(self, other):
        return self.names() == other.names() and all(
            np.array_equal(self[k].data, other[k].data) for k in self
        )

    def flat_values(self):
        return np.concatenate([p.data.ravel() for p in self._params.values()])

    def flat_grads(self):
        return np.concatenate([p.grad.ravel() for p in self._params.values()])


def sgd_step(params, lr):
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for p in params._params.values():
        p.data -= lr * p.grad
        p.zero_grad()


class Adam:
    """Adaptive-moment alternative to :func:`sgd_step` (off by default)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * p.grad
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * p.grad ** 2
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.zero_grad()


def soft_update(target, online, tau):
    """target <- tau * online + (1 - tau) * target, elementwise."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if target.names() != online.names():
        raise ValueError("soft_update: parameter names differ")
    for name, p in target.items():
        src = online[name].data
        if src.shape != p.data.shape:
            raise ValueError(f"soft_update: shape mismatch for {name}: {p.data.shape} vs {src.shape}")
        p.data *= 1.0 - tau
        p.data += tau * src


# ---------------------------------------------------------------------- MLPs

class MLPSpec:
    def __init__(self, widths, hidden="relu", output="identity"):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"MLP widths must list >= 2 positive sizes, got {widths}")
        if hidden not in ("tanh", "relu"):
            raise ValueError(f"unsupported hidden activation {hidden!r}")
        if output not in ("identity", "logistic"):
            raise ValueError(f"unsupported output activation {output!r}")
        self.widths, self.hidden, self.output = widths, hidden, output

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def __repr__(self):
        return f"MLPSpec({self.widths}, hidden={self.hidden!r}, output={self.output!r})"


def glorot(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_mlp(spec, rng, params=None, prefix="mlp"):
    params = params if params is not None else ParameterSet()
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        params.add(f"{prefix}.{i}.W", glorot(rng, fan_out, fan_in))
        params.add(f"{prefix}.{i}.b", np.zeros(fan_out))
    return params


def mlp_apply(spec, params, x, prefix="mlp"):
    """Affine + activation chain; ``params`` maps names to Tensors or Parameters."""
    h = as_tensor(x)
    if h.shape[-1] != spec.widths[0]:
        raise ValueError(f"MLP input width {h.shape[-1]} != {spec.widths[0]}")
    for i in range(spec.n_layers):
        last = i == spec.n_layers - 1
        h = dense(h, params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"], spec.output if last else spec.hidden)
    return h


def mlp_forward(spec, params, x, prefix="mlp"):
    with no_grad():
        return mlp_apply(spec, params, np.asarray(x, dtype=np.float64), prefix).data


# ----------------------------------------------------------------- attention

def attention_scores(items, weight, bias, query):
    """query . tanh(W item + b) for every item; ``items`` is (B, L, d) and ``query`` (B, d) or (d,)."""
    hidden = tanh(linear(items, weight, bias))
    query = as_tensor(query)
    if query.data.ndim == 1:
        query = reshape(query, (1, 1, -1))
    else:
        query = reshape(query, (query.shape[0], 1, query.shape[1]))
    return tsum(mul(hidden, query), axis=-1)


def attention_pool_batch(items, mask, weight, bias, query, return_weights=False):
    """Batched pooling as one fused op; rows whose mask is all-False pool to the zero vector.

    ``items`` is (B, L, d), ``mask`` (B, L) and ``query`` (B, d) or (d,).
    """
    items, weight, bias, query = as_tensor(items), as_tensor(weight), as_tensor(bias), as_tensor(query)
    mask = np.asarray(mask, dtype=bool)
    x = items.data
    b, length, d = x.shape
    if weight.shape[1] != d:
        raise ValueError(f"attention: item width {d} != weight fan-in {weight.shape[1]}")
    q = query.data
    shared = q.ndim == 1
    hidden = np.tanh((x.reshape(-1, d) @ weight.data.T + bias.data).reshape(b, length, -1))
    scores = hidden @ q if shared else (hidden @ q[:, :, None])[..., 0]
    s = np.where(mask, scores, -np.inf)
    top = s.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(s - top), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    alpha = np.divide(e, total, out=np.zeros_like(e), where=total > 0)
    pooled = (alpha[:, None, :] @ x)[:, 0]

    def backward(g):
        g_alpha = (x @ g[:, :, None])[..., 0]
        g_s = alpha * (g_alpha - (g_alpha * alpha).sum(axis=-1, keepdims=True))
        if shared:
            g_q = g_s.reshape(-1) @ hidden.reshape(-1, hidden.shape[-1])
        else:
            g_q = (g_s[:, None, :] @ hidden)[:, 0]
        g_h = g_s[..., None] * (q if shared else q[:, None, :])
        g_pre = g_h * (1.0 - hidden * hidden)
        flat = g_pre.reshape(-1, g_pre.shape[-1])
        g_w = flat.T @ x.reshape(-1, d)
        g_b = flat.sum(axis=0)
        g_x = None
        if items.requires_grad:
            g_x = alpha[..., None] * g[:, None, :] + (flat @ weight.data).reshape(x.shape)
        return g_x, g_w, g_b, g_q

    pooled = _make(pooled, (items, weight, bias, query), backward)
    return (pooled, Tensor(alpha)) if return_weights else pooled


def attention_pool(items, weight, bias, query, return_weights=False):
    """Pool a list of d-vectors into one d-vector (plain numpy in and out)."""
    weight = np.asarray(as_tensor(weight).data)
    d = weight.shape[1]
    query = np.asarray(as_tensor(query).data)
    if query.shape != (d,):
        raise ValueError(f"query must have shape ({d},), got {query.shape}")
    rows = [np.asarray(v, dtype=np.float64) for v in items]
    for v in rows:
        if v.shape != (d,):
            raise ValueError(f"item vector shape {v.shape} != ({d},)")
    if not rows:
        out = np.zeros(d)
        return (out, np.zeros(0)) if return_weights else out
    x = np.stack(rows)[None]
    with no_grad():
        pooled, alpha = attention_pool_batch(
            x, np.ones(x.shape[:2], dtype=bool), weight, bias, query, return_weights=True
        )
    return (pooled.data[0], alpha.data[0]) if return_weights else pooled.data[0]


# ---------------------------------------------------------------- checkpoint

def save_checkpoint(path, groups, meta=None):
    """Write ``groups`` (name -> ParameterSet) as ``<path>.json`` + ``<path>.bin``.

    The payload is little-endian float32 in manifest order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks = [], []
    for group, params in groups.items():
        for name, p in params.items():
            entries.append({"group": group, "name": name, "shape": list(p.data.shape)})
            chunks.append(p.data.astype("<f4").ravel())
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "dtype": "float32",
        "byteorder": "little",
        "entries": entries,
        "meta": meta or {},
    }
    payload = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    path.with_suffix(".bin").write_bytes(payload.astype("<f4").tobytes())
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Return ``(groups, meta)`` where groups maps name -> ParameterSet."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r}")
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4")
    groups, offset = OrderedDict(), 0
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        if offset + size > flat.size:
            raise ValueError("checkpoint payload shorter than manifest")
        values = flat[offset:offset + size].astype(np.float64).reshape(shape)
        groups.setdefault(entry["group"], ParameterSet()).add(entry["name"], values)
        offset += size
    if offset != flat.size:
        raise ValueError("checkpoint payload longer than manifest")
    return groups, manifest.get("meta", {})
