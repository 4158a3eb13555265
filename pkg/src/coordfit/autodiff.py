"""Array-level reverse-mode differentiation.

Each primitive stores an ``_Op`` record on the ``Value`` it produces.  A
``Tape`` is the topologically ordered list of nodes reachable from an output;
backward propagation walks it in reverse, replay walks it forward.

Primitives operate on whole numpy arrays so that one optimisation step over a
batch of coordinates (or rays) is a single tape of a few dozen nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NonFiniteError, PointAtInfinityError

__all__ = [
    "Value",
    "Tape",
    "grad",
    "grad_wrt_params",
    "grad_wrt_input",
    "finite_diff_check",
    "FiniteDiffResult",
]


class _Op:
    __slots__ = ("name", "inputs", "forward", "backward", "params")

    def __init__(self, name, inputs, forward, backward, params):
        self.name = name
        self.inputs = inputs
        self.forward = forward
        self.backward = backward
        self.params = params


class Value:
    """A numpy array that remembers how it was computed.

    Leaves are created directly by the user; ``requires_grad=True`` marks the
    leaves an optimiser is allowed to update.  Values produced by primitives
    carry an ``_op`` record only when at least one input requires a gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data)
        if data.dtype.kind in "biu":
            data = data.astype(np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._op = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._op is None

    @property
    def op_name(self):
        return None if self._op is None else self._op.name

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = self.name or (self._op.name if self._op else "leaf")
        return f"Value({tag}, shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        tape = Tape(self)
        leaves = [n for n in tape.nodes if n.is_leaf and n.requires_grad]
        grads = tape.backward(seed=seed, wrt=leaves)
        for leaf in leaves:
            g = grads[id(leaf)]
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def _lift(x, like=None):
    if isinstance(x, Value):
        return x
    dtype = None
    if like is not None and np.asarray(x).dtype.kind in "biuf":
        dtype = like.dtype
    return Value(np.asarray(x, dtype=dtype))


def _apply(name, forward, backward, inputs, **params):
    datas = [v.data for v in inputs]
    out = Value(forward(*datas, **params))
    if any(v.requires_grad for v in inputs):
        out.requires_grad = True
        out._op = _Op(name, tuple(inputs), forward, backward, params)
    return out


def _binary(a, b):
    if isinstance(a, Value):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic --------------------------------------------


def _add_b(g, out, a, b, needs):
    return [_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None]


def _sub_b(g, out, a, b, needs):
    return [_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None]


def _mul_b(g, out, a, b, needs):
    return [_unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None]


def _div_b(g, out, a, b, needs):
    return [_unbroadcast(g / b, a.shape) if needs[0] else None,
            _unbroadcast(-g * out / b, b.shape) if needs[1] else None]


def add(a, b):
    a, b = _binary(a, b)
    return _apply("add", np.add, _add_b, [a, b])


def sub(a, b):
    a, b = _binary(a, b)
    return _apply("sub", np.subtract, _sub_b, [a, b])


def mul(a, b):
    a, b = _binary(a, b)
    return _apply("mul", np.multiply, _mul_b, [a, b])


def div(a, b):
    a, b = _binary(a, b)
    return _apply("div", np.divide, _div_b, [a, b])


def neg(x):
    return _apply("neg", np.negative, lambda g, out, x, needs: [-g], [_lift(x)])


def _power_f(x, k):
    return x**k


def _power_b(g, out, x, needs, k):
    return [g * k * x ** (k - 1)]


def power(x, k):
    """x**k for a constant exponent k."""
    return _apply("power", _power_f, _power_b, [_lift(x)], k=k)


def _exp_b(g, out, x, needs):
    return [g * out]


def exp(x):
    return _apply("exp", np.exp, _exp_b, [_lift(x)])


def log(x):
    return _apply("log", np.log, lambda g, out, x, needs: [g / x], [_lift(x)])


def sin(x):
    return _apply("sin", np.sin, lambda g, out, x, needs: [g * np.cos(x)], [_lift(x)])


def cos(x):
    return _apply("cos", np.cos, lambda g, out, x, needs: [-g * np.sin(x)], [_lift(x)])


def sqrt(x):
    return _apply("sqrt", np.sqrt, lambda g, out, x, needs: [0.5 * g / out], [_lift(x)])


def _clip_min_f(x, lo):
    return np.maximum(x, lo)


def _clip_min_b(g, out, x, needs, lo):
    return [g * (x > lo)]


def clip_min(x, lo):
    """max(x, lo) with the gradient routed to x only where x > lo."""
    return _apply("clip_min", _clip_min_f, _clip_min_b, [_lift(x)], lo=lo)


# -- activations and output heads ----------------------------------------


def _relu_f(x):
    return np.maximum(x, 0.0)


def _relu_b(g, out, x, needs):
    # subgradient at the kink is 0
    return [g * (x > 0)]


def relu(x):
    return _apply("relu", _relu_f, _relu_b, [_lift(x)])


def _sine_f(x, omega0):
    return np.sin((2.0 * np.pi * omega0) * x)


def _sine_b(g, out, x, needs, omega0):
    w = 2.0 * np.pi * omega0
    return [g * (w * np.cos(w * x))]


def sine(x, omega0):
    """sin(2*pi*omega0*x)."""
    return _apply("sine", _sine_f, _sine_b, [_lift(x)], omega0=omega0)


def _gauss_f(x, sigma):
    return np.exp(x * x * (-0.5 / sigma**2))


def _gauss_b(g, out, x, needs, sigma):
    return [g * out * x * (-1.0 / sigma**2)]


def gaussian(x, sigma):
    """exp(-x**2 / (2 sigma**2))."""
    return _apply("gaussian", _gauss_f, _gauss_b, [_lift(x)], sigma=sigma)


def _sigmoid_f(x):
    # split to avoid overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    return _apply("sigmoid", _sigmoid_f, lambda g, out, x, needs: [g * out * (1.0 - out)],
                  [_lift(x)])


def _softplus_f(x):
    return np.logaddexp(0.0, x)


def softplus(x):
    return _apply("softplus", _softplus_f, lambda g, out, x, needs: [g * _sigmoid_f(x)],
                  [_lift(x)])


# -- linear algebra --------------------------------------------------------


def _swap(a):
    return np.swapaxes(a, -1, -2)


def _matmul_b(g, out, a, b, needs):
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    ga = gb = None
    if needs[0]:
        ga = g2 @ _swap(b2)
        if a.ndim == 1:
            ga = ga[..., 0, :]
        ga = _unbroadcast(ga, a.shape)
    if needs[1]:
        gb = _swap(a2) @ g2
        if b.ndim == 1:
            gb = gb[..., 0]
        gb = _unbroadcast(gb, b.shape)
    return [ga, gb]


def matmul(a, b):
    a, b = _binary(a, b)
    return _apply("matmul", np.matmul, _matmul_b, [a, b])


def _affine_f(x, w, b):
    return x @ w.T + b


def _affine_b(g, out, x, w, b, needs):
    gx = gw = gb = None
    if needs[0]:
        gx = g @ w
    g2 = g.reshape(-1, g.shape[-1])
    if needs[1]:
        gw = g2.T @ x.reshape(-1, x.shape[-1])
    if needs[2]:
        gb = g2.sum(axis=0)
    return [gx, gw, gb]


def affine(x, w, b):
    """x @ w.T + b with w stored as (out, in)."""
    x = _lift(x)
    w = _lift(w, x)
    b = _lift(b, x)
    if x.shape[-1] != w.shape[1]:
        raise ContractViolation(f"affine: input width {x.shape[-1]} != weight fan-in {w.shape[1]}")
    return _apply("affine", _affine_f, _affine_b, [x, w, b])


def _hdiv_f(x):
    w = x[..., -1:]
    if np.any(np.abs(w) < 1e-9):
        raise PointAtInfinityError("homogeneous divide: |w| < 1e-9")
    return x[..., :-1] / w


def _hdiv_b(g, out, x, needs):
    w = x[..., -1:]
    gx = np.empty_like(x)
    gx[..., :-1] = g / w
    gx[..., -1] = -np.sum(g * out, axis=-1) / w[..., 0]
    return [gx]


def homogeneous_divide(x):
    """(..., n+1) homogeneous points -> (..., n) Euclidean points."""
    return _apply("homogeneous_divide", _hdiv_f, _hdiv_b, [_lift(x)])


# -- reductions and shape manipulation -------------------------------------


def _sum_f(x, axis, keepdims):
    return np.sum(x, axis=axis, keepdims=keepdims)


def _sum_b(g, out, x, needs, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, x.shape)]


def sum_(x, axis=None, keepdims=False):
    return _apply("sum", _sum_f, _sum_b, [_lift(x)], axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    x = _lift(x)
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return sum_(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def _reshape_f(x, shape):
    return np.reshape(x, shape)


def reshape(x, shape):
    return _apply("reshape", _reshape_f, lambda g, out, x, needs, shape: [g.reshape(x.shape)],
                  [_lift(x)], shape=shape)


def _transpose_f(x, axes):
    return np.transpose(x, axes)


def _transpose_b(g, out, x, needs, axes):
    inv = None if axes is None else tuple(np.argsort(axes))
    return [np.transpose(g, inv)]


def transpose(x, axes=None):
    return _apply("transpose", _transpose_f, _transpose_b, [_lift(x)],
                  axes=None if axes is None else tuple(axes))


def _is_fancy(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def _getitem_f(x, index):
    return x[index]


def _getitem_b(g, out, x, needs, index):
    gx = np.zeros_like(x)
    if _is_fancy(index):
        np.add.at(gx, index, g)
    else:
        gx[index] = g
    return [gx]


def getitem(x, index):
    return _apply("getitem", _getitem_f, _getitem_b, [_lift(x)], index=index)


def _concat_f(*xs, axis):
    return np.concatenate(xs, axis=axis)


def _concat_b(g, out, *xs, needs, axis):
    edges = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return np.split(g, edges, axis=axis)


def concat(xs, axis=-1):
    xs = [_lift(x) for x in xs]
    return _apply("concat", _concat_f, _concat_b, xs, axis=axis)


def _stack_f(*xs, axis):
    return np.stack(xs, axis=axis)


def _stack_b(g, out, *xs, needs, axis):
    return [np.take(g, i, axis=axis) for i in range(len(xs))]


def stack(xs, axis=0):
    xs = [_lift(x) for x in xs]
    return _apply("stack", _stack_f, _stack_b, xs, axis=axis)


# -- volume compositing ------------------------------------------------------


def _transmittance(s):
    total = np.cumsum(s, axis=-1)
    T = np.exp(-np.concatenate([np.zeros_like(s[..., :1]), total], axis=-1))
    return T


def _composite_w_f(s):
    T = _transmittance(s)
    w = T[..., :-1] * -np.expm1(-s)
    return np.concatenate([w, T[..., -1:]], axis=-1)


def _composite_w_b(g, out, s, needs):
    # weights telescope: w_k = T_k - T_{k+1}, residual = T_N
    T = _transmittance(s)
    h = (g[..., 1:] - g[..., :-1]) * T[..., 1:]
    tail = np.cumsum(h[..., ::-1], axis=-1)[..., ::-1]
    return [-tail]


def composite_weights(optical_depth):
    """Quadrature weights from per-sample optical depth sigma_i * delta_i.

    Returns ``(..., N + 1)``: the N compositing weights followed by the
    residual transmittance past the last sample.
    """
    return _apply("composite_weights", _composite_w_f, _composite_w_b, [_lift(optical_depth)])


# -- tape ------------------------------------------------------------------


class Tape:
    """Topologically ordered record of the computation producing ``output``."""

    def __init__(self, output):
        if not isinstance(output, Value):
            raise ContractViolation("Tape requires a Value output")
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(output):
        order = []
        visited = set()
        active = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                active.discard(id(node))
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            active.add(id(node))
            stack.append((node, True))
            if node._op is not None:
                for inp in reversed(node._op.inputs):
                    if id(inp) in active:
                        raise RuntimeError("cycle detected in computation graph")
                    if id(inp) not in visited:
                        stack.append((inp, False))
        return order

    def __len__(self):
        return len(self.nodes)

    @property
    def ops(self):
        return [n._op.name for n in self.nodes if n._op is not None]

    def leaves(self):
        return [n for n in self.nodes if n.is_leaf]

    def replay(self):
        """Re-run every recorded primitive from the leaves; returns node outputs in order."""
        values = {}
        for node in self.nodes:
            if node._op is None:
                values[id(node)] = node.data
            else:
                op = node._op
                values[id(node)] = op.forward(*[values[id(i)] for i in op.inputs], **op.params)
        return [values[id(n)] for n in self.nodes]

    def backward(self, seed=None, wrt=None):
        """Propagate cotangents from the output.

        Returns a dict mapping ``id(node)`` to its gradient for every node in
        ``wrt`` (default: every leaf requiring a gradient).  Nodes in ``wrt``
        that do not influence the output get zeros.
        """
        out = self.output
        if seed is None:
            if out.data.size != 1:
                raise ContractViolation(f"backward from non-scalar output of shape {out.shape}")
            seed = np.ones_like(out.data)
        seed = np.asarray(seed, dtype=out.dtype)
        if seed.shape != out.shape:
            raise ContractViolation(f"seed shape {seed.shape} != output shape {out.shape}")
        if wrt is None:
            wrt = [n for n in self.nodes if n.is_leaf and n.requires_grad]
        targets = {id(v) for v in wrt}

        needs = {}
        for node in self.nodes:
            if id(node) in targets:
                needs[id(node)] = True
            elif node._op is None:
                needs[id(node)] = False
            else:
                needs[id(node)] = any(needs[id(i)] for i in node._op.inputs)

        grads = {id(out): seed}
        for node in reversed(self.nodes):
            op = node._op
            g = grads.get(id(node))
            if op is None or g is None or not needs[id(node)]:
                continue
            in_needs = [needs[id(i)] for i in op.inputs]
            in_grads = op.backward(g, node.data, *[i.data for i in op.inputs], needs=in_needs,
                                   **op.params)
            for inp, flag, gi in zip(op.inputs, in_needs, in_grads):
                if not flag or gi is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        result = {}
        for v in wrt:
            g = grads.get(id(v))
            if g is None:
                g = np.zeros_like(v.data)
            result[id(v)] = np.broadcast_to(g, v.shape).copy() if g.shape != v.shape else g
        return result


def grad(output, wrt, seed=None):
    """Gradients of ``output`` w.r.t. each Value in ``wrt`` (list, same order)."""
    grads = Tape(output).backward(seed=seed, wrt=list(wrt))
    return [grads[id(v)] for v in wrt]


def grad_wrt_params(loss, leaves):
    """Map each leaf to d(loss)/d(leaf); leaves not on the tape get zeros."""
    if not isinstance(loss, Value) or loss.data.size != 1:
        shape = loss.shape if isinstance(loss, Value) else np.shape(loss)
        raise ContractViolation(f"loss must be a scalar Value, got shape {shape}")
    leaves = list(leaves)
    grads = Tape(loss).backward(wrt=leaves)
    return {leaf: grads[id(leaf)] for leaf in leaves}


def grad_wrt_input(net, x, iteration=None):
    """Jacobian of ``net`` at each row of ``x``: returns (B, out_dim, in_dim).

    Rows of a batch are independent, so one backward pass per output
    component yields the whole batch of Jacobian rows.
    """
    x = np.atleast_2d(np.asarray(x, dtype=net.dtype))
    xv = Value(x, requires_grad=True)
    y = net(xv, iteration=iteration)
    tape = Tape(y)
    jac = np.empty((x.shape[0], y.shape[-1], x.shape[-1]), dtype=x.dtype)
    for j in range(y.shape[-1]):
        seed = np.zeros_like(y.data)
        seed[:, j] = 1.0
        jac[:, j, :] = tape.backward(seed=seed, wrt=[xv])[id(xv)]
    return jac


@dataclass
class FiniteDiffResult:
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    nondifferentiable: bool


def finite_diff_check(f, x, h=1e-5, eps=1e-12):
    """Compare the tape gradient of scalar ``f`` with central differences.

    ``f`` maps a Value to a scalar Value.  The reported error is
    max_i |analytic_i - numeric_i| / (|analytic_i| + eps).  When the one-sided
    difference quotients disagree far beyond what curvature allows, the point
    is flagged as non-differentiable and ``max_rel_error`` is NaN.
    """
    if h <= 0:
        raise ContractViolation("step h must be positive")
    x = np.array(x, dtype=np.float64)
    xv = Value(x, requires_grad=True)
    fx = f(xv)
    f0 = float(np.asarray(fx.data).reshape(()))
    if not np.isfinite(f0):
        raise NonFiniteError(f"f(x) is not finite: {f0}")
    (analytic,) = grad(fx, [xv])

    def evaluate(point):
        val = float(np.asarray(f(Value(point)).data).reshape(()))
        if not np.isfinite(val):
            raise NonFiniteError(f"f is not finite at a perturbed point: {val}")
        return val

    numeric = np.empty_like(x)
    kink = False
    flat = x.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = evaluate(xp.reshape(x.shape))
        fm = evaluate(xm.reshape(x.shape))
        numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
        fwd = (fp - f0) / h
        bwd = (f0 - fm) / h
        if abs(fwd - bwd) > max(0.1 * (abs(fwd) + abs(bwd)), 1e3 * h):
            kink = True
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + eps)
    err = float("nan") if kink else float(rel.max(initial=0.0))
    return FiniteDiffResult(err, analytic, numeric, kink)
