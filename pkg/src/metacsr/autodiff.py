"""Minimal dense-tensor computation tape with reverse-mode differentiation.

A :class:`Tape` records a directed acyclic graph of numpy operations. Nodes
are appended in construction order, so the node list is always a valid
topological order. ``forward`` evaluates every node given leaf feeds and
bound parameters; ``backward`` accumulates adjoints in reverse order and
folds parameter gradients into ``tape.grads``.

All values are float64 ndarrays of rank 0, 1 or 2. Broadcasting is
deliberately restricted: the only implicit broadcast is adding a length-n
vector to every row of an (m, n) matrix (bias-to-rows). Everything else has
to match shapes exactly, which keeps every gradient rule auditable.

Calling :meth:`Tape.backward` twice without :meth:`Tape.zero_grad` doubles
the accumulated parameter gradients; that is intentional and relied upon
for gradient accumulation across sub-graphs.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operation inputs have incompatible shapes."""


class Node:
    """One entry in the computation graph.

    ``idx`` is the position in the tape's node list (node id), ``op`` the
    operation kind, ``inputs`` the producing nodes, ``aux`` any static
    operation attribute (axis, ids, scalar, shape). ``value`` and
    ``adjoint`` cache the most recent forward and backward results.
    """

    __slots__ = ("idx", "op", "inputs", "aux", "value", "adjoint", "may_inf", "name")

    def __init__(self, idx, op, inputs=(), aux=None, name=None):
        self.idx = idx
        self.op = op
        self.inputs = inputs
        self.aux = aux
        self.value = None
        self.adjoint = None
        self.may_inf = False
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node {self.idx} {self.op}{label}>"


def _as_f64(x):
    return np.asarray(x, dtype=np.float64)


def stable_sigmoid(x):
    """Numerically stable logistic function, elementwise."""
    x = _as_f64(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def masked_softmax_rows(z):
    """Row-wise softmax that treats -inf entries as masked out.

    Rows whose entries are all -inf produce an all-zero row instead of NaN,
    which keeps boundary positions of attention masks well defined.
    """
    z = _as_f64(z)
    finite = np.isfinite(z)
    any_finite = finite.any(axis=1)
    rowmax = np.where(any_finite, np.max(np.where(finite, z, -np.inf), axis=1), 0.0)
    e = np.exp(z - rowmax[:, None])
    e[~finite] = 0.0
    s = e.sum(axis=1)
    out = np.zeros_like(z)
    nz = s > 0
    out[nz] = e[nz] / s[nz, None]
    return out


def l2_normalize_rows(x, eps=1e-12):
    """L2-normalize a vector or the rows of a matrix.

    Inputs with norm below ``eps`` map to the zero vector.
    """
    x = _as_f64(x)
    if x.ndim == 1:
        n = np.linalg.norm(x)
        return x / n if n >= eps else np.zeros_like(x)
    n = np.linalg.norm(x, axis=1)
    out = np.zeros_like(x)
    ok = n >= eps
    out[ok] = x[ok] / n[ok, None]
    return out


class Tape:
    """Computation graph builder, evaluator and differentiator."""

    def __init__(self, debug=False):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.debug = debug

    # ------------------------------------------------------------------ leaves

    def _append(self, op, inputs=(), aux=None, name=None, may_inf=None):
        node = Node(len(self.nodes), op, tuple(inputs), aux, name)
        if may_inf is None:
            node.may_inf = any(i.may_inf for i in inputs)
        else:
            node.may_inf = may_inf
        self.nodes.append(node)
        return node

    def leaf(self, name, value=None):
        """A feedable input node; value may be bound now or fed at forward."""
        node = self._append("leaf", name=name)
        if value is not None:
            node.value = _as_f64(value)
        return node

    def param(self, name, value):
        """A named trainable leaf. Names must be unique per tape."""
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        node = self._append("param", name=name)
        node.value = _as_f64(value)
        self.params[name] = node
        return node

    def constant(self, value):
        node = self._append("const")
        node.value = _as_f64(value)
        node.may_inf = not np.all(np.isfinite(node.value))
        return node

    def set_param(self, name, value):
        """Rebind a parameter value; next forward() sees the new value."""
        self.params[name].value = _as_f64(value)

    # --------------------------------------------------------------- operators

    def matmul(self, a, b):
        return self._append("matmul", (a, b))

    def add(self, a, b):
        return self._append("add", (a, b))

    def mul(self, a, b):
        return self._append("mul", (a, b))

    def concat(self, parts, axis=0):
        if not parts:
            raise ShapeError("concat of zero inputs")
        return self._append("concat", tuple(parts), aux=axis)

    def relu(self, a):
        return self._append("relu", (a,))

    def sigmoid(self, a):
        return self._append("sigmoid", (a,))

    def softplus(self, a):
        return self._append("softplus", (a,))

    def exp(self, a):
        return self._append("exp", (a,))

    def log(self, a):
        return self._append("log", (a,))

    def neg(self, a):
        return self._append("neg", (a,))

    def sum(self, a):
        return self._append("sum", (a,))

    def mean_axis(self, a, axis):
        return self._append("mean_axis", (a,), aux=axis)

    def l2norm(self, a):
        return self._append("l2norm", (a,))

    def lookup(self, table, ids):
        """Embedding lookup / row gather.

        ``ids`` may be an int (returns one row as a 1-d vector), or a
        sequence of ints (returns stacked rows; repeats allowed). On a 1-d
        table the result is a 1-d gather.
        """
        if isinstance(ids, (int, np.integer)):
            aux = int(ids)
        else:
            aux = np.asarray(ids, dtype=np.intp)
        return self._append("lookup", (table,), aux=aux)

    def masked_softmax_rows(self, a):
        return self._append("masked_softmax_rows", (a,), may_inf=False)

    def scale(self, a, c):
        return self._append("scale", (a,), aux=float(c))

    def transpose(self, a):
        return self._append("transpose", (a,))

    def reshape(self, a, shape):
        return self._append("reshape", (a,), aux=tuple(shape))

    def scale_rows(self, a, v):
        """Multiply row i of matrix ``a`` by scalar ``v[i]``."""
        return self._append("scale_rows", (a, v))

    # -------------------------------------------------------------- evaluation

    def _err(self, node, msg):
        return ShapeError(f"node {node.idx} ({node.op}"
                          f"{', ' + node.name if node.name else ''}): {msg}")

    def forward(self, feeds=None):
        """Evaluate every node in topological order.

        ``feeds`` maps leaf nodes (or their names) to arrays. Returns the
        list of cached values indexed by node id. Deterministic given the
        feeds and parameter bindings.
        """
        named = {}
        if feeds:
            for key, val in feeds.items():
                if isinstance(key, Node):
                    key.value = _as_f64(val)
                else:
                    named[key] = _as_f64(val)
        for node in self.nodes:
            op = node.op
            if op in ("param", "const"):
                pass
            elif op == "leaf":
                if node.name in named:
                    node.value = named[node.name]
                if node.value is None:
                    raise self._err(node, "leaf has no feed or bound value")
            else:
                node.value = self._compute(node)
            if self.debug and not node.may_inf and op not in ("param", "const", "leaf"):
                if not np.all(np.isfinite(node.value)):
                    raise FloatingPointError(
                        f"non-finite value at node {node.idx} ({op})")
        return [n.value for n in self.nodes]

    def _compute(self, node):
        op = node.op
        vals = [i.value for i in node.inputs]
        if op == "matmul":
            a, b = vals
            if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
                raise self._err(node, f"matmul shapes {a.shape} x {b.shape}")
            return a @ b
        if op == "add":
            a, b = vals
            if a.shape == b.shape:
                return a + b
            if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
                return a + b[None, :]
            raise self._err(node, f"add shapes {a.shape} + {b.shape}")
        if op == "mul":
            a, b = vals
            if a.shape != b.shape:
                raise self._err(node, f"mul shapes {a.shape} * {b.shape}")
            return a * b
        if op == "concat":
            axis = node.aux
            nd = vals[0].ndim
            if any(v.ndim != nd for v in vals):
                raise self._err(node, "concat rank mismatch")
            return np.concatenate(vals, axis=axis)
        if op == "relu":
            return np.maximum(vals[0], 0.0)
        if op == "sigmoid":
            return stable_sigmoid(vals[0])
        if op == "softplus":
            return np.logaddexp(0.0, vals[0])
        if op == "exp":
            return np.exp(vals[0])
        if op == "log":
            return np.log(vals[0])
        if op == "neg":
            return -vals[0]
        if op == "sum":
            return np.asarray(vals[0].sum())
        if op == "mean_axis":
            return np.asarray(vals[0].mean(axis=node.aux))
        if op == "l2norm":
            return l2_normalize_rows(vals[0])
        if op == "lookup":
            return vals[0][node.aux]
        if op == "masked_softmax_rows":
            v = vals[0]
            if v.ndim != 2:
                raise self._err(node, f"expected matrix, got shape {v.shape}")
            return masked_softmax_rows(v)
        if op == "scale":
            return vals[0] * node.aux
        if op == "transpose":
            if vals[0].ndim != 2:
                raise self._err(node, f"transpose of shape {vals[0].shape}")
            return vals[0].T
        if op == "reshape":
            return vals[0].reshape(node.aux)
        if op == "scale_rows":
            a, v = vals
            if a.ndim != 2 or v.ndim != 1 or a.shape[0] != v.shape[0]:
                raise self._err(node, f"scale_rows shapes {a.shape}, {v.shape}")
            return a * v[:, None]
        raise self._err(node, "unknown op")

    # ------------------------------------------------------------------- backward

    def backward(self, loss):
        """Accumulate gradients of a scalar loss node into ``self.grads``.

        Adjoints are propagated in reverse topological order. Parameter
        gradients accumulate across calls until :meth:`zero_grad`.
        Returns the current parameter-gradient mapping.
        """
        if loss.value is None:
            raise ValueError("run forward() before backward()")
        if int(np.prod(loss.value.shape)) != 1:
            raise ValueError(
                f"loss node {loss.idx} is not scalar (shape {loss.value.shape})")
        for node in self.nodes:
            node.adjoint = None
        loss.adjoint = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.idx + 1]):
            adj = node.adjoint
            if adj is None:
                continue
            if node.op == "param":
                g = self.grads.get(node.name)
                self.grads[node.name] = adj.copy() if g is None else g + adj
                continue
            if node.op in ("leaf", "const"):
                continue
            for inp, grad in zip(node.inputs, self._input_grads(node, adj)):
                if grad is None:
                    continue
                if inp.adjoint is None:
                    inp.adjoint = grad
                else:
                    inp.adjoint = inp.adjoint + grad
        return self.grads

    def _input_grads(self, node, adj):
        op = node.op
        vals = [i.value for i in node.inputs]
        if op == "matmul":
            a, b = vals
            if b.ndim == 1:
                return [np.outer(adj, b), a.T @ adj]
            return [adj @ b.T, a.T @ adj]
        if op == "add":
            a, b = vals
            if a.shape == b.shape:
                return [adj, adj]
            return [adj, adj.sum(axis=0)]
        if op == "mul":
            a, b = vals
            return [adj * b, adj * a]
        if op == "concat":
            axis = node.aux
            grads = []
            start = 0
            for v in vals:
                width = v.shape[axis]
                sl = [slice(None)] * v.ndim
                sl[axis] = slice(start, start + width)
                grads.append(adj[tuple(sl)])
                start += width
            return grads
        if op == "relu":
            return [adj * (vals[0] > 0)]
        if op == "sigmoid":
            s = node.value
            return [adj * s * (1.0 - s)]
        if op == "softplus":
            return [adj * stable_sigmoid(vals[0])]
        if op == "exp":
            return [adj * node.value]
        if op == "log":
            return [adj / vals[0]]
        if op == "neg":
            return [-adj]
        if op == "sum":
            return [np.full(vals[0].shape, float(adj))]
        if op == "mean_axis":
            v = vals[0]
            n = v.shape[node.aux]
            g = np.expand_dims(adj / n, axis=node.aux) if v.ndim > adj.ndim \
                else np.asarray(adj / n)
            return [np.broadcast_to(g, v.shape).copy()]
        if op == "l2norm":
            return [self._l2norm_grad(vals[0], node.value, adj)]
        if op == "lookup":
            g = np.zeros_like(vals[0])
            np.add.at(g, node.aux, adj)
            return [g]
        if op == "masked_softmax_rows":
            a = node.value
            dot = (adj * a).sum(axis=1, keepdims=True)
            return [a * (adj - dot)]
        if op == "scale":
            return [adj * node.aux]
        if op == "transpose":
            return [adj.T]
        if op == "reshape":
            return [adj.reshape(vals[0].shape)]
        if op == "scale_rows":
            a, v = vals
            return [adj * v[:, None], (adj * a).sum(axis=1)]
        raise self._err(node, "unknown op in backward")

    @staticmethod
    def _l2norm_grad(x, y, adj, eps=1e-12):
        if x.ndim == 1:
            n = np.linalg.norm(x)
            if n < eps:
                return np.zeros_like(x)
            return (adj - y * (y @ adj)) / n
        n = np.linalg.norm(x, axis=1)
        out = np.zeros_like(x)
        ok = n >= eps
        dots = (y[ok] * adj[ok]).sum(axis=1, keepdims=True)
        out[ok] = (adj[ok] - y[ok] * dots) / n[ok, None]
        return out

    def zero_grad(self):
        self.grads = {}

    def value(self, node):
        return node.value

    def grad(self, name):
        return self.grads.get(name)


def finite_difference_check(tape, loss, param_name, epsilon=1e-6, feeds=None):
    """Max relative error between analytic and central-difference gradients.

    Perturbs every coordinate of the named parameter by +/- epsilon,
    re-running the forward pass each time. The relative error of coordinate
    i is ``|a_i - n_i| / max(1e-12, |a_i| + |n_i|)``. Runs in float64.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    tape.zero_grad()
    tape.forward(feeds)
    tape.backward(loss)
    analytic = tape.grads[param_name].copy()
    pnode = tape.params[param_name]
    base = pnode.value.copy()
    numeric = np.zeros_like(base)
    flat_base = base.reshape(-1)
    flat_num = numeric.reshape(-1)
    for i in range(flat_base.size):
        orig = flat_base[i]
        flat_base[i] = orig + epsilon
        pnode.value = flat_base.reshape(base.shape)
        tape.forward(feeds)
        hi = float(loss.value)
        flat_base[i] = orig - epsilon
        pnode.value = flat_base.reshape(base.shape)
        tape.forward(feeds)
        lo = float(loss.value)
        flat_base[i] = orig
        flat_num[i] = (hi - lo) / (2.0 * epsilon)
    pnode.value = base
    tape.forward(feeds)
    denom = np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
