"""Reverse-mode automatic differentiation over dense numpy arrays.

Tensors are thin wrappers around float32 ndarrays that record the ops
producing them; ``backward`` on a scalar walks the tape and accumulates
gradients into every reachable tensor with ``requires_grad``. The primitive
set is deliberately small: linear maps, ReLU, trig, exp/log, stable
sigmoid/softplus, concatenation, reductions, elementwise arithmetic, an
exclusive prefix sum (for transmittance), and row broadcasting/slicing.

Values are float32; reductions accumulate in float64 before rounding back,
which keeps large ray-batch losses stable. Graphs built from float64 leaves
stay in float64 end to end (used by the finite-difference oracles).

``inference_mode()`` disables tape recording so pure renders free their
intermediates eagerly instead of pinning them for a backward pass that
never comes.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(Exception):
    """Base class for graph construction/execution failures."""


class ShapeMismatchError(AutodiffError):
    """Raised when an op receives arguments of incompatible shapes."""


class NonFiniteError(AutodiffError):
    """Raised when a NaN or Inf is produced (checked in debug mode)."""


class GraphError(AutodiffError):
    """Raised on invalid backward calls (non-scalar loss, no graph)."""


class MissingGradientError(AutodiffError):
    """Raised when an optimizer step finds a trainable param without grad."""


_FINITE_CHECKS = False
_BUILD_GRAPH = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf checking; returns the previous setting.

    Expensive on large graphs, so the training hot loop leaves it off and
    checks the loss scalar instead. Tests switch it on.
    """
    global _FINITE_CHECKS
    previous = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return previous


class inference_mode:
    """Context manager: ops inside compute values but record no tape."""

    def __enter__(self):
        global _BUILD_GRAPH
        self._previous = _BUILD_GRAPH
        _BUILD_GRAPH = False
        return self

    def __exit__(self, *exc):
        global _BUILD_GRAPH
        _BUILD_GRAPH = self._previous
        return False


def _checked(op: str, data: np.ndarray) -> np.ndarray:
    if _FINITE_CHECKS and not np.isfinite(data).all():
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    return data


class Tensor:
    """A node in the computation graph: an ndarray plus backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        if isinstance(data, np.ndarray):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable grad-enabled leaf.

        ``self`` must be a scalar produced by at least one op.
        """
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self.op in ("leaf", "param"):
            raise GraphError("backward called on a tensor that was not produced by a forward op")

        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; python scalars are promoted to constants.
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """A named, optionally trainable leaf tensor."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True):
        super().__init__(np.asarray(value, dtype=np.float32), op="param")
        self.name = name
        self.trainable = trainable

    # requires_grad tracks trainability so frozen subnetworks drop out of
    # the backward pass entirely (this is what makes hybrid updates cheap).
    @property
    def requires_grad(self):  # type: ignore[override]
        return self.trainable

    @requires_grad.setter
    def requires_grad(self, value):
        # Assigned once by Tensor.__init__; real value set right after.
        object.__setattr__(self, "trainable", bool(value))

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, trainable={self.trainable})"


def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def constant(value, dtype=np.float32) -> Tensor:
    """A leaf tensor that never receives gradients."""
    return Tensor(np.asarray(value, dtype=dtype))


def _make(op, data, parents, backward_builder):
    """Create an op output; the tape is recorded only when needed."""
    req = _BUILD_GRAPH and any(p.requires_grad for p in parents)
    if not req:
        return Tensor(_checked(op, data), op=op)
    return Tensor(
        _checked(op, data),
        requires_grad=True,
        parents=parents,
        backward_fn=backward_builder(),
        op=op,
    )


def _binary_shapes(op, a, b):
    # Equal shapes, or one side is a scalar; no general broadcasting.
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeMismatchError(f"op '{op}': shapes {a.data.shape} and {b.data.shape} do not match")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to a scalar operand's shape."""
    if g.shape == tuple(shape):
        return g
    return np.sum(g, dtype=np.float64).astype(g.dtype).reshape(shape)


def _binary(op, a, b, fwd_fn, grad_a, grad_b):
    _binary_shapes(op, a, b)

    def builder():
        def backward_fn(g):
            if a.requires_grad:
                a.accumulate_grad(_reduce_to(grad_a(g), a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_reduce_to(grad_b(g), b.data.shape))

        return backward_fn

    return _make(op, fwd_fn(), (a, b), builder)


def _unary(op, x, fwd_data, grad_fn):
    def builder():
        def backward_fn(g):
            x.accumulate_grad(grad_fn(g))

        return backward_fn

    return _make(op, fwd_data, (x,), builder)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, lambda: a.data + b.data, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, lambda: a.data - b.data, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary("mul", a, b, lambda: a.data * b.data,
                   lambda g: g * b.data, lambda g: g * a.data)


def div(a: Tensor, b: Tensor) -> Tensor:
    return _binary(
        "div",
        a,
        b,
        lambda: a.data / b.data,
        lambda g: g / b.data,
        lambda g: -g * a.data / (b.data * b.data),
    )


def neg(x: Tensor) -> Tensor:
    return _unary("neg", x, -x.data, lambda g: -g)


def relu(x: Tensor) -> Tensor:
    # Subgradient at 0 is 0; the mask is recomputed in backward to keep the
    # forward pass a single fused maximum.
    return _unary("relu", x, np.maximum(x.data, 0), lambda g: g * (x.data > 0))


def sin(x: Tensor) -> Tensor:
    return _unary("sin", x, np.sin(x.data), lambda g: g * np.cos(x.data))


def cos(x: Tensor) -> Tensor:
    return _unary("cos", x, np.cos(x.data), lambda g: -g * np.sin(x.data))


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)
    return _unary("exp", x, out_data, lambda g: g * out_data)


def log(x: Tensor) -> Tensor:
    return _unary("log", x, np.log(x.data), lambda g: g / x.data)


def log_clipped(x: Tensor, floor: float = 1e-10) -> Tensor:
    """log(max(x, floor)); the gradient is zero where the floor clips."""
    clipped = np.maximum(x.data, floor)
    mask = x.data > floor
    return _unary("log_clipped", x, np.log(clipped), lambda g: g * mask / clipped)


def maximum_scalar(x: Tensor, low: float) -> Tensor:
    mask = x.data > low
    return _unary("maximum_scalar", x, np.maximum(x.data, low), lambda g: g * mask)


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is stable for large |x|.
    out_data = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _unary("sigmoid", x, out_data, lambda g: g * out_data * (1.0 - out_data))


def softplus(x: Tensor) -> Tensor:
    out_data = np.logaddexp(np.zeros((), dtype=x.data.dtype), x.data)
    sig = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _unary("softplus", x, out_data, lambda g: g * sig)


def linear(x: Tensor, weight: Parameter, bias: Parameter | None = None) -> Tensor:
    """x @ weight (+ bias); x is (N, in), weight (in, out), bias (out,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise ShapeMismatchError(
            f"op 'linear': input {x.data.shape} incompatible with weight {weight.data.shape}"
        )
    out_data = x.data @ weight.data
    if bias is not None:
        if bias.data.shape != (weight.data.shape[1],):
            raise ShapeMismatchError(
                f"op 'linear': bias {bias.data.shape} incompatible with weight {weight.data.shape}"
            )
        out_data = out_data + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def builder():
        def backward_fn(g):
            if weight.requires_grad:
                weight.accumulate_grad(x.data.T @ g)
            if x.requires_grad:
                x.accumulate_grad(g @ weight.data.T)
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(np.sum(g, axis=0))

        return backward_fn

    return _make("linear", out_data, parents, builder)


def linear_parts(parts, weight: Parameter, bias: Parameter | None = None) -> Tensor:
    """sum_i parts[i] @ weight[rows_i] (+ bias), without materializing the
    concatenation of ``parts``.

    Row counts must agree, except parts with a single row, which broadcast
    across the batch (cheap injection of per-instance codes). Equivalent to
    ``linear(concat(parts), weight, bias)``.
    """
    parts = list(parts)
    sizes = [p.data.shape[1] for p in parts]
    if any(p.data.ndim != 2 for p in parts) or sum(sizes) != weight.data.shape[0]:
        raise ShapeMismatchError(
            f"op 'linear_parts': part widths {sizes} incompatible with weight "
            f"{weight.data.shape}"
        )
    rows = max(p.data.shape[0] for p in parts)
    if any(p.data.shape[0] not in (1, rows) for p in parts):
        raise ShapeMismatchError(
            f"op 'linear_parts': row counts {[p.data.shape[0] for p in parts]} disagree"
        )
    offsets = np.cumsum([0] + sizes)
    out_data = None
    for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
        y = p.data @ weight.data[start:stop]
        out_data = y if out_data is None else out_data + y
    if bias is not None:
        if bias.data.shape != (weight.data.shape[1],):
            raise ShapeMismatchError(
                f"op 'linear_parts': bias {bias.data.shape} incompatible with "
                f"weight {weight.data.shape}"
            )
        out_data = out_data + bias.data
    parent_list = tuple(parts) + ((weight,) if bias is None else (weight, bias))

    def builder():
        def backward_fn(g):
            g_rows = None
            if weight.requires_grad:
                dw = np.empty_like(weight.data)
                for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
                    if p.data.shape[0] == 1 and rows > 1:
                        g_rows = np.sum(g, axis=0, keepdims=True) if g_rows is None else g_rows
                        dw[start:stop] = p.data.T @ g_rows
                    else:
                        dw[start:stop] = p.data.T @ g
                weight.accumulate_grad(dw)
            for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    if p.data.shape[0] == 1 and rows > 1:
                        g_rows = np.sum(g, axis=0, keepdims=True) if g_rows is None else g_rows
                        p.accumulate_grad(g_rows @ weight.data[start:stop].T)
                    else:
                        p.accumulate_grad(g @ weight.data[start:stop].T)
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(np.sum(g, axis=0))

        return backward_fn

    return _make("linear_parts", out_data, parent_list, builder)


def concat(tensors, axis: int = 1) -> Tensor:
    if axis not in (0, 1):
        raise ShapeMismatchError(f"op 'concat': axis must be 0 or 1, got {axis}")
    tensors = list(tensors)
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.ndim != len(ref) or t.data.shape[1 - axis] != ref[1 - axis]:
            raise ShapeMismatchError(
                f"op 'concat': shape {t.data.shape} incompatible with {ref} on axis {axis}"
            )
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def builder():
        def backward_fn(g):
            for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    # Slices are views; grads are never mutated in place.
                    t.accumulate_grad(g[start:stop] if axis == 0 else g[:, start:stop])

        return backward_fn

    return _make("concat", out_data, tuple(tensors), builder)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.data.shape[1]):
        raise ShapeMismatchError(f"op 'slice_cols': bad range [{start}:{stop}] for {x.data.shape}")

    def builder():
        def backward_fn(g):
            full = np.zeros_like(x.data)
            full[:, start:stop] = g
            x.accumulate_grad(full)

        return backward_fn

    return _make("slice_cols", np.ascontiguousarray(x.data[:, start:stop]), (x,), builder)


def reshape(x: Tensor, shape) -> Tensor:
    def builder():
        def backward_fn(g):
            x.accumulate_grad(g.reshape(x.data.shape))

        return backward_fn

    return _make("reshape", x.data.reshape(shape), (x,), builder)


def broadcast_rows(x: Tensor, rows: int) -> Tensor:
    """Tile a (1, D) tensor to (rows, D); gradient sums back over rows."""
    if x.data.ndim != 2 or x.data.shape[0] != 1:
        raise ShapeMismatchError(f"op 'broadcast_rows': need shape (1, D), got {x.data.shape}")

    def builder():
        def backward_fn(g):
            x.accumulate_grad(np.sum(g, axis=0, keepdims=True, dtype=np.float64).astype(g.dtype))

        return backward_fn

    return _make("broadcast_rows", np.broadcast_to(x.data, (rows, x.data.shape[1])), (x,), builder)


def broadcast_cols(x: Tensor, cols: int) -> Tensor:
    """Tile an (N, 1) tensor to (N, cols); gradient sums back over columns."""
    if x.data.ndim != 2 or x.data.shape[1] != 1:
        raise ShapeMismatchError(f"op 'broadcast_cols': need shape (N, 1), got {x.data.shape}")

    def builder():
        def backward_fn(g):
            x.accumulate_grad(np.sum(g, axis=1, keepdims=True, dtype=np.float64).astype(g.dtype))

        return backward_fn

    return _make("broadcast_cols", np.broadcast_to(x.data, (x.data.shape[0], cols)), (x,), builder)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum with float64 accumulation, rounded back to the input dtype."""
    out_data = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)
    if axis is None and not keepdims:
        out_data = np.atleast_1d(out_data)

    def builder():
        def backward_fn(g):
            if axis is None:
                x.accumulate_grad(np.full_like(x.data, g.reshape(-1)[0]))
            else:
                ge = g if keepdims else np.expand_dims(g, axis)
                x.accumulate_grad(np.broadcast_to(ge, x.data.shape).copy())

        return backward_fn

    return _make("sum", out_data, (x,), builder)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def sqnorm(x: Tensor) -> Tensor:
    """Sum of squared entries, as a length-1 tensor."""
    return tsum(mul(x, x))


def cumsum_exclusive(x: Tensor, axis: int = 1) -> Tensor:
    """out[..., i] = sum_{j < i} x[..., j] along axis 1 of a 2-D tensor."""
    if x.data.ndim != 2 or axis != 1:
        raise ShapeMismatchError("op 'cumsum_exclusive': expects a 2-D tensor and axis=1")
    out_data = np.zeros_like(x.data)
    if x.data.shape[1] > 1:
        out_data[:, 1:] = np.cumsum(x.data[:, :-1], axis=1, dtype=np.float64).astype(x.data.dtype)

    def builder():
        def backward_fn(g):
            # d out_i / d x_j = 1 for i > j: exclusive suffix sum of g.
            suffix = np.cumsum(g[:, ::-1], axis=1, dtype=np.float64)[:, ::-1].astype(g.dtype)
            x.accumulate_grad(suffix - g)

        return backward_fn

    return _make("cumsum_exclusive", out_data, (x,), builder)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; gradients scatter-add back."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if x.data.ndim != 2 or (idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0])):
        raise ShapeMismatchError(f"op 'gather_rows': indices out of range for {x.data.shape}")

    def builder():
        def backward_fn(g):
            full = np.zeros_like(x.data)
            np.add.at(full, idx, g)
            x.accumulate_grad(full)

        return backward_fn

    return _make("gather_rows", x.data[idx], (x,), builder)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


class ParamStore:
    """Ordered, name-unique collection of Parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ValueError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def with_prefix(self, *prefixes: str):
        return [p for name, p in self._params.items() if name.startswith(tuple(prefixes))]

    def snapshot(self, names=None) -> dict[str, np.ndarray]:
        names = self.names() if names is None else names
        return {n: self._params[n].data.copy() for n in names}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, value in snapshot.items():
            p = self._params[name]
            if p.data.shape != value.shape:
                raise ShapeMismatchError(f"restore: {name} shape {value.shape} != {p.data.shape}")
            p.data = value.copy()
