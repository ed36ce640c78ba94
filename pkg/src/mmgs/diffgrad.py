"""Reverse-mode autodiff over dense numpy arrays, plus Adam and a
finite-difference gradient checker.

The engine is deliberately small: it supports exactly the operations the
rendering/refinement pipeline needs (elementwise math, broadcasting,
matmul, reductions, indexing, softmax, a handful of fused ops registered
by other modules). Computation defaults to float32; gradient verification
is expected to run the same graphs in float64.
"""

from __future__ import annotations

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


def _as_array(data, dtype=None):
    if isinstance(data, Tensor):
        raise TypeError("cannot wrap a Tensor in a Tensor")
    arr = np.asarray(data)
    if dtype is None and arr.dtype not in _FLOAT_DTYPES:
        dtype = np.float32  # python lists / ints default to single precision
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    # keep 0-d scalars 0-d (ascontiguousarray would promote them to 1-d)
    if arr.ndim and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense array with an optional recorded-operation backward hook.

    `data` is a numpy float array. Leaf tensors with requires_grad=True
    receive gradients in `.grad` when `backward()` runs from a scalar;
    repeated backward calls accumulate additively.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward_fn = None

    # -- construction of graph nodes (used by all ops, incl. fused ones
    #    registered from other modules) --
    @staticmethod
    def _from_op(data, parents, backward_fn):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
        return out

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
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad):
        if self.grad is None:
            # safe to alias: accumulation always rebinds, never mutates
            if grad.dtype == self.data.dtype:
                self.grad = grad
            else:
                self.grad = grad.astype(self.data.dtype)
        else:
            self.grad = self.grad + grad

    def backward(self):
        """Populate grads of every requires_grad ancestor of this scalar."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        out_grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = out_grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward_fn is None:
                continue
            parent_grads = node._backward_fn(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in out_grads:
                    out_grads[key] = out_grads[key] + pg
                else:
                    out_grads[key] = pg

    # -- elementwise arithmetic --
    def __add__(self, other):
        other = _lift(other, self.dtype)
        a, b = self, other
        out = Tensor._from_op(a.data + b.data, (a, b), None)
        if out.requires_grad:
            out._backward_fn = lambda g: (
                _unbroadcast(g, a.data.shape),
                _unbroadcast(g, b.data.shape),
            )
        return out

    def __mul__(self, other):
        other = _lift(other, self.dtype)
        a, b = self, other
        out = Tensor._from_op(a.data * b.data, (a, b), None)
        if out.requires_grad:
            out._backward_fn = lambda g: (
                _unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape),
            )
        return out

    def __sub__(self, other):
        other = _lift(other, self.dtype)
        a, b = self, other
        out = Tensor._from_op(a.data - b.data, (a, b), None)
        if out.requires_grad:
            out._backward_fn = lambda g: (
                _unbroadcast(g, a.data.shape),
                _unbroadcast(-g, b.data.shape),
            )
        return out

    def __truediv__(self, other):
        other = _lift(other, self.dtype)
        a, b = self, other
        out = Tensor._from_op(a.data / b.data, (a, b), None)
        if out.requires_grad:
            out._backward_fn = lambda g: (
                _unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
            )
        return out

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self
        out = Tensor._from_op(a.data**exponent, (a,), None)
        if out.requires_grad:
            out._backward_fn = lambda g: (g * exponent * a.data ** (exponent - 1),)
        return out

    def __neg__(self):
        a = self
        return Tensor._from_op(-a.data, (a,), lambda g: (-g,))

    def __radd__(self, other):
        return self.__add__(other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __rsub__(self, other):
        return _lift(other, self.dtype).__sub__(self)

    def __rtruediv__(self, other):
        return _lift(other, self.dtype).__truediv__(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops --
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape
        return Tensor._from_op(
            a.data.reshape(shape), (a,), lambda g: (g.reshape(old),)
        )

    def transpose(self, axes=None):
        a = self
        if axes is None:
            axes = tuple(reversed(range(a.ndim)))
        inv = np.argsort(axes)
        return Tensor._from_op(
            np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),)
        )

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        a = self
        out_data = a.data[idx]
        if np.isscalar(out_data) or out_data.ndim == 0:
            out_data = np.asarray(out_data)
        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = not any(isinstance(p, (np.ndarray, list)) for p in parts)

        def _backward(g):
            gin = np.zeros_like(a.data)
            if basic:  # view semantics: no duplicate targets
                gin[idx] += g
            else:
                np.add.at(gin, idx, g)
            return (gin,)

        return Tensor._from_op(out_data, (a,), _backward)

    def sum(self, axis=None, keepdims=False):
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def _backward(g):
            if axis is None:
                return (np.broadcast_to(g, a.data.shape).copy(),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.data.shape).copy(),)

        return Tensor._from_op(np.asarray(out_data), (a,), _backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[ax] for ax in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


def _lift(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, name, dtype=np.float32):
    """A named leaf tensor that will be optimized."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, name=name)


def gather_rows(a, idx):
    """Row gather a[idx] for a 1-D integer index WITHOUT duplicates
    (faster backward than generic indexing)."""
    out_data = a.data[idx]

    def _backward(g):
        gin = np.zeros_like(a.data)
        gin[idx] = g
        return (gin,)

    return Tensor._from_op(out_data, (a,), _backward)


# ---------------------------------------------------------------------------
# free-function ops
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product with broadcasting over leading batch dimensions."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires operands with ndim >= 2")
    out_data = a.data @ b.data

    def _backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return Tensor._from_op(out_data, (a, b), _backward)


def exp(a):
    out_data = np.exp(a.data)
    return Tensor._from_op(out_data, (a,), lambda g: (g * out_data,))


def log(a):
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out_data = np.sqrt(a.data)
    return Tensor._from_op(out_data, (a,), lambda g: (g * 0.5 / out_data,))


def sin(a):
    return Tensor._from_op(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a):
    return Tensor._from_op(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def tanh(a):
    out_data = np.tanh(a.data)
    return Tensor._from_op(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),))


def sigmoid(a):
    out_data = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor._from_op(
        out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),)
    )


def relu(a):
    return Tensor._from_op(
        np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),)
    )


def leaky_relu(a, slope=0.2):
    out_data = np.where(a.data > 0, a.data, slope * a.data)
    return Tensor._from_op(
        out_data, (a,), lambda g: (g * np.where(a.data > 0, 1.0, slope),)
    )


def elu(a, alpha=1.0):
    out_data = np.where(a.data > 0, a.data, alpha * (np.exp(a.data) - 1.0))
    grad_mask = np.where(a.data > 0, 1.0, alpha * np.exp(a.data))
    return Tensor._from_op(out_data, (a,), lambda g: (g * grad_mask,))


def absolute(a):
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp(a, lo=None, hi=None):
    """Clamp with pass-through gradient strictly inside the bounds."""
    out_data = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi
    return Tensor._from_op(out_data, (a,), lambda g: (g * inside,))


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return Tensor._from_op(out_data, (a,), _backward)


def concatenate(tensors, axis=0):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _backward(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return Tensor._from_op(out_data, tuple(tensors), _backward)


def stack(tensors, axis=0):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def _backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(out_data, tuple(tensors), _backward)


def dropout(a, rate, rng, training):
    """Inverted dropout; identity outside training mode."""
    if not training or rate <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype)
    scale = 1.0 / (1.0 - rate)
    mask = keep * scale
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


class GradCheckError(RuntimeError):
    """Raised when the checked function produces a non-finite value."""


def grad_check(fn, point, step=1e-4, coords=None):
    """Max relative error between analytic and central-difference gradients.

    fn maps a Tensor to a scalar Tensor. `point` supplies the evaluation
    point; it is copied, so the caller's tensor is untouched. `coords`
    optionally restricts the check to a subset of flat coordinate indices
    (useful for large parameter tensors). The error at each coordinate is
    |analytic - numeric| / max(1, |numeric|) with the numeric derivative
    taken as (f(x+h) - f(x-h)) / 2h.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point,
                    dtype=np.float64, copy=True)

    x = Tensor(base.copy(), requires_grad=True)
    out = fn(x)
    if out.data.size != 1:
        raise ValueError("grad_check target must return a scalar")
    if not np.isfinite(out.data.item()):
        raise GradCheckError("function value is non-finite at the base point")
    out.backward()
    analytic = (
        np.zeros_like(base) if x.grad is None else np.asarray(x.grad, dtype=np.float64)
    ).ravel()

    flat = base.ravel()
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    for k in coords:
        orig = flat[k]
        flat[k] = orig + step
        f_plus = fn(Tensor(base.copy())).data.item()
        flat[k] = orig - step
        f_minus = fn(Tensor(base.copy())).data.item()
        flat[k] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise GradCheckError(f"non-finite function value at coordinate {k}")
        numeric = (f_plus - f_minus) / (2.0 * step)
        err = abs(analytic[k] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class AdamState:
    """Per-parameter first/second moment buffers plus hyperparameters."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if lr <= 0 or eps <= 0:
            raise ValueError("lr and eps must be positive")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.first_moment = [np.zeros_like(p.data) for p in params]
        self.second_moment = [np.zeros_like(p.data) for p in params]


def adam_step(params, state):
    """One bias-corrected Adam update; clears grads afterwards."""
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name or '<unnamed>'} has no gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(
            p.data.dtype, copy=False
        )
        p.grad = None
    return params, state
