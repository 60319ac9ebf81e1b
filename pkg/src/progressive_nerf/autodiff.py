"""Reverse-mode differentiation over flat parameter vectors, and Adam.

The tape works at array granularity: every recorded node holds an ndarray
value and a closure mapping the upstream adjoint to adjoints of its parents.
Parameters live in a single flat :class:`ParamVector`; ``Tape.param`` hands
out reshaped views of named segments, and :meth:`Tape.backward` scatters
adjoints back into a flat gradient shaped like the parameter vector.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AdamState",
    "GradCheckReport",
    "Node",
    "ParamVector",
    "Tape",
    "adam_step",
    "backward",
    "grad_check",
    "learning_rate",
    "reset_optimizer",
]


class ParamVector:
    """Flat parameter storage with a named segment layout.

    ``layout`` maps segment name -> (start, stop, shape); segments are
    contiguous, disjoint and cover ``values`` in insertion order.
    """

    def __init__(self, dtype=np.float64):
        self.values = np.zeros(0, dtype=dtype)
        self.layout: dict[str, tuple[int, int, tuple[int, ...]]] = {}

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.layout:
            raise KeyError(f"segment {name!r} already present")
        value = np.asarray(value, dtype=self.values.dtype)
        start = self.values.size
        self.values = np.concatenate([self.values, value.ravel()])
        self.layout[name] = (start, self.values.size, value.shape)

    def get(self, name: str) -> np.ndarray:
        start, stop, shape = self.layout[name]
        return self.values[start:stop].reshape(shape)

    def set(self, name: str, value: np.ndarray) -> None:
        start, stop, shape = self.layout[name]
        self.values[start:stop] = np.asarray(value).reshape(-1)

    def names(self) -> list[str]:
        return list(self.layout)

    def segment_slice(self, name: str) -> slice:
        start, stop, _ = self.layout[name]
        return slice(start, stop)

    def copy(self) -> ParamVector:
        out = ParamVector(self.values.dtype)
        out.values = self.values.copy()
        out.layout = dict(self.layout)
        return out

    def astype(self, dtype) -> ParamVector:
        out = self.copy()
        out.values = out.values.astype(dtype)
        return out

    def with_values(self, values: np.ndarray) -> ParamVector:
        if values.shape != self.values.shape:
            raise ValueError(f"shape mismatch: {values.shape} vs {self.values.shape}")
        out = ParamVector(self.values.dtype)
        out.values = np.asarray(values, dtype=self.values.dtype)
        out.layout = dict(self.layout)
        return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Node:
    """A value on a tape. Supports ``+ - *`` and unary minus."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: Tape, index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __repr__(self):
        return f"Node(index={self.index}, shape={self.value.shape})"


class Tape:
    """Records array operations for reverse-mode differentiation.

    With ``record=False`` the same operations only compute values, which
    lets model code share one path between training and inference.
    """

    def __init__(self, params: ParamVector | None = None, record: bool = True):
        self.params = params
        self.record = record
        self._nodes: list[tuple[tuple[int, ...], Callable | None]] = []
        self._needs: list[bool] = []
        self._leaves: dict[int, slice] = {}
        self._param_nodes: dict[str, int] = {}
        self.accessed: set[str] = set()
        # (pre-activation array) for every ReLU, used by grad_check to spot kinks
        self.relu_inputs: list[np.ndarray] = []

    def __len__(self):
        return len(self._nodes)

    def _push(self, value, parents=(), vjp=None) -> Node:
        node = Node(self, len(self._nodes), value)
        if self.record:
            self._nodes.append((tuple(p.index for p in parents), vjp))
            self._needs.append(any(self._needs[p.index] for p in parents))
        else:
            self._nodes.append(((), None))
            self._needs.append(False)
        return node

    def _lift(self, x, like: Node | None = None) -> Node:
        if isinstance(x, Node):
            return x
        x = np.asarray(x)
        if like is not None and x.dtype.kind == "f":
            x = x.astype(like.value.dtype, copy=False)
        return self.constant(x)

    def _lift_pair(self, a, b) -> tuple[Node, Node]:
        if isinstance(a, Node):
            return a, self._lift(b, a)
        return self._lift(a, b), b

    # leaves

    def constant(self, value) -> Node:
        return self._push(np.asarray(value))

    def param(self, name: str) -> Node:
        if self.params is None:
            raise ValueError("tape has no parameter vector")
        # the tape keeps only the index so no tape <-> node reference cycle forms
        index = self._param_nodes.get(name)
        if index is not None:
            return Node(self, index, self.params.get(name))
        self.accessed.add(name)
        node = self._push(self.params.get(name))
        self._needs[node.index] = self.record
        self._leaves[node.index] = self.params.segment_slice(name)
        self._param_nodes[name] = node.index
        return node

    # elementwise

    def add(self, a, b) -> Node:
        a, b = self._lift_pair(a, b)
        sa, sb = a.value.shape, b.value.shape
        return self._push(
            a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
        )

    def sub(self, a, b) -> Node:
        a, b = self._lift_pair(a, b)
        sa, sb = a.value.shape, b.value.shape
        return self._push(
            a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
        )

    def mul(self, a, b) -> Node:
        a, b = self._lift_pair(a, b)
        av, bv = a.value, b.value
        na = self.record and self._needs[a.index]
        nb = self.record and self._needs[b.index]

        def vjp(g):
            return (
                _unbroadcast(g * bv, av.shape) if na else None,
                _unbroadcast(g * av, bv.shape) if nb else None,
            )

        return self._push(av * bv, (a, b), vjp)

    def scale(self, a: Node, c: float) -> Node:
        return self._push(a.value * c, (a,), lambda g: (g * c,))

    def square(self, a: Node) -> Node:
        av = a.value
        return self._push(av * av, (a,), lambda g: (2.0 * g * av,))

    def exp(self, a: Node) -> Node:
        out = np.exp(a.value)
        return self._push(out, (a,), lambda g: (g * out,))

    def relu(self, a: Node) -> Node:
        pre = a.value
        if self.record:
            self.relu_inputs.append(pre)
        mask = pre > 0
        return self._push(np.maximum(pre, 0), (a,), lambda g: (g * mask,))

    def sigmoid(self, a: Node) -> Node:
        av = a.value
        out = np.empty_like(av)
        pos = av >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
        e = np.exp(av[~pos])
        out[~pos] = e / (1.0 + e)
        return self._push(out, (a,), lambda g: (g * out * (1.0 - out),))

    # linear algebra and structure

    def affine(self, x: Node, w: Node, b: Node) -> Node:
        """``x @ w + b`` for ``x`` of shape (n, fan_in)."""
        xv, wv = x.value, w.value
        x_needs = self.record and self._needs[x.index]

        def vjp(g):
            return (g @ wv.T if x_needs else None), xv.T @ g, g.sum(axis=0)

        return self._push(xv @ wv + b.value, (x, w, b), vjp)

    def concat(self, parts: Sequence[Node], axis: int = -1) -> Node:
        parts = [self._lift(p) for p in parts]
        sizes = [p.value.shape[axis] for p in parts]
        cuts = np.cumsum(sizes)[:-1]

        def vjp(g):
            return tuple(np.split(g, cuts, axis=axis))

        return self._push(np.concatenate([p.value for p in parts], axis=axis), parts, vjp)

    def reshape(self, a: Node, shape) -> Node:
        old = a.value.shape
        return self._push(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))

    def take(self, a: Node, index, axis: int = -1) -> Node:
        """Basic slicing along one axis (``index`` is an int or slice)."""
        av = a.value
        key = [slice(None)] * av.ndim
        key[axis] = index
        key = tuple(key)

        def vjp(g):
            out = np.zeros_like(av, dtype=g.dtype)
            out[key] = g
            return (out,)

        return self._push(av[key], (a,), vjp)

    def sum(self, a: Node, axis=None, keepdims: bool = False) -> Node:
        av = a.value
        out = av.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, av.shape).copy(),)

        return self._push(np.asarray(out), (a,), vjp)

    def cumsum_exclusive(self, a: Node, axis: int = -1) -> Node:
        """``out[k] = sum_{k' < k} a[k']`` along ``axis``."""
        av = a.value
        inc = np.cumsum(av, axis=axis)
        # shift rather than subtract so out[k + 1] == inc[k] bit for bit
        out = np.zeros_like(inc)
        src = [slice(None)] * av.ndim
        dst = [slice(None)] * av.ndim
        src[axis], dst[axis] = slice(0, -1), slice(1, None)
        out[tuple(dst)] = inc[tuple(src)]

        def vjp(g):
            rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
            return (rev - g,)

        return self._push(out, (a,), vjp)

    # reverse pass

    def backward(self, loss: Node, seed: float = 1.0) -> np.ndarray:
        """Adjoint of ``loss`` w.r.t. the tape's parameter vector (flat)."""
        if not self.record:
            raise RuntimeError("tape was built with record=False")
        if loss.value.size != 1:
            raise ValueError(f"loss node must be scalar, got shape {loss.value.shape}")
        adj: dict[int, np.ndarray] = {loss.index: np.full(loss.value.shape, seed, dtype=loss.value.dtype)}
        n = self.params.size if self.params is not None else 0
        dtype = self.params.dtype if self.params is not None else np.float64
        grad = np.zeros(n, dtype=dtype)
        for idx in range(loss.index, -1, -1):
            g = adj.pop(idx, None)
            if g is None:
                continue
            leaf = self._leaves.get(idx)
            if leaf is not None:
                grad[leaf] += g.reshape(-1)
                continue
            parents, vjp = self._nodes[idx]
            if vjp is None:
                continue
            for p, gp in zip(parents, vjp(g)):
                if gp is None or not self._needs[p]:
                    continue
                if p in adj:
                    adj[p] = adj[p] + gp
                else:
                    adj[p] = gp
        return grad


def backward(tape: Tape, loss: Node) -> np.ndarray:
    return tape.backward(loss)


@dataclasses.dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    base_lr: float = 5e-4
    lr_final: float = 5e-6
    decay_steps: int = 100_000
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamVector | np.ndarray, **kwargs) -> AdamState:
        values = params.values if isinstance(params, ParamVector) else np.asarray(params)
        return cls(np.zeros_like(values), np.zeros_like(values), **kwargs)


def learning_rate(state: AdamState, step: int | None = None) -> float:
    """Exponential decay from ``base_lr`` reaching ``lr_final`` at ``decay_steps``."""
    t = state.step_count if step is None else step
    return state.base_lr * (state.lr_final / state.base_lr) ** (t / state.decay_steps)


def adam_step(params: ParamVector, grads: np.ndarray, state: AdamState) -> tuple[ParamVector, AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    if grads.shape != params.values.shape or state.m.shape != params.values.shape:
        raise ValueError(
            f"shape mismatch: params {params.values.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    b1, b2 = state.betas
    lr = learning_rate(state)
    t = state.step_count + 1
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads * grads
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    new_values = params.values - (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(params.dtype)
    return params.with_values(new_values), dataclasses.replace(state, m=m, v=v, step_count=t)


def reset_optimizer(state: AdamState) -> AdamState:
    return dataclasses.replace(
        state, m=np.zeros_like(state.m), v=np.zeros_like(state.v), step_count=0
    )


@dataclasses.dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    checked: int
    excluded: int
    analytic: np.ndarray
    numeric: np.ndarray

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def _relu_signs(tape: Tape) -> list[np.ndarray]:
    return [np.sign(x) for x in tape.relu_inputs]


def grad_check(
    build_loss: Callable[[Tape], Node],
    params: ParamVector,
    h: float = 1e-4,
    indices: Iterable[int] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare ``Tape.backward`` with central differences.

    ``build_loss(tape)`` must build a scalar loss from ``tape.param``.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``. Parameters whose
    +-h perturbation flips the sign of any ReLU input (including inputs that
    are exactly 0) sit on a subgradient point and are excluded.
    """
    params = params.astype(np.float64)
    tape = Tape(params)
    loss = build_loss(tape)
    analytic = tape.backward(loss)
    base_signs = _relu_signs(tape)

    def evaluate(values):
        t = Tape(params.with_values(values))
        val = float(build_loss(t).value)
        return val, _relu_signs(t)

    idx = np.arange(params.size) if indices is None else np.fromiter(indices, dtype=int)
    numeric = np.full(params.size, np.nan)
    excluded = 0
    worst, worst_i = 0.0, -1
    for i in idx:
        plus = params.values.copy()
        minus = params.values.copy()
        plus[i] += h
        minus[i] -= h
        fp, sp = evaluate(plus)
        fm, sm = evaluate(minus)
        crosses = any(
            not np.array_equal(a, b) or not np.array_equal(a, c) for a, b, c in zip(base_signs, sp, sm)
        )
        if crosses:
            excluded += 1
            continue
        numeric[i] = (fp - fm) / (2 * h)
        a, n = analytic[i], numeric[i]
        err = abs(a - n) / max(abs(a), abs(n), floor)
        if err > worst:
            worst, worst_i = err, int(i)
    return GradCheckReport(worst, worst_i, len(idx) - excluded, excluded, analytic, numeric)
