"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a node (inputs plus a local vector-Jacobian rule) so that
:func:`backward` can replay them in reverse topological order.

Only same-shape elementwise arithmetic (plus python scalars) is supported;
there is no general broadcasting.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "SeededRng",
    "tensor",
    "mse",
    "l2_sq",
    "backward",
    "gaussian_sample",
    "grad_check",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """n-dimensional float array that may participate in differentiation.

    Args:
        data: array-like of floats. Integer input is promoted to float64.
        requires_grad: whether gradients should be accumulated into ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            pass
        elif 0 in arr.shape:
            raise ValueError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def make_node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    """Wrap ``data`` as the output of a differentiable operation.

    ``backward_fn`` receives the upstream gradient and returns one gradient
    (or None) per parent, in order. The node is only recorded when some
    parent requires a gradient.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out._op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise primitives ---------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_node(a.data + c, (a,), lambda g: (g,), "add_scalar")
    _check_same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same_shape(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_node(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_node(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return make_node(
        np.asarray(a.data.sum(), dtype=dtype),
        (a,),
        lambda g: (np.full(shape, g, dtype=dtype),),
        "sum",
    )


def mean_all(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ValueError("mean of an empty tensor")
    shape, dtype, n = a.shape, a.dtype, a.size
    return make_node(
        np.asarray(a.data.mean(), dtype=dtype),
        (a,),
        lambda g: (np.full(shape, g / n, dtype=dtype),),
        "mean",
    )


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of ``(a - b)**2``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse: shape mismatch, a has shape {a.shape}, b has shape {b.shape}")
    diff = a.data - b.data
    n = diff.size
    dtype = np.result_type(a.dtype, b.dtype)

    def _bw(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return make_node(np.asarray(np.mean(diff * diff), dtype=dtype), (a, b), _bw, "mse")


def l2_sq(a: Tensor) -> Tensor:
    """Mean over all elements of ``a**2``."""
    a = _as_tensor(a)
    if a.ndim == 0 or a.size == 0:
        raise ValueError("l2_sq of an empty tensor")
    ad = a.data
    n = ad.size
    return make_node(
        np.asarray(np.mean(ad * ad), dtype=a.dtype),
        (a,),
        lambda g: ((2.0 / n) * g * ad,),
        "l2_sq",
    )


# tape / backward ----------------------------------------------------------

class Tape:
    """Operations reachable from a root, in topological (forward) order."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS; graphs here are deep enough to hit the
        # recursion limit during long cycle-consistency chains
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add to whatever the leaves already hold; zero them between
    steps.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss is detached from the tape (no input requires grad)")

    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = node.grad + g.astype(node.dtype, copy=False)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# random numbers -----------------------------------------------------------

class SeededRng:
    """Explicitly seeded generator (numpy PCG64, ziggurat normals).

    ``calls`` counts draws made through this wrapper, which is handy when
    checking that two runs consumed randomness identically.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self.calls = 0

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        self.calls += 1
        return self._gen.standard_normal(shape, dtype=dtype)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        self.calls += 1
        return self._gen.uniform(low, high, shape)

    def random(self, shape, dtype=np.float64) -> np.ndarray:
        self.calls += 1
        return self._gen.random(shape, dtype=dtype)

    def integers(self, low: int, high: int | None = None, size=None):
        self.calls += 1
        return self._gen.integers(low, high, size)

    def child(self) -> "SeededRng":
        """Independent generator derived deterministically from this one."""
        return SeededRng(int(self.integers(0, 2**63 - 1)))

    def get_state(self) -> dict:
        return {"seed": self.seed, "calls": self.calls, "bit_generator": self._gen.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.calls = int(state["calls"])
        self._gen.bit_generator.state = state["bit_generator"]


def gaussian_sample(shape, rng: SeededRng, dtype=np.float32) -> Tensor:
    """i.i.d. standard normal tensor, constant with respect to differentiation."""
    shape = tuple(int(s) for s in np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    if len(shape) == 0 or any(s <= 0 for s in shape):
        raise ValueError(f"invalid sample shape {shape}")
    # draw in float64 regardless of dtype so both precisions see the same noise
    return Tensor(rng.normal(shape).astype(dtype))


# gradient checking --------------------------------------------------------

def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    coords: Iterable[int] | None = None,
    richardson: bool = False,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The analytic gradient is taken at ``x``'s own precision. The central
    differences are always evaluated on a float64 copy of ``x`` so that the
    oracle stays accurate when checking float32 kernels.

    Args:
        f: maps a tensor shaped like ``x`` to a scalar tensor. Must be pure:
            any randomness inside has to be re-seeded on each call.
        x: point of evaluation.
        eps: finite-difference step.
        coords: flat indices to check; all coordinates when None.
        richardson: combine central differences at ``eps`` and ``eps/2`` as
            ``(4*D(eps/2) - D(eps)) / 3``, cancelling the O(eps**2) term. This
            allows a larger step, which keeps roundoff small when the loss is
            large relative to some gradient entries.

    Returns:
        max over checked coordinates of
        ``|analytic - fd| / max(|analytic|, |fd|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("grad_check: f must return a scalar tensor")
    if out.requires_grad:
        backward(out)
        analytic = leaf.grad.astype(np.float64).ravel()
    else:
        analytic = np.zeros(leaf.size)

    base = x.data.astype(np.float64).ravel()
    idx = range(base.size) if coords is None else list(coords)

    def central(i, h):
        plus = base.copy()
        plus[i] += h
        minus = base.copy()
        minus[i] -= h
        fp = float(f(Tensor(plus.reshape(x.shape))).data)
        fm = float(f(Tensor(minus.reshape(x.shape))).data)
        return (fp - fm) / (2.0 * h)

    worst = 0.0
    for i in idx:
        fd = central(i, eps)
        if richardson:
            fd = (4.0 * central(i, eps / 2) - fd) / 3.0
        a = analytic[i]
        err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
        worst = max(worst, err)
    return worst
