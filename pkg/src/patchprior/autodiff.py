"""Define-by-run reverse-mode automatic differentiation on numpy arrays.

Every operation on :class:`Tensor` records a node on an implicit tape when
at least one input requires a gradient.  :func:`grad` walks that tape in
reverse topological order and returns gradients for the requested leaves.

Networks use channels-last (N, H, W, C) layout; convolution kernels are
stored as (kh, kw, C_in, C_out).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "sum",
    "mean",
    "vdot",
    "silu",
    "relu",
    "conv2d",
    "pad2d",
    "crop2d",
    "concat",
    "avg_pool2",
    "upsample2",
    "spatial_mean",
    "reshape",
    "transpose",
    "place_patches",
    "gather_patches",
    "linear_op",
]


class Tensor:
    """Array plus the tape bookkeeping needed for reverse mode."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: div(o, self)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
    return order


def grad(output: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    Tensors that do not influence ``output`` receive zero gradients.
    """
    wrt = list(wrt)
    if output.data.size != 1:
        raise ValueError(f"backward requires a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {}
    if output.requires_grad:
        grads[id(output)] = np.ones_like(output.data)
        for node in reversed(_toposort(output)):
            g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


# ----------------------------------------------------------------- reductions


def sum(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    return _node(
        np.asarray(a.data.sum(), dtype=a.dtype),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),),
    )


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _node(
        np.asarray(a.data.mean(), dtype=a.dtype),
        (a,),
        lambda g: (np.full(a.shape, g / n, dtype=a.dtype),),
    )


def vdot(a, b) -> Tensor:
    """Full inner product of two equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"vdot shape mismatch {a.shape} vs {b.shape}")
    return _node(
        np.asarray(np.vdot(a.data, b.data), dtype=a.dtype),
        (a, b),
        lambda g: (
            g * b.data if a.requires_grad else None,
            g * a.data if b.requires_grad else None,
        ),
    )


def spatial_mean(a) -> Tensor:
    """Average over H and W of an (N, H, W, C) tensor, keeping dims."""
    a = as_tensor(a)
    _, h, w, _ = a.shape
    return _node(
        a.data.mean(axis=(1, 2), keepdims=True),
        (a,),
        lambda g: (np.broadcast_to(g / (h * w), a.shape).astype(a.dtype),),
    )


# -------------------------------------------------------------------- spatial


def _im2col(xp: np.ndarray, kh: int, kw: int, h: int, w: int) -> np.ndarray:
    return np.concatenate(
        [xp[:, i : i + h, j : j + w, :] for i in range(kh) for j in range(kw)], axis=-1
    )


def conv2d(x, w, b=None) -> Tensor:
    """'Same' convolution with zero padding, NHWC input, (kh, kw, Cin, Cout) kernel.

    Computes cross-correlation, as deep-learning libraries do.
    """
    x, w = as_tensor(x), as_tensor(w)
    kh, kw, cin, cout = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d requires odd kernel sizes")
    n, h, wd, c = x.shape
    if c != cin:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {cin}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = _im2col(xp, kh, kw, h, wd).reshape(-1, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, h, wd, cout)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents = (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, h, wd, kh * kw, cin)
            gxp = np.zeros_like(xp)
            k = 0
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + h, j : j + wd, :] += gcols[:, :, :, k, :]
                    k += 1
            gx = gxp[:, ph : ph + h, pw : pw + wd, :]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _node(out, parents, backward)


def pad2d(x, p: int) -> Tensor:
    """Zero-pad H and W of an NHWC tensor by ``p`` on every side."""
    x = as_tensor(x)
    out = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    h, w = x.shape[1], x.shape[2]
    return _node(out, (x,), lambda g: (g[:, p : p + h, p : p + w, :],))


def crop2d(x, top: int, left: int, h: int, w: int) -> Tensor:
    x = as_tensor(x)
    out = x.data[:, top : top + h, left : left + w, :]
    if out.shape[1] != h or out.shape[2] != w:
        raise ValueError("crop window exceeds tensor extent")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, top : top + h, left : left + w, :] = g
        return (gx,)

    return _node(out, (x,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(ts))
        )

    return _node(out, tuple(ts), backward)


def avg_pool2(x) -> Tensor:
    x = as_tensor(x)
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial size, got {h}x{w}")
    out = x.data.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def backward(g):
        gx = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        return (gx.astype(x.dtype, copy=False),)

    return _node(out, (x,), backward)


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _node(out, (x,), lambda g: (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),))


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def gather_patches(x, origins: Sequence[tuple[int, int]], p: int) -> Tensor:
    """Stack P x P windows of a (H, W, C) tensor into an (R, P, P, C) batch."""
    x = as_tensor(x)
    out = np.stack([x.data[r : r + p, c : c + p, :] for r, c in origins])

    def backward(g):
        gx = np.zeros_like(x.data)
        for k, (r, c) in enumerate(origins):
            gx[r : r + p, c : c + p, :] += g[k]
        return (gx,)

    return _node(out, (x,), backward)


def place_patches(patches, origins: Sequence[tuple[int, int]], size: tuple[int, int]) -> Tensor:
    """Write an (R, P, P, C) batch into a zero (H, W, C) canvas at ``origins``.

    Later patches overwrite earlier ones; callers pass disjoint origins.
    """
    patches = as_tensor(patches)
    _, p, _, c = patches.shape
    out = np.zeros((size[0], size[1], c), dtype=patches.dtype)
    for k, (r, cc) in enumerate(origins):
        out[r : r + p, cc : cc + p, :] = patches.data[k]

    def backward(g):
        return (np.stack([g[r : r + p, cc : cc + p, :] for r, cc in origins]),)

    return _node(out, (patches,), backward)


def linear_op(
    x, apply: Callable[[np.ndarray], np.ndarray], adjoint: Callable[[np.ndarray], np.ndarray]
) -> Tensor:
    """Apply a linear map whose adjoint is supplied; backward uses the adjoint."""
    x = as_tensor(x)
    out = np.asarray(apply(x.data))
    return _node(out, (x,), lambda g: (np.asarray(adjoint(g), dtype=x.dtype),))
