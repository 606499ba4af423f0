"""Centered orthonormal FFTs, same-padded convolution and a small reverse-mode tape.

Complex gradients follow the convention ``dL/dRe(x) + 1j * dL/dIm(x)`` for a
real scalar ``L``.  For real-valued inputs the gradient is the real part of
that quantity, so real and complex nodes can be mixed freely on one tape.

Every public op exists twice with the same name and signature: as a method on
:class:`Tape` (records the op, accepts :class:`Node` or array arguments) and
as a method on :class:`ArrayOps` (plain numpy evaluation, nothing recorded).
Model code is written once against either object.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _check_pow2(x: np.ndarray) -> None:
    if x.ndim < 2:
        raise ValueError(f"expected at least 2 dims, got shape {x.shape}")
    for n in x.shape[-2:]:
        if n < 1 or n & (n - 1):
            raise ValueError(f"spatial sizes must be powers of two, got {x.shape[-2:]}")


def fft2c(x):
    """Centered, orthonormal 2-D DFT over the last two axes."""
    x = np.asarray(x)
    _check_pow2(x)
    axes = (-2, -1)
    x = np.fft.ifftshift(x, axes=axes)
    x = np.fft.fft2(x, axes=axes, norm="ortho")
    return np.fft.fftshift(x, axes=axes)


def ifft2c(y):
    """Inverse of :func:`fft2c`."""
    y = np.asarray(y)
    _check_pow2(y)
    axes = (-2, -1)
    y = np.fft.ifftshift(y, axes=axes)
    y = np.fft.ifft2(y, axes=axes, norm="ortho")
    return np.fft.fftshift(y, axes=axes)


def _as_batched(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"conv2d expects [C, H, W] or [B, C, H, W], got {x.shape}")


def _corr(x, kernel):
    # x: [B, Cin, H, W], kernel: [Cout, Cin, k, k] -> [B, Cout, H, W]
    k = kernel.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # [B, Cin, H, W, k, k]
    return np.einsum("bchwij,ocij->bohw", win, kernel, optimize=True)


def conv2d(x, kernel, bias=None):
    """Same-padded 2-D cross-correlation.

    ``out[o, i, j] = bias[o] + sum_{c, u, v} kernel[o, c, u, v] * x[c, i + u - k//2, j + v - k//2]``
    with zeros outside the image.  ``x`` is ``[C, H, W]`` or ``[B, C, H, W]``;
    ``kernel`` is ``[Cout, Cin, k, k]`` with odd ``k``.
    """
    x = np.asarray(x, dtype=float)
    kernel = np.asarray(kernel, dtype=float)
    xb, squeeze = _as_batched(x)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3] or kernel.shape[2] % 2 == 0:
        raise ValueError(f"kernel must be [Cout, Cin, k, k] with odd k, got {kernel.shape}")
    if kernel.shape[1] != xb.shape[1]:
        raise ValueError(f"channel mismatch: input has {xb.shape[1]}, kernel expects {kernel.shape[1]}")
    out = _corr(xb, kernel)
    if bias is not None:
        out = out + np.asarray(bias, dtype=float)[None, :, None, None]
    return out[0] if squeeze else out


def _conv2d_grads(x, kernel, g):
    # x [B, Cin, H, W], g [B, Cout, H, W]
    k = kernel.shape[-1]
    p = k // 2
    flipped = kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    gx = _corr(g, np.ascontiguousarray(flipped))
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    gk = np.einsum("bohw,bchwij->ocij", g, win, optimize=True)
    gb = g.sum(axis=(0, 2, 3))
    return gx, gk, gb


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _match(g, value):
    g = _unbroadcast(g, np.shape(value))
    if not np.iscomplexobj(value) and np.iscomplexobj(g):
        g = g.real
    return g


def _avgpool2(x):
    *lead, h, w = x.shape
    return x.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))


def _upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)


class Node:
    """A recorded value on a :class:`Tape`."""

    __slots__ = ("value", "index", "parents", "vjp")

    def __init__(self, value, index, parents=(), vjp=None):
        self.value = value
        self.index = index
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.shape})"


def _val(a):
    return a.value if isinstance(a, Node) else a


class ArrayOps:
    """Untaped evaluation of the op vocabulary (fast inference path)."""

    def add(self, a, b):
        return a + b

    def sub(self, a, b):
        return a - b

    def mul(self, a, b):
        return a * b

    def div(self, a, b):
        return a / b

    def sum(self, a, axis=None, keepdims=False):
        return np.sum(a, axis=axis, keepdims=keepdims)

    def mean(self, a):
        return np.mean(a)

    def square(self, a):
        return np.real(a * np.conj(a))

    def relu(self, a):
        return np.maximum(a, 0.0)

    def abs(self, a):
        return np.abs(a)

    def rss(self, a, axis=0):
        return np.sqrt(np.sum(np.real(a * np.conj(a)), axis=axis))

    def clip(self, a, lo, hi):
        return np.clip(a, lo, hi)

    def amax(self, a, axis=None, keepdims=False):
        return np.max(a, axis=axis, keepdims=keepdims)

    def fft2c(self, a):
        return fft2c(a)

    def ifft2c(self, a):
        return ifft2c(a)

    def conv2d(self, x, kernel, bias=None):
        return conv2d(x, kernel, bias)

    def avgpool2(self, a):
        return _avgpool2(a)

    def upsample2(self, a):
        return _upsample2(a)

    def concat(self, items, axis):
        return np.concatenate(items, axis=axis)

    def reshape(self, a, shape):
        return np.reshape(a, shape)

    def expand(self, a, axis):
        return np.expand_dims(a, axis)

    def real(self, a):
        return np.real(a)


def _constant_passthrough(method):
    # a unary op on a non-node input is a constant: evaluate without recording
    name = method.__name__

    def wrapper(self, a, *args, **kwargs):
        if not isinstance(a, Node):
            return getattr(ArrayOps, name)(self, a, *args, **kwargs)
        return method(self, a, *args, **kwargs)

    wrapper.__name__ = name
    wrapper.__doc__ = method.__doc__
    return wrapper


class Tape(ArrayOps):
    """Records ops in execution order; :meth:`backward` walks them in reverse.

    One tape per worker: a tape is not safe to share between threads.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def _push(self, value, parents, vjp):
        node = Node(value, len(self.nodes), parents, vjp)
        self.nodes.append(node)
        return node

    def leaf(self, value):
        return self._push(np.array(value, dtype=complex if np.iscomplexobj(value) else float), (), None)

    def _binary(self, a, b, value, ga, gb):
        parents = tuple(p for p in (a, b) if isinstance(p, Node))
        av, bv = _val(a), _val(b)

        def vjp(g):
            out = []
            if isinstance(a, Node):
                out.append(_match(ga(g), av))
            if isinstance(b, Node):
                out.append(_match(gb(g), bv))
            return out

        return self._push(value, parents, vjp)

    def add(self, a, b):
        return self._binary(a, b, _val(a) + _val(b), lambda g: g, lambda g: g)

    def sub(self, a, b):
        return self._binary(a, b, _val(a) - _val(b), lambda g: g, lambda g: -g)

    def mul(self, a, b):
        av, bv = _val(a), _val(b)
        return self._binary(a, b, av * bv, lambda g: g * np.conj(bv), lambda g: g * np.conj(av))

    def div(self, a, b):
        av, bv = _val(a), _val(b)
        out = av / bv
        return self._binary(
            a, b, out,
            lambda g: g / np.conj(bv),
            lambda g: -g * np.conj(out / bv),
        )

    def _unary(self, a, value, vjp_fn):
        return self._push(value, (a,), lambda g: [vjp_fn(g)])

    @_constant_passthrough
    def sum(self, a, axis=None, keepdims=False):
        av = a.value
        out = np.sum(av, axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, av.shape).copy()

        return self._unary(a, out, vjp)

    @_constant_passthrough
    def mean(self, a):
        av = a.value
        return self._unary(a, np.mean(av), lambda g: np.full(av.shape, g / av.size, dtype=np.result_type(g, float)))

    @_constant_passthrough
    def square(self, a):
        av = a.value
        return self._unary(a, np.real(av * np.conj(av)), lambda g: 2.0 * g * av)

    @_constant_passthrough
    def relu(self, a):
        av = a.value
        return self._unary(a, np.maximum(av, 0.0), lambda g: g * (av > 0))

    @_constant_passthrough
    def abs(self, a):
        av = a.value
        mag = np.abs(av)
        safe = np.where(mag > 0, mag, 1.0)
        return self._unary(a, mag, lambda g: np.where(mag > 0, g * av / safe, 0.0))

    @_constant_passthrough
    def rss(self, a, axis=0):
        av = a.value
        out = np.sqrt(np.sum(np.real(av * np.conj(av)), axis=axis))

        def vjp(g):
            o = np.expand_dims(out, axis)
            gg = np.expand_dims(g, axis)
            return np.where(o > 0, gg * av / np.where(o > 0, o, 1.0), 0.0)

        return self._unary(a, out, vjp)

    @_constant_passthrough
    def clip(self, a, lo, hi):
        av = a.value
        inside = (av > lo) & (av < hi)
        return self._unary(a, np.clip(av, lo, hi), lambda g: g * inside)

    @_constant_passthrough
    def amax(self, a, axis=None, keepdims=False):
        # gradient routed to the first maximiser along the reduced axes
        av = a.value
        out = np.max(av, axis=axis, keepdims=True)
        hit = av == out
        if axis is None:
            first = np.zeros(av.shape, dtype=bool)
            first.flat[np.argmax(hit)] = True
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % av.ndim for ax in axes)
            keep = [ax for ax in range(av.ndim) if ax not in axes]
            moved = np.moveaxis(hit, keep + list(axes), range(av.ndim))
            flat = moved.reshape(*[av.shape[k] for k in keep], -1)
            onehot = np.zeros_like(flat)
            np.put_along_axis(onehot, np.argmax(flat, axis=-1)[..., None], True, axis=-1)
            first = np.moveaxis(onehot.reshape(moved.shape), range(av.ndim), keep + list(axes))
        value = out if keepdims else np.max(av, axis=axis)

        def vjp(g):
            if axis is None:
                g = np.reshape(g, (1,) * av.ndim)
            elif not keepdims:
                g = np.expand_dims(g, axis)
            return first * g

        return self._unary(a, value, vjp)

    @_constant_passthrough
    def fft2c(self, a):
        return self._unary(a, fft2c(a.value), ifft2c)

    @_constant_passthrough
    def ifft2c(self, a):
        return self._unary(a, ifft2c(a.value), fft2c)

    def conv2d(self, x, kernel, bias=None):
        xv, kv = _val(x), _val(kernel)
        xb, squeeze = _as_batched(np.asarray(xv, dtype=float))
        out = conv2d(xv, kv, _val(bias))
        inputs = [(x, "x"), (kernel, "k")] + ([(bias, "b")] if bias is not None else [])
        parents = tuple(n for n, _ in inputs if isinstance(n, Node))

        def vjp(g):
            gb4 = g[None] if squeeze else g
            gx, gk, gbias = _conv2d_grads(xb, kv, gb4)
            grads = {"x": gx[0] if squeeze else gx, "k": gk, "b": gbias}
            return [grads[tag] for n, tag in inputs if isinstance(n, Node)]

        return self._push(out, parents, vjp)

    @_constant_passthrough
    def avgpool2(self, a):
        return self._unary(a, _avgpool2(a.value), lambda g: _upsample2(g) / 4.0)

    @_constant_passthrough
    def upsample2(self, a):
        return self._unary(a, _upsample2(a.value), lambda g: 4.0 * _avgpool2(g))

    def concat(self, items, axis):
        vals = [_val(i) for i in items]
        out = np.concatenate(vals, axis=axis)
        splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
        nodes = [i for i in items if isinstance(i, Node)]

        def vjp(g):
            parts = np.split(g, splits, axis=axis)
            return [_match(p, v) for p, v, i in zip(parts, vals, items) if isinstance(i, Node)]

        return self._push(out, tuple(nodes), vjp)

    @_constant_passthrough
    def reshape(self, a, shape):
        av = a.value
        return self._unary(a, np.reshape(av, shape), lambda g: np.reshape(g, av.shape))

    @_constant_passthrough
    def expand(self, a, axis):
        av = a.value
        return self._unary(a, np.expand_dims(av, axis), lambda g: np.reshape(g, av.shape))

    @_constant_passthrough
    def real(self, a):
        return self._unary(a, np.real(a.value), lambda g: np.real(g).astype(a.value.dtype))

    def backward(self, root: Node) -> dict[Node, np.ndarray]:
        """Adjoints of every node reachable from ``root``, keyed by node.

        Leaves that do not influence ``root`` get a zero adjoint.
        """
        if np.size(root.value) != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        if np.iscomplexobj(root.value):
            raise ValueError("backward needs a real-valued root")
        adj: list = [None] * len(self.nodes)
        adj[root.index] = np.ones_like(root.value, dtype=float)
        for node in reversed(self.nodes[: root.index + 1]):
            g = adj[node.index]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if np.iscomplexobj(pg) and not np.iscomplexobj(parent.value):
                    pg = pg.real  # real inputs receive dL/dRe only
                cur = adj[parent.index]
                adj[parent.index] = pg if cur is None else cur + pg
        grads = {}
        for node in self.nodes:
            if node.vjp is None:
                g = adj[node.index]
                grads[node] = np.zeros_like(node.value) if g is None else g
        return grads
