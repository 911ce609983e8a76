"""Minimal tape-based reverse-mode automatic differentiation on float64 arrays.

A :class:`Tape` records every primitive applied to a tensor that depends on
one of its leaves. Operations on tensors that carry no tape are evaluated
eagerly and nothing is recorded, so the same model code serves both
differentiable passes and cheap constant evaluations (finite differences,
sampling).

Shapes are explicit: apart from :func:`bias_add` there is no broadcasting.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import store


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("value", "tape", "node")

    def __init__(self, value, tape: "Tape | None" = None, node: int = -1):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tracked = "tracked" if self.tape is not None else "const"
        return f"Tensor(shape={self.shape}, {tracked})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def const(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        # one entry per recorded node: (input node ids, pullback)
        self._inputs: list[tuple[int, ...]] = []
        self._pullbacks: list = []
        self._shapes: list[tuple[int, ...]] = []
        self._leaf: list[bool] = []

    def __len__(self) -> int:
        return len(self._inputs)

    def leaf(self, value) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), self, len(self._inputs))
        self._inputs.append(())
        self._pullbacks.append(None)
        self._shapes.append(t.shape)
        self._leaf.append(True)
        return t

    def _record(self, value: np.ndarray, inputs: tuple[int, ...], pullback) -> Tensor:
        t = Tensor(value, self, len(self._inputs))
        self._inputs.append(inputs)
        self._pullbacks.append(pullback)
        self._shapes.append(value.shape)
        self._leaf.append(False)
        return t

    def backward(self, loss: Tensor, wrt) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each leaf in ``wrt``.

        Leaves without a path to the loss get exact zeros.
        """
        if loss.value.size != 1 or loss.value.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {}
        if loss.tape is self:
            grads[loss.node] = np.ones((), dtype=np.float64)
            for node in range(loss.node, -1, -1):
                g = grads.get(node)
                if g is None or self._leaf[node]:
                    continue
                parts = self._pullbacks[node](g)
                for inp, part in zip(self._inputs[node], parts):
                    if inp < 0 or part is None:
                        continue
                    if inp in grads:
                        grads[inp] = grads[inp] + part
                    else:
                        grads[inp] = part
                # intermediate gradients are no longer needed
                del grads[node]
        out = []
        for leaf in wrt:
            if leaf.tape is not self or not self._leaf[leaf.node]:
                raise ValueError("gradient requested for a tensor that is not a leaf of this tape")
            g = grads.get(leaf.node)
            out.append(np.zeros(leaf.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape))
        return out


def backward(tape: Tape, loss: Tensor, wrt) -> list[np.ndarray]:
    return tape.backward(loss, wrt)


def _op(name: str, value: np.ndarray, inputs: tuple, pullback) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite output in {name}")
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError(f"{name}: inputs recorded on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(value)
    ids = tuple(t.node if t.tape is tape else -1 for t in inputs)
    return tape._record(value, ids, pullback)


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# -- primitives ------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = const(a), const(b)
    _same_shape("add", a, b)
    return _op("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = const(a), const(b)
    _same_shape("sub", a, b)
    return _op("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = const(a), const(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _op("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, c: float) -> Tensor:
    a = const(a)
    c = float(c)
    return _op("scale", a.value * c, (a,), lambda g: (g * c,))


def bias_add(x, b) -> Tensor:
    """``x[n, :] + b`` for a 2-D ``x`` and 1-D ``b``; the only broadcasting op."""
    x, b = const(x), const(b)
    if x.value.ndim != 2 or b.value.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias_add: cannot add {b.shape} to rows of {x.shape}")
    return _op("bias_add", x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0)))


broadcast_add = bias_add


def matmul(a, b) -> Tensor:
    a, b = const(a), const(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _op("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def sigmoid(a) -> Tensor:
    a = const(a)
    # numerically stable for large |x|
    out = np.exp(-np.logaddexp(0.0, -a.value))
    return _op("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = const(a)
    out = np.tanh(a.value)
    return _op("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = const(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _op("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = const(a)
    av = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _op("log", out, (a,), lambda g: (g / av,))


def sqrt(a) -> Tensor:
    a = const(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.value)
    return _op("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = const(a)
    av = a.value
    return _op("square", av * av, (a,), lambda g: (2.0 * g * av,))


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = const(a)
    shape = a.shape
    if axis is None:
        return _op("sum", np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))
    out = a.value.sum(axis=axis)
    return _op("sum", out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape),))


def mean(a, axis: int | None = None) -> Tensor:
    a = const(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [const(t) for t in tensors]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def pullback(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(tensors))
        )

    return _op("concat", out, tuple(tensors), pullback)


def slice_(a, index) -> Tensor:
    """Basic (non-fancy) slicing, e.g. ``slice_(x, (slice(None), slice(0, 3)))``."""
    a = const(a)
    shape = a.shape

    def pullback(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _op("slice", np.array(a.value[index]), (a,), pullback)


def reshape(a, shape) -> Tensor:
    a = const(a)
    old = a.shape
    return _op("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def gather_rows(a, index) -> Tensor:
    """``a[index]`` along the first axis (rows may repeat)."""
    a = const(a)
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def pullback(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _op("gather_rows", a.value[index], (a,), pullback)


def segment_sum(a, segment, n_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``n_segments`` buckets given by ``segment``."""
    a = const(a)
    segment = np.asarray(segment, dtype=np.int64)
    out = np.zeros((n_segments,) + a.shape[1:])
    np.add.at(out, segment, a.value)
    return _op("segment_sum", out, (a,), lambda g: (g[segment],))


def batched_matvec(mats, vecs) -> Tensor:
    """``out[p] = mats[p] @ vecs[p]`` for ``mats`` of shape (P, n, k), ``vecs`` (P, k)."""
    mats, vecs = const(mats), const(vecs)
    mv, vv = mats.value, vecs.value
    if mv.ndim != 3 or vv.ndim != 2 or mv.shape[0] != vv.shape[0] or mv.shape[2] != vv.shape[1]:
        raise ShapeError(f"batched_matvec: incompatible shapes {mv.shape}, {vv.shape}")
    out = np.einsum("pij,pj->pi", mv, vv)
    return _op(
        "batched_matvec",
        out,
        (mats, vecs),
        lambda g: (g[:, :, None] * vv[:, None, :], np.einsum("pij,pi->pj", mv, g)),
    )


# -- derived ---------------------------------------------------------------------------


def linear(x, w, b=None) -> Tensor:
    """Row-wise affine map ``x @ w + b`` (weights stored as (in, out))."""
    y = matmul(x, w)
    return y if b is None else bias_add(y, b)


def reparam_sample(mean_, variance, noise) -> Tensor:
    """``mean + sqrt(variance) * noise``; ``noise`` is a constant standard-normal draw."""
    mean_, variance = const(mean_), const(variance)
    noise = np.asarray(noise.value if isinstance(noise, Tensor) else noise, dtype=np.float64)
    if mean_.shape != variance.shape or mean_.shape != noise.shape:
        raise ShapeError(f"reparam_sample: shapes {mean_.shape}, {variance.shape}, {noise.shape}")
    if np.any(variance.value <= 0):
        raise ValueError("reparam_sample: variance must be strictly positive")
    return add(mean_, mul(sqrt(variance), Tensor(noise)))


# -- gradient checking ----------------------------------------------------------------


def grad_check(model_fn, params: dict[str, np.ndarray], h: float = 1e-5, details: bool = False):
    """Compare reverse-mode gradients with central finite differences.

    ``model_fn`` maps a dict of tensors (same keys as ``params``) to a scalar
    tensor and must be deterministic. Returns the maximum over all parameter
    entries of ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``; with
    ``details=True`` returns ``(max_error, {name: per-entry errors})``.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("step h must lie in [1e-6, 1e-3]")
    names = sorted(params)
    tape = Tape()
    leaves = {k: tape.leaf(params[k]) for k in names}
    loss = model_fn(leaves)
    analytic = dict(zip(names, tape.backward(loss, [leaves[k] for k in names])))

    base = {k: np.array(params[k], dtype=np.float64) for k in names}
    consts = {k: Tensor(base[k]) for k in names}
    errors = {}
    worst = 0.0
    for k in names:
        arr = base[k]
        flat = arr.reshape(-1)
        err = np.zeros(flat.size)
        ga = analytic[k].reshape(-1)
        for idx in range(flat.size):
            old = flat[idx]
            flat[idx] = old + h
            consts[k] = Tensor(arr)
            fp = model_fn(consts).item()
            flat[idx] = old - h
            consts[k] = Tensor(arr)
            fm = model_fn(consts).item()
            flat[idx] = old
            gf = (fp - fm) / (2.0 * h)
            err[idx] = abs(ga[idx] - gf) / max(1.0, abs(ga[idx]), abs(gf))
        consts[k] = Tensor(arr)
        errors[k] = err.reshape(arr.shape)
        if err.size:
            worst = max(worst, float(err.max()))
    return (worst, errors) if details else worst


# -- parameter store -------------------------------------------------------------------

PARAMS_KIND = "cvgae-params"
PARAMS_VERSION = 1


def save_params(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    store.save(Path(path), PARAMS_KIND, PARAMS_VERSION, meta or {}, params)


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    meta, arrays = store.load(Path(path), PARAMS_KIND, PARAMS_VERSION)
    return arrays, meta
