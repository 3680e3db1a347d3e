"""Define-by-run reverse-mode autodiff over dense numpy arrays.

A Tensor wraps a float array; every operation executed while a Tape is
active appends one record (output, parents, backward closure) in execution
order, so replaying the records in reverse visits each node after all of
its consumers. Tapes are rebuilt every forward pass; gradients accumulate
into the ``.grad`` of requires_grad leaves only.

Default precision is 64-bit; call set_default_dtype(np.float32) for the
faster 32-bit mode (excluded from finite-difference tolerances).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import _speedups

_DEFAULT_DTYPE = np.float64
_ACTIVE_TAPE: "Tape | None" = None
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """Dense float array plus gradient slot and tape bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None  # tape that recorded this tensor
        self._op: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag}, op={self._op})"

    # operator sugar; constants are wrapped as non-grad tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Execution-ordered record of operations for one forward pass."""

    __slots__ = ("_records", "_prev")

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d loss / d leaf into every reachable requires_grad leaf."""
        if loss._tape is not self:
            raise ValueError("backward: loss was not produced by this tape")
        if loss.data.size != 1:
            raise ValueError(
                f"backward: loss must be scalar, got shape {loss.data.shape}"
            )
        needed: set[int] = {id(loss)}
        for out, parents, _ in reversed(self._records):
            if id(out) in needed:
                for p in parents:
                    if p.requires_grad:
                        needed.add(id(p))
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        leaves: dict[int, Tensor] = {}
        for out, parents, backward_fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None or id(out) not in needed:
                continue
            for p, pg in zip(parents, backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if p.is_leaf:
                    leaves[key] = p
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if leaf.grad is None:
                leaf.grad = np.array(g, dtype=leaf.data.dtype)
            else:
                leaf.grad = leaf.grad + g.astype(leaf.data.dtype, copy=False)


class no_grad:
    """Context manager disabling tape recording (eval / numeric probes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev


_Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _record(op: str, out_data: np.ndarray, parents: tuple[Tensor, ...],
            backward_fn: _Backward) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    out._op = op
    if _GRAD_ENABLED and _ACTIVE_TAPE is not None and any(
        p.requires_grad for p in parents
    ):
        out.requires_grad = True
        out._tape = _ACTIVE_TAPE
        _ACTIVE_TAPE._records.append((out, parents, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _record("add", out, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _record("sub", out, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _record("mul", out, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.data.shape),
        _unbroadcast(g * a.data, b.data.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return _record("div", out, (a, b), lambda g: (
        _unbroadcast(g / b.data, a.data.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _record("relu", out, (a,), lambda g: (g * (a.data > 0),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably; backward is sigmoid(x)."""
    out = np.logaddexp(0.0, a.data)
    def bwd(g):
        s = np.empty_like(a.data)
        pos = a.data >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
        e = np.exp(a.data[~pos])
        s[~pos] = e / (1.0 + e)
        return (g * s,)
    return _record("softplus", out, (a,), bwd)


def absolute(a: Tensor) -> Tensor:
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# ---------------------------------------------------------------------------
# linear algebra / shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(
            f"matmul: operands must be at least 2-D, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul: inner dimensions disagree, {a.data.shape} @ {b.data.shape}")
    out = np.matmul(a.data, b.data)
    def bwd(g):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape)
        gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape)
        return ga, gb
    return _record("matmul", out, (a, b), bwd)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _record("transpose", np.ascontiguousarray(out), (a,),
                   lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.data.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record("concat", out, tuple(tensors),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def gather(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ValueError("gather: table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"gather: id out of range [0, {table.data.shape[0]}), "
            f"got min={ids.min()} max={ids.max()}")
    out = table.data[ids]
    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)
    return _record("gather", out, (table,), bwd)


def slice_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    """a[lo:hi] along the first axis."""
    out = a.data[lo:hi]
    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[lo:hi] = g
        return (ga,)
    return _record("slice_rows", out, (a,), bwd)


def select_time(a: Tensor, t: int) -> Tensor:
    """a[:, t, :] for a (B, L, d) tensor."""
    out = a.data[:, t, :]
    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[:, t, :] = g
        return (ga,)
    return _record("select_time", np.ascontiguousarray(out), (a,), bwd)


def select_position(a: Tensor, idx: np.ndarray) -> Tensor:
    """Per-row position pick: out[i] = a[i, idx[i], :]."""
    idx = np.asarray(idx)
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]
    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g
        return (ga,)
    return _record("select_position", out, (a,), bwd)


def stack_time(tensors: Sequence[Tensor]) -> Tensor:
    """Stack (B, d) steps into (B, L, d)."""
    out = np.stack([t.data for t in tensors], axis=1)
    return _record("stack_time", out, tuple(tensors),
                   lambda g: tuple(g[:, i] for i in range(len(tensors))))


# ---------------------------------------------------------------------------
# reductions / normalization


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)
    return _record("sum", np.asarray(out), (a,), bwd)


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def sq_l2_norm(a: Tensor) -> Tensor:
    out = np.asarray((a.data * a.data).sum())
    return _record("sq_l2_norm", out, (a,), lambda g: (g * 2.0 * a.data,))


def l1_norm(a: Tensor) -> Tensor:
    out = np.asarray(np.abs(a.data).sum())
    return _record("l1_norm", out, (a,), lambda g: (g * np.sign(a.data),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.data.shape[axis] == 0:
        raise ValueError("softmax: empty rows")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)
    return _record("softmax", out, (a,), bwd)


def layernorm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize the last axis, then apply learnable gain and bias."""
    if a.data.shape[-1] == 0:
        raise ValueError("layernorm: empty rows")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + bias.data
    def bwd(g):
        axes = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=axes)
        gbias = g.sum(axis=axes)
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggain, gbias
    return _record("layernorm", out, (a, gain, bias), bwd)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None,
            training: bool) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-rate) at train time.

    Identity (the same tensor object) when rate is 0 or not training.
    """
    if not training or rate == 0.0:
        return a
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("dropout: training mode requires an rng")
    keep = 1.0 - rate
    mask = (rng.random(a.data.shape) >= rate) / keep
    mask = mask.astype(a.data.dtype)
    return _record("dropout", a.data * mask, (a,), lambda g: (g * mask,))


def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward; exactly zero gradient backward."""
    out = Tensor(a.data)
    out._op = "stop_gradient"
    return out


def pairwise_l1_dist(x: Tensor, y: Tensor) -> Tensor:
    """Matrix of L1 distances between rows; compiled kernel when available."""
    out = _speedups.pairwise_l1(x.data, y.data).astype(x.data.dtype)
    def bwd(g):
        gx, gy = _speedups.pairwise_l1_backward(x.data, y.data, g)
        return gx.astype(x.data.dtype), gy.astype(y.data.dtype)
    return _record("pairwise_l1_dist", out, (x, y), bwd)


# ---------------------------------------------------------------------------
# verification harness


def numeric_grad(f: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar f() w.r.t. every coordinate."""
    base = param.data
    g = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = f().item()
            flat[i] = keep - h
            down = f().item()
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * h)
    return g


def grad_check(build_loss: Callable[[], Tensor],
               params: dict[str, Tensor],
               h: float = 1e-5,
               tol: float = 1e-4) -> dict[str, float]:
    """Compare analytic gradients against central finite differences.

    Returns the max relative error per parameter, where the relative error
    of a coordinate is |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
    Raises if the loss is not reproducible (nondeterministic closure) or if
    any parameter exceeds tol.
    """
    with Tape() as tape:
        loss = build_loss()
    with no_grad():
        probe = build_loss()
    if loss.item() != probe.item():
        raise ValueError("grad_check: loss is not deterministic under fixed seed")
    for p in params.values():
        p.zero_grad()
    tape.backward(loss)
    report: dict[str, float] = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_grad(build_loss, p, h=h)
        denom = np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
        rel = np.abs(analytic - numeric) / denom
        report[name] = float(rel.max()) if rel.size else 0.0
        p.zero_grad()
    worst = max(report.values(), default=0.0)
    if worst > tol:
        bad = {k: v for k, v in report.items() if v > tol}
        raise AssertionError(f"grad_check failed (tol={tol}): {bad}")
    return report


def derive_seed(master: int, name: str) -> int:
    """Documented fan-out: first 8 bytes of sha256('{master}:{name}')."""
    import hashlib

    digest = hashlib.sha256(f"{master}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(master: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, name)))


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross entropy from raw logits: mean(softplus(z) - y*z)."""
    labels_t = Tensor(np.asarray(labels, dtype=logits.data.dtype))
    return tmean(sub(softplus(logits), mul(labels_t, logits)))
