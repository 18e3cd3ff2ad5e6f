"""Dense-tensor compute with reverse-mode differentiation over a fixed op set.

The graph is static, so instead of a general autodiff system this is a
tape: each op records its inputs and a vector-Jacobian closure, and
`Tape.backward` walks the records once in reverse execution order.

Numeric policy: tensors hold float32 by default (float64 is accepted for
high-precision checks); every reduction accumulates in float64 and the
result is truncated back to the tensor dtype. Adjoints are accumulated in
float64 throughout backward and truncated when written to `Tensor.grad`.
"""
from __future__ import annotations

import numpy as np

from .errors import (
    DetachedTensor,
    NonFiniteValue,
    NotScalarLoss,
    ShapeMismatch,
    ZeroNormRow,
)

# When enabled, every op output is checked for NaN/Inf. Off by default;
# the training loop has its own scalar loss check.
CHECK_FINITE = False


class Tensor:
    """A shaped float array plus a trainability flag.

    Data is float32 unless the caller passes float64 explicitly. Values
    are immutable by convention during a forward pass; the optimizer may
    rebind `.data` between steps.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Record:
    # holds a strong reference to `out` so tensor ids stay unique for the
    # lifetime of the tape
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


def _f64(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float64, copy=False)


def _check(out: np.ndarray) -> None:
    if CHECK_FINITE and not np.isfinite(out).all():
        raise NonFiniteValue("op produced NaN or Inf")


def _softmax64(x: np.ndarray, axis: int) -> np.ndarray:
    # max-subtraction keeps exp() in range for any finite input
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


class Tape:
    """Single-owner record of executed ops; independent tapes may run concurrently."""

    def __init__(self):
        self._records: list[_Record] = []
        self._produced: set[int] = set()

    # --- recording machinery ---

    def _emit(self, out_data, inputs: tuple[Tensor, ...], vjp) -> Tensor:
        """Wrap op output; record a backward closure if any input is trainable."""
        _check(out_data)
        needs = any(t.requires_grad for t in inputs)
        out = Tensor(out_data, requires_grad=needs)
        if needs:
            self._records.append(_Record(out, inputs, vjp))
            self._produced.add(id(out))
        return out

    @staticmethod
    def _dtype_of(*tensors: Tensor):
        dt = np.result_type(*(t.data.dtype for t in tensors))
        return np.float32 if dt == np.float32 else np.float64

    # --- forward ops ---

    def matmul(self, a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
        """a @ b, or a @ b.T when transpose_b. Accumulates in float64."""
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ShapeMismatch("matmul expects 2-D operands")
        bm = b.data.T if transpose_b else b.data
        if a.data.shape[1] != bm.shape[0]:
            raise ShapeMismatch(f"matmul: {a.shape} x {b.shape} (transpose_b={transpose_b})")
        dt = self._dtype_of(a, b)
        out = (_f64(a.data) @ _f64(bm)).astype(dt)

        def vjp(g):
            if transpose_b:
                return g @ _f64(b.data), g.T @ _f64(a.data)
            return g @ _f64(b.data).T, _f64(a.data).T @ g

        return self._emit(out, (a, b), vjp)

    def add_bias(self, x: Tensor, b: Tensor) -> Tensor:
        if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
            raise ShapeMismatch(f"add_bias: {x.shape} + {b.shape}")
        out = (_f64(x.data) + _f64(b.data)).astype(self._dtype_of(x, b))

        def vjp(g):
            return g, g.sum(axis=0)

        return self._emit(out, (x, b), vjp)

    def relu(self, x: Tensor) -> Tensor:
        out = np.maximum(x.data, 0)
        mask = x.data > 0  # subgradient at 0 is 0

        def vjp(g):
            return (g * mask,)

        return self._emit(out, (x,), vjp)

    def conv2d(self, x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
        """3x3 convolution, stride 1, zero padding 1, over (B, Cin, H, W).

        The kernel is (Cout, Cin, 3, 3); output is (B, Cout, H, W). This is
        the only configuration the adapters use, so it is fixed here.
        """
        if x.data.ndim != 4 or w.data.ndim != 4:
            raise ShapeMismatch("conv2d expects (B,Cin,H,W) input and (Cout,Cin,3,3) kernel")
        bsz, cin, h, wd = x.data.shape
        cout, cin_w, kh, kw = w.data.shape
        if (kh, kw) != (3, 3) or cin_w != cin:
            raise ShapeMismatch(f"conv2d kernel {w.shape} does not fit input {x.shape}")
        if b is not None and b.data.shape != (cout,):
            raise ShapeMismatch(f"conv2d bias {b.shape} does not match {cout} filters")

        patches = _im2col(_f64(x.data))                      # (B, Cin*9, H*W)
        wmat = _f64(w.data).reshape(cout, cin * 9)
        out64 = np.einsum("oc,bcp->bop", wmat, patches)      # (B, Cout, H*W)
        if b is not None:
            out64 = out64 + _f64(b.data)[None, :, None]
        dt = self._dtype_of(x, w) if b is None else self._dtype_of(x, w, b)
        out = out64.reshape(bsz, cout, h, wd).astype(dt)

        def vjp(g):
            gm = g.reshape(bsz, cout, h * wd)
            gw = np.einsum("bop,bcp->oc", gm, patches).reshape(w.data.shape)
            gcols = np.einsum("oc,bop->bcp", wmat, gm)
            gx = _col2im(gcols, (bsz, cin, h, wd))
            if b is None:
                return gx, gw
            return gx, gw, gm.sum(axis=(0, 2))

        inputs = (x, w) if b is None else (x, w, b)
        return self._emit(out, inputs, vjp)

    def mean_rows(
        self,
        x: Tensor,
        labels: np.ndarray | None = None,
        num_groups: int | None = None,
    ) -> Tensor:
        """Mean over rows; with `labels`, the per-group mean instead.

        Ungrouped: (M, C) -> (C,) and (M,) -> scalar. Grouped: (M, C) with
        integer labels -> (num_groups, C); every group must be non-empty.
        """
        if labels is None:
            m = x.data.shape[0]
            if m == 0:
                raise ShapeMismatch("mean_rows over an empty tensor")
            out = _f64(x.data).mean(axis=0).astype(x.dtype)

            def vjp(g):
                return (np.broadcast_to(g / m, x.data.shape).copy(),)

            return self._emit(out, (x,), vjp)

        if x.data.ndim != 2:
            raise ShapeMismatch("grouped mean_rows expects a 2-D tensor")
        if num_groups is None:
            raise ShapeMismatch("grouped mean_rows needs num_groups")
        labels = np.asarray(labels, dtype=np.int64)
        counts = np.bincount(labels, minlength=num_groups)
        if np.any(counts == 0):
            raise ShapeMismatch("grouped mean_rows: every group needs at least one row")
        sums = np.zeros((num_groups, x.data.shape[1]), dtype=np.float64)
        np.add.at(sums, labels, _f64(x.data))
        out = (sums / counts[:, None]).astype(x.dtype)

        def vjp(g):
            return ((g / counts[:, None])[labels],)

        return self._emit(out, (x,), vjp)

    def l2norm_rows(self, x: Tensor) -> Tensor:
        """Row-wise L2 normalization; rejects zero-norm rows."""
        if x.data.ndim != 2:
            raise ShapeMismatch("l2norm_rows expects a 2-D tensor")
        x64 = _f64(x.data)
        norms = np.sqrt((x64**2).sum(axis=1))
        if np.any(norms == 0.0):
            raise ZeroNormRow("cannot normalize a zero row")
        y64 = x64 / norms[:, None]
        out = y64.astype(x.dtype)

        def vjp(g):
            radial = (g * y64).sum(axis=1, keepdims=True)
            return ((g - y64 * radial) / norms[:, None],)

        return self._emit(out, (x,), vjp)

    def sq_euclidean(self, a: Tensor, b: Tensor) -> Tensor:
        """Pairwise squared Euclidean distances: (L, C) x (N, C) -> (L, N)."""
        if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
            raise ShapeMismatch(f"sq_euclidean: {a.shape} vs {b.shape}")
        a64, b64 = _f64(a.data), _f64(b.data)
        out64 = (
            (a64**2).sum(axis=1)[:, None]
            + (b64**2).sum(axis=1)[None, :]
            - 2.0 * (a64 @ b64.T)
        )
        out = out64.astype(self._dtype_of(a, b))

        def vjp(g):
            ga = 2.0 * (g.sum(axis=1)[:, None] * a64 - g @ b64)
            gb = 2.0 * (g.sum(axis=0)[:, None] * b64 - g.T @ a64)
            return ga, gb

        return self._emit(out, (a, b), vjp)

    def logsumexp(self, x: Tensor) -> Tensor:
        """Row-wise log-sum-exp with max-subtraction; (M, N) -> (M,), (N,) -> scalar."""
        axis = x.data.ndim - 1
        x64 = _f64(x.data)
        m = x64.max(axis=axis, keepdims=True)
        out64 = np.squeeze(m, axis=axis) + np.log(
            np.exp(x64 - m).sum(axis=axis)
        )
        out = np.asarray(out64).astype(x.dtype)

        def vjp(g):
            return (_softmax64(x64, axis) * np.expand_dims(g, axis),)

        return self._emit(out, (x,), vjp)

    def softmax(self, x: Tensor) -> Tensor:
        """Row-wise softmax with max-subtraction along the last axis."""
        axis = x.data.ndim - 1
        y64 = _softmax64(_f64(x.data), axis)
        out = y64.astype(x.dtype)

        def vjp(g):
            inner = (g * y64).sum(axis=axis, keepdims=True)
            return (y64 * (g - inner),)

        return self._emit(out, (x,), vjp)

    def dot(self, a: Tensor, b: Tensor) -> Tensor:
        """Vector dot product; for matching 2-D operands, the row-wise dot."""
        if a.data.shape != b.data.shape:
            raise ShapeMismatch(f"dot: {a.shape} vs {b.shape}")
        a64, b64 = _f64(a.data), _f64(b.data)
        if a.data.ndim == 1:
            out = np.asarray((a64 * b64).sum()).astype(self._dtype_of(a, b))

            def vjp(g):
                return g * b64, g * a64

        elif a.data.ndim == 2:
            out = (a64 * b64).sum(axis=1).astype(self._dtype_of(a, b))

            def vjp(g):
                return g[:, None] * b64, g[:, None] * a64

        else:
            raise ShapeMismatch("dot expects 1-D or 2-D operands")
        return self._emit(out, (a, b), vjp)

    def scale(self, x: Tensor, c: float) -> Tensor:
        c = float(c)
        out = (_f64(x.data) * c).astype(x.dtype)

        def vjp(g):
            return (g * c,)

        return self._emit(out, (x,), vjp)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
        out = (_f64(a.data) + _f64(b.data)).astype(self._dtype_of(a, b))

        def vjp(g):
            return g, g

        return self._emit(out, (a, b), vjp)

    def neg(self, x: Tensor) -> Tensor:
        def vjp(g):
            return (-g,)

        return self._emit(-x.data, (x,), vjp)

    def log(self, x: Tensor) -> Tensor:
        x64 = _f64(x.data)
        out = np.log(x64).astype(x.dtype)

        def vjp(g):
            return (g / x64,)

        return self._emit(out, (x,), vjp)

    def clamp_min(self, x: Tensor, c: float) -> Tensor:
        """max(x, c) elementwise; like relu, the boundary subgradient is 0."""
        c = float(c)
        out = np.maximum(x.data, c)
        mask = x.data > c

        def vjp(g):
            return (g * mask,)

        return self._emit(out, (x,), vjp)

    def reshape(self, x: Tensor, shape: tuple[int, ...]) -> Tensor:
        out = x.data.reshape(shape)

        def vjp(g):
            return (g.reshape(x.data.shape),)

        return self._emit(out, (x,), vjp)

    # --- reverse pass ---

    def backward(self, loss: Tensor) -> None:
        """Accumulate d loss / d leaf into `.grad` of every trainable leaf.

        Adjoints are carried in float64 and truncated to each leaf's dtype
        on assignment. Raises NotScalarLoss for non-scalar losses and
        DetachedTensor when `loss` was not produced on this tape.
        """
        if loss.data.size != 1:
            raise NotScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise DetachedTensor("loss was not produced by an op on this tape")

        adjoint: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data, dtype=np.float64)
        }
        holders: dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self._records):
            g = adjoint.pop(id(rec.out), None)
            holders.pop(id(rec.out), None)
            if g is None:
                continue
            for t, gt in zip(rec.inputs, rec.vjp(g)):
                if gt is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + gt
                else:
                    adjoint[key] = np.asarray(gt, dtype=np.float64)
                    holders[key] = t
        for key, g in adjoint.items():
            t = holders[key]
            if key in self._produced or not t.requires_grad:
                continue  # only leaves receive gradients
            g = g.reshape(t.data.shape).astype(t.dtype)
            t.grad = g if t.grad is None else t.grad + g


def _im2col(x64: np.ndarray) -> np.ndarray:
    """Unfold 3x3 neighborhoods (zero padding 1) into (B, Cin*9, H*W) columns."""
    bsz, cin, h, w = x64.shape
    padded = np.zeros((bsz, cin, h + 2, w + 2), dtype=np.float64)
    padded[:, :, 1:-1, 1:-1] = x64
    cols = np.empty((bsz, cin, 9, h * w), dtype=np.float64)
    for idx in range(9):
        dy, dx = divmod(idx, 3)
        cols[:, :, idx, :] = padded[:, :, dy : dy + h, dx : dx + w].reshape(bsz, cin, -1)
    return cols.reshape(bsz, cin * 9, h * w)


def _col2im(gcols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Adjoint of _im2col: scatter-add columns back onto the padded grid."""
    bsz, cin, h, w = shape
    g = gcols.reshape(bsz, cin, 9, h * w)
    padded = np.zeros((bsz, cin, h + 2, w + 2), dtype=np.float64)
    for idx in range(9):
        dy, dx = divmod(idx, 3)
        padded[:, :, dy : dy + h, dx : dx + w] += g[:, :, idx, :].reshape(bsz, cin, h, w)
    return padded[:, :, 1:-1, 1:-1]
