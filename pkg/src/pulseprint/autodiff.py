"""Reverse-mode automatic differentiation over dense numpy arrays.

A global tape records every primitive op whose inputs track gradients.
``backward`` replays the tape once in exact reverse execution order and
accumulates gradients into ``Tensor.grad``; the tape is then consumed and
must be repopulated by a fresh forward pass before the next backward call.

All ops are single-threaded numpy and bitwise deterministic for identical
inputs. Tensors are float32 by default; float64 is supported end to end so
finite-difference gradient checks can run at full precision.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense numpy-backed value with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        # Existing float arrays and numpy float scalars keep their dtype;
        # everything else lands on the float32 compute default unless a
        # dtype is named.
        if dtype is None and isinstance(data, (np.ndarray, np.generic)) \
                and data.dtype in _FLOAT_DTYPES:
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=dtype if dtype is not None else np.float32)
        if arr.size == 0:
            raise ValueError("zero-size tensors are not supported")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        # True once this tensor is on the active tape (leaf flagged via
        # requires_grad, or intermediate produced by a recorded op).
        self._tracked = self.requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tracks_grad(self) -> bool:
        """True when this tensor sits on the active tape (leaf or intermediate)."""
        return self._tracked

    def detach(self) -> "Tensor":
        """View of the same data, cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"


class _Node:
    """One executed primitive: inputs, output, and a closure for the pullback."""

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple, output: Tensor, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_tape: list[_Node] = []
_grad_enabled: bool = True


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; forwards inside produce untracked tensors."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def tape_length() -> int:
    return len(_tape)


def reset_tape() -> None:
    _tape.clear()


def backward(loss: Tensor) -> None:
    """Single reverse sweep from ``loss`` over the active tape.

    The sweep visits recorded ops in exact reverse execution order,
    accumulating into ``.grad`` (sum over all paths). The tape is cleared
    afterwards; calling again without a new forward pass is an error.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not _tape:
        raise RuntimeError("backward called on an empty tape (already consumed, or nothing was recorded)")
    if not loss._tracked:
        raise RuntimeError("loss tensor is not on the active tape")

    loss.grad = np.ones_like(loss.data)
    for node in reversed(_tape):
        out_grad = node.output.grad
        if out_grad is None:
            continue
        grads = node.backward(out_grad)
        for t, g in zip(node.inputs, grads):
            if g is None or not t._tracked:
                continue
            if t.grad is None:
                t.grad = g
            else:
                t.grad = t.grad + g
    # A participating leaf whose path never reached the loss still gets a
    # well-defined (zero) gradient.
    for node in _tape:
        for t in node.inputs:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)
    _tape.clear()


def _track(inputs: Sequence[Tensor]) -> bool:
    return _grad_enabled and any(t._tracked for t in inputs)


def _record(op: str, inputs: tuple, out_data: np.ndarray, backward_fn: Callable) -> Tensor:
    out = Tensor(out_data)
    if _track(inputs):
        out._tracked = True
        _tape.append(_Node(op, inputs, out, backward_fn))
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ValueError(f"{op}: operand dtypes differ, {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# pointwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record("scale", (a,), a.data * a.dtype.type(s), lambda g: (g * a.dtype.type(s),))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _record("add_scalar", (a,), a.data + a.dtype.type(float(s)), lambda g: (g,))


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    return _record("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def swish(a: Tensor) -> Tensor:
    # x * sigmoid(x); gradient s(x) * (1 + x * (1 - s(x)))
    s = expit(a.data)
    y = a.data * s
    return _record("swish", (a,), y, lambda g: (g * (s + y * (1.0 - s)),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    ad = a.data
    return _record("log", (a,), np.log(ad), lambda g: (g / ad,))


def clamp_min0(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("clamp_min0", (a,), np.where(mask, a.data, 0.0).astype(a.dtype), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and reshapes
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return _record("sum_all", (a,), out, lambda g: (np.full_like(a.data, g.reshape(())),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.dtype)
    return _record("mean_all", (a,), out, lambda g: (np.full_like(a.data, g.reshape(()) / n),))


def row_sum(a: Tensor) -> Tensor:
    """[N, D] -> [N], summing each row."""
    if a.ndim != 2:
        raise ValueError(f"row_sum expects a 2D tensor, got shape {a.shape}")
    d = a.shape[1]
    return _record("row_sum", (a,), a.data.sum(axis=1),
                   lambda g: (np.repeat(g[:, None], d, axis=1),))


def diag_part(m: Tensor) -> Tensor:
    """[N, N] -> [N], the main diagonal."""
    _check_square("diag_part", m)

    def bwd(g):
        dm = np.zeros_like(m.data)
        np.fill_diagonal(dm, g)
        return (dm,)

    return _record("diag_part", (m,), np.diagonal(m.data).copy(), bwd)


def global_avg_pool1d(x: Tensor) -> Tensor:
    """[B, C, L] -> [B, C], mean over the length axis."""
    if x.ndim != 3:
        raise ValueError(f"global_avg_pool1d expects [B, C, L], got shape {x.shape}")
    length = x.shape[2]
    return _record("global_avg_pool1d", (x,), x.data.mean(axis=2),
                   lambda g: (np.broadcast_to(g[:, :, None] / length, x.shape).astype(x.dtype, copy=True),))


def expand_length(g_in: Tensor, length: int) -> Tensor:
    """[B, C] -> [B, C, L], repeating each value along a new length axis."""
    if g_in.ndim != 2:
        raise ValueError(f"expand_length expects [B, C], got shape {g_in.shape}")
    if length < 1:
        raise ValueError("expand_length: length must be >= 1")
    out = np.broadcast_to(g_in.data[:, :, None], g_in.shape + (length,)).astype(g_in.dtype, copy=True)
    return _record("expand_length", (g_in,), out, lambda g: (g.sum(axis=2),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x [B, D_in] @ w [D_out, D_in]^T + b [D_out]."""
    if x.ndim != 2 or w.ndim != 2:
        raise ValueError(f"linear expects 2D x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"linear: x has {x.shape[1]} features but w expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"linear: bias shape {b.shape} does not match out width {w.shape[0]}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data[None, :]
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gx = g @ w.data if x._tracked else None
        gw = g.T @ x.data if w._tracked else None
        if b is None:
            return (gx, gw)
        gb = g.sum(axis=0) if b._tracked else None
        return (gx, gw, gb)

    return _record("linear", inputs, out, bwd)


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a [N, D] @ b [M, D]^T -> [N, M]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"matmul_nt: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        ga = g @ b.data if a._tracked else None
        gb = g.T @ a.data if b._tracked else None
        return (ga, gb)

    return _record("matmul_nt", (a, b), a.data @ b.data.T, bwd)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of [N, D] to unit Euclidean norm (eps-guarded)."""
    if x.ndim != 2:
        raise ValueError(f"l2_normalize_rows expects [N, D], got shape {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, x.dtype.type(eps))
    y = x.data / denom

    def bwd(g):
        coef = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * coef) / denom,)

    return _record("l2_normalize_rows", (x,), y, bwd)


# ---------------------------------------------------------------------------
# pairwise row ops (square similarity / distance matrices)
# ---------------------------------------------------------------------------

def _check_square(op: str, m: Tensor) -> None:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{op} expects a square matrix, got shape {m.shape}")
    if m.shape[0] < 2:
        raise ValueError(f"{op} needs at least 2 rows, got {m.shape[0]}")


def logsumexp_offdiag(m: Tensor) -> Tensor:
    """Row-wise log(sum_j exp(m_ij)) over j != i, max-shifted for stability."""
    _check_square("logsumexp_offdiag", m)
    a = m.data.copy()
    np.fill_diagonal(a, -np.inf)
    rowmax = a.max(axis=1, keepdims=True)
    e = np.exp(a - rowmax)
    s = e.sum(axis=1, keepdims=True)
    out = (rowmax + np.log(s)).reshape(-1)

    def bwd(g):
        return ((e / s) * g[:, None],)

    return _record("logsumexp_offdiag", (m,), out.astype(m.dtype), bwd)


def pairwise_sq_dists(u: Tensor) -> Tensor:
    """All-pairs squared Euclidean distances of rows: [N, D] -> [N, N].

    Computed from explicit row differences, which stays well conditioned
    for nearby rows (unlike the norm-and-dot expansion).
    """
    if u.ndim != 2:
        raise ValueError(f"pairwise_sq_dists expects [N, D], got shape {u.shape}")
    if u.shape[0] < 2:
        raise ValueError(f"pairwise_sq_dists needs at least 2 rows, got {u.shape[0]}")
    diff = u.data[:, None, :] - u.data[None, :, :]
    out = np.einsum("ijd,ijd->ij", diff, diff)

    def bwd(g):
        # d_ij = ||u_i - u_j||^2  =>  du = 2 [diag(rowsum(G + G^T)) - (G + G^T)] u
        sym = g + g.T
        return (2.0 * (sym.sum(axis=1, keepdims=True) * u.data - sym @ u.data),)

    return _record("pairwise_sq_dists", (u,), out.astype(u.dtype), bwd)


def min_offdiag(m: Tensor) -> Tensor:
    """Row-wise min over j != i; gradient flows to the (first) argmin entry."""
    _check_square("min_offdiag", m)
    a = m.data.copy()
    np.fill_diagonal(a, np.inf)
    idx = a.argmin(axis=1)
    rows = np.arange(a.shape[0])
    out = a[rows, idx]

    def bwd(g):
        dm = np.zeros_like(m.data)
        dm[rows, idx] = g
        return (dm,)

    return _record("min_offdiag", (m,), out, bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv1d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped cross-correlation of [B, C_in, L] with [C_out, C_in/groups, K].

    Zero padding on both ends; no kernel flip. Output length is
    floor((L + 2*padding - K) / stride) + 1 and must be >= 1.
    """
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError(f"conv1d expects 3D x and w, got {x.shape} and {w.shape}")
    batch, c_in, length = x.shape
    c_out, c_in_g, k = w.shape
    if stride < 1 or padding < 0 or k < 1:
        raise ValueError(f"conv1d: invalid stride={stride}, padding={padding}, K={k}")
    if groups < 1 or c_in % groups or c_out % groups:
        raise ValueError(f"conv1d: groups={groups} must divide C_in={c_in} and C_out={c_out}")
    if c_in_g != c_in // groups:
        raise ValueError(f"conv1d: weight expects {c_in_g} channels/group, input provides {c_in // groups}")
    if b is not None and b.shape != (c_out,):
        raise ValueError(f"conv1d: bias shape {b.shape} does not match C_out={c_out}")
    l_pad = length + 2 * padding
    if l_pad < k:
        raise ValueError(f"conv1d: kernel K={k} longer than padded input {l_pad}")
    l_out = (l_pad - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    wing = win.reshape(batch, groups, c_in_g, l_out, k)
    wg = w.data.reshape(groups, c_out // groups, c_in_g, k)
    out = np.einsum("bgclk,gock->bgol", wing, wg, optimize=True).reshape(batch, c_out, l_out)
    if b is not None:
        out = out + b.data[None, :, None]
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gg = g.reshape(batch, groups, c_out // groups, l_out)
        gw = None
        if w._tracked:
            gw = np.einsum("bgclk,bgol->gock", wing, gg, optimize=True).reshape(w.shape)
        gx = None
        if x._tracked:
            dwin = np.einsum("gock,bgol->bgclk", wg, gg, optimize=True)
            dxp = np.zeros((batch, c_in, l_pad), dtype=x.dtype)
            dxp_g = dxp.reshape(batch, groups, c_in_g, l_pad)
            for kk in range(k):
                dxp_g[:, :, :, kk:kk + stride * l_out:stride] += dwin[..., kk]
            gx = dxp[:, :, padding:padding + length] if padding else dxp
        if b is None:
            return (gx, gw)
        gb = g.sum(axis=(0, 2)) if b._tracked else None
        return (gx, gw, gb)

    return _record("conv1d", inputs, out, bwd)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor,
              running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = 0.1, eps: float = 1e-5,
              update_stats: bool = True) -> Tensor:
    """Per-channel normalization of [B, C, L] (stats over batch and length)
    or [B, D] (stats over batch).

    Training mode normalizes with batch statistics (biased variance) and,
    when ``update_stats``, folds the unbiased batch variance into the running
    buffers in place. Eval mode normalizes with the running buffers. A
    training batch with a single value per channel is rejected.
    """
    if x.ndim not in (2, 3):
        raise ValueError(f"batchnorm expects [B, D] or [B, C, L], got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm: gamma/beta must have shape ({c},)")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ValueError(f"batchnorm: running stats must have shape ({c},)")
    axes = (0,) if x.ndim == 2 else (0, 2)
    expand = (lambda v: v[None, :]) if x.ndim == 2 else (lambda v: v[None, :, None])
    m = x.data.shape[0] if x.ndim == 2 else x.data.shape[0] * x.data.shape[2]

    if training:
        if m <= 1:
            raise ValueError("batchnorm: training needs more than one value per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            unbiased = var * (m / (m - 1.0))
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        mean = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)

    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - expand(mean)) * expand(inv_std)
    out = expand(gamma.data) * xhat + expand(beta.data)

    def bwd(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma._tracked else None
        gbeta = g.sum(axis=axes) if beta._tracked else None
        gx = None
        if x._tracked:
            coef = expand(gamma.data * inv_std)
            if training:
                g_mean = g.mean(axis=axes)
                gx_hat_mean = (g * xhat).mean(axis=axes)
                gx = coef * (g - expand(g_mean) - xhat * expand(gx_hat_mean))
            else:
                gx = coef * g
        return (gx, ggamma, gbeta)

    return _record("batchnorm", (x, gamma, beta), out.astype(x.dtype, copy=False), bwd)
