"""Tape-based reverse-mode differentiation over a small closed set of array primitives.

Complex tensors follow the usual convention for real-valued losses: the
gradient stored for a complex value ``z`` is ``dL/dRe(z) + 1j * dL/dIm(z)``,
so every linear map ``A`` back-propagates through ``A^H``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import scipy.fft as sfft

from .raster import bicubic_matrix

CHECKPOINT_MAGIC = b"ILILT001"

_state = threading.local()


class Tensor:
    __slots__ = ("data", "requires_grad", "tape", "param")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.ndim < 1:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.tape: Optional[Tape] = None
        self.param: Optional[Parameter] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0].real)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable


class Tape:
    """Records primitive applications in execution order.

    Use as a context manager; primitives called inside record onto the active
    tape of the current thread whenever one of their inputs requires grad.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape() -> Optional[Tape]:
    return getattr(_state, "tape", None)


class Parameter:
    """A named trainable array with its gradient accumulator and Adam moments."""

    def __init__(self, name: str, value, dtype=np.float64):
        self.name = name
        self.tensor = Tensor(np.array(value, dtype=dtype), requires_grad=True)
        self.tensor.param = self
        self.grad = np.zeros_like(self.tensor.data)
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)
        self.t = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self):
        return self.tensor.data.shape

    @property
    def size(self) -> int:
        return int(self.tensor.data.size)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: Sequence[Tensor], out_data, vjp) -> Tensor:
    tape = active_tape()
    live = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=live)
    if live:
        out.tape = tape
        tape.nodes.append(Node(op, tuple(inputs), out, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _match_kind(g: np.ndarray, like: Tensor) -> np.ndarray:
    if not np.iscomplexobj(like.data) and np.iscomplexobj(g):
        g = g.real
    return g.astype(like.data.dtype, copy=False)


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), a.data + b.data, vjp)


def mul(a, b) -> Tensor:
    """Pointwise product with broadcasting; complex operands allowed."""
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _unbroadcast(g * np.conj(b.data), a.shape), _unbroadcast(g * np.conj(a.data), b.shape)

    return _record("mul", (a, b), a.data * b.data, vjp)


complex_pointwise_mul = mul


def scalar_mul(a, s) -> Tensor:
    a = _as_tensor(a)
    return _record("scalar_mul", (a,), a.data * s, lambda g: (g * np.conj(s),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def logit(a, eps: float = 0.01) -> Tensor:
    """``log(p / (1 - p))`` of ``p = clip(a, eps, 1 - eps)``; zero gradient where clipped."""
    if not 0 < eps < 0.5:
        raise ValueError("eps must lie in (0, 0.5)")
    a = _as_tensor(a)
    p = np.clip(a.data, eps, 1.0 - eps)
    inside = (a.data > eps) & (a.data < 1.0 - eps)
    out = np.log(p) - np.log1p(-p)
    return _record("logit", (a,), out.astype(a.dtype), lambda g: (np.where(inside, g / (p * (1.0 - p)), 0).astype(a.dtype),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    on = a.data > 0
    return _record("relu", (a,), np.where(on, a.data, 0).astype(a.dtype), lambda g: (g * on,))


def total(a) -> Tensor:
    a = _as_tensor(a)
    return _record("sum", (a,), np.sum(a.data).reshape(1), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def frobenius_sq_diff(a, b) -> Tensor:
    """Scalar ``||a - b||_F^2``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    val = np.sum(diff.real**2 + diff.imag**2) if np.iscomplexobj(diff) else np.sum(diff * diff)

    def vjp(g):
        d = 2.0 * diff * g
        return d, -d

    return _record("frobenius_sq_diff", (a, b), np.asarray(val).reshape(1), vjp)


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), vjp)


def _check_pow2(shape):
    for n in shape[-2:]:
        if n < 1 or n & (n - 1):
            raise ValueError(f"FFT size must be a power of two, got {shape[-2:]}")


def fft2(a) -> Tensor:
    """Unnormalised 2D DFT over the last two axes."""
    a = _as_tensor(a)
    _check_pow2(a.shape)
    n = a.shape[-1] * a.shape[-2]
    return _record("fft2", (a,), sfft.fft2(a.data), lambda g: (sfft.ifft2(g) * n,))


def ifft2(a) -> Tensor:
    a = _as_tensor(a)
    _check_pow2(a.shape)
    n = a.shape[-1] * a.shape[-2]
    return _record("ifft2", (a,), sfft.ifft2(a.data), lambda g: (sfft.fft2(g) / n,))


def real(a) -> Tensor:
    a = _as_tensor(a)
    return _record("real", (a,), np.ascontiguousarray(a.data.real), lambda g: (g.astype(a.dtype),))


def imag(a) -> Tensor:
    a = _as_tensor(a)
    return _record("imag", (a,), np.ascontiguousarray(a.data.imag), lambda g: (1j * g,))


def as_complex(a) -> Tensor:
    """View a real array with trailing axis of length 2 as complex (re, im)."""
    a = _as_tensor(a)
    if a.shape[-1] != 2:
        raise ValueError("trailing axis must have length 2")
    out = a.data[..., 0] + 1j * a.data[..., 1]
    return _record("as_complex", (a,), out, lambda g: (np.stack([g.real, g.imag], axis=-1),))


def spectral_linear(x, w) -> Tensor:
    """Per-mode channel mixing: ``y[n,o,u,v] = sum_i x[n,i,u,v] * w[i,o,u,v]``."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.shape[1] != w.shape[0] or x.shape[2:] != w.shape[2:]:
        raise ValueError(f"spectral weight {w.shape} incompatible with input {x.shape}")
    y = np.einsum("niuv,iouv->nouv", x.data, w.data)

    def vjp(g):
        gx = np.einsum("nouv,iouv->niuv", g, np.conj(w.data))
        gw = np.einsum("niuv,nouv->iouv", np.conj(x.data), g)
        return gx, gw

    return _record("spectral_linear", (x, w), y, vjp)


def mode_indices(p: int, k: int) -> np.ndarray:
    """Indices of the ``k`` lowest frequencies (both signs) along an axis of length ``p``."""
    if not 1 <= k <= p:
        raise ValueError(f"cannot retain {k} modes of {p}")
    pos = (k + 1) // 2
    return np.concatenate([np.arange(pos), np.arange(p - (k - pos), p)]).astype(int)


def mode_select(x, k: int) -> Tensor:
    x = _as_tensor(x)
    p = x.shape[-1]
    idx = mode_indices(p, k)

    def vjp(g):
        out = np.zeros(x.shape, dtype=np.result_type(g, x.data))
        out[..., idx[:, None], idx[None, :]] = g
        return (out,)

    return _record("mode_select", (x,), x.data[..., idx[:, None], idx[None, :]], vjp)


def mode_scatter(x, p: int) -> Tensor:
    x = _as_tensor(x)
    k = x.shape[-1]
    idx = mode_indices(p, k)
    out = np.zeros(x.shape[:-2] + (p, p), dtype=x.dtype)
    out[..., idx[:, None], idx[None, :]] = x.data
    return _record("mode_scatter", (x,), out, lambda g: (g[..., idx[:, None], idx[None, :]],))


def patch_split(x, p: int) -> Tensor:
    """(N, C, H, W) -> (N * H/p * W/p, C, p, p), patches in row-major grid order."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if h % p or w % p:
        raise ValueError(f"patch size {p} does not divide {h}x{w}")
    gh, gw = h // p, w // p
    out = x.data.reshape(n, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(n * gh * gw, c, p, p)

    def vjp(g):
        return (g.reshape(n, gh, gw, c, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(n, c, h, w),)

    return _record("patch_split", (x,), out, vjp)


def patch_merge(x, grid) -> Tensor:
    """Inverse of :func:`patch_split` for a ``(gh, gw)`` patch grid."""
    x = _as_tensor(x)
    gh, gw = grid
    b, c, p, _ = x.shape
    n = b // (gh * gw)
    if n * gh * gw != b:
        raise ValueError(f"{b} patches do not fill a {gh}x{gw} grid")
    out = x.data.reshape(n, gh, gw, c, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(n, c, gh * p, gw * p)

    def vjp(g):
        return (g.reshape(n, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, c, p, p),)

    return _record("patch_merge", (x,), out, vjp)


def avg_pool(x, f: int) -> Tensor:
    x = _as_tensor(x)
    *lead, h, w = x.shape
    if h % f or w % f:
        raise ValueError(f"pool factor {f} does not divide {h}x{w}")
    out = x.data.reshape(*lead, h // f, f, w // f, f).mean(axis=(-3, -1))

    def vjp(g):
        return (np.repeat(np.repeat(g, f, axis=-2), f, axis=-1) / (f * f),)

    return _record("avg_pool", (x,), out, vjp)


def _rows_times(x: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Apply ``mat`` (out, in) along the last axis of ``x`` as one 2D GEMM."""
    lead = x.shape[:-1]
    flat = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
    return (flat @ np.ascontiguousarray(mat.T)).reshape(lead + (mat.shape[0],))


def _separable(x: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    """``mh @ x @ mw.T`` over the last two axes."""
    y = _rows_times(x, mw)
    return _rows_times(y.swapaxes(-1, -2), mh).swapaxes(-1, -2)


def bicubic_upsample(x, f: int) -> Tensor:
    """Separable bicubic upsampling of the last two axes (no clamping)."""
    x = _as_tensor(x)
    h, w = x.shape[-2:]
    uh = bicubic_matrix(h, f).astype(x.dtype)
    uw = bicubic_matrix(w, f).astype(x.dtype)

    def vjp(g):
        return (np.ascontiguousarray(_separable(g, uh.T, uw.T)),)

    return _record("bicubic_upsample", (x,), np.ascontiguousarray(_separable(x.data, uh, uw)), vjp)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N, H, W, C*k*k) with zero padding k//2."""
    r = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    n, c, h, w = x.shape
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, h, w, c * k * k)


def conv2d(x, w, b=None) -> Tensor:
    """Stride-1 'same' convolution (cross-correlation) with zero padding.

    x: (N, Cin, H, W); w: (Cout, Cin, k, k) with odd k; b: (Cout,) or None.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    cout, cin, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv kernel must be square and odd, got {w.shape}")
    if x.data.ndim != 4 or x.shape[1] != cin:
        raise ValueError(f"conv input {x.shape} incompatible with weight {w.shape}")
    cols = _im2col(x.data, k)
    wmat = w.data.reshape(cout, cin * k * k)
    y = np.matmul(cols, wmat.T).transpose(0, 3, 1, 2)
    inputs = [x, w]
    if b is not None:
        b = _as_tensor(b)
        y = y + b.data[None, :, None, None]
        inputs.append(b)

    def vjp(g):
        gt = g.transpose(0, 2, 3, 1)
        gw = np.tensordot(gt, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(w.shape)
        flipped = np.flip(w.data, axis=(2, 3)).transpose(1, 0, 2, 3)
        gcols = _im2col(g, k)
        gx = np.matmul(gcols, flipped.reshape(cin, cout * k * k).T).transpose(0, 3, 1, 2)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _record("conv2d", inputs, np.ascontiguousarray(y), vjp)


def stop_gradient(x) -> Tensor:
    """Same values, detached: nothing flows back through the result."""
    x = _as_tensor(x)
    return Tensor(x.data, requires_grad=False)


# ----------------------------------------------------------- backward / adam


def backward(tape: Tape, loss: Tensor, scale: float = 1.0, retain_graph: bool = False) -> None:
    """Accumulate ``scale * d loss / d param`` into every reachable Parameter.

    Tensors and the tape reference each other, so the recorded graph is only
    reclaimed by the cycle collector; unless ``retain_graph`` the tape is
    cleared afterwards to release its activations immediately.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.param is not None:
        loss.param.grad += scale
        return
    if loss.tape is not tape:
        raise ValueError("loss node is not recorded on this tape")
    grads: Dict[int, np.ndarray] = {id(loss): np.full(loss.shape, scale, dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if not inp.requires_grad:
                continue
            gi = _match_kind(np.asarray(gi), inp)
            if inp.param is not None:
                inp.param.grad += gi
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + gi
            else:
                grads[id(inp)] = gi
    if not retain_graph:
        tape.nodes.clear()


def adam_step(
    params: Sequence[Parameter],
    lr: float = 0.004,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0001,
) -> None:
    """Adam with decoupled weight decay; moments live on each Parameter."""
    for p in params:
        p.t += 1
        g = p.grad
        p.m[...] = beta1 * p.m + (1 - beta1) * g
        p.v[...] = beta2 * p.v + (1 - beta2) * g * g
        m_hat = p.m / (1 - beta1**p.t)
        v_hat = p.v / (1 - beta2**p.t)
        p.tensor.data[...] = p.data - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)


def zero_grad(params: Sequence[Parameter]) -> None:
    for p in params:
        p.zero_grad()


# ------------------------------------------------------------------- gradcheck


def numeric_vs_analytic(fn, arrays: Sequence[np.ndarray], n_coords: int = 10, eps: float = 1e-6, seed: int = 0):
    """Compare analytic and central-difference gradients at random coordinates.

    ``fn`` maps Tensors (one per array) to a scalar Tensor. Returns the maximum
    relative error over all probed coordinates of all inputs.
    """
    rng = np.random.default_rng(seed)
    params = [Parameter(f"x{i}", a.astype(np.float64)) for i, a in enumerate(arrays)]
    with Tape() as tape:
        loss = fn(*[p.tensor for p in params])
    backward(tape, loss)

    def value():
        return fn(*[Tensor(p.data) for p in params]).item()

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + eps
            up = value()
            flat[idx] = orig - eps
            down = value()
            flat[idx] = orig
            num = (up - down) / (2 * eps)
            ana = p.grad.reshape(-1)[idx]
            err = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
            worst = max(worst, err)
    return worst


# ------------------------------------------------------------------ checkpoint


def save_checkpoint(path, params: Sequence[Parameter], header: Optional[dict] = None) -> None:
    """Write parameters as ``ILILT001 | u32 len | JSON header | f32 blobs`` atomically."""
    meta = dict(header or {})
    meta["params"] = [{"name": p.name, "shape": list(p.shape)} for p in params]
    meta["dtype"] = "float32"
    head = json.dumps(meta, sort_keys=True).encode()
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(head)))
            fh.write(head)
            for p in params:
                fh.write(p.data.astype("<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Return ``(header, {name: float32 array})`` in header order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic, not an ILILT checkpoint")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    header = json.loads(blob[12 : 12 + hlen].decode())
    offset = 12 + hlen
    arrays = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"]))
        if offset + 4 * count > len(blob):
            raise ValueError(f"{path}: truncated parameter blob for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(entry["shape"]).copy()
        offset += 4 * count
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes after parameter blobs")
    return header, arrays
