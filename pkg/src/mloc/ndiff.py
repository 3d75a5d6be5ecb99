"""Small differentiable-numerics core.

Five layer kinds (conv2d, relu, global_max_pool, dense, l2_normalize) with
hand-written reverse-mode gradients, an RMSprop optimizer, a central
finite-difference gradient checker and a binary checkpoint format.

Layers operate on batches: images are ``(N, C, H, W)``, vectors ``(N, D)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BackwardError, FormatError, ShapeError

L2_EPS = 1e-12
CHECKPOINT_MAGIC = b"MLOC1"


class Tensor:
    """A parameter array with an optional gradient buffer of the same shape."""

    def __init__(self, data, grad=None):
        self.data = np.asarray(data)
        self.grad = None if grad is None else np.asarray(grad)
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ValueError("grad shape must match data shape")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    kind = "layer"

    def __init__(self):
        self._cache = None

    def params(self) -> dict[str, Tensor]:
        return {}

    def meta(self) -> list[int]:
        """Integer hyperparameters needed to rebuild the layer from a checkpoint."""
        return []

    def check_input(self, x, index):
        pass

    def forward(self, x, retain=True):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise BackwardError(f"{self.kind}: backward() called before forward()")
        return self._cache


class Conv2d(Layer):
    """3x3 convolution, zero padding 1, configurable stride."""

    kind = "conv2d"
    kernel = 3

    def __init__(self, in_channels, out_channels, stride=1, padding=1, rng=None, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.padding = padding
        k = self.kernel
        shape = (out_channels, in_channels, k, k)
        if rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = glorot_uniform(rng, shape, in_channels * k * k, out_channels * k * k, dtype)
        self.weight = Tensor(w)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def meta(self):
        return [self.in_channels, self.out_channels, self.stride, self.padding]

    def check_input(self, x, index):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(index, f"(N, {self.in_channels}, H, W)", x.shape, self.kind)

    def output_size(self, h):
        return (h + 2 * self.padding - self.kernel) // self.stride + 1

    def forward(self, x, retain=True):
        p, s, k = self.padding, self.stride, self.kernel
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        # (N, C, Ho', Wo', k, k) before striding
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        wmat = self.weight.data.reshape(self.out_channels, -1)
        out = cols @ wmat.T + self.bias.data
        y = out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        if retain:
            self._cache = (x.shape, cols, ho, wo)
        return np.ascontiguousarray(y)

    def backward(self, grad, input_grad=True):
        x_shape, cols, ho, wo = self._take_cache()
        n, c, h, w = x_shape
        p, s, k = self.padding, self.stride, self.kernel
        g = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        self.weight.grad = (g.T @ cols).reshape(self.weight.shape).astype(self.weight.data.dtype)
        self.bias.grad = g.sum(axis=0).astype(self.bias.data.dtype)
        if not input_grad:
            return None
        wmat = self.weight.data.reshape(self.out_channels, c * k * k)
        # (k*k, n, c, ho, wo) so each kernel offset scatters a contiguous block
        gcols = np.ascontiguousarray(
            (g @ wmat).reshape(n, ho, wo, c, k * k).transpose(4, 0, 3, 1, 2))
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=gcols.dtype)
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += gcols[ki * k + kj]
        return dxp[:, :, p:p + h, p:p + w]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, retain=True):
        if retain:
            self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, grad):
        mask = self._take_cache()
        return grad * mask


class GlobalMaxPool(Layer):
    """Channel-wise spatial max. Ties resolve to the first row-major position."""

    kind = "global_max_pool"

    def check_input(self, x, index):
        if x.ndim != 4:
            raise ShapeError(index, "(N, C, H, W)", x.shape, self.kind)

    @staticmethod
    def argmax_positions(x):
        n, c, h, w = x.shape
        flat = x.reshape(n, c, h * w).argmax(axis=2)
        return np.stack(np.divmod(flat, w), axis=-1)  # (N, C, 2) as (row, col)

    def forward(self, x, retain=True):
        n, c, h, w = x.shape
        flat = x.reshape(n, c, h * w)
        idx = flat.argmax(axis=2)
        y = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]
        if retain:
            self._cache = (x.shape, idx)
        return y

    def backward(self, grad):
        shape, idx = self._take_cache()
        n, c, h, w = shape
        dx = np.zeros((n, c, h * w), dtype=grad.dtype)
        np.put_along_axis(dx, idx[..., None], grad[..., None], axis=2)
        return dx.reshape(shape)


class Dense(Layer):
    """y = x W^T + b with W of shape (out_dim, in_dim)."""

    kind = "dense"

    def __init__(self, in_dim, out_dim, rng=None, dtype=np.float32):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        if rng is None:
            w = np.zeros((out_dim, in_dim), dtype=dtype)
        else:
            w = glorot_uniform(rng, (out_dim, in_dim), in_dim, out_dim, dtype)
        self.weight = Tensor(w)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def meta(self):
        return [self.in_dim, self.out_dim]

    def check_input(self, x, index):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(index, f"(N, {self.in_dim})", x.shape, self.kind)

    def forward(self, x, retain=True):
        if retain:
            self._cache = x
        return x @ self.weight.data.T + self.bias.data

    def backward(self, grad):
        x = self._take_cache()
        self.weight.grad = (grad.T @ x).astype(self.weight.data.dtype)
        self.bias.grad = grad.sum(axis=0).astype(self.bias.data.dtype)
        return grad @ self.weight.data


def l2_normalize(z, eps=L2_EPS):
    """Row-wise z / sqrt(|z|^2 + eps); returns (u, norms)."""
    n = np.sqrt(np.sum(z * z, axis=-1, keepdims=True) + eps)
    return z / n, n


def l2_normalize_backward(grad, u, n):
    return (grad - u * np.sum(u * grad, axis=-1, keepdims=True)) / n


class L2Normalize(Layer):
    kind = "l2_normalize"

    def check_input(self, x, index):
        if x.ndim != 2:
            raise ShapeError(index, "(N, D)", x.shape, self.kind)

    def forward(self, x, retain=True):
        u, n = l2_normalize(x)
        if retain:
            self._cache = (u, n)
        return u

    def backward(self, grad):
        u, n = self._take_cache()
        return l2_normalize_backward(grad, u, n)


LAYER_KINDS = {
    cls.kind: cls for cls in (Conv2d, ReLU, GlobalMaxPool, Dense, L2Normalize)
}


class Network:
    """An ordered stack of layers with a single forward/backward session."""

    def __init__(self, layers):
        self.layers = list(layers)
        self._forwarded = False

    def forward(self, x, retain=True):
        for i, layer in enumerate(self.layers):
            layer.check_input(x, i)
            x = layer.forward(x, retain=retain)
        if retain:
            self._forwarded = True
        return x

    def backward(self, grad, input_grad=True):
        """Backpropagate ``grad`` (d loss / d output); returns d loss / d input.

        With ``input_grad=False`` a leading conv layer skips its input gradient
        and None is returned.
        """
        if not self._forwarded:
            raise BackwardError("backward() called before forward()")
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i == 0 and not input_grad and isinstance(layer, Conv2d):
                return layer.backward(grad, input_grad=False)
            grad = layer.backward(grad)
        return grad

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            for name, t in layer.params().items():
                out.append((f"{i}.{layer.kind}.{name}", t))
        return out

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def zero_grad(self):
        for t in self.params():
            t.zero_grad()

    @property
    def dtype(self):
        ps = self.params()
        return ps[0].data.dtype if ps else np.dtype(np.float64)

    def astype(self, dtype) -> "Network":
        """Deep copy with every parameter cast to ``dtype``."""
        clone = _rebuild([(l.kind, l.meta(), [t.data.astype(dtype) for t in l.params().values()])
                          for l in self.layers])
        return clone

    def copy(self) -> "Network":
        return self.astype(self.dtype)


def _rebuild(records) -> Network:
    layers = []
    for kind, meta, tensors in records:
        if kind not in LAYER_KINDS:
            raise FormatError(f"unknown layer kind {kind!r}")
        if kind == "conv2d":
            layer = Conv2d(meta[0], meta[1], stride=meta[2], padding=meta[3])
        elif kind == "dense":
            layer = Dense(meta[0], meta[1])
        else:
            layer = LAYER_KINDS[kind]()
        params = layer.params()
        if len(params) != len(tensors):
            raise FormatError(f"{kind}: expected {len(params)} tensors, got {len(tensors)}")
        for (name, t), data in zip(params.items(), tensors):
            if t.shape != data.shape:
                raise FormatError(f"{kind}.{name}: shape {data.shape} != {t.shape}")
            t.data = data
        layers.append(layer)
    return Network(layers)


# ---------------------------------------------------------------- optimizer


@dataclass
class RMSprop:
    """Standard RMSprop: v <- decay*v + (1-decay)*g^2; p <- p - lr*g/(sqrt(v)+eps)."""

    params: list
    learning_rate: float = 1e-3
    decay: float = 0.9
    epsilon: float = 1e-8
    sq_avg: list = field(default_factory=list)

    def __post_init__(self):
        if not self.sq_avg:
            self.sq_avg = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.sq_avg):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            v *= self.decay
            v += (1.0 - self.decay) * g * g
            p.data -= self.learning_rate * g / (np.sqrt(v) + self.epsilon)


def rmsprop_step(state: RMSprop):
    state.step()


# ---------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    """Max relative error per parameter block (plus the input block)."""

    errors: dict
    tolerance: float
    nonfinite: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.nonfinite and all(e < self.tolerance for e in self.errors.values())

    @property
    def failures(self) -> list[str]:
        bad = [k for k, e in self.errors.items() if not e < self.tolerance]
        return sorted(set(bad) | set(self.nonfinite))

    def lines(self):
        for name, err in self.errors.items():
            flag = "ok" if err < self.tolerance and name not in self.nonfinite else "FAIL"
            yield f"{name}: max_rel_err={err:.3e} {flag}"


def relative_error(analytic, numeric) -> float:
    """max|a - n| / max(max|a|, max|n|): block-scaled relative error."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max())
    diff = np.abs(a - n).max()
    if scale == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return float(diff / scale)


def finite_diff_check(
    network: Network,
    x: np.ndarray,
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    include_input: bool = True,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn(output) -> (loss, d loss / d output)``. Parameters and input must
    be float64.
    """
    if network.dtype != np.float64 or np.asarray(x).dtype != np.float64:
        raise TypeError("finite_diff_check requires float64 parameters and input")
    x = np.array(x, dtype=np.float64)

    def loss_at(inp):
        return float(loss_fn(network.forward(inp, retain=False))[0])

    out = network.forward(x)
    _, g_out = loss_fn(out)
    network.zero_grad()
    g_in = network.backward(g_out)

    errors, nonfinite = {}, []
    blocks = [(name, t.data, t.grad) for name, t in network.named_params()]
    if include_input:
        blocks.append(("input", x, g_in))
    for name, data, analytic in blocks:
        numeric = np.zeros_like(data)
        flat, nflat = data.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_at(x)
            flat[i] = orig - h
            lm = loss_at(x)
            flat[i] = orig
            nflat[i] = (lp - lm) / (2 * h)
        if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
            nonfinite.append(name)
            errors[name] = float("inf")
            continue
        errors[name] = relative_error(analytic, numeric)
    return GradCheckReport(errors, tolerance, nonfinite)


# --------------------------------------------------------------- checkpoint


def save_checkpoint(network: Network, path):
    """Write ``network`` as MLOC1: per-layer tag, int meta, float32 LE tensors."""
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", len(network.layers))
    for layer in network.layers:
        tag = layer.kind.encode("ascii")
        buf += struct.pack("<H", len(tag)) + tag
        meta = layer.meta()
        buf += struct.pack(f"<I{len(meta)}I", len(meta), *meta)
        tensors = list(layer.params().values())
        buf += struct.pack("<I", len(tensors))
        for t in tensors:
            buf += struct.pack(f"<I{t.data.ndim}I", t.data.ndim, *t.data.shape)
            buf += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> Network:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise FormatError("not an MLOC1 checkpoint", path=path)
    pos = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise FormatError("truncated checkpoint", path=path)
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    records = []
    (n_layers,) = take("<I")
    for _ in range(n_layers):
        (tag_len,) = take("<H")
        kind = raw[pos:pos + tag_len].decode("ascii")
        pos += tag_len
        (n_meta,) = take("<I")
        meta = list(take(f"<{n_meta}I"))
        (n_tensors,) = take("<I")
        tensors = []
        for _ in range(n_tensors):
            (ndim,) = take("<I")
            shape = take(f"<{ndim}I")
            count = int(np.prod(shape))
            nbytes = 4 * count
            if pos + nbytes > len(raw):
                raise FormatError("truncated checkpoint", path=path)
            data = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).astype(np.float32)
            pos += nbytes
            tensors.append(data.reshape(shape))
        records.append((kind, meta, tensors))
    if pos != len(raw):
        raise FormatError("trailing bytes after last layer", path=path)
    try:
        return _rebuild(records)
    except FormatError as exc:
        raise FormatError(str(exc), path=path) from None
