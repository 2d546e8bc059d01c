"""Differentiable layers: convolution, pooling, bilinear resize, batch norm, dropout.

Functional ops take and return :class:`~bidganet.tensor.Tensor`. The small
``Module`` hierarchy at the bottom holds parameters for them.
"""

from __future__ import annotations

import functools
import zlib
from typing import Iterator, Optional

import numpy as np
import scipy.sparse as sp

from .errors import ShapeError
from .tensor import DEFAULT_DTYPE, Tensor, active_tape, log_branch, record, relu

# upper bound on the patch matrix materialized per conv tile
CONV_TILE_BYTES = 32 * 2**20


def conv_out_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _tiles(n, oh, row_bytes, budget):
    """Yield (n0, n1, r0, r1) blocks whose patch matrix stays under budget."""
    sample_bytes = row_bytes * oh
    if sample_bytes <= budget:
        step = max(1, budget // max(sample_bytes, 1))
        for n0 in range(0, n, step):
            yield n0, min(n, n0 + step), 0, oh
    else:
        rows = max(1, budget // row_bytes)
        for n0 in range(n):
            for r0 in range(0, oh, rows):
                yield n0, n0 + 1, r0, min(oh, r0 + rows)


def _window_slices(i, j, r0, rows, ow, stride, dilation):
    hs = i * dilation + r0 * stride
    ws = j * dilation
    return (slice(hs, hs + stride * (rows - 1) + 1, stride),
            slice(ws, ws + stride * (ow - 1) + 1, stride))


def _im2col(xp, n0, n1, r0, r1, k, ow, stride, dilation):
    cin = xp.shape[1]
    rows = r1 - r0
    cols = np.empty((cin, k, k, n1 - n0, rows, ow), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            sh, sw = _window_slices(i, j, r0, rows, ow, stride, dilation)
            cols[:, i, j] = xp[n0:n1, :, sh, sw].transpose(1, 0, 2, 3)
    return cols.reshape(cin * k * k, -1)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    Lowered to patch-matrix GEMMs over tiles of output rows so that large
    images never materialize the full patch matrix.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {cin_w}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError("conv2d: stride/dilation must be >= 1 and padding >= 0")
    k = kh
    oh = conv_out_size(h, k, stride, padding, dilation)
    ow = conv_out_size(w, k, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: empty output for input {h}x{w} "
                         f"(k={k}, stride={stride}, pad={padding}, dilation={dilation})")
    dt = x.dtype
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wmat = weight.data.reshape(cout, -1).astype(dt, copy=False)
    row_bytes = cin * k * k * ow * xp.itemsize
    out = np.empty((n, cout, oh, ow), dtype=dt)
    tiles = list(_tiles(n, oh, row_bytes, CONV_TILE_BYTES))
    keep = len(tiles) == 1 and active_tape() is not None and weight.requires_grad
    saved = None
    for n0, n1, r0, r1 in tiles:
        cols = _im2col(xp, n0, n1, r0, r1, k, ow, stride, dilation)
        res = (wmat @ cols).reshape(cout, n1 - n0, r1 - r0, ow)
        out[n0:n1, :, r0:r1] = res.transpose(1, 0, 2, 3)
        if keep:
            saved = cols
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1).astype(dt, copy=False)

    def vjp(g):
        gw = np.zeros_like(wmat) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for n0, n1, r0, r1 in tiles:
            gt = g[n0:n1, :, r0:r1].transpose(1, 0, 2, 3).reshape(cout, -1)
            if gw is not None:
                cols = saved if saved is not None else _im2col(xp, n0, n1, r0, r1, k, ow,
                                                               stride, dilation)
                gw += gt @ cols.T
            if gxp is not None:
                gc = (wmat.T @ gt).reshape(cin, k, k, n1 - n0, r1 - r0, ow)
                for i in range(k):
                    for j in range(k):
                        sh, sw = _window_slices(i, j, r0, r1 - r0, ow, stride, dilation)
                        gxp[n0:n1, :, sh, sw] += gc[:, i, j].transpose(1, 0, 2, 3)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        gb = g.sum(axis=(0, 2, 3)).reshape(bias.shape) if bias is not None else None
        return (gx, gw.reshape(weight.shape) if gw is not None else None, gb)

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return record("conv2d", out, inputs, vjp)


def maxpool2(x: Tensor, ceil_mode: bool = False) -> Tensor:
    """2x2 max pooling with stride 2.

    Gradient goes to the first maximal element of each window in row-major
    scan order. With ``ceil_mode`` odd sizes are allowed and the trailing
    partial window is pooled on its own, otherwise odd sizes are an error.
    """
    n, c, h, w = x.shape
    if not ceil_mode and (h % 2 or w % 2):
        raise ShapeError(f"maxpool2: spatial size {h}x{w} is not even")
    ph, pw = h % 2, w % 2
    xp = x.data
    if ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
    h2, w2 = xp.shape[2] // 2, xp.shape[3] // 2
    win = xp.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = log_branch(win.argmax(axis=-1)[..., None])
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def vjp(g):
        g4 = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(g4, idx, g[..., None], axis=-1)
        gx = g4.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        return (np.ascontiguousarray(gx[:, :, :h, :w]),)

    return record("maxpool2", out, (x,), vjp)


@functools.lru_cache(maxsize=128)
def interp_matrix(n_in: int, n_out: int, dtype: str = "float32") -> sp.csr_matrix:
    """Sparse (n_out, n_in) linear-interpolation operator, half-pixel centers.

    Source coordinate ``s = (d + 0.5) * n_in / n_out - 0.5`` clamped to
    ``[0, n_in - 1]``.
    """
    d = np.arange(n_out, dtype=np.float64)
    s = np.clip((d + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
    i0 = np.floor(s).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = s - i0
    rows = np.concatenate([np.arange(n_out), np.arange(n_out)])
    cols = np.concatenate([i0, i1])
    vals = np.concatenate([1.0 - w1, w1])
    keep = vals != 0
    m = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n_out, n_in))
    return m.astype(dtype)


def _apply_axis(arr: np.ndarray, m, axis: int) -> np.ndarray:
    moved = np.moveaxis(arr, axis, 0)
    lead = moved.shape[0]
    flat = np.ascontiguousarray(moved).reshape(lead, -1)
    res = np.asarray(m @ flat).reshape((m.shape[0],) + moved.shape[1:])
    return np.ascontiguousarray(np.moveaxis(res, 0, axis))


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of an (n, c, h, w) tensor."""
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x
    dt = np.dtype(x.dtype).name
    mh = interp_matrix(h, out_h, dt)
    mw = interp_matrix(w, out_w, dt)
    out = _apply_axis(_apply_axis(x.data, mh, 2), mw, 3)

    def vjp(g):
        return (_apply_axis(_apply_axis(g, mh.T.tocsr(), 2), mw.T.tocsr(), 3),)

    return record("resize_bilinear", out, (x,), vjp)


def upsample_bilinear2(x: Tensor) -> Tensor:
    """Exact 2x bilinear upsampling (half-pixel centers, clamped)."""
    return resize_bilinear(x, 2 * x.shape[2], 2 * x.shape[3])


def resize_like(x: Tensor, ref: Tensor) -> Tensor:
    return resize_bilinear(x, ref.shape[2], ref.shape[3])


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
              running_var: Tensor, training: bool, momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as is customary).
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: {c} input channels vs parameters of shape {gamma.shape}")
    dt = x.dtype
    bshape = (1, c, 1, 1)
    g_ = gamma.data.astype(dt, copy=False).reshape(bshape)
    b_ = beta.data.astype(dt, copy=False).reshape(bshape)
    if training:
        m = x.size // c
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        unbiased = var * (m / (m - 1)) if m > 1 else var
        rm, rv = running_mean.data, running_var.data
        rm *= 1 - momentum
        rm += momentum * mu.reshape(c).astype(rm.dtype)
        rv *= 1 - momentum
        rv += momentum * unbiased.reshape(c).astype(rv.dtype)

        def vjp(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dxhat = g * g_
            gx = None
            if x.requires_grad:
                gx = (inv / m) * (m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                                  - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
            return gx, dgamma.astype(gamma.dtype), dbeta.astype(beta.dtype)
    else:
        mu = running_mean.data.astype(dt).reshape(bshape)
        inv = 1.0 / np.sqrt(running_var.data.astype(dt).reshape(bshape) + eps)
        xhat = (x.data - mu) * inv

        def vjp(g):
            return (g * g_ * inv, (g * xhat).sum(axis=(0, 2, 3)).astype(gamma.dtype),
                    g.sum(axis=(0, 2, 3)).astype(beta.dtype))

    out = xhat * g_ + b_
    return record("batchnorm", out.astype(dt, copy=False), (x, gamma, beta), vjp)


def dropout(x: Tensor, rate: float, training: bool, seed: int = 0) -> Tensor:
    """Inverted dropout; identity outside training. Deterministic per seed."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = np.random.default_rng(seed).random(x.shape) >= rate
    mask = keep.astype(x.dtype) * np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    return record("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# parameter containers --------------------------------------------------------------

class Module:
    """Minimal parameter container.

    Tensors, sub-modules and lists of sub-modules assigned as attributes are
    discovered in assignment order, which fixes the serialization order.
    """

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_tensors(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{prefix}{name}.{i}.")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self.named_tensors(prefix) if t.requires_grad)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing entries: {sorted(missing)[:5]}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.size != t.size:
                raise ShapeError(f"{name}: expected {t.shape}, got {arr.shape}")
            t.data = arr.reshape(t.shape).astype(t.dtype, copy=True)


def init_parameters(module: Module, seed: int = 0) -> None:
    """Seeded initialization keyed on each tensor's qualified name.

    Two models that share a sub-tree (same names) get identical weights for it,
    whatever else they contain. Conv weights use fan-in He-normal; attention
    units use N(0, 0.02); BN affine/buffers and biases keep their constructor
    values.
    """
    for name, t in module.named_tensors():
        leaf = name.rsplit(".", 1)[-1]
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        if leaf == "weight" and t.ndim == 4:
            fan_in = t.shape[1] * t.shape[2] * t.shape[3]
            t.data = (rng.standard_normal(t.shape) * np.sqrt(2.0 / fan_in)).astype(t.dtype)
        elif leaf in ("m_k", "m_v"):
            t.data = (rng.standard_normal(t.shape) * 0.02).astype(t.dtype)


class Conv2d(Module):
    """Convolution parameters (weight, optional bias, stride, padding, dilation)."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1,
                 padding: Optional[int] = None, dilation: int = 1, bias: bool = True,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        if k % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {k}")
        if c_in < 1 or c_out < 1:
            raise ShapeError(f"channel counts must be >= 1, got {c_in}->{c_out}")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.dilation = stride, dilation
        self.padding = dilation * (k // 2) if padding is None else padding
        self.weight = Tensor(np.zeros((c_out, c_in, k, k), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class BatchNorm2d(Module):
    def __init__(self, c: int, eps: float = 1e-5, momentum: float = 0.1, dtype=DEFAULT_DTYPE):
        super().__init__()
        if not 0.0 < momentum < 1.0:
            raise ValueError("batchnorm momentum must lie in (0, 1)")
        self.eps, self.momentum = eps, momentum
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.running_mean = Tensor(np.zeros(c, dtype=dtype))
        self.running_var = Tensor(np.ones(c, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                         self.training, self.momentum, self.eps)


class ConvBNReLU(Module):
    """3x3 (or 1x1) conv without bias, then batch norm and ReLU."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1,
                 dilation: int = 1, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, k, stride=stride, dilation=dilation, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(c_out, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))
