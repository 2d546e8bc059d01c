"""Slow, obviously-correct reference implementations.

These exist only to check the fast paths: loops instead of im2col, raw
formulas instead of the tape, and a parameter count derived from the
architecture table rather than from the built modules.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .model import HEAD_CHANNELS, NetworkConfig


def conv2d_direct(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                  stride: int = 1, padding: int = 0, dilation: int = 1) -> np.ndarray:
    """Six nested loops of direct summation, accumulated in float64."""
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((n, c_in, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    ow = (wd + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((n, c_out, oh, ow))
    for b_ in range(n):
        for o in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if b is None else float(b[o])
                    for ci in range(c_in):
                        for u in range(k):
                            for v in range(k):
                                acc += (float(w[o, ci, u, v])
                                        * xp[b_, ci, i * stride + u * dilation, j * stride + v * dilation])
                    out[b_, o, i, j] = acc
    return out


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            out[i, j] = sum(float(a[i, t]) * float(b[t, j]) for t in range(k))
    return out


def maxpool2_scan(x: np.ndarray, ceil_mode: bool = False) -> np.ndarray:
    n, c, h, w = x.shape
    oh = -(-h // 2) if ceil_mode else h // 2
    ow = -(-w // 2) if ceil_mode else w // 2
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    for i in range(oh):
        for j in range(ow):
            out[:, :, i, j] = x[:, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(2, 3))
    return out


def bilinear_point(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Per-pixel half-pixel-center bilinear sampling of a 2-D array."""
    h, w = img.shape
    out = np.empty((out_h, out_w))
    for i in range(out_h):
        sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def guided_attention_direct(f: np.ndarray, m_k: np.ndarray, m_v: np.ndarray) -> np.ndarray:
    """Written straight from the formulas, element by element for the norms."""
    a = f @ m_k.T
    n, s = a.shape
    col = np.empty_like(a)
    for j in range(s):
        e = np.exp(a[:, j] - a[:, j].max())
        col[:, j] = e / e.sum()
    row = np.empty_like(col)
    for i in range(n):
        row[i] = col[i] / col[i].sum()
    return row @ m_v


def pixel_ce_direct(logits: np.ndarray, labels: np.ndarray, ignore_index: int = 255) -> float:
    """Mean cross-entropy over non-ignored pixels, one pixel at a time."""
    n, c, h, w = logits.shape
    total, count = 0.0, 0
    for b in range(n):
        for i in range(h):
            for j in range(w):
                y = int(labels[b, i, j])
                if y == ignore_index:
                    continue
                z = logits[b, :, i, j].astype(np.float64)
                total += np.log(np.exp(z - z.max()).sum()) + z.max() - z[y]
                count += 1
    return total / count


# parameter accounting --------------------------------------------------------

def _conv(c_in: int, c_out: int, k: int = 3, bias: bool = False) -> int:
    return c_in * c_out * k * k + (c_out if bias else 0)


def _cbr(c_in: int, c_out: int) -> int:
    return _conv(c_in, c_out) + 2 * c_out


def rsu_param_count(l: int, c_in: int, m: int, c_out: int) -> int:
    """Entry, l-1 encoder convs, dilated bottom, l-1 decoder convs."""
    total = _cbr(c_in, c_out) + _cbr(c_out, m) + (l - 2) * _cbr(m, m) + _cbr(m, m)
    total += (l - 2) * _cbr(2 * m, m) + _cbr(2 * m, c_out)
    return total


def param_count_oracle(cfg: NetworkConfig) -> int:
    """Total trainable scalars computed from the config table alone."""
    c_h, c_l = cfg.c_high, cfg.c_low
    mode = cfg.fusion_mode
    total = 0
    if mode != "low_only":
        total += sum(_cbr(ci, co) for ci, co in cfg.high_res_stage_channels)
    if mode != "high_only":
        total += sum(rsu_param_count(*b) for b in cfg.low_res_blocks)
        total += _conv(c_l, c_l, 1) + 2 * c_l + _conv(c_l, c_l, 3, bias=True)
    if mode == "dga":
        d = c_h + c_l
        total += _cbr(c_h, c_h) + cfg.ga_s * d * 2 + cfg.ga_s * (c_h + c_l)
    elif mode == "single_ea":
        d = c_h + c_l
        total += 2 * cfg.ga_s * d
    head_in = {"high_only": c_h, "low_only": c_l}.get(mode, c_h + c_l)
    total += _cbr(head_in, HEAD_CHANNELS) + _conv(HEAD_CHANNELS, cfg.num_classes, 1, bias=True)
    return total


# finite differences ----------------------------------------------------------

def central_diff(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-4,
                 indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (mutated in place
    and restored). ``indices`` limits the probe to a subset of flat indices."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    grad = np.zeros(flat.size)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        grad[i] = (hi - lo) / (2 * eps)
    return grad.reshape(arr.shape)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor * max|n|, tiny).

    The floor keeps coordinates whose true gradient is nearly zero from
    dominating through cancellation noise.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(n).max(initial=0.0), np.abs(a).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(floor * scale, 1e-12))
    return float((np.abs(a - n) / denom).max(initial=0.0))
