"""Guided Attention and the dual-resolution fusion block built from it.

Guided Attention is external attention with learned key/value units::

    A     = double_norm(F_in @ M_k.T)      # (N, S), rows sum to 1
    F_mid = A @ M_v                        # (N, d_out)
    F_out = dropout(F_mid)

Cost is linear in the pixel count N.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import NumericError, ShapeError
from .nn import ConvBNReLU, Module, dropout, upsample_bilinear2
from .tensor import (DEFAULT_DTYPE, Tensor, add, concat_channels, flatten_pixels,
                     l1_normalize_axis, matmul, softmax_axis, transpose, unflatten_pixels)


def double_norm(a_tilde: Tensor) -> Tensor:
    """Softmax over pixels within each column, then L1 over each row."""
    return l1_normalize_axis(softmax_axis(a_tilde, axis=-2), axis=-1)


class GuidedAttention(Module):
    """Learned units ``m_k`` (S x d) and ``m_v`` (S x d_out).

    ``m_v`` has width ``d_out`` so the output can match the channel count of
    the branch it is added back to.
    """

    def __init__(self, d: int, d_out: int, s: int = 64, dropout_rate: float = 0.1,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        if min(d, d_out, s) < 1:
            raise ShapeError(f"invalid attention sizes d={d}, d_out={d_out}, s={s}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        self.d, self.d_out, self.s = d, d_out, s
        self.dropout_rate = dropout_rate
        self.m_k = Tensor(np.zeros((s, d), dtype=dtype), requires_grad=True)
        self.m_v = Tensor(np.zeros((s, d_out), dtype=dtype), requires_grad=True)

    def attention_map(self, f_in: Tensor) -> Tensor:
        if f_in.shape[-1] != self.d:
            raise ShapeError(f"guided attention expects feature dim {self.d}, got {f_in.shape}")
        if np.isnan(f_in.data).any():
            raise NumericError("guided attention: NaN in input features")
        return double_norm(matmul(f_in, transpose(self.m_k)))

    def forward(self, f_in: Tensor, seed: int = 0) -> Tensor:
        """``f_in`` is (N, d) or (n, N, d); returns matching (..., N, d_out)."""
        f_mid = matmul(self.attention_map(f_in), self.m_v)
        return dropout(f_mid, self.dropout_rate, self.training, seed)

    def forward_map(self, x: Tensor, seed: int = 0) -> Tensor:
        """Apply to an (n, c, h, w) feature map, returning (n, d_out, h, w)."""
        h, w = x.shape[2], x.shape[3]
        return unflatten_pixels(self.forward(flatten_pixels(x), seed), h, w)


def ga_forward(f_in: Tensor, p: GuidedAttention, training: bool = False, seed: int = 0) -> Tensor:
    """Functional form of :meth:`GuidedAttention.forward` with explicit mode."""
    prev = p.training
    p.training = training
    try:
        return p.forward(f_in, seed)
    finally:
        p.training = prev


class DualGuidedAttention(Module):
    """Cross-resolution fusion of the 1/8 and 1/16 branch outputs.

    The 1/8 map is downsampled by a stride-2 conv and the 1/16 map upsampled;
    each is concatenated onto the other branch, attended, and added back to
    its own branch. Output is ``concat(r_h, up(r_l))`` at 1/8 scale.
    """

    def __init__(self, c_h: int, c_l: int, s: int = 64, dropout_rate: float = 0.1,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        self.c_h, self.c_l = c_h, c_l
        self.down = ConvBNReLU(c_h, c_h, 3, stride=2, dtype=dtype)
        self.ga_hi = GuidedAttention(c_h + c_l, c_h, s, dropout_rate, dtype=dtype)
        self.ga_lo = GuidedAttention(c_h + c_l, c_l, s, dropout_rate, dtype=dtype)

    @property
    def out_channels(self) -> int:
        return self.c_h + self.c_l

    def forward(self, f_h: Tensor, f_l: Tensor, seed: int = 0) -> Tensor:
        n, ch, hh, wh = f_h.shape
        _, cl, hl, wl = f_l.shape
        if (hh, wh) != (2 * hl, 2 * wl):
            raise ShapeError(f"dga_fuse: high-res map {hh}x{wh} must be exactly twice "
                             f"the low-res map {hl}x{wl}")
        if ch != self.c_h or cl != self.c_l:
            raise ShapeError(f"dga_fuse: expected {self.c_h}/{self.c_l} channels, got {ch}/{cl}")
        down = self.down(f_h)
        up = upsample_bilinear2(f_l)
        cat_hi = concat_channels([f_h, up])
        cat_lo = concat_channels([down, f_l])
        r_h = add(f_h, self.ga_hi.forward_map(cat_hi, seed))
        r_l = add(f_l, self.ga_lo.forward_map(cat_lo, seed + 1))
        return concat_channels([r_h, upsample_bilinear2(r_l)])


def dga_fuse(f_h: Tensor, f_l: Tensor, block: DualGuidedAttention, training: bool = False,
             seed: int = 0) -> Tensor:
    prev = block.training
    block.train(training)
    try:
        return block(f_h, f_l, seed)
    finally:
        block.train(prev)


def self_attention_naive(f: np.ndarray, block_rows: Optional[int] = 1024) -> np.ndarray:
    """Quadratic softmax(F F^T / sqrt(d)) F, for complexity comparisons only.

    Rows are processed in blocks so memory stays O(block * N) while the work
    remains O(N^2 d).
    """
    n, d = f.shape
    out = np.empty_like(f)
    step = block_rows or n
    scale = 1.0 / np.sqrt(d)
    for r0 in range(0, n, step):
        logits = (f[r0:r0 + step] @ f.T) * scale
        logits -= logits.max(axis=1, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=1, keepdims=True)
        out[r0:r0 + step] = logits @ f
    return out
