"""Residual U-blocks, RSU-L(c_in, m, c_out).

An entry conv lifts the input to ``c_out`` channels; a U-shaped
encoder/decoder of height ``l`` runs on top of it and its result is added
back to the entry output, so the block preserves spatial size.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ShapeError
from .nn import ConvBNReLU, Module, maxpool2, resize_like
from .tensor import DEFAULT_DTYPE, Tensor, add, concat_channels

VALID_HEIGHTS = (4, 5, 6, 7)


@dataclass(frozen=True)
class RsuConfig:
    l: int
    c_in: int
    m: int
    c_out: int

    def __post_init__(self):
        if self.l not in VALID_HEIGHTS:
            raise ShapeError(f"RSU height must be one of {VALID_HEIGHTS}, got {self.l}")
        if min(self.c_in, self.m, self.c_out) < 1:
            raise ShapeError(f"RSU channel counts must be >= 1: {self}")

    @property
    def poolings(self) -> int:
        return self.l - 2

    @property
    def divisor(self) -> int:
        """Input size that pools evenly all the way to the bottom stage."""
        return 2 ** self.poolings


class RSU(Module):
    """Parameter container and forward pass for one residual U-block.

    Layout: entry conv (c_in->c_out); encoder stage 1 (c_out->m); stages
    2..l-1 pool then conv (m->m); a dilation-2 bottom conv (m->m) at the
    deepest scale; decoder stages each conv concat(deeper, skip) (2m->m),
    the last one to c_out. Every conv is 3x3 + BN + ReLU.

    Internal pooling is ceil-mode and decoder upsampling targets the skip's
    size, so odd intermediate sizes and 1x1 maps are handled.
    """

    def __init__(self, cfg: RsuConfig, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.cfg = cfg
        l, c_in, m, c_out = cfg.l, cfg.c_in, cfg.m, cfg.c_out
        self.entry = ConvBNReLU(c_in, c_out, dtype=dtype)
        self.enc = [ConvBNReLU(c_out, m, dtype=dtype)] + [
            ConvBNReLU(m, m, dtype=dtype) for _ in range(l - 2)]
        self.bottom = ConvBNReLU(m, m, dilation=2, dtype=dtype)
        self.dec = [ConvBNReLU(2 * m, m, dtype=dtype) for _ in range(l - 2)] + [
            ConvBNReLU(2 * m, c_out, dtype=dtype)]

    def forward(self, x: Tensor, trace: list | None = None) -> Tensor:
        if x.shape[1] != self.cfg.c_in:
            raise ShapeError(f"RSU-{self.cfg.l} expects {self.cfg.c_in} channels, got {x.shape[1]}")
        hx_in = self.entry(x)
        h = self.enc[0](hx_in)
        skips = [h]
        for conv in self.enc[1:]:
            h = conv(maxpool2(h, ceil_mode=True))
            skips.append(h)
        h = self.bottom(h)
        for conv, skip in zip(self.dec, reversed(skips)):
            up = resize_like(h, skip)
            if trace is not None:
                trace.append((skip.shape[2:], up.shape[2:]))
            h = conv(concat_channels([up, skip]))
        return add(h, hx_in)


def build_rsu(cfg: RsuConfig, dtype=DEFAULT_DTYPE) -> RSU:
    return RSU(cfg, dtype=dtype)


def rsu_forward(block: RSU, x: Tensor) -> Tensor:
    return block(x)


def count_poolings(block: RSU) -> int:
    """Number of pooling steps the block applies on its way down."""
    return len(block.enc) - 1
