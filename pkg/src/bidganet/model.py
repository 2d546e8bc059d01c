"""The full two-branch network, its version table, and checkpoint I/O."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import DualGuidedAttention, GuidedAttention
from .errors import ConfigError, ShapeError
from .nn import Conv2d, ConvBNReLU, Module, BatchNorm2d, init_parameters, maxpool2, \
    upsample_bilinear2
from .rsu import RSU, RsuConfig
from .tensor import (DEFAULT_DTYPE, Tensor, add, concat_channels, mean_axes, reshape,
                     tensor_from_bytes, tensor_to_bytes)

VERSIONS = ("light", "base", "large")
FUSION_MODES = ("high_only", "low_only", "concat", "single_ea", "dga")

HIGH_RES_STAGES = ((3, 64), (64, 64), (64, 128))

LOW_RES_BLOCKS = {
    "light": ((7, 3, 16, 32), (6, 32, 16, 64), (5, 64, 16, 64),
              (4, 64, 16, 64), (4, 64, 16, 64), (4, 64, 32, 64)),
    "base": ((7, 3, 16, 32), (6, 32, 16, 64), (5, 64, 32, 128),
             (4, 128, 64, 256), (4, 256, 128, 256), (4, 256, 128, 256)),
    "large": ((7, 3, 32, 64), (6, 64, 32, 128), (5, 128, 64, 256),
              (4, 256, 128, 512), (4, 512, 256, 512), (4, 512, 256, 512)),
}

HEAD_CHANNELS = 64


@dataclass
class NetworkConfig:
    version: str = "light"
    num_classes: int = 19
    fusion_mode: str = "dga"
    ohem: bool = True
    ga_s: int = 64
    ga_dropout: float = 0.1
    seed: int = 0
    high_res_stage_channels: list = field(default_factory=lambda: [list(s) for s in HIGH_RES_STAGES])
    low_res_blocks: Optional[list] = None

    def __post_init__(self):
        self.version = self.version.lower()
        if self.version not in VERSIONS:
            raise ConfigError(f"unknown version {self.version!r}; choose from {VERSIONS}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}; choose from {FUSION_MODES}")
        if self.num_classes < 1 or self.ga_s < 1:
            raise ConfigError("num_classes and ga_s must be positive")
        if self.low_res_blocks is None:
            self.low_res_blocks = [list(b) for b in LOW_RES_BLOCKS[self.version]]
        self.high_res_stage_channels = [list(s) for s in self.high_res_stage_channels]
        self.low_res_blocks = [list(b) for b in self.low_res_blocks]
        if len(self.high_res_stage_channels) != 3 or len(self.low_res_blocks) != 6:
            raise ConfigError("expected 3 high-res stages and 6 low-res blocks")
        for a, b in zip(self.low_res_blocks, self.low_res_blocks[1:]):
            if a[3] != b[1]:
                raise ConfigError(f"low-res block chain broken: {a} -> {b}")
        if self.low_res_blocks[4][3] != self.low_res_blocks[5][3]:
            raise ConfigError("stage-5 and stage-6 output channels must match")

    @property
    def rsu_configs(self) -> list[RsuConfig]:
        return [RsuConfig(*b) for b in self.low_res_blocks]

    @property
    def c_high(self) -> int:
        return self.high_res_stage_channels[-1][1]

    @property
    def c_low(self) -> int:
        return self.low_res_blocks[-1][3]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


class ContextEmbedding(Module):
    """Global-pool context injection: conv3x3(x + BN(conv1x1(gap(x))))."""

    def __init__(self, c: int, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.squeeze = Conv2d(c, c, 1, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(c, dtype=dtype)
        self.conv = Conv2d(c, c, 3, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.squeeze(mean_axes(x, (2, 3))))
        return self.conv(add(x, y))


class SegHead(Module):
    def __init__(self, c_in: int, num_classes: int, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.conv = ConvBNReLU(c_in, HEAD_CHANNELS, dtype=dtype)
        self.cls = Conv2d(HEAD_CHANNELS, num_classes, 1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = self.cls(self.conv(x))
        for _ in range(3):
            y = upsample_bilinear2(y)
        return y


def _sub_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


class SegModel(Module):
    """Two-branch segmentation network; submodules depend on ``fusion_mode``."""

    def __init__(self, config: NetworkConfig, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.config = config
        mode = config.fusion_mode
        c_h, c_l = config.c_high, config.c_low
        if mode != "low_only":
            self.high = [ConvBNReLU(ci, co, dtype=dtype) for ci, co in config.high_res_stage_channels]
        if mode != "high_only":
            self.low = [RSU(rc, dtype=dtype) for rc in config.rsu_configs]
            self.context = ContextEmbedding(c_l, dtype=dtype)
        if mode == "dga":
            self.fusion = DualGuidedAttention(c_h, c_l, config.ga_s, config.ga_dropout, dtype=dtype)
            head_in = c_h + c_l
        elif mode == "single_ea":
            self.fusion = GuidedAttention(c_h + c_l, c_h + c_l, config.ga_s, config.ga_dropout,
                                          dtype=dtype)
            head_in = c_h + c_l
        elif mode == "concat":
            head_in = c_h + c_l
        elif mode == "high_only":
            head_in = c_h
        else:
            head_in = c_l
        self.head = SegHead(head_in, config.num_classes, dtype=dtype)

    def high_res_forward(self, x: Tensor) -> Tensor:
        _check_divisible(x, 8, "high-resolution branch")
        for stage in self.high:
            x = maxpool2(stage(x))
        return x

    def low_res_forward(self, x: Tensor) -> Tensor:
        _check_divisible(x, 32, "low-resolution branch")
        outs = []
        for i, block in enumerate(self.low):
            if i:
                x = maxpool2(x)
            x = block(x)
            outs.append(x)
        ce = self.context(outs[5])
        return add(upsample_bilinear2(ce), outs[4])

    def forward(self, x: Tensor, seed: int = 0) -> Tensor:
        """Logits (n, num_classes, H, W) for an (n, 3, H, W) image batch."""
        squeeze = x.ndim == 3
        if squeeze:
            x = reshape(x, (1,) + x.shape)
        _check_divisible(x, 32, "network input")
        if x.shape[1] != 3:
            raise ShapeError(f"expected 3 input channels, got {x.shape[1]}")
        mode = self.config.fusion_mode
        f_h = self.high_res_forward(x) if mode != "low_only" else None
        f_l = self.low_res_forward(x) if mode != "high_only" else None
        if mode == "dga":
            fused = self.fusion(f_h, f_l, seed=_sub_seed(seed, 0))
        elif mode == "concat":
            fused = concat_channels([f_h, upsample_bilinear2(f_l)])
        elif mode == "single_ea":
            cat = concat_channels([f_h, upsample_bilinear2(f_l)])
            fused = add(cat, self.fusion.forward_map(cat, seed=_sub_seed(seed, 0)))
        elif mode == "high_only":
            fused = f_h
        else:
            fused = upsample_bilinear2(f_l)
        out = self.head(fused)
        if squeeze:
            out = reshape(out, out.shape[1:])
        return out

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Argmax label map for a single (3, H, W) image, in inference mode."""
        prev = self.training
        self.eval()
        try:
            logits = self.forward(Tensor(np.asarray(image)[None], dtype=self.dtype))
        finally:
            self.train(prev)
        return logits.data[0].argmax(axis=0).astype(np.uint8 if self.config.num_classes <= 256
                                                    else np.int32)

    @property
    def dtype(self):
        return self.head.cls.weight.dtype


def _check_divisible(x: Tensor, k: int, what: str) -> None:
    h, w = x.shape[-2:]
    if h % k or w % k:
        raise ShapeError(f"{what}: spatial size {h}x{w} must be divisible by {k}")


def build_model(config: NetworkConfig, dtype=DEFAULT_DTYPE) -> SegModel:
    model = SegModel(config, dtype=dtype)
    init_parameters(model, config.seed)
    return model


def count_params(model: Module) -> int:
    """Trainable scalars: conv weights/biases, BN affine, attention units."""
    return int(sum(p.size for p in model.parameters()))


def param_breakdown(model: SegModel) -> dict[str, int]:
    out: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        out[top] = out.get(top, 0) + p.size
    return out


# checkpoint container -----------------------------------------------------------

CKPT_MAGIC = b"BDGN"
CKPT_VERSION = 1


def save_checkpoint(model: SegModel, path) -> None:
    """magic | u16 version | u32 len + canonical config JSON | tensor records."""
    blob = model.config.to_json().encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(blob)) + blob)
        for _, t in model.named_tensors():
            fh.write(tensor_to_bytes(t))


def read_checkpoint_config(buf: bytes) -> tuple[NetworkConfig, int]:
    if buf[:4] != CKPT_MAGIC:
        raise ConfigError(f"not a model checkpoint (magic {buf[:4]!r})")
    version, n = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    start = 4 + struct.calcsize("<HI")
    cfg = NetworkConfig.from_dict(json.loads(buf[start:start + n].decode()))
    return cfg, start + n


def load_checkpoint(path, expected: Optional[NetworkConfig] = None, dtype=None) -> SegModel:
    """Rebuild a model from a checkpoint; if ``expected`` is given the stored
    config must match it exactly."""
    with open(path, "rb") as fh:
        buf = fh.read()
    cfg, off = read_checkpoint_config(buf)
    if expected is not None and expected.to_json() != cfg.to_json():
        raise ConfigError("checkpoint config does not match the requested build")
    model = SegModel(cfg)
    for name, t in model.named_tensors():
        rec, off = tensor_from_bytes(buf, off)
        if rec.size != t.size or rec.shape[-t.ndim:] != t.shape:
            raise ConfigError(f"checkpoint tensor {name}: shape {rec.shape} vs {t.shape}")
        t.data = rec.data.reshape(t.shape)
    if off != len(buf):
        raise ConfigError("trailing bytes after the last checkpoint tensor")
    if dtype is not None:
        model.astype(dtype)
    return model
