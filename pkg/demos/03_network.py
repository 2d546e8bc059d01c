"""The three network sizes: parameter counts and shapes through the branches.

Run: python demos/03_network.py
"""

import numpy as np

from bidganet.model import VERSIONS, NetworkConfig, SegModel, build_model, count_params
from bidganet.oracles import param_count_oracle
from bidganet.rsu import RSU, RsuConfig
from bidganet.nn import init_parameters
from bidganet.tensor import Tensor

for v in VERSIONS:
    cfg = NetworkConfig(version=v)
    n = count_params(SegModel(cfg))
    print(f"{v:6s} {n:>11,d} parameters (table count {param_count_oracle(cfg):,d})")

# A residual U-block keeps the spatial size, odd sizes included.
blk = RSU(RsuConfig(7, 3, 16, 32))
init_parameters(blk, 0)
trace = []
y = blk(Tensor(np.zeros((1, 3, 45, 60), np.float32)), trace=trace)
print("RSU-7 on 45x60 ->", y.shape[2:], "decoder sizes", [s for s, _ in trace])

model = build_model(NetworkConfig(version="light", num_classes=19))
model.eval()
x = Tensor(np.random.default_rng(0).standard_normal((1, 3, 128, 256)).astype(np.float32))
f_h = model.high_res_forward(x)
f_l = model.low_res_forward(x)
print("high-res branch", f_h.shape, "low-res branch", f_l.shape)
print("logits", model(x).shape)
