"""Guided attention: double normalization and linear cost in the pixel count.

Run: python demos/02_guided_attention.py
"""

import numpy as np

from bidganet.attention import GuidedAttention, ga_forward
from bidganet.bench import ga_scaling_ratio, naive_scaling_ratio
from bidganet.oracles import guided_attention_direct
from bidganet.tensor import Tensor

rng = np.random.default_rng(0)
ga = GuidedAttention(d=16, d_out=8, s=8, dtype=np.float64)
ga.m_k.data = rng.standard_normal((8, 16))
ga.m_v.data = rng.standard_normal((8, 8))
f = Tensor(rng.standard_normal((100, 16)))

# Softmax runs down each column (over pixels), then every row is L1-normalized,
# so each pixel's attention over the S memory units sums to one.
a = ga.attention_map(f).data
print("attention map", a.shape, "row sums in", (a.sum(1).min(), a.sum(1).max()))

out = ga_forward(f, ga).data
ref = guided_attention_direct(f.data, ga.m_k.data, ga.m_v.data)
print(f"max deviation from the written-out formula: {np.abs(out - ref).max():.1e}")

# Quadrupling the pixel count should roughly quadruple the time for guided
# attention, and multiply it by about sixteen for full self-attention.
lin = ga_scaling_ratio(n=4096, runs=5)
quad = naive_scaling_ratio(n=2048, runs=3)
print(f"guided attention 4x pixels -> {lin['ratio']:.2f}x time")
print(f"self-attention   4x pixels -> {quad['ratio']:.2f}x time")
