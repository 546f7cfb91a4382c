"""How the encoder decides what each frame may look at.

Run: python3 demos/01_masks_and_attention.py
"""

import numpy as np

from efformer.model import EncoderLayer, ModelConfig, temporal_mask
from efformer.nn import MultiHeadAttention, count_scores
from efformer.tensor import Tensor

np.set_printoptions(precision=3, suppress=True, linewidth=120)
rng = np.random.default_rng(0)

# True marks a forbidden key frame. With horizon 0 each frame sees its past only.
print("horizon 0 (prediction)")
print(temporal_mask(6, 0).astype(int))

# With horizon K = 2 a frame may also peek two frames ahead.
print("horizon 2 (inference with foresight)")
print(temporal_mask(6, 2).astype(int))

# Attention with a mask: forbidden keys get exactly zero weight.
att = MultiHeadAttention(dim=8, heads=2, head_dim=4, rng=rng)
x = Tensor(rng.standard_normal((1, 6, 8)))
trace = {}
att(x, x, x, temporal_mask(6, 0), trace=trace)
w = trace["weights"].data[0, 0]
print("head 0 weights, causal")
print(w)
print("rows sum to", w.sum(-1))

# Cost of one encoder layer, counted as score-matrix entries per clip.
N, T = 4, 10
for variant in ("st", "ts", "par", "joint"):
    cfg = ModelConfig(n_obs=N, n_tgt=1, n_actions=5, encoder=variant, geom_dim=8, action_dim=8, heads=2, head_dim=4)
    layer = EncoderLayer(cfg, rng, np.float64)
    with count_scores() as c:
        layer(Tensor(rng.standard_normal((1, N, T, 16))), 1)
    print(f"{variant:>5}: {sum(c.counts):5d} scores   (T*N^2 + N*T^2 = {T * N * N + N * T * T}, N^2*T^2 = {N * N * T * T})")
