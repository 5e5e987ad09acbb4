"""The layer vocabulary and the shape walk through the full-size stack.

A 31-frame 112x112 clip enters the spatiotemporal frontend, comes out as
64-channel 28x28 maps per timestep (50176 values flattened), runs
through the per-timestep residual tower to a 256-wide feature, and the
bidirectional LSTM back-end emits one 500-way logit vector per timestep.
"""

import numpy as np

from lipwords import ModelConfig, Tensor
from lipwords.layers import BatchNorm, BiLstm, Conv, MaxPool
from lipwords.networks import build_frontend, build_variant

cfg = ModelConfig()  # full size: 31 frames, 112x112, vocab 500
rng = np.random.default_rng(0)

print("== frontend ==")
x = Tensor(rng.normal(size=(1, 1, cfg.frames, cfg.height, cfg.width)).astype(np.float32))
front = build_frontend(cfg, "3d", rng=rng)
front.set_training(False)
maps = front(x)
print(f"clip {tuple(x.shape)} -> maps {tuple(maps.shape)}")
print(f"flattened per timestep: {int(np.prod(maps.shape[1:2] + maps.shape[3:]))} (= 64*28*28)")
print(f"frontend parameters: {front.parameter_count():,} (~16K)")

print()
print("== standalone layers ==")
conv = Conv(2, 4, (3, 3), stride=2, padding=1, rng=rng)
y = conv(Tensor(rng.normal(size=(1, 2, 8, 8)).astype(np.float32)))
print(f"conv2d stride 2: 8x8 -> {tuple(y.shape[2:])}")

pool = MaxPool((2,), stride=(2,))
t31 = Tensor(rng.normal(size=(1, 4, 31)).astype(np.float32))
print(f"temporal halving pool: 31 -> {pool(t31).shape[2]}")

bn = BatchNorm(4)
bn.set_training(True)
z = bn(Tensor(rng.normal(size=(8, 4, 5)).astype(np.float32) * 3 + 1))
print(f"batch norm train-mode output mean {z.data.mean():+.1e}, var {z.data.var():.3f}")

rnn = BiLstm(16, 32, num_layers=2, merge="concat", rng=rng)
seq = Tensor(rng.normal(size=(5, 2, 16)).astype(np.float32))
print(f"bilstm [T=5, N=2, 16] -> {tuple(rnn(seq).shape)} (concat doubles the width)")

print()
print("== the whole stack, variant N7 ==")
net = build_variant("N7", cfg, seed=0)
net.set_training(False)
logits = net.forward(x)
print(f"logits: {tuple(logits.shape)}  (one 500-way decision per timestep)")
counts = net.parameter_counts()
for name in ("frontend", "core", "backend", "total"):
    print(f"  {name:<10} {counts[name]:>12,}")
