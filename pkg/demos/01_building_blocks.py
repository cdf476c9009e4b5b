# Walk through the pieces of one member network: convolution lowering,
# a single inverted-residual block with its SE gate, and what the width
# multiplier does to the parameter budget.

import numpy as np

from manymobilenet.model import ModelSpec, block_configs, param_stats, spatial_trace
from manymobilenet.nn_blocks import LayerParams, backward, conv2d, se_block
from manymobilenet.tensor_core import im2col

rng = np.random.default_rng(0)

# im2col turns a 3x3 convolution into one matrix product
x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
cols = im2col(x, 3, 3, stride=1, pad=1)
print("patch matrix", cols.shape)  # (C*3*3, N*H*W) = (18, 16)

w = rng.standard_normal((5, 2, 3, 3)).astype(np.float32)
out, tape = conv2d(x, LayerParams(weight=w), stride=1, pad=1)
print("conv output", out.shape)

# depthwise: one filter per channel (groups == channels)
dw = rng.standard_normal((2, 1, 3, 3)).astype(np.float32)
print("depthwise output", conv2d(x, LayerParams(weight=dw), pad=1, groups=2)[0].shape)

# every op hands back a tape; backward consumes it exactly once
grad_x, grads = backward(tape, np.ones_like(out))
print("grad shapes", grad_x.shape, grads["weight"].shape)

# SE gate: pool, squeeze to C/r, expand, sigmoid, rescale channels
c = 16
fc1 = LayerParams(weight=rng.standard_normal((2, c)) * 1.5, bias=np.ones(2))
fc2 = LayerParams(weight=rng.standard_normal((c, 2)) * 1.5, bias=np.zeros(c))
feat = np.abs(rng.standard_normal((1, c, 7, 7)))
gated, _ = se_block(feat, fc1, fc2, reduction=8)
print("per-channel gate", np.round(gated.mean(axis=(2, 3)) / feat.mean(axis=(2, 3)), 3)[0, :6])

# the backbone plan at 224x224: 17 bottlenecks, four of them strided
spec = ModelSpec()
print("feature map sides", spatial_trace(spec))
print("blocks", len(block_configs(spec)))

# width scales every layer's channels (rounded to a multiple of 8)
for width in (0.5, 1.0, 2.0, 3.0):
    stats = param_stats(ModelSpec(width_multiplier=width))
    print(f"width {width:>3}: {stats.param_count:>10,d} params, {stats.bytes_f32 / 1e6:7.2f} MB")
