"""Checking the hand-written backward passes against finite differences.

`grad_check` projects the output onto a fixed random direction, runs one
backward pass, then nudges every probed coordinate by +-eps.  Errors are
relative, with a floor of 1 on the denominator.
"""
import numpy as np

from bisenet import ops
from bisenet.blocks import GELayerS2
from bisenet.gradcheck import grad_check
from bisenet.tensor import Tensor

rng = np.random.default_rng(0)

# A single strided depthwise convolution.
x = Tensor(rng.standard_normal((2, 4, 9, 9)))
w = Tensor(rng.standard_normal((4, 1, 3, 3)))
err = grad_check(lambda t: ops.conv2d(t[0], t[1], stride=2, pad=1, groups=4), [x, w])
print(f"depthwise conv   {err:.1e}")

# Bilinear resizing is linear, so its gradient is the transposed map.
y = Tensor(rng.standard_normal((1, 2, 5, 7)))
err = grad_check(lambda t: ops.resize_bilinear(t[0], (11, 13)), [y])
print(f"bilinear resize  {err:.1e}")

# A whole block, with its parameters as inputs too.  Parameters are
# tensors, so they can be handed to the checker directly.  BN runs in
# training mode, so every output depends on every input in the batch.
block = GELayerS2(4, 8, expansion=2).initialize(1, np.float64)
z = Tensor(rng.standard_normal((2, 4, 8, 8)))
err = grad_check(lambda t: block(t[0]), [z] + block.parameters(), max_coords=20)
print(f"GE block, s=2    {err:.1e}")
