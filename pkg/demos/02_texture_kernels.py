"""
Texture-aware kernels and knowledge descriptors
===============================================

A feature map is cut into a K x K grid of subpatches. Each subpatch is pooled
to a k x k filter, so filter ``r*K + c`` only sees subpatch (r, c). The student
and teacher features are then convolved with these per-sample filters and the
resulting descriptors are compared with an L1 gap.
"""

import numpy as np

from metakd import krnet as kr
from metakd.tensor import Tensor

rng = np.random.default_rng(0)

# a block-constant map: each 5x5 subpatch of a 2x2 grid holds one value per channel
blocks = rng.normal(size=(2, 2, 2))
feature = np.repeat(np.repeat(blocks, 5, axis=1), 5, axis=2)[None]
g = kr.KernelGenParams(c_in=2, c_out=2, grid_side=2, k=3)
weight = Tensor(np.eye(2).reshape(2, 2, 1, 1))
bias = Tensor(np.zeros(2))
kernels = kr.generate_texture_kernels(Tensor(feature), weight, bias, g).data
for r in range(2):
    for c in range(2):
        print(f"subpatch ({r},{c}) values {blocks[:, r, c].round(3)} -> filter {r * 2 + c} "
              f"centre {kernels[0, r * 2 + c, :, 1, 1].round(3)}")

# the full KRNet on random features with different widths
net = kr.KRNet(c_s=4, c_t=8, c_o=16).init(rng)
f_s = Tensor(rng.normal(size=(2, 4, 12, 12)))
f_t = Tensor(rng.normal(size=(2, 8, 12, 12)))
w1, w2 = kr.kernel_pair(f_s, f_t, net)
print("first-layer kernels ", w1.shape, "second-layer kernels", w2.shape)
print("tap loss on random features:", kr.tap_loss(f_t, f_s, net).item())

# when the matcher is the identity and the features coincide the gap is exactly zero
same = Tensor(rng.uniform(0.1, 1.0, size=(1, 4, 6, 6)))
print("identity distillation loss:", kr.distill_loss([same], [Tensor(same.data.copy())], kr.identity_krnet(4)).item())
