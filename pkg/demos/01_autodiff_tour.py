"""
Gradients of gradients with the numpy autodiff engine
=====================================================

Every backward rule is itself built from recorded ops, so calling ``grad``
with ``create_graph=True`` returns tensors that can be differentiated again.
"""

import numpy as np

from metakd import gradcheck as gc
from metakd.nn import conv2d
from metakd.tensor import Tensor, grad

# f(x) = sum(x^3): first derivative 3x^2, second derivative 6x
x = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
(g,) = grad((x * x * x).sum(), [x], create_graph=True)
(h,) = grad(g.sum(), [x])
print("x          ", x.data)
print("df/dx      ", g.data, " expected", 3 * x.data**2)
print("d2f/dx2    ", h.data, " expected", 6 * x.data)

# the same machinery through a convolution: a Hessian-vector product
rng = np.random.default_rng(0)
img = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
out = conv2d(img, w).abs().mean()
(gw,) = grad(out, [w], create_graph=True)
v = Tensor(rng.normal(size=w.shape))
(hv_img,) = grad((gw * v).sum(), [img])
print("mixed second derivative d/d(img) <dL/dw, v> has shape", hv_img.shape)

# finite differences agree with the analytic gradients for a few ops
for name in ("conv2d", "softmax", "adaptive_avg_pool", "generate_texture_kernels"):
    err = max(gc.check_first_order(name, np.random.default_rng(i)) for i in range(5))
    print(f"{name:26s} worst relative error over 5 draws: {err:.1e}")
