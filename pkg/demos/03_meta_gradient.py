"""
Learning what to distil: the unrolled meta-gradient
===================================================

The student takes T recorded SGD steps on the distillation loss. The
reconstruction loss after those steps is then differentiated with respect to
the representation parameters, straight through the inner updates.
"""

import numpy as np

from metakd import gradcheck as gc
from metakd.meta import meta_gradient
from metakd.tensor import Tensor


def scalar(v):
    return Tensor(np.array([v]), requires_grad=True)


def kd(theta, phi):
    d = theta["w"] - phi["p"]
    return (d * d).sum() * 0.5


def org(theta):
    return (theta["w"] * theta["w"]).sum() * 0.5


# one step from theta=1 towards phi=0 with alpha=0.1 gives theta_1=0.9 and dL/dphi = 0.9*0.1
for T in (1, 2, 3):
    g = meta_gradient({"w": scalar(1.0)}, {"p": scalar(0.0)}, kd, org, 0.1, T)
    print(f"T={T}: dL_org/dphi = {g['p'].item():.12f}")

# on a tiny student/teacher pair the unrolled gradient agrees with finite differences
toy = gc.toy_pipeline(seed=0)
for T in (1, 2):
    err, _, _ = gc.meta_gradient_check(toy, T)
    print(f"toy pipeline, T={T}: relative error against finite differences {err:.1e}")

# the first-order variant drops the curvature through theta and only matches at T=1
for T in (1, 2):
    full = meta_gradient(toy.theta0, toy.phi(), toy.inner_loss, toy.outer_loss, toy.alpha, T)
    fo = meta_gradient(toy.theta0, toy.phi(), toy.inner_loss, toy.outer_loss, toy.alpha, T, first_order=True)
    gap = max(np.abs(full[k].data - fo[k].data).max() for k in full)
    print(f"T={T}: largest gap between full and first-order meta-gradients {gap:.2e}")
