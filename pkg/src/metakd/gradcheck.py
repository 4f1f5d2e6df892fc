"""Finite-difference oracles for the autodiff engine and the meta-gradient.

The numeric side never touches the adjoint rules: it only perturbs raw
arrays and re-evaluates forward passes (or, for second order, first-order
gradients).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from . import krnet as kr
from . import nn
from .meta import unroll
from .models import NetConfig, build_network, forward_with_taps
from .tensor import Tensor, grad


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr)
    flat, g = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        g[i] = (up - down) / (2 * h)
    return out


def numeric_grad_piecewise(
    f: Callable[[], float], arr: np.ndarray, h: float = 1e-5, shrink: float = 10.0, tries: int = 5
) -> np.ndarray:
    """Central differences that shrink the step until it sits on one smooth piece.

    Functions built from abs/ReLU are only piecewise smooth, and an inner
    gradient step turns their kinks into jumps. On a smooth piece the central
    differences at ``h`` and ``h/2`` agree to O(h^2); a jump inside the stencil
    makes them differ by roughly a factor of two, which triggers a smaller step.
    """
    out = np.zeros_like(arr)
    flat, g = arr.reshape(-1), out.reshape(-1)

    def central(i, orig, step):
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        return (up - down) / (2 * step)

    for i in range(flat.size):
        orig = flat[i]
        step = h
        for _ in range(tries):
            coarse, fine = central(i, orig, step), central(i, orig, step / 2)
            if abs(coarse - fine) <= 1e-7 * max(abs(fine), 1.0):
                break
            step /= shrink
        g[i] = fine
    return out


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


@dataclass
class OpCase:
    inputs: List[np.ndarray]
    fn: Callable[..., Tensor]


def _descriptor_mix(f_t, f_s, w1, w2):
    k_t, k_s = kr.extract_descriptors(f_t, f_s, w1, w2)
    return k_t - k_s * 0.5


def _op_registry() -> Dict[str, Callable[[np.random.Generator], OpCase]]:
    def ew(fn, shapes, pos=False, margin=False):
        def build(rng):
            if pos:
                xs = [rng.uniform(0.5, 2.0, size=s) for s in shapes]
            elif margin:
                xs = [_away_from_zero(rng, s) for s in shapes]
            else:
                xs = [rng.normal(size=s) for s in shapes]
            return OpCase(xs, fn)
        return build

    def conv_case(rng):
        return OpCase([rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)],
                      lambda x, w, b: nn.conv2d(x, w, b))

    def dyn_case(rng):
        return OpCase([rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 2, 3, 3, 3))], nn.conv2d_dynamic)

    def ca_case(rng):
        return OpCase(
            [rng.normal(size=(2, 4, 3, 3)), rng.normal(size=(2, 4, 1, 1)), rng.normal(size=2),
             rng.normal(size=(4, 2, 1, 1)), rng.normal(size=4)],
            nn.channel_attention,
        )

    def corr_case(rng):
        return OpCase([rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(2, 3, 4, 4))], kr.channel_correlation)

    def kgen_case(rng):
        g = kr.KernelGenParams(3, 3, grid_side=2, k=3)
        return OpCase([rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(3, 3, 1, 1)), rng.normal(size=3)],
                      lambda f, w, b: kr.generate_texture_kernels(f, w, b, g))

    def krnet_fn(names):
        template = kr.KRNet(c_s=2, c_t=3, c_o=4, k=3)

        def fn(f_t, f_s, *ps):
            net = template.with_params(dict(zip(names, ps)))
            return kr.tap_loss(f_t, f_s, net)
        return fn

    def distill_case(rng):
        net = kr.KRNet(c_s=2, c_t=3, c_o=4, k=3).init(rng)
        names = list(net.params)
        return OpCase([rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(2, 2, 6, 6))]
                      + [rng.normal(size=net.params[k].shape) * 0.5 for k in names], krnet_fn(names))

    def dm_case(rng):
        net = kr.KRNet(c_s=2, c_t=3, c_o=4).init(rng)
        names = ["dm1.w", "dm1.b", "dm2.w", "dm2.b"]
        return OpCase([rng.normal(size=(2, 2, 3, 3))] + [rng.normal(size=net.params[k].shape) for k in names],
                      lambda f, *ps: kr.dimension_match(f, net.with_params(dict(zip(names, ps)))))

    def desc_case(rng):
        return OpCase(
            [rng.normal(size=(1, 3, 4, 4)), rng.normal(size=(1, 3, 4, 4)),
             rng.normal(size=(1, 4, 3, 3, 3)), rng.normal(size=(1, 4, 4, 3, 3))],
            _descriptor_mix,
        )

    return {
        "add": ew(lambda a, b: a + b, [(3, 4), (1, 4)]),
        "sub": ew(lambda a, b: a - b, [(3, 4), (3, 1)]),
        "mul": ew(lambda a, b: a * b, [(2, 3, 4), (3, 4)]),
        "div": ew(lambda a, b: a / b, [(3, 4), (3, 4)], pos=True),
        "neg": ew(lambda a: -a, [(5,)]),
        "scale": ew(lambda a: a * 2.5, [(2, 3)]),
        "pow": ew(lambda a: a**3, [(4,)]),
        "exp": ew(lambda a: a.exp(), [(3, 3)]),
        "log": ew(lambda a: a.log(), [(3, 3)], pos=True),
        "abs": ew(lambda a: a.abs(), [(4, 5)], margin=True),
        "sigmoid": ew(nn.sigmoid, [(3, 4)]),
        "leaky_relu": ew(nn.leaky_relu, [(3, 4)], margin=True),
        "sum": ew(lambda a: a.sum(axis=(0, 2)), [(2, 3, 4)]),
        "mean": ew(lambda a: a.mean(axis=1, keepdims=True), [(2, 3, 4)]),
        "reshape": ew(lambda a: a.reshape(4, 6), [(2, 3, 4)]),
        "permute": ew(lambda a: a.permute(2, 0, 1), [(2, 3, 4)]),
        "broadcast_to": ew(lambda a: a.broadcast_to((3, 2, 4)), [(2, 1)]),
        "sum_to": ew(lambda a: a.sum_to((1, 4)), [(3, 2, 4)]),
        "matmul": ew(lambda a, b: a @ b, [(2, 4, 5), (5, 3)]),
        "softmax": ew(lambda a: nn.softmax(a, axis=-1), [(3, 5)]),
        "conv2d": conv_case,
        "conv2d_dynamic": dyn_case,
        "adaptive_avg_pool": ew(lambda a: nn.adaptive_avg_pool(a, 2, 3), [(2, 2, 5, 7)]),
        "pixel_shuffle": ew(lambda a: nn.pixel_shuffle(a, 2), [(1, 8, 2, 3)]),
        "l1_loss": ew(nn.l1_loss, [(3, 4), (3, 4)], margin=True),
        "channel_attention": ca_case,
        "dimension_match": dm_case,
        "channel_correlation": corr_case,
        "generate_texture_kernels": kgen_case,
        "extract_descriptors": desc_case,
        "distill_loss": distill_case,
    }


OPS = _op_registry()

# ops that sit on the path of the distillation loss (second-order suite)
KD_OPS = [
    "add", "sub", "mul", "scale", "abs", "leaky_relu", "sum", "mean", "reshape",
    "permute", "matmul", "softmax", "conv2d", "conv2d_dynamic", "adaptive_avg_pool", "sigmoid",
    "channel_attention", "dimension_match", "channel_correlation", "generate_texture_kernels",
    "extract_descriptors", "distill_loss", "pixel_shuffle", "l1_loss",
]


def _projected(case: OpCase, proj: np.ndarray, arrays: Sequence[np.ndarray]) -> float:
    out = case.fn(*[Tensor(a) for a in arrays])
    return float(np.sum(out.data * proj))


def check_first_order(name: str, rng: np.random.Generator, h: float = 1e-5) -> float:
    """Worst relative error between autodiff and central differences over the op's inputs."""
    case = OPS[name](rng)
    xs = [Tensor(a, requires_grad=True) for a in case.inputs]
    out = case.fn(*xs)
    proj = rng.normal(size=out.shape)
    analytic = grad((out * Tensor(proj)).sum(), xs)
    worst = 0.0
    for i, arr in enumerate(case.inputs):
        num = numeric_grad(lambda: _projected(case, proj, case.inputs), arr, h)
        worst = max(worst, rel_err(analytic[i].data, num))
    return worst


def check_second_order(name: str, rng: np.random.Generator, h: float = 1e-5) -> float:
    """Gradient-of-gradient versus central differences of the analytic gradient."""
    case = OPS[name](rng)
    probe = case.fn(*[Tensor(a) for a in case.inputs])
    proj = rng.normal(size=probe.shape)
    dirs = [rng.normal(size=a.shape) for a in case.inputs]

    def inner(tensors, create_graph):
        out = case.fn(*tensors)
        gs = grad((out * Tensor(proj)).sum(), tensors, create_graph=create_graph)
        total = None
        for g, d in zip(gs, dirs):
            term = (g * Tensor(d)).sum()
            total = term if total is None else total + term
        return total

    xs = [Tensor(a, requires_grad=True) for a in case.inputs]
    s = inner(xs, True)
    analytic = grad(s, xs)

    def value():
        return inner([Tensor(a, requires_grad=True) for a in case.inputs], False).item()

    worst = 0.0
    for i, arr in enumerate(case.inputs):
        num = numeric_grad(value, arr, h)
        if np.linalg.norm(num) < 1e-9 and np.linalg.norm(analytic[i].data) < 1e-9:
            continue  # op is linear in this input
        worst = max(worst, rel_err(analytic[i].data, num))
    return worst


# ---------------------------------------------------------------------------
# meta-gradient oracle on a toy distillation pipeline


@dataclass
class ToyPipeline:
    student_cfg: NetConfig
    theta0: Dict[str, Tensor]
    teacher_taps: List[Tensor]
    krnets: List[kr.KRNet]
    lr_inner: Tensor
    lr_meta: Tensor
    hr_meta: Tensor
    alpha: float

    def phi(self) -> Dict[str, Tensor]:
        return {k: Tensor(v.data, requires_grad=True) for k, v in kr.flatten_params(self.krnets).items()}

    def inner_loss(self, theta, phi):
        _, taps_s = forward_with_taps(self.student_cfg, theta, self.lr_inner)
        return kr.distill_loss(self.teacher_taps, taps_s, kr.unflatten_params(self.krnets, phi))

    def outer_loss(self, theta):
        sr, _ = forward_with_taps(self.student_cfg, theta, self.lr_meta)
        return nn.l1_loss(sr, self.hr_meta)


def toy_pipeline(seed: int = 0, c_s: int = 2, c_t: int = 4, size: int = 8, alpha: float = 0.05) -> ToyPipeline:
    rng = np.random.default_rng(seed)
    s_cfg = NetConfig(n_groups=2, n_blocks=1, n_feats=c_s, scale=2, n_taps=2, reduction=2)
    t_cfg = NetConfig(n_groups=2, n_blocks=1, n_feats=c_t, scale=2, n_taps=2, reduction=2)
    student = build_network(s_cfg, seed + 1)
    teacher = build_network(t_cfg, seed + 2)
    lr_inner = Tensor(rng.uniform(size=(2, 3, size, size)))
    lr_meta = Tensor(rng.uniform(size=(2, 3, size, size)))
    hr_meta = Tensor(rng.uniform(size=(2, 3, 2 * size, 2 * size)))
    taps_t = [t.detach() for t in forward_with_taps(t_cfg, teacher.frozen().params, lr_inner)[1]]
    krnets = kr.make_krnets(c_s, c_t, n_taps=2, c_o=4, k=3, seed=seed + 3)
    return ToyPipeline(s_cfg, student.params, taps_t, krnets, lr_inner, lr_meta, hr_meta, alpha)


def meta_gradient_check(toy: ToyPipeline, T: int, h: float = 1e-5, first_order: bool = False):
    """Returns ``(relative error, analytic grads, numeric grads)`` for d L_org(theta_T) / d phi."""
    from .meta import meta_gradient

    phi = toy.phi()
    analytic = meta_gradient(toy.theta0, phi, toy.inner_loss, toy.outer_loss, toy.alpha, T, first_order)

    raw = {k: v.data.copy() for k, v in phi.items()}

    def objective():
        p = {k: Tensor(v) for k, v in raw.items()}
        theta = {k: Tensor(v.data, requires_grad=True) for k, v in toy.theta0.items()}
        thetas = unroll(theta, lambda th: toy.inner_loss(th, p), toy.alpha, T, create_graph=False)
        return toy.outer_loss(thetas[-1]).item()

    numeric = {k: numeric_grad_piecewise(objective, arr, h) for k, arr in raw.items()}
    a = np.concatenate([analytic[k].data.ravel() for k in raw])
    n = np.concatenate([numeric[k].ravel() for k in raw])
    return rel_err(a, n), analytic, numeric
