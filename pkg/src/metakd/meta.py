"""Bilevel optimisation of KRNets and the distillation training loop.

The inner loop takes ``T`` plain SGD steps on the distillation loss with the
whole update recorded, so the outer reconstruction loss evaluated at the
unrolled student can be differentiated all the way back into the KRNet
parameters. Student and KRNet weights are otherwise trained with Adam under a
cosine-annealed learning rate.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np

from . import nn
from .data import ImagePair, PatchBatch, batch_iterator
from .krnet import KRNet, distill_loss, flatten_params, per_tap_losses, unflatten_params
from .metrics import evaluate_pairs
from .models import Network, forward_with_taps, save_network
from .tensor import Tensor, grad, no_grad

log = logging.getLogger(__name__)

Params = Dict[str, Tensor]


class NumericalError(RuntimeError):
    pass


class DivergenceError(NumericalError):
    pass


class ContractError(RuntimeError):
    pass


def cosine_lr(step: int, lr0: float = 1e-4, lr_min: float = 5e-6, total: int = 1) -> float:
    step = min(max(step, 0), total)
    return lr_min + (lr0 - lr_min) * 0.5 * (1.0 + math.cos(math.pi * step / total))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Params, grads: Dict[str, Tensor], state: AdamState, lr: float) -> Params:
    """One bias-corrected Adam update; returns fresh leaf tensors and advances ``state``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = {}
    for name, p in params.items():
        g = grads[name].data
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = Tensor(p.data - update, requires_grad=True)
    return out


def all_finite(grads: Dict[str, Tensor]) -> bool:
    return all(np.isfinite(g.data).all() for g in grads.values())


# ---------------------------------------------------------------------------
# unrolled inner loop


def inner_step(
    theta: Params,
    loss_fn: Callable[[Params], Tensor],
    alpha: float,
    create_graph: bool = True,
    first_order: bool = False,
) -> Params:
    """theta_next = theta - alpha * grad(loss_fn)(theta), as graph nodes.

    With ``first_order`` the gradient is taken at a detached copy of ``theta``,
    which keeps its dependence on other parameters but drops the
    curvature term through ``theta`` itself.
    """
    point = {k: Tensor(v.data, requires_grad=True) for k, v in theta.items()} if first_order else theta
    loss = loss_fn(point)
    if not np.isfinite(loss.data).all():
        raise NumericalError(f"non-finite inner loss {loss.item()}")
    names = list(point)
    gs = grad(loss, [point[k] for k in names], create_graph=create_graph)
    return {k: theta[k] - g * alpha for k, g in zip(names, gs)}


def unroll(
    theta0: Params,
    loss_fn: Callable[[Params], Tensor],
    alpha: float,
    T: int,
    create_graph: bool = True,
    first_order: bool = False,
) -> List[Params]:
    """Return ``[theta_0, ..., theta_T]`` from T recorded SGD steps."""
    thetas = [theta0]
    for _ in range(T):
        thetas.append(inner_step(thetas[-1], loss_fn, alpha, create_graph, first_order))
    return thetas


def outer_gradient(theta_T: Params, outer_loss: Callable[[Params], Tensor], phi: Params) -> Dict[str, Tensor]:
    """Gradient of ``outer_loss(theta_T)`` with respect to ``phi`` through a recorded unroll."""
    if all(t._ctx is None for t in theta_T.values()):
        raise ContractError("unroll was not recorded with create_graph=True; no path from phi to theta_T")
    loss = outer_loss(theta_T)
    names = list(phi)
    return dict(zip(names, grad(loss, [phi[k] for k in names])))


def meta_gradient(
    theta0: Params,
    phi: Params,
    inner_loss: Callable[[Params, Params], Tensor],
    outer_loss: Callable[[Params], Tensor],
    alpha: float,
    T: int = 1,
    first_order: bool = False,
) -> Dict[str, Tensor]:
    """d outer_loss(theta_T) / d phi where theta_T comes from T SGD steps on ``inner_loss(., phi)``."""
    thetas = unroll(theta0, lambda th: inner_loss(th, phi), alpha, T, True, first_order)
    return outer_gradient(thetas[-1], outer_loss, phi)


# ---------------------------------------------------------------------------
# SR-specific losses


def teacher_taps(teacher: Network, lr: Tensor) -> List[Tensor]:
    with no_grad():
        return teacher.forward_with_taps(lr)[1]


def kd_objective(student: Network, krnets: Sequence[KRNet], lr: Tensor, taps_t: List[Tensor]):
    """Build ``L_kd(theta, phi)`` for a fixed batch."""

    def loss(theta: Params, phi: Params) -> Tensor:
        _, taps_s = forward_with_taps(student.config, theta, lr)
        return distill_loss(taps_t, taps_s, unflatten_params(krnets, phi))

    return loss


def org_objective(student: Network, batch: PatchBatch):
    def loss(theta: Params) -> Tensor:
        sr, _ = forward_with_taps(student.config, theta, batch.lr)
        return nn.l1_loss(sr, batch.hr)

    return loss


def checked_inner_step(student, krnets, theta, phi, lr, taps_t, alpha, first_order=False):
    """Eq.-style SGD step on the distillation loss that names the failing tap on NaN/inf."""
    objective = kd_objective(student, krnets, lr, taps_t)
    try:
        return inner_step(theta, lambda th: objective(th, phi), alpha, True, first_order)
    except NumericalError:
        _, taps_s = forward_with_taps(student.config, theta, lr)
        losses = per_tap_losses(taps_t, taps_s, unflatten_params(krnets, phi))
        bad = [i for i, v in enumerate(losses) if not math.isfinite(v)]
        raise NumericalError(f"non-finite distillation loss at tap(s) {bad}: {losses}") from None


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    mode: str = "meta"  # vanilla | kr | meta
    rounds: int = 100
    interleave: int = 1
    T: int = 1
    alpha: float = 1e-4
    lam: float = 1.0
    lr0: float = 1e-4
    lr_min: float = 5e-6
    phi_lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    batch: int = 16
    patch: int = 48
    seed: int = 0
    augment: bool = False
    first_order: bool = False
    val_every: int = 0
    ckpt_every: int = 0
    divergence_factor: float = 1e3

    def __post_init__(self):
        if self.mode not in ("vanilla", "kr", "meta"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.mode == "meta" and (self.alpha <= 0 or self.T < 1):
            raise ValueError("meta mode needs alpha > 0 and T >= 1")

    @property
    def total_steps(self) -> int:
        return self.rounds * self.interleave


@dataclass
class MetaState:
    theta: Params
    phi: Params
    alpha: float
    T: int
    outer_opt: AdamState
    student_opt: AdamState
    lr_schedule: tuple  # (lr0, lr_min, total_steps)


def train_loop(
    teacher: Optional[Network],
    student: Network,
    krnets: Sequence[KRNet],
    corpus: Sequence[ImagePair],
    cfg: TrainConfig,
    val_pairs: Sequence[ImagePair] = (),
    log_path=None,
    ckpt_dir=None,
):
    """Distil ``teacher`` into ``student``.

    Each round: (a) T recorded inner SGD steps on L_kd, (b) an Adam update of
    the KRNet parameters from the meta-gradient of L_org on a fresh batch,
    (c) commit the unrolled student weights, (d) ``interleave`` Adam steps on
    L_org + lam * L_kd. ``mode="kr"`` skips (a)-(c) and trains the KRNets on
    L_kd directly; ``mode="vanilla"`` trains on L_org alone.

    Returns ``(student, krnets, records)``.
    """
    use_kd = cfg.mode != "vanilla" and cfg.lam > 0
    if cfg.mode != "vanilla" and teacher is None:
        raise ValueError("distillation needs a teacher")
    if teacher is not None:
        teacher = teacher.frozen()
    b1, b2 = cfg.betas
    state = MetaState(
        theta={k: Tensor(v.data, requires_grad=True) for k, v in student.params.items()},
        phi={k: Tensor(v.data, requires_grad=True) for k, v in flatten_params(krnets).items()},
        alpha=cfg.alpha,
        T=cfg.T,
        outer_opt=AdamState(b1, b2),
        student_opt=AdamState(b1, b2),
        lr_schedule=(cfg.lr0, cfg.lr_min, cfg.total_steps),
    )
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    student_stream = batch_iterator(corpus, cfg.batch, cfg.patch, np.random.default_rng(seeds[0]), cfg.augment)
    meta_stream = batch_iterator(corpus, cfg.batch, cfg.patch, np.random.default_rng(seeds[1]), cfg.augment)

    log_fh = open(log_path, "a") if log_path is not None else None
    records: List[dict] = []
    initial = None
    step = 0
    phi_floor = cfg.phi_lr * cfg.lr_min / cfg.lr0
    try:
        for rnd in range(cfg.rounds):
            kd_value = None
            if cfg.mode == "meta":
                _meta_round(state, teacher, student, krnets, next(meta_stream), next(meta_stream), cfg,
                            cosine_lr(step, cfg.phi_lr, phi_floor, cfg.total_steps))
            org_values = []
            for _ in range(cfg.interleave):
                batch = next(student_stream)
                sr, taps_s = forward_with_taps(student.config, state.theta, batch.lr)
                loss = l_org = nn.l1_loss(sr, batch.hr)
                if use_kd:
                    l_kd = distill_loss(teacher_taps(teacher, batch.lr), taps_s, unflatten_params(krnets, state.phi))
                    kd_value = l_kd.item()
                    loss = l_org + l_kd * cfg.lam
                train_phi = use_kd and cfg.mode == "kr"
                names = list(state.theta) + (list(state.phi) if train_phi else [])
                pool = {**state.theta, **(state.phi if train_phi else {})}
                gs = dict(zip(names, grad(loss, [pool[k] for k in names])))
                lr_now = cosine_lr(step, cfg.lr0, cfg.lr_min, cfg.total_steps)
                if all_finite(gs):
                    state.theta = adam_step(state.theta, {k: gs[k] for k in state.theta}, state.student_opt, lr_now)
                    if train_phi:
                        state.phi = adam_step(state.phi, {k: gs[k] for k in state.phi}, state.outer_opt,
                                              cosine_lr(step, cfg.phi_lr, phi_floor, cfg.total_steps))
                else:
                    log.warning("round %d: non-finite student gradient, update skipped", rnd)
                step += 1
                org_values.append(l_org.item())
                if initial is None:
                    initial = org_values[0]
                if not math.isfinite(org_values[-1]) or org_values[-1] > cfg.divergence_factor * initial:
                    if ckpt_dir is not None:
                        _checkpoint(ckpt_dir, "diverged", student, state, krnets)
                    raise DivergenceError(f"round {rnd}: L_org={org_values[-1]} exceeds "
                                          f"{cfg.divergence_factor:g}x initial {initial}")
            rec = {
                "round": rnd,
                "L_kd": kd_value,
                "L_org": float(np.mean(org_values)),
                "lr": cosine_lr(step - 1, cfg.lr0, cfg.lr_min, cfg.total_steps),
                "val_psnr": None,
            }
            last = rnd == cfg.rounds - 1
            if val_pairs and cfg.val_every and ((rnd + 1) % cfg.val_every == 0 or last):
                rec["val_psnr"] = validate(student, state.theta, val_pairs)
            records.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if ckpt_dir is not None and cfg.ckpt_every and (rnd + 1) % cfg.ckpt_every == 0:
                _checkpoint(ckpt_dir, f"round{rnd + 1:06d}", student, state, krnets)
    finally:
        if log_fh is not None:
            log_fh.close()
    trained = Network(student.config, {k: v.detach() for k, v in state.theta.items()})
    return trained, unflatten_params(krnets, {k: v.detach() for k, v in state.phi.items()}), records


def _meta_round(state: MetaState, teacher, student, krnets, inner_batch, meta_batch, cfg, phi_lr):
    taps_t = teacher_taps(teacher, inner_batch.lr)
    theta = state.theta
    for _ in range(cfg.T):
        theta = checked_inner_step(student, krnets, theta, state.phi, inner_batch.lr, taps_t,
                                   cfg.alpha, cfg.first_order)
    g_phi = outer_gradient(theta, org_objective(student, meta_batch), state.phi)
    if all_finite(g_phi):
        state.phi = adam_step(state.phi, g_phi, state.outer_opt, phi_lr)
    else:
        log.warning("non-finite meta-gradient, KRNet update skipped")
    state.theta = {k: Tensor(v.data, requires_grad=True) for k, v in theta.items()}


def validate(student: Network, theta: Params, pairs: Sequence[ImagePair]) -> float:
    cfg = student.config
    report = evaluate_pairs(lambda x: forward_with_taps(cfg, theta, x)[0], pairs, cfg.scale)
    return report.mean_psnr


def _checkpoint(ckpt_dir, tag, student, state, krnets):
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    net = Network(student.config, state.theta)
    meta = {"krnet": [n.describe() for n in krnets]}
    save_network(ckpt_dir / f"{tag}.ckpt", net, extra=meta, krnet_params=state.phi)


def train_supervised(
    net: Network,
    corpus: Sequence[ImagePair],
    steps: int,
    batch: int = 16,
    patch: int = 48,
    lr0: float = 1e-4,
    lr_min: float = 5e-6,
    seed: int = 0,
    augment: bool = False,
    log_every: int = 0,
) -> Network:
    """Plain L1 training with Adam and cosine annealing (used for teachers)."""
    rng = np.random.default_rng(seed)
    stream = batch_iterator(corpus, batch, patch, rng, augment)
    theta = {k: Tensor(v.data, requires_grad=True) for k, v in net.params.items()}
    opt = AdamState()
    names = list(theta)
    for step in range(steps):
        b = next(stream)
        sr, _ = forward_with_taps(net.config, theta, b.lr)
        loss = nn.l1_loss(sr, b.hr)
        gs = dict(zip(names, grad(loss, [theta[k] for k in names])))
        theta = adam_step(theta, gs, opt, cosine_lr(step, lr0, lr_min, steps))
        if log_every and step % log_every == 0:
            log.info("step %d  L1 %.5f", step, loss.item())
    return Network(net.config, {k: v.detach() for k, v in theta.items()})
