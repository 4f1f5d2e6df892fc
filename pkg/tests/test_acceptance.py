"""Acceptance checks 1-10, one PASS/FAIL line each (repeated in the pytest terminal summary).

A criterion whose stated target is known to be unreachable is reported as FAIL
and marked xfail with the reason, never loosened.
"""

import math
import time

import numpy as np
import pytest

from metakd import cli, experiments
from metakd import gradcheck as gc
from metakd import krnet as kr
from metakd.config import parse_config
from metakd.meta import cosine_lr, meta_gradient, unroll
from metakd.metrics import psnr, ssim
from metakd.tensor import Tensor

from test_metrics import ssim_scalar_loops


LINES = {}


def report(n, ok, detail, known_gap=None):
    LINES[n] = f"[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}"
    print("\n" + LINES[n])
    if not ok and known_gap:
        pytest.xfail(known_gap)
    assert ok, detail


def scalar(v):
    return Tensor(np.array([v]), requires_grad=True)


def test_criterion_1_gradient_oracle_suite():
    t0 = time.perf_counter()
    worst, worst_op = 0.0, None
    for name in sorted(gc.OPS):
        rng = np.random.default_rng(sum(map(ord, name)))
        for _ in range(20):
            err = gc.check_first_order(name, rng, h=1e-5)
            if err > worst:
                worst, worst_op = err, name
    dt = time.perf_counter() - t0
    report(1, worst < 1e-5 and dt < 120,
           f"{len(gc.OPS)} ops x 20 instances, worst rel err {worst:.2e} ({worst_op}), {dt:.1f} s")


def test_criterion_2_meta_gradient_matches_finite_differences():
    t0 = time.perf_counter()
    toy = gc.toy_pipeline(seed=0, c_s=2, c_t=4, size=8)
    errs = {T: gc.meta_gradient_check(toy, T, h=1e-5)[0] for T in (1, 2)}
    dt = time.perf_counter() - t0
    report(2, max(errs.values()) < 1e-4 and dt < 300,
           f"T=1 rel err {errs[1]:.2e}, T=2 rel err {errs[2]:.2e}, {dt:.1f} s")


def test_criterion_3_scalar_bilevel_chain():
    def kd(th, ph):
        d = th["w"] - ph["p"]
        return (d * d).sum() * 0.5

    g = meta_gradient({"w": scalar(1.0)}, {"p": scalar(0.0)}, kd, lambda th: (th["w"] * th["w"]).sum() * 0.5, 0.1, T=1)
    value = g["p"].item()
    report(3, abs(value - 0.09) <= 1e-12, f"dL_org/dphi = {value!r}")


def test_criterion_4_identity_distillation_is_exactly_zero():
    rng = np.random.default_rng(0)
    net = kr.identity_krnet(4, c_o=4)
    taps = [Tensor(rng.uniform(0.1, 1.0, size=(2, 4, 6, 6))) for _ in range(3)]
    loss = kr.distill_loss(taps, [Tensor(t.data.copy()) for t in taps], net).item()
    report(4, loss == 0.0, f"L_kd = {loss!r}")


def test_criterion_5_texture_kernel_invariants():
    rng = np.random.default_rng(1)
    shapes = {}
    for c_o in (4, 16, 64, 144):
        side = math.isqrt(c_o)
        net = kr.KRNet(2, 3, c_o=c_o).init(rng)
        f_s = Tensor(rng.normal(size=(2, 2, 3 * side, 3 * side)))
        f_t = Tensor(rng.normal(size=(2, 3, 3 * side, 3 * side)))
        shapes[c_o] = kr.kernel_pair(f_s, f_t, net)[0].shape
    shapes_ok = all(s == (2, c_o, 3, 3, 3) for c_o, s in shapes.items())

    g = kr.KernelGenParams(c_in=2, c_out=3, grid_side=2, k=3)
    weight, bias = Tensor(rng.normal(size=(3, 2, 1, 1))), Tensor(rng.normal(size=3))
    blocks = rng.normal(size=(2, 2, 2))
    f = np.repeat(np.repeat(blocks, 5, axis=1), 5, axis=2)[None]
    out = kr.generate_texture_kernels(Tensor(f), weight, bias, g).data
    local_ok = all(
        np.allclose(out[0, r * 2 + c], (weight.data[:, :, 0, 0] @ blocks[:, r, c] + bias.data)[:, None, None],
                    rtol=1e-12, atol=0)
        for r in range(2) for c in range(2)
    )
    report(5, shapes_ok and local_ok,
           f"shapes {', '.join(f'c_o={c}:{s}' for c, s in shapes.items())}; block-constant locality {local_ok}")


def test_criterion_6_unroll_matches_geometric_sequence():
    a, phi, th0, T = 0.1, 0.3, 1.0, 6
    p = {"p": scalar(phi)}
    thetas = unroll({"w": scalar(th0)}, lambda th: ((th["w"] - p["p"]) * (th["w"] - p["p"])).sum() * 0.5, a, T)
    got = [t["w"].item() for t in thetas]
    expected = [phi + (1 - a) ** t * (th0 - phi) for t in range(T + 1)]
    worst = max(abs(x - y) for x, y in zip(got, expected))
    report(6, worst <= 1e-12, f"T={T} steps, max deviation {worst:.1e}")


@pytest.mark.slow
def test_criterion_7_desk_scale_ordering():
    t0 = time.perf_counter()
    setup = experiments.DeskSetup()
    rep = experiments.run_ablation(setup, seeds=(0, 1, 2), cases=("vanilla", "krnet", "krnet+meta"))
    dt = time.perf_counter() - t0
    van, krn, met = rep.mean("vanilla"), rep.mean("krnet"), rep.mean("krnet+meta")
    print("\n" + rep.to_table())
    ok = met - van >= 0.05 and met >= krn and dt < 3600
    report(7, ok, f"Vanilla {van:.4f}, KRNet {krn:.4f}, KRNet+meta {met:.4f} dB "
                  f"(gain {met - van:+.4f}, vs KRNet {met - krn:+.4f}), {dt / 60:.1f} min",
           known_gap="at desk scale the KRNet+meta gain over Vanilla is within seed-to-seed noise "
                     "(about +0.03 dB); see the decisions ledger for the sweep")


def test_criterion_8_cosine_endpoints():
    start, end = cosine_lr(0, total=1000), cosine_lr(1000, total=1000)
    report(8, start == 1e-4 and end == 5e-6, f"lr(0)={start!r}, lr(total)={end!r}")


def test_criterion_9_metric_fixtures():
    a = np.full((20, 20), 100.0)
    p1, p256 = psnr(a, a + 1.0), psnr(a, a + 16.0)
    rng = np.random.default_rng(9)
    x = rng.uniform(0, 255, size=(16, 18))
    y = np.clip(x + rng.normal(scale=15, size=x.shape), 0, 255)
    self_one = ssim(x, x) == 1.0
    ssim_gap = abs(ssim(x, y) - ssim_scalar_loops(x.tolist(), y.tolist()))
    closed = 10 * math.log10(255**2 / 256)
    achievable = abs(p1 - 48.1308) <= 1e-3 and abs(p256 - closed) <= 1e-3 and self_one and ssim_gap <= 1e-6
    assert achievable, (p1, p256, self_one, ssim_gap)
    literal = abs(p256 - 24.0824) <= 1e-3
    report(9, literal,
           f"PSNR(MSE=1)={p1:.4f}, PSNR(MSE=256)={p256:.4f} vs stated 24.0824, "
           f"SSIM(a,a)==1 {self_one}, scalar-loop SSIM gap {ssim_gap:.1e}",
           known_gap="24.0824 is 10*log10(256); 10*log10(255^2/256) is 24.0484, which the metric returns")


DET = """
[teacher]
n_groups = 2
n_blocks = 1
n_feats = 4
n_taps = 2
reduction = 2

[student]
n_groups = 2
n_blocks = 1
n_feats = 2
n_taps = 2
reduction = 2

[krnet]
c_o = 4

[meta]
rounds = 4
alpha = 0.001
phi_lr = 0.001

[optim]
lr0 = 0.001
lr_min = 0.0001
batch = 2
patch = 8
total_steps = 4

[data]
n_images = 6
size = 16
scale = 2
val_images = 1
seed = 11

[run]
val_every = 2
"""


def test_criterion_10_distill_logs_are_bit_identical(tmp_path):
    cfg = parse_config(DET + f"out_dir = {tmp_path}\n")
    teacher = cli.cmd_train_teacher(cfg)
    logs = [(cli.cmd_distill(cfg, teacher) / "metrics.jsonl").read_bytes() for _ in range(2)]
    report(10, logs[0] == logs[1] and len(logs[0]) > 0,
           f"two runs, {len(logs[0].splitlines())} records each, identical={logs[0] == logs[1]}")
