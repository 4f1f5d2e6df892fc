import json
import math

import numpy as np
import pytest

from metakd import gradcheck as gc
from metakd import meta
from metakd.data import make_synthetic_corpus
from metakd.krnet import make_krnets
from metakd.meta import (
    AdamState,
    ContractError,
    DivergenceError,
    NumericalError,
    TrainConfig,
    adam_step,
    cosine_lr,
    inner_step,
    meta_gradient,
    outer_gradient,
    train_loop,
    unroll,
)
from metakd.models import NetConfig, build_network, forward_with_taps
from metakd.tensor import Tensor


def quad_kd(theta, phi):
    d = theta["w"] - phi["p"]
    return (d * d).sum() * 0.5


def quad_org(theta):
    return (theta["w"] * theta["w"]).sum() * 0.5


def scalar(v):
    return Tensor(np.array([v]), requires_grad=True)


def test_inner_step_quadratic_one_and_two_steps():
    phi = {"p": scalar(0.0)}
    thetas = unroll({"w": scalar(1.0)}, lambda th: quad_kd(th, phi), 0.1, 2)
    assert thetas[1]["w"].item() == pytest.approx(0.9, abs=1e-15)
    assert thetas[2]["w"].item() == pytest.approx(0.81, abs=1e-15)


def test_zero_step_size_is_bit_exact_no_op():
    rng = np.random.default_rng(0)
    theta = {"w": Tensor(rng.normal(size=5), requires_grad=True)}
    phi = {"p": Tensor(rng.normal(size=5), requires_grad=True)}
    nxt = inner_step(theta, lambda th: quad_kd(th, phi), 0.0)
    assert nxt["w"].data.tobytes() == theta["w"].data.tobytes()


def test_inner_step_keeps_graph_to_phi_and_theta():
    phi, theta = {"p": scalar(0.0)}, {"w": scalar(1.0)}
    nxt = inner_step(theta, lambda th: quad_kd(th, phi), 0.1)
    assert nxt["w"].requires_grad and not nxt["w"].is_leaf
    assert theta["w"].item() == 1.0  # functional update


def test_scalar_chain_meta_gradient():
    g = meta_gradient({"w": scalar(1.0)}, {"p": scalar(0.0)}, quad_kd, quad_org, 0.1, T=1)
    assert g["p"].item() == pytest.approx(0.09, abs=1e-12)


@pytest.mark.parametrize("T", [1, 2, 3])
def test_scalar_chain_closed_form_for_longer_unrolls(T):
    # theta_T = phi + (1-a)^T (theta0 - phi), so dL/dphi = theta_T (1 - (1-a)^T)
    a, phi0, th0 = 0.1, 0.3, 1.0
    g = meta_gradient({"w": scalar(th0)}, {"p": scalar(phi0)}, quad_kd, quad_org, a, T)
    th_T = phi0 + (1 - a) ** T * (th0 - phi0)
    assert g["p"].item() == pytest.approx(th_T * (1 - (1 - a) ** T), abs=1e-12)


def test_phi_independent_inner_loss_gives_zero_meta_gradient():
    g = meta_gradient({"w": scalar(1.0)}, {"p": scalar(0.5)}, lambda th, ph: quad_org(th), quad_org, 0.1, 2)
    assert g["p"].item() == 0.0


def test_outer_gradient_requires_recorded_unroll():
    with pytest.raises(ContractError):
        outer_gradient({"w": scalar(1.0)}, quad_org, {"p": scalar(0.0)})


def test_first_order_mode_matches_full_at_t1_and_differs_at_t2():
    toy = gc.toy_pipeline(0)
    g_full = meta_gradient(toy.theta0, toy.phi(), toy.inner_loss, toy.outer_loss, toy.alpha, 1)
    g_fo = meta_gradient(toy.theta0, toy.phi(), toy.inner_loss, toy.outer_loss, toy.alpha, 1, first_order=True)
    for k in g_full:
        np.testing.assert_array_equal(g_full[k].data, g_fo[k].data)
    g_full = meta_gradient(toy.theta0, toy.phi(), toy.inner_loss, toy.outer_loss, toy.alpha, 2)
    g_fo = meta_gradient(toy.theta0, toy.phi(), toy.inner_loss, toy.outer_loss, toy.alpha, 2, first_order=True)
    diff = max(np.abs(g_full[k].data - g_fo[k].data).max() for k in g_full)
    assert diff > 1e-8


def test_meta_round_is_reproducible_from_saved_state():
    toy = gc.toy_pipeline(1)
    runs = []
    for _ in range(2):
        phi = toy.phi()
        theta = {k: Tensor(v.data, requires_grad=True) for k, v in toy.theta0.items()}
        thetas = unroll(theta, lambda th: toy.inner_loss(th, phi), toy.alpha, 2)
        g = outer_gradient(thetas[-1], toy.outer_loss, phi)
        runs.append(({k: v.data.tobytes() for k, v in thetas[-1].items()}, {k: v.data.tobytes() for k, v in g.items()}))
    assert runs[0] == runs[1]


def test_inner_loop_descends_for_small_alpha():
    rng = np.random.default_rng(0)
    wins, trials = 0, 20
    for t in range(trials):
        toy = gc.toy_pipeline(int(rng.integers(1 << 30)), alpha=1e-3)
        phi = toy.phi()
        thetas = unroll(toy.theta0, lambda th: toy.inner_loss(th, phi), toy.alpha, 2, create_graph=False)
        wins += toy.inner_loss(thetas[-1], phi).item() <= toy.inner_loss(thetas[0], phi).item()
    assert wins >= 0.95 * trials


def test_non_finite_inner_loss_names_the_tap():
    toy = gc.toy_pipeline(0)
    student = build_network(toy.student_cfg, 0)
    lr = Tensor(np.ones((1, 3, 8, 8)))
    _, taps = forward_with_taps(toy.student_cfg, student.params, lr)
    bad_taps = [Tensor(np.ones((1, 4, 8, 8))), Tensor(np.full((1, 4, 8, 8), np.nan))]
    with pytest.raises(NumericalError, match=r"tap\(s\) \[1\]"):
        meta.checked_inner_step(student, toy.krnets, student.params, toy.phi(), lr, bad_taps, 0.1)


def test_cosine_schedule_values():
    assert cosine_lr(0, total=1000) == 1e-4
    assert cosine_lr(1000, total=1000) == 5e-6
    assert cosine_lr(500, total=1000) == pytest.approx((1e-4 + 5e-6) / 2, rel=1e-14)
    lrs = [cosine_lr(s, total=100) for s in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_adam_first_step_moves_each_weight_by_lr_against_gradient_sign():
    p = {"w": Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)}
    g = {"w": Tensor(np.array([3.0, -0.01, 1e4]))}
    st = AdamState()
    out = adam_step(p, g, st, lr=1e-3)
    # m_hat = g, v_hat = g^2  =>  step = lr * g / (|g| + eps)
    expected = p["w"].data - 1e-3 * g["w"].data / (np.abs(g["w"].data) + 1e-8)
    np.testing.assert_allclose(out["w"].data, expected, rtol=1e-14)
    assert st.step == 1 and st.m["w"].shape == (3,)


def test_adam_second_step_matches_hand_recurrence():
    p = {"w": Tensor(np.array([0.0]), requires_grad=True)}
    st = AdamState()
    p = adam_step(p, {"w": Tensor([1.0])}, st, 0.1)
    p = adam_step(p, {"w": Tensor([-1.0])}, st, 0.1)
    m = 0.9 * 0.1 + 0.1 * -1.0
    v = 0.999 * 0.001 + 0.001 * 1.0
    step2 = 0.1 * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
    step1 = 0.1 * 1.0 / (1.0 + 1e-8)
    assert p["w"].item() == pytest.approx(-step1 - step2, rel=1e-12)


# ---------------------------------------------------------------------------
# training loop


@pytest.fixture(scope="module")
def tiny_setup():
    rng = np.random.default_rng(0)
    corpus = make_synthetic_corpus(6, 16, rng, scale=2)
    t_cfg = NetConfig(2, 1, 4, scale=2, n_taps=2, reduction=2)
    s_cfg = NetConfig(2, 1, 2, scale=2, n_taps=2, reduction=2)
    return corpus, build_network(t_cfg, 1), build_network(s_cfg, 2)


def _checksum(net):
    return sum(float(np.sum(v.data)) for v in net.params.values())


@pytest.mark.parametrize("mode", ["vanilla", "kr", "meta"])
def test_train_loop_is_deterministic_and_leaves_teacher_untouched(tiny_setup, tmp_path, mode):
    corpus, teacher, student = tiny_setup
    before = _checksum(teacher)
    cfg = TrainConfig(mode=mode, rounds=3, batch=2, patch=8, alpha=1e-3, lr0=1e-3, lr_min=1e-4, T=2)
    logs = []
    for i in range(2):
        krnets = make_krnets(2, 4, 2, c_o=4, seed=0)
        path = tmp_path / f"{mode}{i}.jsonl"
        train_loop(teacher, student, krnets, corpus, cfg, val_pairs=corpus[:1], log_path=path)
        logs.append(path.read_bytes())
    assert logs[0] == logs[1]
    recs = [json.loads(ln) for ln in logs[0].splitlines()]
    assert [r["round"] for r in recs] == [0, 1, 2]
    assert set(recs[0]) == {"round", "L_kd", "L_org", "lr", "val_psnr"}
    assert (recs[0]["L_kd"] is None) == (mode == "vanilla")
    assert _checksum(teacher) == before


def test_vanilla_mode_ignores_krnets(tiny_setup):
    corpus, teacher, student = tiny_setup
    cfg = TrainConfig(mode="vanilla", rounds=2, batch=2, patch=8, lr0=1e-3)
    a, _, _ = train_loop(teacher, student, make_krnets(2, 4, 2, c_o=4, seed=0), corpus, cfg)
    b, _, _ = train_loop(None, student, make_krnets(2, 4, 2, c_o=4, seed=9), corpus, cfg)
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()


def test_meta_mode_updates_krnets(tiny_setup):
    corpus, teacher, student = tiny_setup
    krnets = make_krnets(2, 4, 2, c_o=4, seed=0)
    cfg = TrainConfig(mode="meta", rounds=2, batch=2, patch=8, alpha=0.01, phi_lr=1e-2)
    _, new, _ = train_loop(teacher, student, krnets, corpus, cfg)
    assert not np.array_equal(new[0].params["gen1.w"].data, krnets[0].params["gen1.w"].data)


def test_divergence_guard_halts_with_checkpoint(tiny_setup, tmp_path):
    corpus, teacher, student = tiny_setup
    cfg = TrainConfig(mode="vanilla", rounds=50, batch=2, patch=8, lr0=50.0, lr_min=50.0, divergence_factor=2.0)
    with pytest.raises(DivergenceError):
        train_loop(teacher, student, [], corpus, cfg, ckpt_dir=tmp_path)
    assert (tmp_path / "diverged.ckpt").is_file()


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="bogus")
    with pytest.raises(ValueError):
        TrainConfig(mode="meta", alpha=0.0)
