"""``metakd`` command line: train-teacher, distill, eval, check-grad, ablate.

Exit codes: 0 success, 1 validation failure, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import experiments, gradcheck
from .config import RunConfig, defaults_summary, load_config
from .data import load_folder, make_synthetic_corpus
from .krnet import flatten_params, make_conv_krs, make_krnets
from .meta import NumericalError, TrainConfig, train_loop, train_supervised
from .metrics import evaluate_benchmark, evaluate_pairs
from .models import ConfigError, build_network, load_network, save_network
from .tensor import DimensionError

log = logging.getLogger("metakd")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# helpers


def run_dir(cfg: RunConfig, command: str) -> Path:
    """Fresh ``<out_dir>/<command>-<config hash>-<timestamp>`` directory."""
    base = Path(cfg.run.out_dir) / f"{command}-{cfg.config_hash()}-{time.strftime('%Y%m%d-%H%M%S')}"
    path, n = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}.{n}")
        n += 1
    path.mkdir(parents=True)
    (path / "config.ini").write_text(cfg.to_ini())
    return path


def training_corpus(cfg: RunConfig):
    d = cfg.data
    if d.corpus == "synthetic":
        rng = np.random.default_rng(d.seed)
        train = make_synthetic_corpus(d.n_images, d.size, rng, d.scale)
        val = make_synthetic_corpus(d.val_images, d.size, rng, d.scale) if d.val_images else []
        return train, val
    skipped: list = []
    pairs = load_folder(d.corpus, d.scale, manifest=d.manifest or None, skipped=skipped)
    if not pairs:
        raise FileNotFoundError(f"no readable images in {d.corpus}")
    n_val = min(d.val_images, len(pairs) - 1)
    return pairs[n_val:], pairs[:n_val]


def train_config(cfg: RunConfig) -> TrainConfig:
    m, o = cfg.meta, cfg.optim
    return TrainConfig(
        mode=m.mode, rounds=m.rounds, interleave=m.interleave, T=m.T, alpha=m.alpha,
        lam=0.0 if m.mode == "vanilla" else m.lam, lr0=o.lr0, lr_min=o.lr_min, phi_lr=m.phi_lr,
        betas=(o.beta1, o.beta2), batch=o.batch, patch=o.patch, seed=cfg.data.seed, augment=cfg.data.augment,
        first_order=m.first_order, val_every=cfg.run.val_every, ckpt_every=cfg.run.ckpt_every,
    )


def desk_setup(cfg: RunConfig) -> experiments.DeskSetup:
    t, s, m, o, d = cfg.teacher, cfg.student, cfg.meta, cfg.optim, cfg.data
    return experiments.DeskSetup(
        n_train=d.n_images, n_test=d.val_images or 24, size=d.size, scale=d.scale,
        teacher=(t.n_groups, t.n_blocks, t.n_feats), student=(s.n_groups, s.n_blocks, s.n_feats),
        n_taps=s.n_taps, teacher_reduction=t.reduction, student_reduction=s.reduction,
        teacher_steps=o.total_steps, teacher_lr=o.lr0, rounds=m.rounds, interleave=m.interleave,
        batch=o.batch, patch=o.patch, lr0=o.lr0, lr_min=o.lr_min, phi_lr=m.phi_lr, alpha=m.alpha,
        lam=m.lam, T=m.T, c_o=cfg.krnet.c_o, k=cfg.krnet.k, data_seed=d.seed,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_train_teacher(cfg: RunConfig) -> Path:
    cfg.validate()
    out = run_dir(cfg, "teacher")
    train, _ = training_corpus(cfg)
    net = build_network(cfg.net_config("teacher"), cfg.data.seed)
    o = cfg.optim
    net = train_supervised(net, train, o.total_steps, o.batch, o.patch, o.lr0, o.lr_min,
                           seed=cfg.data.seed, augment=cfg.data.augment, log_every=max(1, o.total_steps // 20))
    ckpt = out / "teacher.ckpt"
    save_network(ckpt, net)
    return ckpt


def cmd_distill(cfg: RunConfig, teacher_ckpt) -> Path:
    """Distil the checkpointed teacher into a fresh student; returns the run directory."""
    cfg.validate()
    teacher = load_network(teacher_ckpt)
    scfg = cfg.net_config("student")
    if teacher.config.n_taps != scfg.n_taps or teacher.config.scale != scfg.scale:
        raise ConfigError(f"teacher checkpoint ({teacher.config.n_taps} taps, x{teacher.config.scale}) does not "
                          f"match student config ({scfg.n_taps} taps, x{scfg.scale})")
    out = run_dir(cfg, "distill")
    train, val = training_corpus(cfg)
    student = build_network(scfg, cfg.data.seed)
    c_t, k = teacher.config.n_feats, cfg.krnet
    if k.kind == "conv":
        reps = make_conv_krs(scfg.n_feats, c_t, scfg.n_taps, k.k, seed=cfg.data.seed + 1)
    else:
        reps = make_krnets(scfg.n_feats, c_t, scfg.n_taps, k.c_o, k.k, seed=cfg.data.seed + 1, c_mid=k.c_mid or None)
    ckpt_dir = out / "ckpt" if cfg.run.ckpt_every else None
    trained, reps, records = train_loop(teacher, student, reps, train, train_config(cfg), val,
                                        log_path=out / "metrics.jsonl", ckpt_dir=ckpt_dir)
    save_network(out / "student.ckpt", trained, extra={"krnet": [r.describe() for r in reps]},
                 krnet_params=flatten_params(reps))
    return out


def cmd_eval(ckpt, folder: Optional[str], scale: Optional[int] = None, manifest=None, tile=None,
             synthetic: int = 0, seed: int = 0, size: int = 64):
    net = load_network(ckpt)
    scale = scale or net.config.scale
    if scale != net.config.scale:
        raise ConfigError(f"checkpoint is x{net.config.scale}, asked to evaluate at x{scale}")
    if folder is None:
        pairs = make_synthetic_corpus(synthetic or 24, size, np.random.default_rng(seed), scale)
        return evaluate_pairs(net, pairs, scale, tile=tile)
    if not Path(folder).is_dir():
        raise FileNotFoundError(f"benchmark folder not found: {folder}")
    return evaluate_benchmark(net, folder, scale, manifest=manifest, tile=tile)


def cmd_check_grad(seed: int = 0, instances: int = 20, out=print) -> bool:
    """Full finite-difference suite: every op, second order through the KD path, and the meta-gradient."""
    rng = np.random.default_rng(seed)
    ok = True
    worst = 0.0
    for name in gradcheck.OPS:
        err = max(gradcheck.check_first_order(name, rng) for _ in range(instances))
        ok &= err < 1e-5
        out(f"op {name:<26} max rel_err {err:.2e}")
    for name in gradcheck.KD_OPS:
        err = gradcheck.check_second_order(name, rng)
        ok &= err < 1e-4
        out(f"2nd-order {name:<19} rel_err {err:.2e}")
    for T in (1, 2):
        err = gradcheck.meta_gradient_check(gradcheck.toy_pipeline(seed), T)[0]
        worst = max(worst, err)
        out(f"meta-gradient T={T}            rel_err {err:.2e}")
    ok &= worst < 1e-4
    out("PASS rel_err<1e-4" if ok else f"FAIL worst meta rel_err {worst:.2e}")
    return ok


def cmd_ablate(cfg: RunConfig, axis: str = "case", seeds=(0, 1, 2), teacher_ckpt=None):
    cfg.validate()
    setup = desk_setup(cfg)
    teacher = load_network(teacher_ckpt) if teacher_ckpt else None
    out = run_dir(cfg, f"ablate-{axis}")
    if axis == "case":
        report = experiments.run_ablation(setup, seeds, teacher=teacher)
        table = report.to_table()
        rows = [vars(r) for r in report.results]
    elif axis == "c_o":
        rows, lines = [], [f"{'c_o':>5}  mean PSNR"]
        train, test = experiments.desk_data(setup)
        teacher = teacher or experiments.train_teacher(setup, train)
        for c_o in (4, 16, 64, 144):
            side = int(round(c_o**0.5))
            if setup.patch % side or setup.patch // side < setup.k:
                lines.append(f"{c_o:>5}  skipped ({setup.patch}x{setup.patch} patch has no {side}x{side} grid "
                             f"of {setup.k}x{setup.k} subpatches)")
                continue
            sub = experiments.setup_from_dict({**experiments.setup_to_dict(setup), "c_o": c_o})
            res = [experiments.run_case("krnet+meta", s, sub, teacher, train, test) for s in seeds]
            rows += [dict(vars(r), c_o=c_o) for r in res]
            lines.append(f"{c_o:>5}  {np.mean([r.psnr for r in res]):9.4f}")
        table = "\n".join(lines)
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}; use 'case' or 'c_o'")
    (out / "ablation.txt").write_text(table + "\n")
    with open(out / "ablation.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    return table, out


# ---------------------------------------------------------------------------
# argument parsing


def _data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data overrides")
    g.add_argument("--scale", type=int)
    g.add_argument("--patch", type=int, help="LR patch side")
    g.add_argument("--batch", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--augment", action="store_true", default=None, help="random flips and 90-degree rotations")
    g.add_argument("--out-dir", help="parent directory for run folders")


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.with_overrides(
        data__scale=args.scale, optim__patch=args.patch, optim__batch=args.batch, data__seed=args.seed,
        data__augment=args.augment, run__out_dir=args.out_dir,
    )


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="metakd", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train a teacher network with plain L1")
    p.add_argument("config", nargs="?")
    _data_flags(p)

    p = sub.add_parser("distill", help="distil a teacher checkpoint into a student")
    p.add_argument("config", nargs="?")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    _data_flags(p)

    p = sub.add_parser("eval", help="Y-channel PSNR/SSIM of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("folder", nargs="?", help="folder of HR PNGs (omit for a synthetic test set)")
    p.add_argument("--scale", type=int)
    p.add_argument("--manifest")
    p.add_argument("--tile", type=int)
    p.add_argument("--synthetic", type=int, default=24, help="synthetic image count when no folder is given")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jsonl", help="also write line-delimited records here")

    p = sub.add_parser("check-grad", help="finite-difference gradient and meta-gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)

    p = sub.add_parser("ablate", help="desk-scale ablation table")
    p.add_argument("config", nargs="?")
    p.add_argument("--axis", choices=("case", "c_o"), default="case")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--teacher", help="reuse a teacher checkpoint instead of training one")
    _data_flags(p)

    p = sub.add_parser("defaults", help="print the default configuration")
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "defaults":
            print(defaults_summary())
            print(RunConfig().to_ini(), end="")
        elif args.command == "train-teacher":
            print(cmd_train_teacher(_config_from_args(args)))
        elif args.command == "distill":
            teacher = Path(args.teacher)
            if not teacher.is_file():
                raise FileNotFoundError(f"teacher checkpoint not found: {teacher}")
            print(cmd_distill(_config_from_args(args), teacher))
        elif args.command == "eval":
            report = cmd_eval(args.checkpoint, args.folder, args.scale, args.manifest, args.tile,
                              args.synthetic, args.seed)
            print(report.to_table())
            if args.jsonl:
                Path(args.jsonl).write_text(report.to_jsonl())
        elif args.command == "check-grad":
            if not cmd_check_grad(args.seed, args.instances):
                return EXIT_INVALID
        elif args.command == "ablate":
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            table, out = cmd_ablate(_config_from_args(args), args.axis, seeds, args.teacher)
            print(table)
            print(out)
    except (ConfigError, DimensionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
