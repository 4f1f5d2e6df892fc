"""Desk-scale ablation: Vanilla vs conv representation vs KRNet with and without meta-learning.

Everything here runs on the synthetic texture corpus so a full sweep fits in
well under an hour on one CPU core. The teacher is trained once per sweep and
shared by every case and seed.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import ImagePair, bicubic_upscale, make_synthetic_corpus
from .krnet import make_conv_krs, make_krnets
from .meta import TrainConfig, train_loop, train_supervised
from .metrics import evaluate_pairs
from .models import NetConfig, Network, build_network
from .tensor import Tensor

log = logging.getLogger(__name__)

CASES = ("vanilla", "conv-kr", "krnet", "krnet+meta")
CASE_LABELS = {"vanilla": "Vanilla", "conv-kr": "conv-KR", "krnet": "KRNet", "krnet+meta": "KRNet+meta"}


@dataclass
class DeskSetup:
    """Knobs for one ablation sweep. Defaults are the desk-scale reference setting."""

    n_train: int = 200
    n_test: int = 24
    size: int = 64
    scale: int = 2
    teacher: tuple = (4, 4, 32)
    student: tuple = (2, 1, 8)
    n_taps: int = 2
    teacher_reduction: int = 4
    student_reduction: int = 2
    teacher_steps: int = 1500
    teacher_lr: float = 2e-3
    rounds: int = 600
    interleave: int = 1
    batch: int = 16
    patch: int = 16
    lr0: float = 2e-3
    lr_min: float = 1e-4
    phi_lr: float = 1e-3
    alpha: float = 1e-4
    lam: float = 1e-3
    T: int = 1
    c_o: int = 16
    k: int = 3
    data_seed: int = 1234
    teacher_seed: int = 7

    def teacher_config(self) -> NetConfig:
        g, b, f = self.teacher
        return NetConfig(g, b, f, scale=self.scale, n_taps=self.n_taps, reduction=self.teacher_reduction)

    def student_config(self) -> NetConfig:
        g, b, f = self.student
        return NetConfig(g, b, f, scale=self.scale, n_taps=self.n_taps, reduction=self.student_reduction)

    def train_config(self, case: str, seed: int) -> TrainConfig:
        mode = {"vanilla": "vanilla", "conv-kr": "meta", "krnet": "kr", "krnet+meta": "meta"}[case]
        return TrainConfig(
            mode=mode, rounds=self.rounds, interleave=self.interleave, T=self.T, alpha=self.alpha,
            lam=0.0 if case == "vanilla" else self.lam, lr0=self.lr0, lr_min=self.lr_min,
            phi_lr=self.phi_lr, batch=self.batch, patch=self.patch, seed=seed,
        )


@dataclass
class CaseResult:
    case: str
    seed: int
    psnr: float
    ssim: float
    seconds: float


@dataclass
class AblationReport:
    setup: DeskSetup
    teacher_psnr: float
    bicubic_psnr: float
    results: List[CaseResult] = field(default_factory=list)
    seconds: float = 0.0

    def mean(self, case: str) -> float:
        return float(np.mean([r.psnr for r in self.results if r.case == case]))

    def cases(self) -> List[str]:
        return [c for c in CASES if any(r.case == c for r in self.results)]

    def to_table(self) -> str:
        seeds = sorted({r.seed for r in self.results})
        head = f"{'case':<12}" + "".join(f"  seed{s:<5}" for s in seeds) + "  mean PSNR"
        lines = [head]
        for c in self.cases():
            per = {r.seed: r.psnr for r in self.results if r.case == c}
            lines.append(f"{CASE_LABELS[c]:<12}" + "".join(f"  {per[s]:9.4f}" for s in seeds) + f"  {self.mean(c):9.4f}")
        lines.append(f"(teacher {self.teacher_psnr:.4f} dB, bicubic {self.bicubic_psnr:.4f} dB, {self.seconds:.0f} s)")
        return "\n".join(lines)


def desk_data(setup: DeskSetup):
    rng = np.random.default_rng(setup.data_seed)
    train = make_synthetic_corpus(setup.n_train, setup.size, rng, setup.scale)
    test = make_synthetic_corpus(setup.n_test, setup.size, rng, setup.scale)
    return train, test


def _score(net: Network, pairs: Sequence[ImagePair]):
    rep = evaluate_pairs(net, pairs, net.config.scale)
    return rep.mean_psnr, rep.mean_ssim


def bicubic_psnr(pairs: Sequence[ImagePair], scale: int) -> float:
    """PSNR of plain bicubic upscaling, the floor any trained model should beat."""
    model = lambda x: Tensor(bicubic_upscale(x.data[0], scale)[None])  # noqa: E731
    return evaluate_pairs(model, pairs, scale).mean_psnr


def train_teacher(setup: DeskSetup, train: Sequence[ImagePair]) -> Network:
    net = build_network(setup.teacher_config(), setup.teacher_seed)
    return train_supervised(net, train, setup.teacher_steps, setup.batch, setup.patch,
                            setup.teacher_lr, setup.lr_min, seed=setup.teacher_seed)


def run_case(case: str, seed: int, setup: DeskSetup, teacher: Network, train, test, log_path=None) -> CaseResult:
    t0 = time.time()
    scfg, tcfg = setup.student_config(), setup.teacher_config()
    student = build_network(scfg, seed)
    if case == "conv-kr":
        reps = make_conv_krs(scfg.n_feats, tcfg.n_feats, setup.n_taps, setup.k, seed=seed + 101)
    else:
        reps = make_krnets(scfg.n_feats, tcfg.n_feats, setup.n_taps, setup.c_o, setup.k, seed=seed + 101)
    trained, _, _ = train_loop(teacher, student, reps, train, setup.train_config(case, seed), log_path=log_path)
    p, s = _score(trained, test)
    res = CaseResult(case, seed, p, s, time.time() - t0)
    log.info("%s seed %d: %.4f dB (%.0f s)", case, seed, p, res.seconds)
    return res


def run_ablation(
    setup: Optional[DeskSetup] = None,
    seeds: Sequence[int] = (0, 1, 2),
    cases: Sequence[str] = CASES,
    teacher: Optional[Network] = None,
) -> AblationReport:
    """Train the shared teacher (unless given) and every (case, seed) student; score on held-out images."""
    setup = setup or DeskSetup()
    for c in cases:
        if c not in CASES:
            raise ValueError(f"unknown ablation case {c!r}; known: {CASES}")
    t0 = time.time()
    train, test = desk_data(setup)
    if teacher is None:
        teacher = train_teacher(setup, train)
    report = AblationReport(setup, _score(teacher, test)[0], bicubic_psnr(test, setup.scale))
    log.info("teacher %.4f dB, bicubic %.4f dB", report.teacher_psnr, report.bicubic_psnr)
    for seed in seeds:
        for c in cases:
            report.results.append(run_case(c, seed, setup, teacher, train, test))
    report.seconds = time.time() - t0
    return report


def setup_from_dict(d: Dict) -> DeskSetup:
    return replace(DeskSetup(), **d)


def setup_to_dict(s: DeskSetup) -> Dict:
    return asdict(s)
