"""
A small distillation ablation on synthetic textures
===================================================

Trains a teacher once, then trains the same student four ways: plain L1, a
meta-learned conv representation, KRNet trained jointly, and KRNet trained by
the meta-gradient. Pass ``--full`` for the three-seed desk configuration used
by the acceptance suite (about 45 minutes on one CPU); the default is a quick
single-seed pass with fewer rounds.
"""

import argparse
import logging

from metakd import experiments

ap = argparse.ArgumentParser()
ap.add_argument("--full", action="store_true")
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

setup = experiments.DeskSetup()
seeds = (0, 1, 2)
if not args.full:
    setup = experiments.setup_from_dict({**experiments.setup_to_dict(setup), "n_train": 48, "n_test": 8,
                                         "teacher_steps": 300, "rounds": 80})
    seeds = (0,)

train, test = experiments.desk_data(setup)
print(f"bicubic baseline on the test split: {experiments.bicubic_psnr(test, setup.scale):.3f} dB")
teacher = experiments.train_teacher(setup, train)
report = experiments.run_ablation(setup, seeds, teacher=teacher)
print(report.to_table())
