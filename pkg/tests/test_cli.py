import json

import numpy as np
import pytest

from metakd import cli
from metakd.config import RunConfig, defaults_summary, load_config, parse_config
from metakd.data import make_synthetic_corpus, save_image
from metakd.models import ConfigError, load_checkpoint

TINY = """
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
rounds = 3
T = 1
alpha = 0.001
phi_lr = 0.001

[optim]
lr0 = 0.001
lr_min = 0.0001
batch = 2
patch = 8
total_steps = 3

[data]
n_images = 4
size = 16
scale = 2
val_images = 1

[run]
val_every = 2
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY + f"out_dir = {tmp_path / 'runs'}\n")
    return path


def test_defaults_echo():
    assert defaults_summary() == "batch=16 patch=48 lr0=0.0001 lr_min=5e-06 betas=(0.9,0.999) c_o=64 k=3 N=4"
    cfg = RunConfig()
    assert (cfg.teacher.n_groups, cfg.teacher.n_blocks, cfg.teacher.n_feats) == (10, 20, 64)
    assert cfg.meta.T == 1 and cfg.meta.alpha == 1e-4 and cfg.meta.lam == 1.0


def test_config_round_trip_is_identity():
    cfg = parse_config(TINY)
    assert parse_config(cfg.to_ini()) == cfg
    assert parse_config(RunConfig().to_ini()) == RunConfig()
    assert parse_config(cfg.to_ini()).to_ini() == cfg.to_ini()


def test_unknown_key_error_names_key_and_line():
    text = "[meta]\nT = 2\n\nbogus_key = 1\n"
    with pytest.raises(ConfigError, match=r"line 4, key meta\.bogus_key: unknown key"):
        parse_config(text)


def test_bad_value_error_names_key_and_line():
    with pytest.raises(ConfigError, match=r"line 3, key optim\.batch: cannot read 'sixteen' as int"):
        parse_config("[optim]\nlr0 = 0.1\nbatch = sixteen\n")


def test_unknown_section_and_syntax_errors():
    with pytest.raises(ConfigError, match=r"unknown section \[teachr\]"):
        parse_config("[teachr]\nn_feats = 3\n")
    with pytest.raises(ConfigError):
        parse_config("n_feats = 3\n")


def test_validation_catches_cross_field_errors():
    with pytest.raises(ConfigError, match="n_taps"):
        parse_config("[teacher]\nn_taps = 2\n").validate()
    with pytest.raises(ConfigError, match="perfect square"):
        parse_config("[krnet]\nc_o = 10\n").validate()
    with pytest.raises(ConfigError, match="patch"):
        parse_config("[optim]\npatch = 50\n").validate()
    RunConfig().validate()


def test_missing_config_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "none.ini")


def test_overrides_do_not_mutate_original():
    cfg = RunConfig()
    new = cfg.with_overrides(optim__batch=4, data__seed=None)
    assert new.optim.batch == 4 and cfg.optim.batch == 16
    assert new.config_hash() != cfg.config_hash()


def _run_dirs(root, prefix):
    return sorted(p for p in root.iterdir() if p.name.startswith(prefix))


def test_train_distill_eval_end_to_end(tiny_cfg, tmp_path, capsys):
    assert cli.main(["train-teacher", str(tiny_cfg)]) == 0
    teacher = capsys.readouterr().out.strip()
    assert teacher.endswith("teacher.ckpt")
    runs = tmp_path / "runs"
    cfg = load_config(tiny_cfg)
    assert _run_dirs(runs, "teacher-")[0].name.startswith(f"teacher-{cfg.config_hash()}-")

    assert cli.main(["distill", str(tiny_cfg), "--teacher", teacher]) == 0
    run = _run_dirs(runs, "distill-")[0]
    recs = [json.loads(ln) for ln in (run / "metrics.jsonl").read_text().splitlines()]
    assert [r["round"] for r in recs] == [0, 1, 2]
    assert recs[1]["val_psnr"] is not None and recs[0]["val_psnr"] is None
    manifest, spaces = load_checkpoint(run / "student.ckpt")
    assert manifest["krnet"][0]["kind"] == "krnet" and "kr1.gen2.w" in spaces["krnet"]
    assert (run / "config.ini").read_text() == cfg.to_ini()
    capsys.readouterr()

    folder = tmp_path / "bench"
    folder.mkdir()
    for i, pair in enumerate(make_synthetic_corpus(2, 24, np.random.default_rng(1), scale=2)):
        save_image(folder / f"b{i}.png", pair.hr)
    out_jsonl = tmp_path / "report.jsonl"
    assert cli.main(["eval", str(run / "student.ckpt"), str(folder), "--jsonl", str(out_jsonl)]) == 0
    table = capsys.readouterr().out
    assert "b0" in table and "mean" in table
    assert json.loads(out_jsonl.read_text().splitlines()[-1])["id"] == "__mean__"


def test_distill_is_reproducible_and_flags_override(tiny_cfg, tmp_path):
    teacher_dir = cli.cmd_train_teacher(load_config(tiny_cfg))
    logs = []
    for _ in range(2):
        run = cli.cmd_distill(load_config(tiny_cfg).with_overrides(data__seed=3), teacher_dir)
        logs.append((run / "metrics.jsonl").read_bytes())
    assert logs[0] == logs[1]
    assert cli.main(["distill", str(tiny_cfg), "--teacher", str(teacher_dir), "--seed", "4", "--batch", "3"]) == 0
    newest = max((tmp_path / "runs").glob("distill-*"), key=lambda p: p.stat().st_mtime)
    cfg = load_config(newest / "config.ini")
    assert cfg.data.seed == 4 and cfg.optim.batch == 3


def test_exit_codes(tiny_cfg, tmp_path, capsys):
    assert cli.main(["distill", str(tiny_cfg), "--teacher", str(tmp_path / "missing.ckpt")]) == cli.EXIT_IO
    assert "missing.ckpt" in capsys.readouterr().err
    bad = tmp_path / "bad.ini"
    bad.write_text("[meta]\nwhat = 1\n")
    assert cli.main(["train-teacher", str(bad)]) == cli.EXIT_INVALID
    assert "line 2" in capsys.readouterr().err
    assert cli.main(["eval", str(tmp_path / "nothing.ckpt")]) == cli.EXIT_IO
    diverge = tmp_path / "div.ini"
    diverge.write_text(TINY.replace("lr0 = 0.001", "lr0 = 1e6").replace("lr_min = 0.0001", "lr_min = 1e6")
                       .replace("rounds = 3", "rounds = 40").replace("[run]", f"[run]\nout_dir = {tmp_path}")
                       + "\n")
    teacher = cli.cmd_train_teacher(load_config(tiny_cfg))
    code = cli.main(["distill", str(diverge), "--teacher", str(teacher)])
    assert code == cli.EXIT_NUMERIC


def test_check_grad_command_reports_pass():
    lines = []
    assert cli.cmd_check_grad(instances=1, out=lines.append)
    assert lines[-1] == "PASS rel_err<1e-4"
    assert any(ln.startswith("meta-gradient T=2") for ln in lines)


def test_ablate_command_small(tiny_cfg, tmp_path, capsys):
    code = cli.main(["ablate", str(tiny_cfg), "--seeds", "0"])
    assert code == 0
    out = capsys.readouterr().out
    rows = [ln.split()[0] for ln in out.splitlines()[1:5]]
    assert rows == ["Vanilla", "conv-KR", "KRNet", "KRNet+meta"]
    run = _run_dirs(tmp_path / "runs", "ablate-case-")[0]
    assert len((run / "ablation.jsonl").read_text().splitlines()) == 4


def test_ablate_c_o_axis_skips_infeasible_grids(tiny_cfg, capsys):
    assert cli.main(["ablate", str(tiny_cfg), "--axis", "c_o", "--seeds", "0"]) == 0
    out = capsys.readouterr().out
    assert "skipped" in out  # 8x8 LR patches cannot host 64 or 144 subpatches of 3x3
