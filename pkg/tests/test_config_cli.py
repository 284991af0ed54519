import csv
import io

import pytest
import yaml

from cp2 import cli
from cp2.config import ConfigError, ExperimentConfig, apply_overrides, dump_config, load_config

TINY = """\
master_seed: 0
run_dir: {run}
data:
  corpus_size: 16
  train_size: 8
  val_size: 4
model:
  backbone_widths: [8, 8, 16, 16]
  head_width: 16
  proj_dim: 8
  fcn_rate: 1
trainer:
  max_steps: 2
  batch_size: 4
  bank_size: 8
evalseg:
  steps: 2
  batch_size: 4
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY.format(run=tmp_path / "run"))
    return p


# -- config ----------------------------------------------------------------------

def test_defaults_validate():
    cfg = ExperimentConfig().validate()
    assert cfg.losses.tau_ins == 0.2 and cfg.losses.tau_dense == 1.0 and cfg.losses.alpha == 0.2
    assert cfg.model.stride == 16 and cfg.model.proj_dim == 128
    assert cfg.masks.ratio_range == (0.5, 0.8)


def test_load_and_overrides(tiny):
    cfg = load_config(tiny, ["trainer.lr=0.7", "losses.mode=dense_only", "model.aspp_rates=[1, 2]"])
    assert cfg.trainer.lr == 0.7 and cfg.losses.mode == "dense_only"
    assert cfg.model.backbone_widths == (8, 8, 16, 16) and cfg.model.aspp_rates == (1, 2)


def test_unknown_key_names_key_and_line(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("master_seed: 1\ntrainer:\n  lr: 0.1\n  lrr: 0.2\n")
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    assert "trainer.lrr" in str(exc.value) and exc.value.line == 4


def test_bad_type_and_value(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("trainer:\n  batch_size: many\n")
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    assert exc.value.line == 2
    p.write_text("losses:\n  mode: everything\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_yaml_syntax_error_has_line(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("trainer:\n  lr: [0.1\n")
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    assert exc.value.line is not None


def test_echo_round_trip(tiny, tmp_path):
    cfg = load_config(tiny, ["masks.family=polygon"])
    p = tmp_path / "echo.yaml"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg


def test_override_syntax():
    assert apply_overrides({}, ["a.b.c=3"]) == {"a": {"b": {"c": 3}}}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])
    with pytest.raises(ConfigError):
        apply_overrides({"a": 1}, ["a.b=2"])


# -- cli --------------------------------------------------------------------------

def test_cli_config_error_exit_code(tiny, capsys):
    assert cli.main(["pretrain", str(tiny), "--set", "trainer.bogus=1"]) == 2
    assert "trainer.bogus" in capsys.readouterr().err


def test_cli_runtime_error_exit_code(tiny, tmp_path, capsys):
    assert cli.main(["eval", str(tiny), "--model", str(tmp_path / "missing.pt")]) == 1


def test_cli_preview_emits_n_pngs(tiny, tmp_path):
    out = tmp_path / "prev"
    assert cli.main(["preview-compose", str(tiny), "--out", str(out), "--n", "3",
                     "--set", "masks.family=rectangular"]) == 0
    assert len(list(out.glob("rectangular_*.png"))) == 3


def test_cli_pipeline_and_report(tiny, tmp_path, capsys):
    run_a, run_b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["pretrain", str(tiny), "--run-dir", str(run_a)]) == 0
    ck = run_a / "checkpoints" / "final.pt"
    assert ck.exists() and (run_a / "config.echo").exists() and (run_a / "metrics.csv").exists()
    assert cli.main(["finetune", str(tiny), "--run-dir", str(run_a), "--init", str(ck)]) == 0
    assert (run_a / "report.json").exists() and (run_a / "per_class_iou.png").exists()
    assert cli.main(["finetune", str(tiny), "--run-dir", str(run_b), "--init", "random"]) == 0
    assert cli.main(["eval", str(tiny), "--run-dir", str(tmp_path / "e"),
                     "--model", str(run_b / "checkpoints" / "finetune.pt")]) == 0
    assert cli.main(["quicktune", str(tiny), "--run-dir", str(tmp_path / "q"), "--init", str(ck),
                     "--set", "quicktune.epochs=1"]) == 0
    capsys.readouterr()
    assert cli.main(["report", str(run_a), str(run_b), "--out", str(tmp_path / "rep")]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["run"] for r in rows] == ["a", "b"]
    assert (tmp_path / "rep" / "report.csv").exists() and (tmp_path / "rep" / "report.png").exists()
    # echoed config replays to the same resolved config
    assert yaml.safe_load((run_a / "config.echo").read_text())["master_seed"] == 0


def test_cli_run_dir_lock(tiny, tmp_path):
    run = tmp_path / "locked"
    run.mkdir()
    (run / ".lock").write_text("123")
    assert cli.main(["pretrain", str(tiny), "--run-dir", str(run)]) == 1
    (run / ".lock").unlink()
    assert cli.main(["pretrain", str(tiny), "--run-dir", str(run)]) == 0
    assert not (run / ".lock").exists()


def test_cli_eval_rejects_pretrain_checkpoint(tiny, tmp_path):
    cli.main(["pretrain", str(tiny), "--run-dir", str(tmp_path / "p")])
    assert cli.main(["eval", str(tiny), "--model", str(tmp_path / "p" / "checkpoints" / "final.pt")]) == 2
