import json

import pytest

from brima.cli import load_config, main
from brima.errors import ConfigError

TINY = """\
stream:
  n_tasks: 2
  train_per_task: 16
  eval_per_task: 8
  n_modalities: 2
  feature_dims: [3, 4]
  beta: 0.25
trainer:
  epochs: 2
  hidden: [8]
  bridge_hidden: [8]
  capacity: 6
  Q: 2
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "cfg.yaml").write_text(TINY)
    assert main(["generate", "--config", str(tmp_path / "cfg.yaml"), "--out", str(tmp_path / "stream.json"), "--seed", "3"]) == 0
    return tmp_path


def test_load_config_sections_and_flat_keys(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("beta: 0.1\nK: 3\nstream:\n  n_tasks: 4\n")
    s, t = load_config(p)
    assert (s.beta, s.n_tasks, t.K) == (0.1, 4, 3)
    p.write_text("not_a_setting: 1\n")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("stream:\n  K: 3\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_train_and_report(workdir, capsys):
    out = workdir / "run"
    args = ["train", "--data", str(workdir / "stream.json"), "--config", str(workdir / "cfg.yaml"), "--variant", "brima", "--seed", "1", "--out", str(out)]
    assert main(args) == 0
    for name in ("report.json", "report.csv", "buffer.jsonl", "checkpoint.npz"):
        assert (out / name).exists()
    first = (out / "report.json").read_text()
    assert main(args) == 0
    assert (out / "report.json").read_text() == first
    capsys.readouterr()
    assert main(["report", "--in", str(out), "--format", "csv"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "variant,seed,session,task,srcc,mse,rl2" and len(lines) == 1 + 3
    assert main(["report", "--in", str(out)]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["buffer"]["entries"] <= 6 and payload["variant"] == "brima"


def test_ablate(workdir, capsys):
    out = workdir / "abl"
    rc = main(["ablate", "--data", str(workdir / "stream.json"), "--config", str(workdir / "cfg.yaml"), "--variants", "brima,sequential", "--seeds", "0,1", "--out", str(out)])
    assert rc == 0
    table = json.loads((out / "ablation.json").read_text())
    assert [r["variant"] for r in table["rows"]] == ["brima", "sequential"]
    assert len({h for r in table["rows"] for h in r["mask_hashes"]}) == 1
    capsys.readouterr()
    assert main(["report", "--in", str(out), "--format", "csv"]) == 0
    assert capsys.readouterr().out.splitlines()[0].startswith("variant,n_seeds,final_srcc_mean")


def test_errors_exit_nonzero(workdir, capsys):
    assert main(["report", "--in", str(workdir)]) == 1
    assert "brima: error:" in capsys.readouterr().err
    assert main(["ablate", "--data", str(workdir / "stream.json"), "--variants", "bogus", "--seeds", "0", "--out", str(workdir / "x")]) == 1
    assert main(["train", "--data", str(workdir / "missing.json"), "--out", str(workdir / "y")]) == 1
