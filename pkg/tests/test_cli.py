import subprocess
import sys

import numpy as np
import pytest

from dcil import checkpoint as ck
from dcil.cli import main
from dcil.config import load_config
from dcil.data import TEST, load_mnist
from dcil.metrics import evaluate, read_csv, stability_std
from dcil.model import P

from test_data import fake_mnist

CONFIG = """\
[train]
trainer=dcil
epochs=2
batch_size=16
seed=0
arch=mlp
[optimizer]
lr=0.05
[sparsity]
target_sparsity=0.5
ramp_epochs=1
[mask]
frequency=2
[data]
dataset=mnist
data_dir={data}
[output]
out_dir={out}
"""


@pytest.fixture
def setup(tmp_path):
    fake_mnist(tmp_path / "mnist", n_train=48, n_test=20)
    cfg = tmp_path / "run.ini"
    cfg.write_text(CONFIG.format(data=tmp_path / "mnist", out=tmp_path / "out"))
    return tmp_path, cfg


def test_train_end_to_end(setup, capsys):
    tmp, cfg = setup
    assert main(["train", str(cfg)]) == 0
    out = tmp / "out"
    rows = read_csv(out / "run.csv")
    assert [r["epoch"] for r in rows] == [-1, 0, 1]
    assert (out / "final.npz").exists() and (out / "run.svg").exists()
    echoed = load_config(out / "config.txt")
    assert echoed == load_config(cfg)
    stab = dict(line.split("=") for line in (out / "stability.txt").read_text().splitlines())
    assert float(stab["std"]) == stability_std([rows[1]["acc_P"], rows[2]["acc_P"]])
    assert "std=" in capsys.readouterr().out


def test_trainer_override_and_set(setup):
    tmp, cfg = setup
    assert main(["train", str(cfg), "--trainer", "dpf", "--set", "kd.kd_weight=0", "--epochs", "1"]) == 0
    echoed = load_config(tmp / "out" / "config.txt")
    assert (echoed.trainer, echoed.kd_weight, echoed.epochs) == ("dpf", 0.0, 1)
    rows = read_csv(tmp / "out" / "run.csv")
    assert all(np.isnan(r["acc_S"]) for r in rows)


def test_reproducible_run_csv(setup):
    tmp, cfg = setup
    assert main(["train", str(cfg), "--out-dir", str(tmp / "a")]) == 0
    assert main(["train", str(cfg), "--out-dir", str(tmp / "b")]) == 0
    assert (tmp / "a" / "run.csv").read_bytes() == (tmp / "b" / "run.csv").read_bytes()


def test_kd_column_zero_when_lambda_zero(setup):
    tmp, cfg = setup
    assert main(["train", str(cfg), "--set", "kd_weight=0"]) == 0
    assert all(r["kd_loss"] == 0.0 for r in read_csv(tmp / "out" / "run.csv"))


@pytest.mark.parametrize("argv_tail,code", [
    (["--set", "train.epochz=3"], 2),
    (["--set", "nonsense"], 2),
    (["--set", "kd.temperature=0"], 2),
    (["--set", "data.data_dir=/nonexistent/mnist"], 3),
    (["--set", "optimizer.lr=1e200"], 4),
])
@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(setup, argv_tail, code, capsys):
    _, cfg = setup
    assert main(["train", str(cfg)] + argv_tail) == code
    assert capsys.readouterr().err


def test_missing_config(tmp_path):
    assert main(["train", str(tmp_path / "none.ini")]) == 3


def test_argparse_errors_exit_2(setup):
    _, cfg = setup
    with pytest.raises(SystemExit) as e:
        main(["train", str(cfg), "--trainer", "sgd"])
    assert e.value.code == 2


def test_compare_single_trainer(setup):
    tmp, cfg = setup
    assert main(["compare", str(cfg), "--trainers", "dense", "--epochs", "1"]) == 0
    rows = read_csv(tmp / "out" / "compare.csv")
    assert len(rows) == 1 and rows[0]["trainer"] == "dense" and rows[0]["last_std"] == 0.0


def test_compare_two_trainers_three_seeds(setup):
    tmp, cfg = setup
    assert main(["compare", str(cfg), "--trainers", "dcil,dpf", "--seeds", "0,1,2"]) == 0
    out = tmp / "out"
    rows = read_csv(out / "compare.csv")
    assert [r["trainer"] for r in rows] == ["dcil", "dpf"]
    assert (out / "config.txt").exists()
    text = (out / "compare.txt").read_text().splitlines()
    assert text[0].startswith("trainer") and len(text) == 3
    for row in rows:
        # oracle: aggregate straight from each per-seed run.csv
        lasts = [read_csv(out / f"{row['trainer']}_seed{s}" / "run.csv")[-1]["acc_P"] for s in range(3)]
        mean = sum(lasts) / 3
        std = (sum((v - mean) ** 2 for v in lasts) / 3) ** 0.5
        assert row["last_mean"] == pytest.approx(mean, abs=1e-12)
        assert row["last_std"] == pytest.approx(std, abs=1e-12)


def test_compare_bad_trainer(setup):
    _, cfg = setup
    assert main(["compare", str(cfg), "--trainers", "dcil,foo"]) == 2


def test_sawtooth_from_config(setup):
    tmp, cfg = setup
    assert main(["sawtooth", str(cfg), "--epoch", "1", "--set", "trainer=dpf"]) == 0
    rows = read_csv(tmp / "out" / "sawtooth.csv")
    assert (tmp / "out" / "sawtooth.svg").exists()
    assert [r["iter"] for r in rows] == [0, 1, 2, 3]
    assert [r["global_iter"] for r in rows if r["refreshed"]] == [4, 6]


def test_sawtooth_from_checkpoint(setup):
    tmp, cfg = setup
    assert main(["train", str(cfg), "--epochs", "3", "--set", "output.checkpoint_every=1",
                 "--out-dir", str(tmp / "run")]) == 0
    ckpt = tmp / "run" / "ckpt_epoch000.npz"
    assert main(["sawtooth", str(ckpt), "--epoch", "2", "--out-dir", str(tmp / "saw")]) == 0
    rows = read_csv(tmp / "saw" / "sawtooth.csv")
    assert rows[0]["global_iter"] == 6 and len(rows) == 4
    # resuming and probing replays the original trajectory exactly
    full = read_csv(tmp / "run" / "run.csv")
    _, _, meta = ck.load_checkpoint(tmp / "saw" / "final.npz")
    assert meta["rows"][-1]["acc_P"] == full[-1]["acc_P"]


def test_sawtooth_missing_checkpoint(tmp_path):
    assert main(["sawtooth", str(tmp_path / "none.npz"), "--epoch", "1"]) == 3


def test_export_matches_logged_accuracy(setup):
    tmp, cfg = setup
    assert main(["train", str(cfg)]) == 0
    assert main(["export", str(tmp / "out" / "final.npz"), str(tmp / "p.npz")]) == 0
    net, meta = ck.load_export(tmp / "p.npz")
    test = load_mnist(tmp / "mnist", TEST, dtype=np.float64)
    logged = read_csv(tmp / "out" / "run.csv")[-1]["acc_P"]
    assert evaluate(net, P, test) == logged == meta["acc_P"]
    audit = dict(line.split("=", 1) for line in (tmp / "p_audit.txt").read_text().splitlines())
    assert float(audit["global_sparsity"]) == int(audit["zeros"]) / int(audit["total"])
    assert float(audit["global_sparsity"]) > 0.45


def test_export_dense_zero_sparsity(setup):
    tmp, cfg = setup
    assert main(["train", str(cfg), "--trainer", "dense", "--epochs", "1"]) == 0
    assert main(["export", str(tmp / "out" / "final.npz"), str(tmp / "d.npz")]) == 0
    assert "global_sparsity=0.0" in (tmp / "d_audit.txt").read_text()


def test_export_corrupt(tmp_path):
    (tmp_path / "c.npz").write_bytes(b"garbage")
    assert main(["export", str(tmp_path / "c.npz"), str(tmp_path / "o.npz")]) == 3


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "dcil", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "sawtooth" in r.stdout


def test_shipped_desk_config_matches_acceptance_settings():
    from pathlib import Path
    from test_acceptance import DESK
    cfg = load_config(Path(__file__).parent.parent / "configs" / "desk_mnist.ini")
    assert all(getattr(cfg, k) == v for k, v in DESK.items())
    assert (cfg.train_subset, cfg.probe_size) == (10000, 1000)
