import csv
import filecmp

import pytest

from s2kd import cli
from s2kd.formats import load_checkpoint

CONFIG = """\
data.height = 4
data.width = 4
data.t_in = 2
data.t_out = 2
data.n_train = 16
data.n_val = 4
data.n_test = 4
data.e_max = 1
model.patch = 2
model.d_model = 8
model.d_student = 4
model.n_align = 1
model.n_enc = 1
model.n_heads = 2
model.student_heads = 1
train.max_epochs = 2
train.batch_size = 8
"""


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(CONFIG)
    assert cli.main(["gen", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert cli.main(["train-teacher", "--config", str(cfg), "--data", str(root / "data"),
                     "--out", str(root / "run")]) == 0
    return root, cfg


def test_gen_is_byte_deterministic(workspace, tmp_path, capsys):
    root, cfg = workspace
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    assert "train=16" in capsys.readouterr().out
    names = [p.name for p in (root / "data").iterdir()]
    _, mismatch, errors = filecmp.cmpfiles(root / "data", tmp_path / "again", names, shallow=False)
    assert mismatch == [] and errors == []


def test_gen_seed_override_changes_data(workspace, tmp_path):
    _, cfg = workspace
    cli.main(["gen", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "s1")])
    assert not filecmp.cmp(workspace[0] / "data" / "frames_train.s2kd", tmp_path / "s1" / "frames_train.s2kd",
                           shallow=False)


def test_indivisible_config_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("data.height = 15\nmodel.patch = 2\n")
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
    assert "divisible" in capsys.readouterr().err


def test_unknown_key_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("\n\ntrain.nope = 1\n")
    assert cli.main(["gen", "--config", str(cfg)]) == 2
    assert "line 3" in capsys.readouterr().err


def test_teacher_outputs(workspace):
    root, _ = workspace
    run = root / "run"
    assert set(load_checkpoint(run / "teacher.s2kc")) and all(
        k.startswith("teacher.") for k in load_checkpoint(run / "teacher.s2kc"))
    log = read_csv(run / "teacher_log.csv")
    assert log[0] == ["epoch", "train_loss", "val_loss", "lr", "pred", "semantic", "spectral"]
    assert len(log) == 3
    assert read_csv(run / "teacher_timing.csv")[0] == ["epoch", "seconds"]
    assert read_csv(run / "teacher_metrics.csv")[0] == ["model", "method", "params", "mse", "mae", "ssim"]


def test_baseline_student_needs_no_teacher_and_is_deterministic(workspace, tmp_path):
    root, cfg = workspace
    for name in ("a", "b"):
        assert cli.main(["train-student", "--config", str(cfg), "--data", str(root / "data"),
                         "--mode", "baseline", "--out", str(tmp_path / name)]) == 0
    for f in ("student_baseline_log.csv", "student_baseline_metrics.csv", "student_baseline.s2kc"):
        assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)


def test_distilled_student_needs_teacher(workspace, tmp_path, capsys):
    root, cfg = workspace
    code = cli.main(["train-student", "--config", str(cfg), "--data", str(root / "data"),
                     "--mode", "full", "--out", str(tmp_path)])
    assert code == 2 and "--teacher" in capsys.readouterr().err


def test_teacher_checkpoint_bytes_unchanged_by_student(workspace, tmp_path):
    root, cfg = workspace
    ckpt = root / "run" / "teacher.s2kc"
    before = ckpt.read_bytes()
    assert cli.main(["train-student", "--config", str(cfg), "--data", str(root / "data"), "--teacher",
                     str(ckpt), "--mode", "full", "--out", str(tmp_path)]) == 0
    assert ckpt.read_bytes() == before
    log = read_csv(tmp_path / "student_full_log.csv")
    assert float(log[1][5]) > 0 and float(log[1][6]) > 0


def test_corrupt_teacher_is_rejected(workspace, tmp_path, capsys):
    root, cfg = workspace
    bad = bytearray((root / "run" / "teacher.s2kc").read_bytes())
    bad[50] ^= 0xFF
    (tmp_path / "bad.s2kc").write_bytes(bytes(bad))
    code = cli.main(["train-student", "--config", str(cfg), "--data", str(root / "data"), "--teacher",
                     str(tmp_path / "bad.s2kc"), "--mode", "full", "--out", str(tmp_path)])
    assert code == 1 and "checksum" in capsys.readouterr().err


def test_eval_teacher_and_student(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "t.csv"
    assert cli.main(["eval", "--config", str(cfg), "--data", str(root / "data"), "--checkpoint",
                     str(root / "run" / "teacher.s2kc"), "--out", str(out)]) == 0
    row = read_csv(out)[1]
    assert row[:2] == ["teacher", "teacher"]
    assert float(row[3]) == pytest.approx(float(read_csv(root / "run" / "teacher_metrics.csv")[1][3]))
    cli.main(["train-student", "--config", str(cfg), "--data", str(root / "data"), "--mode", "baseline",
              "--out", str(tmp_path)])
    assert cli.main(["eval", "--config", str(cfg), "--data", str(root / "data"), "--checkpoint",
                     str(tmp_path / "student_baseline.s2kc"), "--out", str(tmp_path / "s.csv")]) == 0
    assert read_csv(tmp_path / "s.csv")[1][3] == read_csv(tmp_path / "student_baseline_metrics.csv")[1][3]


def test_ablate_writes_four_rows(workspace, tmp_path):
    root, cfg = workspace
    assert cli.main(["ablate", "--config", str(cfg), "--data", str(root / "data"), "--teacher",
                     str(root / "run" / "teacher.s2kc"), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "ablation.csv")
    assert rows[0] == list(cli.ABLATION_FIELDS)
    assert [r[0] for r in rows[1:]] == ["baseline", "spectral", "semantic", "full"]
    assert [r[1:4] for r in rows[1:]] == [["1", "0", "0"], ["1", "1", "0"], ["1", "0", "1"], ["1", "1", "1"]]


def test_gradcheck_exit_codes(capsys):
    assert cli.main(["gradcheck", "--op", "softmax"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 2 and "2/2" in out
    assert cli.main(["gradcheck", "--op", "softmax", "--tol", "1e-12"]) == 1
    assert cli.main(["gradcheck", "--op", "conv2d"]) == 2
    assert "registered" in capsys.readouterr().err


def test_missing_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2
