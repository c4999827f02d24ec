import json
import subprocess
import sys

import pytest

from ssvtcn.checkpoint import load_checkpoint
from ssvtcn.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_PIPELINE, main
from ssvtcn.detector import DetectionResult, rectify
from ssvtcn.evaluation import GridReport, Report

pytestmark = pytest.mark.filterwarnings("ignore::UserWarning")

SMALL_TOML = """
seed = 1
[synth]
records = 1200
[model]
window = 8
levels = 3
[train]
epochs = 2
[grid]
ratios = [0.3]
seeds = [0, 1]
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL_TOML, encoding="utf-8")
    return str(path)


@pytest.fixture
def trained_run(tmp_path, small_config):
    out = tmp_path / "run"
    assert main(["train", "--config", small_config, "--out", str(out)]) == EXIT_OK
    return out


def test_synth_is_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["synth", "--records", "1000", "--seed", "7", "--out", str(a)]) == EXIT_OK
    assert main(["synth", "--records", "1000", "--seed", "7", "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    assert "1000 records: normal=" in capsys.readouterr().err


def test_synth_zero_records(tmp_path):
    path = tmp_path / "empty.csv"
    assert main(["synth", "--records", "0", "--out", str(path)]) == EXIT_OK
    lines = path.read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith("timestamp,")


def test_train_writes_artifacts_and_is_deterministic(tmp_path, small_config, trained_run):
    for name in ("model.ckpt", "intervals.json", "history.jsonl", "test.csv"):
        assert (trained_run / name).exists(), name
    history = [json.loads(x) for x in (trained_run / "history.jsonl").read_text().splitlines()]
    assert [h["epoch"] for h in history] == [1, 2]
    again = tmp_path / "again"
    assert main(["train", "--config", small_config, "--out", str(again)]) == EXIT_OK
    assert (again / "model.ckpt").read_bytes() == (trained_run / "model.ckpt").read_bytes()
    assert (again / "intervals.json").read_bytes() == (trained_run / "intervals.json").read_bytes()


def test_train_default_config_smoke(tmp_path):
    out = tmp_path / "default"
    assert main(["train", "--out", str(out)]) == EXIT_OK
    model = load_checkpoint((out / "model.ckpt").read_bytes())
    assert (model.config.levels, model.config.channels, model.config.window) == (8, 8, 16)


def test_fully_labeled_runs_supervised(tmp_path, small_config):
    out = tmp_path / "sup"
    assert main(["train", "--config", small_config, "--labeled-ratio", "1.0", "--out", str(out)]) == EXIT_OK
    assert load_checkpoint((out / "model.ckpt").read_bytes()).metadata["mode"] == "supervised"


def detect(run, config, *extra):
    log = run / "log.jsonl"
    code = main(["detect", "--config", config, "--checkpoint", str(run / "model.ckpt"),
                 "--intervals", str(run / "intervals.json"), "--input", str(run / "test.csv"),
                 "--out", str(log), *extra])
    return code, log


def test_detect_then_eval(trained_run, small_config, capsys):
    code, log = detect(trained_run, small_config)
    assert code == EXIT_OK
    lines = log.read_text().splitlines()
    n_test = len((trained_run / "test.csv").read_text().splitlines()) - 1
    assert len(lines) == n_test
    for line in lines:
        r = DetectionResult.from_json(line)
        assert (r.final, r.rectified) == rectify(r.preliminary, r.pv_class)
    out = trained_run / "report"
    assert main(["eval", "--config", small_config, "--log", str(log), "--truth",
                 str(trained_run / "test.csv"), "--out", str(out)]) == EXIT_OK
    data = json.loads((out / "report.json").read_text())
    assert Report.from_dict(data).to_dict() == data
    assert "Avg" in capsys.readouterr().out


def test_detect_without_rectification(trained_run, small_config):
    code, log = detect(trained_run, small_config, "--mode", "ss-wvtcn")
    assert code == EXIT_OK
    for line in log.read_text().splitlines():
        r = DetectionResult.from_json(line)
        assert r.final == r.preliminary and not r.rectified


def test_perfect_log_scores_one(tmp_path, trained_run, small_config, capsys):
    truth = trained_run / "test.csv"
    labels = [row.split(",")[-1] for row in truth.read_text().splitlines()[1:]]
    names = ["normal", "dos", "malicious", "spying"]
    log = tmp_path / "perfect.jsonl"
    log.write_text("".join(
        DetectionResult(names.index(c), 0.0, 0, names.index(c), False, index=i).to_json() + "\n"
        for i, c in enumerate(labels)))
    out = tmp_path / "perfect"
    assert main(["eval", "--log", str(log), "--truth", str(truth), "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    present = [c for c in range(4) if report["support"][c]]
    assert all(report["f1"][c] == 1.0 for c in present)


def test_eval_misaligned(tmp_path, trained_run, small_config):
    _, log = detect(trained_run, small_config)
    short = tmp_path / "short.jsonl"
    short.write_text("".join(log.read_text().splitlines(keepends=True)[1:]))
    assert main(["eval", "--log", str(short), "--truth", str(trained_run / "test.csv")]) == EXIT_DATA


def test_detect_incompatible_checkpoint(tmp_path, trained_run):
    other = tmp_path / "other.toml"
    other.write_text("[model]\nwindow = 8\nlevels = 4\n", encoding="utf-8")
    code, _ = detect(trained_run, str(other))
    assert code == EXIT_PIPELINE


def test_grid_writes_reparseable_report(tmp_path, small_config):
    out = tmp_path / "grid"
    assert main(["grid", "--config", small_config, "--out", str(out)]) == EXIT_OK
    grid = GridReport.loads((out / "grid.json").read_text())
    assert len(grid.cells) == 3 * 2
    assert GridReport.loads(grid.dumps()).to_dict() == grid.to_dict()
    assert (out / "grid.txt").read_text().startswith("ratio")


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nlevls = 3\n", encoding="utf-8")
    assert main(["train", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["train", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "r")]) == EXIT_DATA
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    iv = tmp_path / "iv.json"
    iv.write_text("{}")
    csv = tmp_path / "x.csv"
    csv.write_text("timestamp,a,label\n1,2,normal\n")
    assert main(["detect", "--checkpoint", str(junk), "--intervals", str(iv), "--input", str(csv)]) == EXIT_PIPELINE
    with pytest.raises(SystemExit) as exc:
        main(["train", "--mode", "nope"])
    assert exc.value.code == 2


def test_synth_piped_into_detect(tmp_path, trained_run, small_config):
    synth = subprocess.run([sys.executable, "-m", "ssvtcn", "synth", "--records", "300", "--seed", "2"],
                           capture_output=True, check=True)
    det = subprocess.run(
        [sys.executable, "-m", "ssvtcn", "detect", "--config", small_config,
         "--checkpoint", str(trained_run / "model.ckpt"), "--intervals", str(trained_run / "intervals.json"),
         "--input", "-"],
        input=synth.stdout, capture_output=True)
    assert det.returncode == 0, det.stderr.decode()
    assert len(det.stdout.decode().splitlines()) == 300
