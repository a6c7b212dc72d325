import json

import numpy as np
import pytest

from skgedrive.cli import REPORT_FIELDS, evaluate_dataset, main
from skgedrive.config import RunConfig
from skgedrive.data import load_dataset, synth_scene
from skgedrive.model import build_model
from skgedrive.scoring import DriveLog, write_drive_log


def _run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_report_field_names():
    assert REPORT_FIELDS == ("ss_metric", "wp_metric", "str_metric",
                             "thr_metric", "brk_metric", "redl_metric",
                             "stops_metric")


def test_gen_writes_loadable_dataset(tmp_path, capsys):
    out = tmp_path / "data"
    code, stdout, _ = _run(capsys, "gen", "--out", str(out),
                           "--count", "3", "--seed", "5")
    assert code == 0
    assert "3 samples" in stdout
    samples = load_dataset(out)
    assert len(samples) == 3
    want = synth_scene(5)
    np.testing.assert_array_equal(samples[0].rgb, want.rgb)


def test_gen_rejects_bad_count(tmp_path, capsys):
    code, _, stderr = _run(capsys, "gen", "--out", str(tmp_path / "d"),
                           "--count", "0")
    assert code == 2
    assert "config error" in stderr


def test_env_seed_overrides_flag(tmp_path, capsys, monkeypatch):
    a = tmp_path / "a"
    b = tmp_path / "b"
    monkeypatch.setenv("SKGE_SEED", "11")
    _run(capsys, "gen", "--out", str(a), "--count", "1", "--seed", "999")
    monkeypatch.delenv("SKGE_SEED")
    _run(capsys, "gen", "--out", str(b), "--count", "1", "--seed", "11")
    sa, sb = load_dataset(a)[0], load_dataset(b)[0]
    np.testing.assert_array_equal(sa.rgb, sb.rgb)


def test_train_then_eval_roundtrip(tmp_path, capsys):
    data = tmp_path / "data"
    _run(capsys, "gen", "--out", str(data), "--count", "4", "--seed", "0")
    ckpt = tmp_path / "model.ckpt"
    code, stdout, _ = _run(capsys, "train", "--data", str(data),
                           "--out", str(ckpt), "--epochs", "1",
                           "--seed", "0", "--skge-route", "1->4")
    assert code == 0
    assert "trained 1 epochs" in stdout
    assert ckpt.exists()
    assert (tmp_path / "model.ckpt.metrics.ndjson").exists()

    code, stdout, _ = _run(capsys, "eval", "--data", str(data),
                           "--ckpt", str(ckpt))
    assert code == 0
    for field in REPORT_FIELDS + ("test_metric",):
        assert f"{field}=" in stdout


def test_train_rejects_missing_dataset(tmp_path, capsys):
    code, _, stderr = _run(capsys, "train", "--data", str(tmp_path / "nope"),
                           "--out", str(tmp_path / "m.ckpt"), "--epochs", "1")
    assert code == 4
    assert "corrupt data" in stderr


def test_train_rejects_bad_route(tmp_path, capsys):
    data = tmp_path / "data"
    _run(capsys, "gen", "--out", str(data), "--count", "1")
    code, _, stderr = _run(capsys, "train", "--data", str(data),
                           "--out", str(tmp_path / "m.ckpt"),
                           "--epochs", "1", "--skge-route", "4->4")
    assert code == 2
    assert "config error" in stderr


def test_score_command(tmp_path, capsys):
    logs = tmp_path / "logs"
    logs.mkdir()
    write_drive_log(logs / "a.ndjson", DriveLog(
        route_id="a", total_route_length=10.0,
        steps=[(0, 0, True), (10, 0, True)], infractions=[]))
    write_drive_log(logs / "b.ndjson", DriveLog(
        route_id="b", total_route_length=10.0,
        steps=[(0, 0, True), (5, 0, True)], infractions=["ped"]))
    code, stdout, _ = _run(capsys, "score", "--logs", str(logs))
    assert code == 0
    assert "driving_score=62.5000" in stdout
    # aggregate product vs mean-of-products caveat: 75 * 0.75 = 56.25
    assert "mean_rc x mean_ip = 56.2500" in stdout


def test_score_corrupt_log_exits_4(tmp_path, capsys):
    logs = tmp_path / "logs"
    logs.mkdir()
    (logs / "bad.ndjson").write_text("{broken\n")
    code, _, stderr = _run(capsys, "score", "--logs", str(logs))
    assert code == 4
    assert "corrupt data" in stderr


def test_score_missing_dir_exits_2(tmp_path, capsys):
    code, _, _ = _run(capsys, "score", "--logs", str(tmp_path / "absent"))
    assert code == 2


def test_bench_reports_fps(tmp_path, capsys):
    data = tmp_path / "data"
    _run(capsys, "gen", "--out", str(data), "--count", "2")
    ckpt = tmp_path / "m.ckpt"
    _run(capsys, "train", "--data", str(data), "--out", str(ckpt),
         "--epochs", "1", "--seed", "0")
    code, stdout, _ = _run(capsys, "bench", "--ckpt", str(ckpt),
                           "--iters", "2")
    assert code == 0
    assert "fps=" in stdout and "peak_rss_mb=" in stdout


def test_evaluate_dataset_report_is_json_ready():
    samples = [synth_scene(i) for i in range(2)]
    cfg = RunConfig()
    model = build_model(cfg, np.random.default_rng(0))
    report = evaluate_dataset(model, cfg, samples)
    assert set(report) == set(REPORT_FIELDS) | {"test_metric"}
    json.dumps(report)
    assert 0.0 <= report["ss_metric"] <= 1.0
    assert 0.0 <= report["redl_metric"] <= 1.0
    assert report["test_metric"] > 0.0