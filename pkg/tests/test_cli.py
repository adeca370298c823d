import csv
import json

import pytest

from contsep.cli import EXIT_ERROR, main

SMALL = ["--set", "num_classes=8", "--set", "samples_per_class=5"]
FAST = SMALL + ["--set", "steps_per_task=2", "--set", "batch_size=2", "--set", "eval_mixtures=2",
                "--set", "seeds=0", "--set", "filter_len=64"]


def _call(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else json.loads(err.strip().splitlines()[-1]))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(out / "d"), *SMALL]) == 0
    return out / "d"


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_gen_data_digest_is_reproducible(tmp_path, capsys, dataset):
    code, res = _call(capsys, "gen-data", "--out", str(tmp_path / "again"), *SMALL)
    assert code == 0
    assert res["digest"] == json.loads((dataset / "dataset.json").read_text())["digest"]


def test_bad_config_exits_with_json_error(tmp_path, capsys):
    code, err = _call(capsys, "gen-data", "--out", str(tmp_path / "x"), "--set", "num_classes=3",
                      "--set", "num_tasks=4")
    assert code == EXIT_ERROR and err["error"] == "config"
    code, err = _call(capsys, "gen-data", "--out", str(tmp_path / "x"), "--set", "nope=1")
    assert code == EXIT_ERROR and "nope" in err["message"]


def test_refuses_non_empty_output_without_force(tmp_path, capsys):
    (tmp_path / "o").mkdir()
    (tmp_path / "o" / "keep.txt").write_text("x")
    code, err = _call(capsys, "gen-data", "--out", str(tmp_path / "o"), *SMALL)
    assert code == EXIT_ERROR and err["error"] == "output_exists"
    code, _ = _call(capsys, "gen-data", "--out", str(tmp_path / "o"), "--force", *SMALL)
    assert code == 0 and (tmp_path / "o" / "manifest.json").exists()


def test_train_with_mismatched_dataset_fails(tmp_path, capsys, dataset):
    code, err = _call(capsys, "train", "--data", str(dataset), "--out", str(tmp_path / "r"),
                      *FAST, "--set", "num_classes=20")
    assert code == EXIT_ERROR and err["error"] == "config"
    code, err = _call(capsys, "train", "--data", str(tmp_path / "none"),
                      "--out", str(tmp_path / "r"), *FAST)
    assert code == EXIT_ERROR and err["error"] == "input"


def test_train_eval_report_round_trip(tmp_path, capsys, dataset):
    runs = tmp_path / "runs"
    code, res = _call(capsys, "train", "--data", str(dataset), "--out", str(runs), *FAST,
                      "--methods", "contav_sep,upper_bound")
    assert code == 0 and set(res["runs"]) == {"contav_sep", "upper_bound"}
    rows = _rows(runs / "contav_sep" / "metrics.csv")
    assert [r["step"] for r in rows] == ["1", "2", "3", "4"]
    assert rows[0]["sdr_old"] == "" and rows[3]["sdr_old"] != ""
    assert [r["step"] for r in _rows(runs / "upper_bound" / "metrics.csv")] == ["4"]

    code, res = _call(capsys, "eval", "--run", str(runs / "contav_sep"), "--data", str(dataset),
                      "--out", str(tmp_path / "ev"))
    assert code == 0
    assert (tmp_path / "ev" / "metrics.csv").read_bytes() == \
        (runs / "contav_sep" / "metrics.csv").read_bytes()

    code, res = _call(capsys, "report", str(runs / "contav_sep"), str(runs / "upper_bound"),
                      "--out", str(tmp_path / "rep"), "--data", str(dataset), "--images", "1")
    assert code == 0 and res["rows"] == 2
    assert res["images"] == 5 * (4 + 1)
    summary = _rows(tmp_path / "rep" / "summary.csv")
    by_label = {r["label"]: r for r in summary}
    assert float(by_label["contav_sep"]["sdr_mean"]) == float(rows[3]["sdr"])
    pngs = sorted((tmp_path / "rep" / "images").rglob("*.png"))
    assert len(pngs) == 25 and any("pred_a_class" in p.name for p in pngs)


def test_report_images_need_data(tmp_path, capsys, dataset):
    run = tmp_path / "r"
    assert main(["train", "--data", str(dataset), "--out", str(run), *FAST,
                 "--set", "num_tasks=2", "--set", "method=finetune"]) == 0
    capsys.readouterr()
    code, err = _call(capsys, "report", str(run), "--out", str(tmp_path / "rep"), "--images", "1")
    assert code == EXIT_ERROR and "--data" in err["message"]


def test_sweep_memory_writes_spearman(tmp_path, capsys, dataset):
    code, res = _call(capsys, "sweep-memory", "--data", str(dataset), "--out", str(tmp_path / "s"),
                      *FAST, "--set", "num_tasks=2", "--sizes", "1,2")
    assert code == 0 and res["sizes"] == [1, 2]
    saved = json.loads((tmp_path / "s" / "sweep.json").read_text())
    assert saved["sizes"] == [1, 2] and len(saved["sdr"]) == 2
    assert (tmp_path / "s" / "mem2" / "metrics.csv").exists()
    code, err = _call(capsys, "sweep-memory", "--data", str(dataset), "--out",
                      str(tmp_path / "s2"), *FAST, "--sizes", "0,1")
    assert code == EXIT_ERROR
