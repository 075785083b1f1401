import json

import pytest

from seedloc.cli import main


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-phantom", "--out", str(out), "--count", "2", "--seed", "3", "--seeds", "3,4",
                 "--shape", "32,32,32"]) == 0
    return out


def test_gen_phantom_writes_manifest_and_config(dataset):
    rows = json.loads((dataset / "dataset.json").read_text())
    assert len(rows) == 2
    cfg = json.loads((dataset / "gen-phantom.config.json").read_text())
    assert cfg["rng_seed"] == 3 and cfg["shape"] == [32, 32, 32] and cfg["seed_count_max"] == 4


def test_unknown_subcommand_and_flag(capsys):
    assert main(["frobnicate"]) == 1
    assert main(["evaluate", "--nope", "a", "b"]) == 1
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_malformed_flag_values():
    assert main(["train", "x", "--out", "y", "--voi", "1,2"]) == 1
    assert main(["infer", "c", "v", "--out", "o", "--center", "a,b,c"]) == 1


def test_evaluate_identical_files(dataset, capsys):
    pts = dataset / "phantom_0000.pts.json"
    assert main(["evaluate", str(pts), str(pts)]) == 0
    assert "rate 1.0000" in capsys.readouterr().out


def test_train_with_zero_volumes(tmp_path, capsys):
    (tmp_path / "dataset.json").write_text("[]")
    assert main(["train", str(tmp_path), "--out", str(tmp_path / "m")]) == 1
    assert "0 training volumes" in capsys.readouterr().err


def test_missing_input_is_validation_error(tmp_path):
    assert main(["evaluate", str(tmp_path / "a.pts.json"), str(tmp_path / "b.det.json")]) == 1


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed_count": 2, "shape": [24, 24, 24], "rng_seed": 9}))
    assert main(["gen-phantom", "--config", str(cfg), "--seed", "11", "--out", str(tmp_path / "d")]) == 0
    resolved = json.loads((tmp_path / "d" / "gen-phantom.config.json").read_text())
    assert resolved["rng_seed"] == 11 and resolved["seed_count"] == 2
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["gen-phantom", "--config", str(cfg), "--out", str(tmp_path / "e")]) == 1


def test_make_targets(dataset, tmp_path):
    assert main(["make-targets", str(dataset), "--out", str(tmp_path), "--scale", "100"]) == 0
    hdr = json.loads((tmp_path / "phantom_0000.target.vol.json").read_text())
    assert hdr["kind"] == "probability_map" and hdr["scale"] == 100.0


def _pipeline(dataset, root):
    model, det, ev, rep = (root / n for n in ("model", "det", "eval", "report"))
    assert main(["train", str(dataset), "--out", str(model), "--rounds", "2", "--voi", "16,16,16",
                 "--scale", "100", "--weight-floor", "0.1", "--seed", "5"]) == 0
    assert main(["infer", str(model / "model.ckpt.json"), str(dataset), "--out", str(det),
                 "--voi", "32,32,32", "--save-maps"]) == 0
    assert main(["evaluate", str(dataset), str(det), "--out", str(ev), "--threshold-mm", "3"]) == 0
    assert main(["report", str(ev), "--out", str(rep)]) == 0
    return model, det, ev, rep


def test_full_pipeline_is_reproducible(dataset, tmp_path, capsys):
    a = _pipeline(dataset, tmp_path / "a")
    out = capsys.readouterr().out
    assert "s per volume" in out and "TOTAL" in out
    b = _pipeline(dataset, tmp_path / "b")
    files = ["model/model.ckpt.bin", "model/loss.csv", "det/phantom_0000.det.json", "det/phantom_0001.det.json",
             "det/phantom_0000.map.vol.raw", "eval/phantom_0001.eval.json", "eval/phantom_0000.eval.pairs.csv",
             "report/report.csv", "report/report.txt"]
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    csv_lines = (tmp_path / "a" / "report" / "report.csv").read_text().splitlines()
    assert csv_lines[0].startswith("volume,gt_count") and csv_lines[-1].startswith("TOTAL")
    assert (a[0] / "train.config.json").exists() and (a[1] / "infer.config.json").exists()


def test_infer_does_not_modify_inputs(dataset, tmp_path):
    before = {p.name: p.read_bytes() for p in dataset.iterdir() if p.is_file()}
    model = tmp_path / "m"
    assert main(["train", str(dataset), "--out", str(model), "--rounds", "1", "--voi", "16,16,16"]) == 0
    assert main(["infer", str(model / "model.ckpt.json"), str(dataset / "phantom_0001.vol.json"),
                 "--out", str(tmp_path / "d"), "--center", "8,8,8", "--voi", "16,16,16"]) == 0
    after = {p.name: p.read_bytes() for p in dataset.iterdir() if p.is_file()}
    assert before == after


def test_gradcheck_subcommand(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    assert "PASS" in capsys.readouterr().out
    assert (tmp_path / "gradcheck.json").exists()
