import json

import pytest

from unimask.bench import read_results
from unimask.cli import main


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    assert main(["train-toy", "--task", "grid_pattern", "--steps", "3", "--out", str(out)]) == 0
    return out / "model.ckpt"


def test_train_toy_outputs(tmp_path):
    assert main(["train-toy", "--task", "caption", "--steps", "4", "--out", str(tmp_path)]) == 0
    assert {p.name for p in tmp_path.iterdir()} == {"loss.csv", "model.ckpt", "config.json"}
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["task"] == "caption" and cfg["train"]["steps"] == 4


def test_config_file_overrides_defaults(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"task": "caption", "steps": 2, "model": {"n_layers": 2, "joint_layers": 1}}))
    assert main(["train-toy", "--config", str(conf), "--out", str(tmp_path / "o")]) == 0
    saved = json.loads((tmp_path / "o" / "config.json").read_text())
    assert saved["train"]["steps"] == 2 and saved["train"]["model"]["n_layers"] == 2


@pytest.mark.parametrize("argv", [
    ["train-toy", "--task", "nope"],
    ["sample"],
    ["bench-samplers", "--checkpoint", "/nonexistent.ckpt"],
    ["plot-order", "--order", "stratified", "--n", "6"],
    ["plot-order", "--order", "spiral"],
    ["quantize-bbox"],
    ["frobnicate"],
])
def test_config_errors_exit_2(tmp_path, argv):
    assert main(argv + ["--out", str(tmp_path)]) == 2


def test_bad_config_keys_exit_2(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"stepz": 1}))
    assert main(["train-toy", "--config", str(conf), "--out", str(tmp_path)]) == 2
    conf.write_text("[1, 2]")
    assert main(["train-toy", "--config", str(conf), "--out", str(tmp_path)]) == 2
    conf.write_text("{not json")
    assert main(["train-toy", "--config", str(conf), "--out", str(tmp_path)]) == 2


def test_divergence_exits_3(tmp_path):
    assert main(["train-toy", "--task", "caption", "--steps", "3", "--lr", "inf", "--out", str(tmp_path)]) == 3


def test_sample_and_bench(ckpt, tmp_path):
    assert main(["sample", "--checkpoint", str(ckpt), "--n", "2", "--steps", "4", "--out", str(tmp_path)]) == 0
    rows = [json.loads(x) for x in (tmp_path / "samples.jsonl").read_text().splitlines()]
    assert [r["calls"] for r in rows] == [4, 4]
    assert main(["bench-samplers", "--checkpoint", str(ckpt), "--steps", "2,4", "--seeds", "2",
                 "--samplers", "stratified,uniform", "--out", str(tmp_path)]) == 0
    res = read_results(tmp_path / "bench_samplers.csv")
    assert len(res) == 8 and {r.calls for r in res} == {2, 4}
    assert main(["bench-speed-quality", "--checkpoint", str(ckpt), "--steps", "1,2", "--thresholds", "0.5",
                 "--seeds", "1", "--out", str(tmp_path)]) == 0
    assert len(read_results(tmp_path / "speed_quality.csv")) == 3
    assert (tmp_path / "timings.csv").exists()


def test_quantize_bbox(tmp_path):
    src = tmp_path / "in.jsonl"
    src.write_text(json.dumps({"label": "dog", "x1": 250, "y1": 100, "x2": 750, "y2": 400, "w": 1000, "h": 500})
                   + "\n")
    assert main(["quantize-bbox", "--input", str(src), "--out", str(tmp_path)]) == 0
    rec = json.loads((tmp_path / "boxes.jsonl").read_text())
    assert rec["bins"] == [256, 102, 768, 410] and rec["label"] == "dog"
    src.write_text(json.dumps({"x1": 5, "y1": 0, "x2": 1, "y2": 1, "w": 10, "h": 10}) + "\n")
    assert main(["quantize-bbox", "--input", str(src), "--out", str(tmp_path)]) == 2


def test_mot_account(tmp_path):
    assert main(["mot-account", "--preset", "large", "--out", str(tmp_path)]) == 0
    acc = json.loads((tmp_path / "mot_account.json").read_text())
    assert abs(acc["loaded"]["gen_only"] / 6.4e9 - 1) < 0.05
    assert 2.5 <= acc["training_speedup_vs_standard_mot"] <= 4.0


def test_plot_order(tmp_path):
    assert main(["plot-order", "--order", "stratified", "--n", "8", "--seed", "3", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "order.csv").read_text().splitlines()
    assert lines[0] == "rank,row,col" and len(lines) == 65
    raw = (tmp_path / "order.ppm").read_bytes()
    assert raw.startswith(b"P6\n64 64\n255\n") and len(raw) == len(b"P6\n64 64\n255\n") + 64 * 64 * 3
    cov = json.loads((tmp_path / "coverage.json").read_text())
    assert cov["depth_coverage"] == {"1": 4, "2": 16, "3": 64}


def test_reflect_demo(tmp_path):
    place = tmp_path / "place"
    assert main(["train-toy", "--task", "place", "--steps", "2", "--out", str(place)]) == 0
    assert main(["reflect-demo", "--checkpoint", str(place / "model.ckpt"), "--rounds", "2", "--prompts", "2",
                 "--out", str(tmp_path / "r")]) == 0
    summary = [json.loads(x) for x in (tmp_path / "r" / "reflect_summary.jsonl").read_text().splitlines()]
    assert len(summary) == 2
    for s in summary:
        assert s["accepted"] in (True, False)
        assert ("error" in s) or 1 <= s["rounds_used"] <= 2


def test_train_toy_with_mix_and_betas(tmp_path):
    assert main(["train-toy", "--mix", "grid_pattern=2,caption=1", "--steps", "3", "--betas", "0.9,0.999",
                 "--out", str(tmp_path)]) == 0
    conf = json.loads((tmp_path / "config.json").read_text())
    assert conf["task"] == {"grid_pattern": 2.0, "caption": 1.0} and conf["train"]["betas"] == [0.9, 0.999]
    assert main(["train-toy", "--mix", "grid_pattern", "--out", str(tmp_path)]) == 2
    assert main(["train-toy", "--mix", "nope=1", "--steps", "1", "--out", str(tmp_path)]) == 2
