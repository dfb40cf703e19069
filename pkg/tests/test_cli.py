import json
from pathlib import Path

import numpy as np
import pytest

from splitwire import codec, data, latency
from splitwire import model as model_io
from splitwire.cli import main

SMALL = {
    "seed": 3, "n_samples": 500, "class_count": 4, "image_size": 32, "width": 16,
    "block_count": 1, "split_points": [1], "ratios": [2, 4], "base_epochs": 2,
    "ca_epochs": 1, "prune_epochs": 1, "fr_epochs": 1, "learning_rate": 0.02,
    "batch_size": 32,
}


def write_config(tmp: Path, **over) -> Path:
    cfg = dict(SMALL, out_dir=str(tmp), **over)
    path = tmp / "run.json"
    path.write_text(json.dumps(cfg))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = write_config(out)
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["compress", "--config", str(cfg)]) == 0
    return out, cfg


def test_train_writes_artifacts_and_echoes_config(trained):
    out, _ = trained
    for name in ("base.swml", "ca_l1.swml", "importance_l1.csv", "metrics.json", "results.csv",
                 "aecnn_l1_r2.swml", "ca_pruned_l1_r4.swml"):
        assert (out / name).is_file(), name
    echoed = json.loads((out / "config.json").read_text())
    assert {k: echoed[k] for k in SMALL} == SMALL
    assert 0 <= json.loads((out / "metrics.json").read_text())["base_accuracy"] <= 1


def test_results_rows_and_shapes(trained):
    out, _ = trained
    lines = (out / "results.csv").read_text().splitlines()
    assert lines[0].startswith("split_point,ratio,accuracy_ca_pruned,accuracy_aecnn,retained_shape")
    rows = [l.split(",") for l in lines[1:]]
    assert [(r[0], r[1], r[4]) for r in rows] == [("1", "2", "8x16x16"), ("1", "4", "4x16x16")]


def test_compress_rerun_replaces_rows(trained, capsys):
    out, cfg = trained
    before = (out / "results.csv").read_text()
    code, _, _ = run(capsys, "compress", "--config", cfg, "--ratio", 4)
    assert code == 0
    assert (out / "results.csv").read_text() == before


def test_train_rerun_gives_identical_importance(trained, tmp_path, capsys):
    out, _ = trained
    cfg = write_config(tmp_path)
    assert run(capsys, "train", "--config", cfg)[0] == 0
    assert (tmp_path / "importance_l1.csv").read_bytes() == (out / "importance_l1.csv").read_bytes()


def test_env_seed_overrides_config(tmp_path, monkeypatch, capsys):
    cfg = write_config(tmp_path, base_epochs=1)
    monkeypatch.setenv("SPLITWIRE_SEED", "11")
    assert run(capsys, "train", "--config", cfg, "--seed", 5)[0] == 0
    assert json.loads((tmp_path / "config.json").read_text())["seed"] == 11


def test_table_prints_markdown(trained, capsys):
    _, cfg = trained
    code, out, _ = run(capsys, "table", "--config", cfg)
    assert code == 0
    assert out.splitlines()[0].startswith("| l | ratio |")
    assert len(out.splitlines()) == 4


def test_encode_decode_matches_in_process(trained, capsys):
    out, cfg = trained
    model_path = out / "aecnn_l1_r2.swml"
    m = model_io.load(model_path)
    ds = data.generate(SMALL["seed"], SMALL["n_samples"], SMALL["class_count"], SMALL["image_size"])
    _, test_set = data.train_test_split(ds)
    assert len(test_set) == 100
    packet = out / "p.swfp"
    for i in range(100):
        code, text, _ = run(capsys, "encode", "--config", cfg, "--model", model_path,
                            "--index", i, "--out", packet)
        assert code == 0
        info = json.loads(text)
        code, text, _ = run(capsys, "decode", "--model", model_path, "--packet", packet)
        assert code == 0
        h = m.forward_device(1, test_set.images[i])
        expected = np.argmax(m.forward_server(1, codec.roundtrip_batch(h[None], 12)[0]))
        assert json.loads(text)["class"] == expected
        entropy = codec.empirical_entropy(codec.quantize(h, 12).symbols)
        if entropy > 0:
            assert 0.5 * entropy <= info["bits_per_element"] <= 1.5 * entropy


def test_encode_from_npy_image(trained, tmp_path, capsys):
    out, cfg = trained
    img = tmp_path / "x.npy"
    np.save(img, np.random.default_rng(0).random((3, 32, 32)))
    code, _, _ = run(capsys, "encode", "--config", cfg, "--model", out / "aecnn_l1_r4.swml",
                     "--image", img, "--out", tmp_path / "p.swfp")
    assert code == 0


def test_corrupt_and_mismatched_packets(trained, tmp_path, capsys):
    out, cfg = trained
    model_path = out / "aecnn_l1_r2.swml"
    packet = tmp_path / "p.swfp"
    assert run(capsys, "encode", "--config", cfg, "--model", model_path, "--out", packet)[0] == 0
    blob = packet.read_bytes()
    packet.write_bytes(blob[:-3])
    code, text, err = run(capsys, "decode", "--model", model_path, "--packet", packet)
    assert code == 3 and text == "" and "integrity" in err
    packet.write_bytes(blob)
    code, _, _ = run(capsys, "decode", "--model", out / "aecnn_l1_r4.swml", "--packet", packet)
    assert code == 3
    code, _, _ = run(capsys, "decode", "--model", out / "base.swml", "--packet", packet)
    assert code == 2


def test_config_errors_exit_two(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(dict(SMALL, out_dir=str(tmp_path / "nope"))))
    code, _, err = run(capsys, "train", "--config", bad)
    assert code == 2 and "does not exist" in err
    bad.write_text(json.dumps(dict(SMALL, colour="red", out_dir=str(tmp_path))))
    code, _, err = run(capsys, "train", "--config", bad)
    assert code == 2 and "colour" in err
    bad.write_text("{not json")
    assert run(capsys, "train", "--config", bad)[0] == 2
    assert run(capsys, "compress", "--out-dir", tmp_path)[0] == 2  # no base model yet


def test_ratio_not_dividing_channels(trained, capsys):
    _, cfg = trained
    code, _, err = run(capsys, "compress", "--config", cfg, "--ratio", 3)
    assert code == 2 and "divid" in err


def test_plan_demo_and_infeasible(capsys):
    code, text, _ = run(capsys, "plan", "--rate", 1e7, "--deadline", 0.1)
    assert code == 0
    p = json.loads(text)
    assert (p["decision"], p["ratio"], p["feasible"]) == ("split:1:8", 8, True)
    code, text, _ = run(capsys, "plan", "--rate", 1e7, "--deadline", 1e-9)
    assert code == 0 and json.loads(text)["feasible"] is False


def test_plan_schema_error_names_field(tmp_path, capsys):
    d = latency.demo_profile().to_dict()
    del d["t_local"]
    prof = tmp_path / "p.json"
    prof.write_text(json.dumps(d))
    code, _, err = run(capsys, "plan", "--profile", prof, "--rate", 1e7, "--deadline", 0.1)
    assert code == 2 and "t_local" in err


def test_simulate_rate_grid_row_count(tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    code, _, _ = run(capsys, "simulate", "--rate-count", 7, "--base-accuracy", 0.9, "--out", out)
    assert code == 0
    lines = out.read_text().splitlines()
    decisions = len(latency.accuracy_table_from_results(latency.demo_results(), 0.9))
    assert len(lines) == 1 + 7 * decisions


def test_simulate_trace(tmp_path, capsys):
    trace = tmp_path / "t.csv"
    trace.write_text(latency.RateTrace((0.0, 1.0), (1e7, 5e6)).to_csv())
    code, text, _ = run(capsys, "simulate", "--trace", trace, "--arrivals", "0,0.5")
    assert code == 0
    lines = text.splitlines()
    assert lines[0] == "decision,arrival_s,completion_s"
    assert len(lines) == 1 + 2 * 12
    trace.write_text(latency.RateTrace((0.0,), (1e3,), horizon=0.01).to_csv())
    assert run(capsys, "simulate", "--trace", trace)[0] == 2
