import json
from importlib import resources

import jsonschema
import pytest

from indlab.cli import PRESETS, preset, run
from indlab.disentangled import save_weights
from indlab.pseudo_params import PseudoParams, materialize

SMALL_RUNS = {
    "gen-data": ["--n", "3", "--dim", "6", "--batch", "4", "--data", "orthonormal", "--basis", "random"],
    "train": ["--n", "3", "--dim", "6", "--batch", "16", "--steps", "12", "--log-every", "4"],
    "flow": ["--n", "4"],
    "scan-n": ["--n", "2,4,8,16"],
    "sgd-vs-flow": ["--n", "2", "--dim", "4"],
    "std-train": ["--dim", "16", "--head-dim", "8", "--batch", "16", "--steps", "3"],
    "residual-scan": ["--n", "2", "--dim", "4", "--batch-sizes", "8,32", "--seeds", "3"],
}


def read_json(path):
    return json.loads(path.read_text())


def snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


def test_schemas_are_valid():
    files = list(resources.files("indlab").joinpath("schemas").iterdir())
    assert len(files) >= 9
    for f in files:
        jsonschema.Draft202012Validator.check_schema(json.loads(f.read_text()))


def test_flow_example(tmp_path, capsys):
    assert run(["flow", "--n", "8", "--threshold", "0.5", "--out", str(tmp_path)]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["ordering_ok"] is True and rec["N"] == 8
    assert read_json(tmp_path / "emergence_N8.json") == rec
    header = (tmp_path / "flow_N8.csv").read_text().splitlines()[0]
    assert header == "t,alpha,beta,gamma,loss"


def test_scan_slopes(tmp_path):
    assert run(["scan-n", "--n", "8,16,32,64", "--out", str(tmp_path)]) == 0
    slopes = read_json(tmp_path / "scan.json")["slopes"]
    assert 1.8 <= slopes["t_icl"] <= 2.2


def test_project_materialized_file(tmp_path):
    w = materialize(PseudoParams.from_named(a3=1.0, b2=2.0, g3=0.5, b9=-1.0), 6)
    save_weights(w, tmp_path / "w.bin")
    assert run(["project", "--weights", str(tmp_path / "w.bin"), "--out", str(tmp_path)]) == 0
    rep = read_json(tmp_path / "projection.json")
    assert rep["relative"] == {"w1": 0.0, "w2": 0.0, "w3": 0.0}
    assert rep["alpha"][2] == 1.0 and rep["beta"][1] == 2.0


@pytest.mark.parametrize("command", sorted(SMALL_RUNS))
def test_byte_identical_reruns(command, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run([command, *SMALL_RUNS[command], "--seed", "7", "--out", str(d)]) == 0
    assert snapshot(a) == snapshot(b)


def test_seed_changes_output(tmp_path):
    for s in ("1", "2"):
        assert run(["train", *SMALL_RUNS["train"], "--seed", s, "--out", str(tmp_path / s)]) == 0
    assert (tmp_path / "1" / "trajectory.csv").read_bytes() != (tmp_path / "2" / "trajectory.csv").read_bytes()


def test_interpret_writes_blocks(tmp_path):
    assert run(["std-train", *SMALL_RUNS["std-train"], "--out", str(tmp_path)]) == 0
    assert run(["interpret", "--checkpoint", str(tmp_path / "model.ckpt"), "--out", str(tmp_path / "i")]) == 0
    names = {p.name for p in (tmp_path / "i").iterdir()}
    assert {"kq1.csv", "kq2_R1_E.csv", "out_R2_E.csv", "prev_token.csv", "interpret_summary.json"} <= names


def test_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("INDLAB_OUT", str(tmp_path / "env"))
    assert run(["flow", "--n", "2"]) == 0
    assert (tmp_path / "env" / "emergence_N2.json").exists()


def test_exit_codes(tmp_path, capsys):
    out = ["--out", str(tmp_path)]
    assert run(["train", "--bogus", "1"]) == 1
    assert run(["teleport"]) == 1
    assert run(["train", "--lr", "-1", *out]) == 1
    assert run(["train", "--mask", "sideways", *out]) == 1
    assert run(["flow", "--n", "1", *out]) == 1
    assert run(["project", *out]) == 1
    assert run(["sgd-vs-flow", "--n", "4", "--dim", "6", *out]) == 1
    assert run(["train", "--n", "4", "--dim", "8", "--lr", "10000", "--steps", "20", "--scale", "1", *out]) == 2
    capsys.readouterr()


def test_config_file(tmp_path):
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"n": "2", "threshold": "0.1,0.1,0.5"}))
    assert run(["flow", "--config", str(good), "--out", str(tmp_path)]) == 0
    assert read_json(tmp_path / "emergence_N2.json")["threshold"] == {"alpha": 0.1, "beta": 0.1, "gamma": 0.5}
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n": "2", "colour": "red"}))
    assert run(["flow", "--config", str(bad), "--out", str(tmp_path)]) == 1


def test_presets():
    assert set(PRESETS) == {"fig3-weights", "fig4-dynamics", "fig5-ablation", "fig6-scaling", "fig2-interpret"}
    p4 = preset("fig4-dynamics")
    assert (p4["dim"], p4["n"], p4["lr"], p4["batch"]) == (32, 16, 1.0, 256)
    p6 = preset("fig6-scaling")
    assert (p6["dim"], p6["batch"], p6["lr"], p6["data"]) == (256, 64, 100.0, "orthonormal")
    assert p6["threshold"] == "0.1,0.1,0.5"
    p2 = preset("fig2-interpret")
    assert (p2["vocab"], p2["block"], p2["steps"], p2["batch"]) == (32, 32, 300, 512)
    assert preset("fig5-ablation")["ablate"] == "a3,b2,g3"
    with pytest.raises(ValueError):
        preset("fig9")
    with pytest.raises(ValueError):
        preset("fig2-interpret", "flow")


def test_preset_with_override(tmp_path):
    assert run(["train", "--preset", "fig3-weights", "--steps", "2", "--batch", "8", "--out", str(tmp_path)]) == 0
    cfg = read_json(tmp_path / "train_summary.json")["config"]
    assert (cfg["dim"], cfg["n_pairs"], cfg["steps"], cfg["batch"]) == (16, 8, 2, 8)
