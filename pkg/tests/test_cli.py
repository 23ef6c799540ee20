import csv
import json
import os

import pytest

from gpcnav.cli import config_hash, main

FAST = {"perception": {"samples_per_point": 40}, "simulation": {"gas_samples": 1500, "mcs_samples": 300}}


def _config(tmp_path, name="run.json", **sections):
    doc = {"scenario": {"name": "corn_monitor"}}
    for k, v in {**FAST, **sections}.items():
        doc[k] = v
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def _manifest(out, cmd):
    with open(os.path.join(out, f"manifest_{cmd}.json"), encoding="utf-8") as fh:
        return json.load(fh)


def _files(out):
    return sorted(f for f in os.listdir(out) if not f.startswith("."))


@pytest.fixture(scope="module")
def corn_surrogate(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("corn")
    cfg = _config(tmp)
    out = str(tmp / "out")
    assert main(["build-surrogate", "--config", cfg, "--out-dir", out]) == 0
    return cfg, out


def test_missing_scenario_name_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"scenario": {}}))
    assert main(["train-perception", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == 2
    assert "scenario.name" in capsys.readouterr().err


def test_invalid_field_is_named(tmp_path, capsys):
    cfg = _config(tmp_path, simulation={"steps": 0})
    assert main(["train-perception", "--config", cfg, "--out-dir", str(tmp_path / "o")]) == 2
    assert "simulation.steps" in capsys.readouterr().err


def test_numeric_failure_exits_3_and_leaves_no_outputs(tmp_path):
    cfg = _config(tmp_path, perception={"grid": [2, 2], "degree": 6, "samples_per_point": 5})
    out = str(tmp_path / "o")
    assert main(["train-perception", "--config", cfg, "--out-dir", out]) == 3
    assert _files(out) == [] and os.listdir(out) == []


def test_train_perception_defaults_and_determinism(tmp_path):
    p = tmp_path / "d.json"
    p.write_text(json.dumps({"scenario": {"name": "corn_monitor"}, "perception": {"samples_per_point": 350}}))
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["train-perception", "--config", str(p), "--out-dir", a]) == 0
    assert main(["train-perception", "--config", str(p), "--out-dir", b, "--threads", "4"]) == 0
    m = _manifest(a, "train_perception")
    assert m["parameters"]["grid"] == [11, 11] and m["parameters"]["samples_per_point"] == 350
    assert m["perception"]["grid"] == [11, 11]
    for f in ("perception.json", "perception_training.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    for path in m["artifacts"].values():
        assert os.path.exists(path)


def test_ground_truth_scenario_has_no_perception_to_train(tmp_path):
    p = tmp_path / "acas.json"
    p.write_text(json.dumps({"scenario": {"name": "acas_table_like"}}))
    assert main(["train-perception", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == 2


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": {"c": 2, "d": 3}}) == config_hash({"b": {"d": 3, "c": 2}, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_build_surrogate_records_basis(corn_surrogate):
    _, out = corn_surrogate
    s = _manifest(out, "build_surrogate")["surrogate"]
    assert s == {"elements": 1, "basis_size": 70, "node_evaluations": 625, "input_dim": 4}


def test_build_from_saved_perception_model(tmp_path, corn_surrogate):
    cfg, out = corn_surrogate
    per = str(tmp_path / "p")
    assert main(["train-perception", "--config", cfg, "--out-dir", per]) == 0
    o2 = str(tmp_path / "s")
    assert main(["build-surrogate", "--config", cfg, "--out-dir", o2,
                 "--perception", os.path.join(per, "perception.json")]) == 0
    assert open(os.path.join(o2, "surrogate.json"), "rb").read() == open(os.path.join(out, "surrogate.json"),
                                                                         "rb").read()


def test_first_order_surrogate_basis(tmp_path):
    cfg = _config(tmp_path, gpc={"order": 1})
    out = str(tmp_path / "o")
    assert main(["build-surrogate", "--config", cfg, "--out-dir", out]) == 0
    assert _manifest(out, "build_surrogate")["surrogate"]["basis_size"] == 5


def test_order_over_node_cap_is_config_error(tmp_path, capsys):
    cfg = _config(tmp_path, gpc={"order": 9, "max_nodes": 1000})
    assert main(["build-surrogate", "--config", cfg, "--out-dir", str(tmp_path / "o")]) == 2
    assert "try order" in capsys.readouterr().err


def test_acas_surrogate_has_five_elements(tmp_path):
    p = tmp_path / "acas.json"
    p.write_text(json.dumps({"scenario": {"name": "acas_table_like", "classifier": {"levels": [9, 9, 5, 3]}},
                             "gpc": {"order": 2}}))
    out = str(tmp_path / "o")
    assert main(["build-surrogate", "--config", str(p), "--out-dir", out]) == 0
    s = _manifest(out, "build_surrogate")["surrogate"]
    assert s["elements"] == 5 and s["input_dim"] == 4 and s["basis_size"] == 15
    assert s["classifier"]["training_accuracy"] == 1.0


def test_estimate_without_baseline(tmp_path, corn_surrogate):
    cfg, out = corn_surrogate
    o = str(tmp_path / "e")
    assert main(["estimate", "--config", cfg, "--out-dir", o, "--surrogate", os.path.join(out, "surrogate.json")]) == 0
    assert _files(o) == ["manifest_estimate.json", "psafe_gas.csv", "states_gas.csv"]
    rows = list(csv.reader(open(os.path.join(o, "psafe_gas.csv"), encoding="utf-8")))
    assert rows[0] == ["step", "survivors", "p_safe", "ci_lo", "ci_hi"] and len(rows) == 101


def test_estimate_with_baseline_reports_every_step(tmp_path, corn_surrogate):
    cfg, out = corn_surrogate
    o = str(tmp_path / "e")
    assert main(["estimate", "--config", cfg, "--out-dir", o, "--surrogate", os.path.join(out, "surrogate.json"),
                 "--baseline", "mcs"]) == 0
    rep = json.load(open(os.path.join(o, "comparison.json"), encoding="utf-8"))
    assert rep["steps"] == 100 and len(rep["t_test"]) == 100
    assert set(rep["t_test"]) <= {"pass", "reject"}
    assert set(rep["ks_max"]) == {"heading", "distance"}
    m = _manifest(o, "estimate")
    assert all(os.path.exists(p) for p in m["artifacts"].values())


def test_estimate_rejects_foreign_surrogate(tmp_path, corn_surrogate):
    _, out = corn_surrogate
    p = tmp_path / "car.json"
    p.write_text(json.dumps({"scenario": {"name": "car_straight"}}))
    o = str(tmp_path / "e")
    assert main(["estimate", "--config", str(p), "--out-dir", o, "--surrogate",
                 os.path.join(out, "surrogate.json")]) == 2
    assert _files(o) == []


def test_sensitivity_labels_and_bounds(tmp_path, corn_surrogate):
    cfg, out = corn_surrogate
    o = str(tmp_path / "s")
    assert main(["sensitivity", "--config", cfg, "--out-dir", o, "--surrogate", os.path.join(out, "surrogate.json"),
                 "--mcs-samples", "100000"]) == 0
    doc = json.load(open(os.path.join(o, "sobol.json"), encoding="utf-8"))
    assert doc["inputs"] == ["heading", "distance", "Raw0", "Raw1"]
    el = doc["elements"]["model"]
    assert len(el["analytic"]) == 8 and "Raw0→heading" in el["analytic"]
    assert all(0.0 <= v <= 1.0 for v in el["analytic"].values())
    assert max(abs(el["analytic"][k] - el["mcs"][k]) for k in el["analytic"]) <= 0.05
    assert el["zero_variance_outputs"] == []
    assert main(["sensitivity", "--config", cfg, "--out-dir", o, "--surrogate", os.path.join(out, "surrogate.json"),
                 "--mcs-samples", "10"]) == 2


def test_ablation_rows(tmp_path):
    cfg = _config(tmp_path, simulation={"gas_samples": 1000, "mcs_samples": 300, "steps": 20})
    sweep = tmp_path / "sweep.json"
    sweep.write_text(json.dumps({"grid": [[7, 7], [11, 11]]}))
    out = str(tmp_path / "o")
    assert main(["ablation", "--config", cfg, "--out-dir", out, "--sweep", str(sweep)]) == 0
    rows = list(csv.DictReader(open(os.path.join(out, "ablation.csv"), encoding="utf-8")))
    assert len(rows) == 2 and [r["grid"] for r in rows] == ["[7, 7]", "[11, 11]"]
    assert all(r["status"] == "ok" and float(r["ks_max_heading"]) >= 0 for r in rows)
    sweep.write_text(json.dumps({"degree": [3, 4, 5]}))
    out2 = str(tmp_path / "o2")
    assert main(["ablation", "--config", cfg, "--out-dir", out2, "--sweep", str(sweep)]) == 0
    rows = list(csv.DictReader(open(os.path.join(out2, "ablation.csv"), encoding="utf-8")))
    assert [r["degree"] for r in rows] == ["3", "4", "5"]
    timing = list(csv.DictReader(open(os.path.join(out2, "ablation_timing.csv"), encoding="utf-8")))
    assert len(timing) == 3 and float(timing[0]["relative_time"]) == 1.0


def test_ablation_records_failing_combination(tmp_path):
    cfg = _config(tmp_path, simulation={"gas_samples": 500, "mcs_samples": 100, "steps": 5})
    sweep = tmp_path / "sweep.json"
    sweep.write_text(json.dumps({"grid": [[3, 3]], "degree": [1, 6]}))
    out = str(tmp_path / "o")
    assert main(["ablation", "--config", cfg, "--out-dir", out, "--sweep", str(sweep)]) == 0
    rows = list(csv.DictReader(open(os.path.join(out, "ablation.csv"), encoding="utf-8")))
    assert rows[0]["status"] == "ok" and rows[1]["status"].startswith("error")


def test_empty_sweep_exits_2(tmp_path):
    cfg = _config(tmp_path)
    sweep = tmp_path / "sweep.json"
    sweep.write_text("{}")
    assert main(["ablation", "--config", cfg, "--out-dir", str(tmp_path / "o"), "--sweep", str(sweep)]) == 2
    sweep.write_text(json.dumps({"grid": []}))
    assert main(["ablation", "--config", cfg, "--out-dir", str(tmp_path / "o"), "--sweep", str(sweep)]) == 2
