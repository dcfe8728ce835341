import csv
import json
from pathlib import Path

import pytest

from tgnet.cli import apply_thread_cap, main
from tgnet.network import load_network, synth_grid_city, serialize_network
from tgnet.pipeline import ConfigError, RunConfig

FAST_FW = {"gap_tolerance": 0.01, "max_iterations": 1000}


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=1))
    return path


@pytest.fixture
def city(tmp_path):
    p = tmp_path / "city.json"
    p.write_text(serialize_network(synth_grid_city(6, 6, 0.4, 5, 2)))
    return p


def test_synth_and_extract(tmp_path, capsys):
    cfg = write_json(tmp_path / "s.json", {
        "synth": {"rows": 4, "cols": 5, "spacing_km": 0.5, "arterial_every": 3, "name": "g"},
        "output_dir": "o"})
    assert main(["synth", "--config", str(cfg)]) == 0
    net = load_network(tmp_path / "o" / "synth" / "g.json")
    assert len(net.nodes) == 20
    ext = write_json(tmp_path / "e.json", {"reference": "o/synth/g.json", "output_dir": "o",
                                            "extract": {"mode": "random", "k": 0.5}})
    assert main(["extract", "--config", str(ext), "--seed", "7"]) == 0
    out = tmp_path / "o" / "extract" / "random-0.5-s7.json"
    assert len(load_network(out).links) == len(net.links) // 2


def test_compare_identical_networks(tmp_path, city, capsys):
    cfg = write_json(tmp_path / "run.json", {"reference": city.name, "target": city.name,
                                             "frank_wolfe": FAST_FW})
    assert main(["run", "--config", str(cfg)]) == 0
    res = json.loads((tmp_path / "out" / "compare" / "result.json").read_text())
    total = sum(float(r["mass_veh_km"]) for r in
                csv.DictReader((tmp_path / "out" / "ref" / "tg.csv").open()))
    assert res["tgw_veh_km2"] <= 1e-6 * total * 0.05
    report = json.loads((tmp_path / "out" / "compare" / "report.json").read_text())
    assert report["hotspots"] == []
    assert "tgw =" in capsys.readouterr().out


def test_stages_skip_when_manifest_matches(tmp_path, city):
    cfg = write_json(tmp_path / "run.json", {"reference": city.name, "target": city.name,
                                             "frank_wolfe": FAST_FW})
    assert main(["run", "--config", str(cfg)]) == 0
    flows = tmp_path / "out" / "ref" / "flows.csv"
    stamp = flows.stat().st_mtime_ns
    assert main(["run", "--config", str(cfg)]) == 0
    assert flows.stat().st_mtime_ns == stamp
    log = (tmp_path / "out" / "run.log").read_text()
    assert "assign ref: up to date" in log
    # changing a parameter invalidates the stage
    write_json(cfg, {"reference": city.name, "target": city.name,
                     "frank_wolfe": dict(FAST_FW, gap_tolerance=0.02)})
    assert main(["assign", "--config", str(cfg), "--role", "ref"]) == 0
    assert flows.stat().st_mtime_ns != stamp


def test_assign_non_convergence_exit_4(tmp_path, city):
    cfg = write_json(tmp_path / "run.json", {"reference": city.name,
                                             "frank_wolfe": {"max_iterations": 1}})
    assert main(["demand", "--config", str(cfg)]) == 0
    assert main(["assign", "--config", str(cfg), "--role", "ref"]) == 4
    out = tmp_path / "out" / "ref"
    assert (out / "flows.csv").exists()
    summary = json.loads((out / "assignment.json").read_text())
    assert summary["iterations"] == 1 and not summary["converged"]
    assert json.loads((out / "assign.manifest.json").read_text())["complete"] is False


def test_experiment_class_series(tmp_path, city):
    cases = [{"id": f"G-{c}", "mode": "class", "lowest_retained": c}
             for c in ("tertiary", "secondary", "primary", "trunk")]
    cfg = write_json(tmp_path / "x.json", {"reference": city.name, "frank_wolfe": FAST_FW,
                                           "experiment": {"cases": cases}})
    assert main(["experiment", "--config", str(cfg)]) == 0
    rows = list(csv.DictReader((tmp_path / "out" / "experiment" / "experiment.csv").open()))
    assert len(rows) == 4
    pts = sorted((float(r["length_reduction"]), float(r["tgw"])) for r in rows)
    for (_, lo), (_, hi) in zip(pts[:-1], pts[1:]):
        assert hi >= lo * (1 - 1e-6)


def test_missing_upstream_is_io_error(tmp_path, city, capsys):
    cfg = write_json(tmp_path / "run.json", {"reference": city.name})
    assert main(["assign", "--config", str(cfg), "--role", "ref"]) == 5
    assert "demand" in capsys.readouterr().err


def test_config_errors_exit_2(tmp_path, city):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["demand", "--config", str(bad)]) == 2
    assert main(["demand", "--config", str(write_json(tmp_path / "u.json", {"colour": 1}))]) == 2
    assert main(["demand", "--config", str(tmp_path / "absent.json")]) == 2
    assert main(["validate", "--config",
                 str(write_json(tmp_path / "m.json", {"reference": "nope.json"}))]) == 2
    assert main(["demand", "--config",
                 str(write_json(tmp_path / "g.json", {"reference": city.name,
                                                      "grid": {"cell_size_km": -1}}))]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate", "--config", "x"])
    assert exc.value.code == 2


def test_data_error_exit_3(tmp_path):
    broken = tmp_path / "net.json"
    broken.write_text(json.dumps({"frame": {"x0": 0, "y0": 0, "width": 1, "height": 1},
                                  "nodes": [{"id": "a", "x": 0, "y": 0}],
                                  "links": [{"id": "e", "from": "a", "to": "Z",
                                             "class": "trunk", "geometry": [[0, 0], [1, 0]]}]}))
    cfg = write_json(tmp_path / "run.json", {"reference": "net.json"})
    assert main(["demand", "--config", str(cfg)]) == 3


def test_validate_reports_grid(tmp_path, city, capsys):
    cfg = write_json(tmp_path / "run.json", {"reference": city.name})
    assert main(["validate", "--config", str(cfg)]) == 0
    diag = json.loads(capsys.readouterr().out)
    assert diag["grid"] == {"m": 40, "n": 40, "cell_size_km": 0.05}


def test_out_and_seed_override(tmp_path, city):
    cfg = RunConfig.load(write_json(tmp_path / "run.json", {"reference": city.name, "seed": 1}),
                         seed=9, output_dir=tmp_path / "elsewhere")
    assert cfg.seed == 9 and cfg.output_dir == tmp_path / "elsewhere"
    assert cfg.reference == tmp_path / city.name


def test_thread_cap_env():
    assert apply_thread_cap({}) is None
    assert apply_thread_cap({"TGNET_THREADS": "1"}) == 1
    with pytest.raises(ConfigError):
        apply_thread_cap({"TGNET_THREADS": "zero"})
    with pytest.raises(ConfigError):
        apply_thread_cap({"TGNET_THREADS": "0"})
