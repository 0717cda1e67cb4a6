import csv
import json

import numpy as np
import pytest

from cmfdsim.errors import ConfigurationError, ParameterError
from cmfdsim.experiment import (DEV_WINDOW, METRICS_HEADER, ExperimentConfig, MetricsRecord, build_data,
                                dump_functions, export, run, run_logged, summarize, window_means)

SMALL = dict(per_class=60, test_per_class=20, per_device=40, public_size=50, models="8", batch_size=20,
             distill_batch_size=25)


def small(**kw):
    return ExperimentConfig(**{**SMALL, **kw})


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ExperimentConfig(algorithm="fedprox")
    with pytest.raises(ConfigurationError):
        ExperimentConfig(preset="R9")
    with pytest.raises(ConfigurationError):
        ExperimentConfig(algorithm="param_avg", models="5x64,5x16")
    with pytest.raises(ConfigurationError):
        ExperimentConfig(models="3x64")
    with pytest.raises(ConfigurationError):
        ExperimentConfig(models="abc")
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"algorithm": "cmfd", "learning_rate": 1})


def test_model_spec_parsing():
    cfg = ExperimentConfig(models="5x64,5x16-8")
    assert cfg.hidden_layers() == [(64,)] * 5 + [(16, 8)] * 5
    assert ExperimentConfig(models="32").hidden_layers() == [(32,)] * 10


def test_rate_defaults_per_algorithm():
    assert ExperimentConfig(algorithm="meta", preset="R1").sharing_rate() == 0.25
    assert ExperimentConfig(algorithm="meta").schedule() == "inv_t"
    assert ExperimentConfig(algorithm="toy").learning_rate() == 0.05
    assert ExperimentConfig(algorithm="cmfd", eps=0.5).sharing_rate() == 0.5


def test_resolved_config_records_seeds(tmp_path):
    cfg = small(epochs=1, seed=3)
    r = cfg.resolved()
    assert r["seeds"] == cfg.seeds() and len(set(r["seeds"].values())) == len(r["seeds"])
    assert r["schema_version"] and r["resolved"]["eps"] == cfg.sharing_rate()
    path = tmp_path / "c.json"
    path.write_text(json.dumps(r))
    assert ExperimentConfig.from_json_file(path) == cfg


def test_bad_config_file(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_json_file(tmp_path / "bad.json")


def test_test_split_disjoint_from_devices():
    parts, public, test = build_data(small())
    used = set(np.concatenate([p.source_index for p in parts]))
    assert used.isdisjoint(test.source_index)
    assert test.classes() == set(range(10))


def test_summary_by_hand():
    recs = [MetricsRecord(e, (0.6, 0.7), (1.0, 1.0)) for e in range(5)]
    s = summarize(recs)
    assert s["acc"] == pytest.approx(0.65)
    assert s["max_min"] == pytest.approx(0.1)
    assert s["dev"] == 0.0 and s["dev_short"] and s["dev_window"] == 5
    assert s["top5"] == 1.0
    with pytest.raises(ParameterError):
        summarize([])


def test_dev_uses_last_window():
    accs = [(0.0, 0.0)] * 10 + [(float(e % 2), 0.5) for e in range(DEV_WINDOW)]
    s = summarize([MetricsRecord(e, a) for e, a in enumerate(accs)])
    assert s["dev"] == pytest.approx(0.25)  # std 0.5 on device 0, 0 on device 1
    assert not s["dev_short"]


def test_window_means():
    assert window_means(list(range(100)), 50) == (24.5, 74.5)
    with pytest.raises(ParameterError):
        window_means([1.0], 50)


def test_zero_epochs_summarizes_initial_models():
    res = run(small(epochs=0))
    assert [r.epoch for r in res.records] == [0]
    assert res.summary["bytes_total"] == 0


def test_cadence_keeps_bytes():
    every = run(small(epochs=4))
    sparse = run(small(epochs=4, cadence=2))
    assert [r.epoch for r in sparse.records] == [0, 2, 4]
    assert every.summary["bytes_total"] == sparse.summary["bytes_total"]
    assert every.records[-1].device_acc == sparse.records[-1].device_acc


def test_replay_is_byte_identical(tmp_path):
    a = run(small(epochs=2, threads=1))
    b = run(small(epochs=2, threads=3))
    export(a, tmp_path / "a")
    export(b, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a.summary == b.summary


def test_export_files(tmp_path):
    res = run_logged(small(epochs=2, audit=True), tmp_path)
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == METRICS_HEADER
    assert len(rows) == 1 + 3 * 10
    assert rows[1][4] == "" and rows[-1][4] != ""
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert json.loads(lines[-1])["epoch"] == 2
    assert len((tmp_path / "broadcasts.jsonl").read_text().splitlines()) == 20
    assert "done in" in (tmp_path / "run.log").read_text()
    assert json.loads((tmp_path / "summary.json").read_text())["epochs"] == 2
    assert not any("time" in k for k in json.loads((tmp_path / "config.resolved.json").read_text()))


def test_param_avg_run_and_shared_init():
    res = run(small(algorithm="param_avg", epochs=1))
    assert res.records[-1].bytes == 20 * 4 * res.models[0].n_params
    init = run(small(algorithm="param_avg", epochs=0))
    flats = [m.get_flat() for m in init.models]
    assert all(np.array_equal(flats[0], f) for f in flats)


def test_cmfd_dynamic_topology():
    res = run(small(epochs=2, topology="ba", m=2, dynamic=True))
    assert len(res.records) == 3


def test_meta_run_and_dump(tmp_path):
    res = run(ExperimentConfig(algorithm="meta", preset="R1", epochs=200, grid_size=16))
    assert res.summary["distance_violations"] == 0
    assert res.records[-1].d_t == res.trace.distance[-1]
    paths = dump_functions(res, tmp_path)
    assert len(paths) == 10
    export(res, tmp_path)
    assert (tmp_path / "meta_trace.csv").exists()
    with pytest.raises(ConfigurationError):
        dump_functions(run(small(epochs=0)), tmp_path)


def test_meta_kl_run():
    res = run(ExperimentConfig(algorithm="meta", preset="R3", epochs=100, grid_size=8, loss="kl"))
    assert res.summary["best_violations"] == 0


def test_toy_run(tmp_path):
    res = run(ExperimentConfig(algorithm="toy"))
    assert np.all(np.abs(np.array(res.summary["final_products"]) - 1) < 1e-3)
    export(res, tmp_path)
    assert (tmp_path / "toy_trajectory.csv").read_text().startswith("step,wa_0")
    with pytest.raises(ConfigurationError):
        run(ExperimentConfig(algorithm="toy", toy_init="1,2,3"))


def test_errors_carry_algorithm_context():
    with pytest.raises(ConfigurationError, match=r"\[cmfd\]"):
        run(small(epochs=1, per_device=10_000))
