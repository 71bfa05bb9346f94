import time
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from edgeqst.bench import BenchStats, summarize_stats, throughput, time_engine
from edgeqst.datagen import GenConfig, generate_dataset
from edgeqst.nn import model_init
from edgeqst.pipeline import FP32Engine, OracleEngine, evaluate_fidelity_sweep
from edgeqst.report import (
    emit_csv,
    emit_svg,
    examples_csv,
    read_bench_csv,
    read_fidelity_csv,
    wigner_csv,
)

SVG = "{http://www.w3.org/2000/svg}"


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(GenConfig(n_examples=300, seq_len=32, global_seed=5))


class SleepEngine:
    tag = "sleep"

    def infer_one(self, seq):
        time.sleep(0.001)


class CountingEngine:
    tag = "count"

    def __init__(self):
        self.calls = 0

    def infer_one(self, seq):
        self.calls += 1


def test_summarize_examples():
    s = summarize_stats([1, 2, 3, 4, 5])
    assert (s.mean_ms, s.median_ms, s.p95_ms, s.n) == (3.0, 3.0, 5.0, 5)
    s = summarize_stats([2.5])
    assert s.mean_ms == s.median_ms == s.p95_ms == 2.5
    assert summarize_stats([0.7] * 9).std_ms == 0.0
    with pytest.raises(ValueError):
        summarize_stats([])
    x = np.random.default_rng(0).exponential(size=1000)
    s = summarize_stats(x)
    assert s.median_ms <= s.p95_ms
    assert s.p95_ms == np.sort(x)[949]
    assert s.std_ms == pytest.approx(np.std(x))


def test_time_engine_warmup_and_cycling(ds):
    e = CountingEngine()
    run = time_engine(e, ds.subset(np.arange(7)), n=50, warmup=13)
    assert e.calls == 63
    assert run.stats.n == 50 and run.stats.warmup == 13 and len(run.latencies_ms) == 50
    with pytest.raises(ValueError):
        time_engine(e, ds, n=0)


def test_time_engine_consistency(ds):
    run = time_engine(FP32Engine(model_init("tiny", 0)), ds, n=2000, warmup=20)
    s = run.stats
    assert s.total_s == pytest.approx(s.n * s.mean_ms / 1e3, rel=0.05)
    again = summarize_stats(run.latencies_ms, s.engine, s.warmup, s.total_s)
    assert again == s
    assert 0 < s.median_ms <= s.p95_ms


def test_sleep_mock_calibration(ds):
    s = time_engine(SleepEngine(), ds, n=300, warmup=5).stats
    assert 1.0 <= s.mean_ms <= 1.5


def test_timed_loop_does_not_accumulate_memory(ds):
    run = time_engine(FP32Engine(model_init("tiny", 0)), ds, n=500, warmup=10, track_memory=True)
    assert run.retained_bytes is not None
    assert run.retained_bytes < 16 * 1024


def test_throughput_positive(ds):
    e = FP32Engine(model_init("tiny", 0))
    assert throughput(e, ds, n=500, threads=2, batch=32) > 0


def test_bench_csv(tmp_path):
    stats = [BenchStats("fp32", 10, 0.5, 0.4, 0.9, 0.1, 0.005, 2),
             BenchStats("int8", 10, 1.25, 1.2, 1.5, 0.05, 0.0125, 2)]
    path = tmp_path / "b.csv"
    emit_csv(stats, path)
    text = path.read_bytes()
    assert text.split(b"\n")[0] == b"engine,n,mean_ms,median_ms,p95_ms,std_ms,total_s"
    assert b"\r" not in text
    emit_csv(stats, tmp_path / "b2.csv")
    assert (tmp_path / "b2.csv").read_bytes() == text
    back = read_bench_csv(path)
    assert [(s.engine, s.mean_ms, s.total_s) for s in back] == [(s.engine, s.mean_ms, s.total_s) for s in stats]


def test_fidelity_csv(tmp_path, ds):
    sub = ds.subset(np.arange(20))
    rep = evaluate_fidelity_sweep(OracleEngine(sub), sub)
    path = tmp_path / "f.csv"
    emit_csv(rep, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "bin_lo_db,bin_hi_db,count,mean_fidelity,std_fidelity"
    rows = read_fidelity_csv(path)
    assert len(rows) == 10 and sum(int(r["count"]) for r in rows) == 20
    for r in rows:
        if r["count"] == "0":
            assert r["mean_fidelity"] == "" and r["std_fidelity"] == ""
    emit_csv(rep, tmp_path / "f2.csv")
    assert (tmp_path / "f2.csv").read_bytes() == path.read_bytes()
    assert examples_csv(rep).splitlines()[0] == "index,true_r,true_theta,true_nbar,est_r,est_theta,est_nbar,fidelity"
    with pytest.raises(TypeError):
        emit_csv({"a": 1}, path)


def test_csv_write_error_names_path(tmp_path):
    bad = tmp_path / "missing" / "x.csv"
    with pytest.raises(OSError, match="missing"):
        emit_csv(BenchStats("a", 1, 1, 1, 1, 0, 0.001), bad)


def test_wigner_csv():
    xs = np.array([-1.0, 1.0])
    ps = np.array([0.0, 2.0])
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert wigner_csv(xs, ps, w).splitlines() == ["x,p,w", "-1.0,0.0,1.0", "1.0,0.0,2.0", "-1.0,2.0,3.0", "1.0,2.0,4.0"]


def test_fidelity_svg_structure(tmp_path, ds):
    rep = evaluate_fidelity_sweep(OracleEngine(ds), ds)
    path = tmp_path / "f.svg"
    emit_svg(rep, path, "fidelity")
    root = ET.parse(path).getroot()
    assert root.tag == SVG + "svg"
    assert len(root.findall(f".//{SVG}polyline[@class='mean']")) == 1
    assert len(root.findall(f".//{SVG}path[@class='band']")) == 1
    assert root.findall(f".//{SVG}g[@class='legend']")
    emit_svg(rep, tmp_path / "g.svg", "fidelity")
    assert (tmp_path / "g.svg").read_bytes() == path.read_bytes()
    emit_svg(rep, tmp_path / "s.svg", "fidelity", stamp="run 7")
    assert b"run 7" in (tmp_path / "s.svg").read_bytes()


def test_latency_svg_structure(tmp_path):
    stats = [BenchStats("fp32", 10, 0.5, 0.4, 0.9, 0.1, 0.005),
             BenchStats("int8", 10, 1.25, 1.2, 1.5, 0.05, 0.0125)]
    path = tmp_path / "l.svg"
    emit_svg(stats, path)
    root = ET.parse(path).getroot()
    assert len(root.findall(f".//{SVG}rect[@class='bar']")) == 2
    labels = root.findall(f".//{SVG}text[@class='value']")
    assert [t.text for t in labels] == ["0.500 ms", "1.250 ms"]


def test_svg_empty_data_rejected(tmp_path):
    with pytest.raises(ValueError):
        emit_svg([], tmp_path / "x.svg", "latency")
    with pytest.raises(ValueError):
        emit_svg([("a", [(0, 1, 0, None, None)])], tmp_path / "x.svg", "fidelity")
