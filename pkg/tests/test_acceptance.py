"""Acceptance suite: one or more tests per criterion, summarised by conftest.

Long-running.  Everything executes sequentially; timings assume the machine
is otherwise idle.
"""

import dataclasses
import time

import numpy as np
import pytest

from rnnlink import analysis, pipeline
from rnnlink.cli import main
from rnnlink.config import parse_config, preset
from rnnlink.gradcheck import default_matrix, timed_matrix
from rnnlink.oracle import generate
from rnnlink.topology import TopologyError, build_task, ernn_batch_infer, ernn_sequential_infer

pytestmark = pytest.mark.slow

FRESH_SEED = 0x2A5B
FRESH_SAMPLES = 200_000


# ---------------------------------------------------------------------------
# 1-3: gradients and activation constants
# ---------------------------------------------------------------------------

@pytest.mark.criterion(1, "BPTT gradients match finite differences over the full matrix")
def test_gradient_matrix(note):
    results, seconds = timed_matrix()
    assert len(results) == len(list(default_matrix())) == 4 * 3 * 4 * 3
    worst = max(r.worst for r in results)
    note(f"{len(results)} configs, worst rel err {worst:.2e}, {seconds:.0f} s")
    failed = [r for r in results if not r.passed]
    assert not failed, failed[:3]
    assert worst < 1e-5
    assert seconds < 120


@pytest.mark.criterion(2, "repeated activation passes")
def test_activation_passes(note, tmp_path):
    t0 = time.perf_counter()
    tables = pipeline.cmd_activation_demo(tmp_path / "act", 3)
    elapsed = time.perf_counter() - t0
    sig, tanh, relu = tables["sigmoid"], tables["tanh"], tables["relu"]
    assert len(sig) == 10_001 and sig[0, 0] == -10 and sig[-1, 0] == 10
    assert np.ptp(sig[:, 3]) < 0.06
    assert np.array_equal(relu[:, 2], relu[:, 1]) and np.array_equal(relu[:, 3], relu[:, 1])
    ranges = [np.ptp(tanh[:, k]) for k in range(4)]
    assert all(a > b for a, b in zip(ranges, ranges[1:]))
    assert elapsed < 1.0
    note(f"sigmoid range {np.ptp(sig[:, 3]):.4f}, {elapsed * 1e3:.0f} ms")


@pytest.mark.criterion(3, "measured maximum activation derivatives")
def test_gamma_constants(note):
    grid = analysis.default_grid()
    assert len(grid) == 10_001
    s, t = analysis.max_derivative("sigmoid", grid), analysis.max_derivative("tanh", grid)
    note(f"sigmoid {s!r}, tanh {t!r}")
    assert abs(s - 0.25) < 1e-9 and abs(t - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# 4-6: PAM2 NARX experiments
# ---------------------------------------------------------------------------

SEEDS = (0, 1, 2)


def _train(cfg):
    return pipeline.train_model(cfg, generate(cfg.oracle))


@pytest.fixture(scope="module")
def narx_runs():
    """LSTM and vanilla NARX of equal depth, width and 0.3 dropout."""
    base = preset("pam2_narx").replace(model={"dropout": 0.3})
    runs = {}
    for seed in SEEDS:
        for cell in ("vanilla", "lstm"):
            runs[(cell, 4, seed)] = _train(base.replace(model={"cell": cell, "K": 4},
                                                        train={"seed": seed}))
    for cell in ("vanilla", "lstm"):
        runs[(cell, 10, 0)] = _train(base.replace(model={"cell": cell, "K": 10}))
    return runs


def _test_nrmse(res):
    return pipeline.evaluate(res.run, generate(res.run.config.oracle))["v_rx"][1]


@pytest.mark.criterion(4, "LSTM beats vanilla RNN at K=4; both accurate at K=10")
def test_lstm_beats_vanilla_at_short_memory(narx_runs, note):
    wins = 0
    pairs = []
    for seed in SEEDS:
        v = _test_nrmse(narx_runs[("vanilla", 4, seed)])
        lstm = _test_nrmse(narx_runs[("lstm", 4, seed)])
        wins += lstm < v
        pairs.append(f"{lstm:.4f}/{v:.4f}")
    note(f"K=4 lstm/vanilla test nrmse per seed {', '.join(pairs)}")
    assert wins >= 2


@pytest.mark.criterion(4, "LSTM beats vanilla RNN at K=4; both accurate at K=10")
def test_both_cells_accurate_at_k10(narx_runs, note):
    scores = {c: _test_nrmse(narx_runs[(c, 10, 0)]) for c in ("vanilla", "lstm")}
    note(f"K=10 lstm {scores['lstm']:.4f}, vanilla {scores['vanilla']:.4f}")
    assert all(s < 0.08 for s in scores.values())


@pytest.mark.criterion(5, "test error plateaus once K covers the channel delay")
def test_memory_length_plateau(tmp_path, note):
    cfg = preset("pam2_narx").replace(oracle={"delay": 40}, model={"dropout": 0.3},
                                      sweep={"k": "20,40,60", "seeds": "0,1,2"})
    t0 = time.perf_counter()
    rows = pipeline.sweep_runs(cfg, "k")
    seconds = time.perf_counter() - t0
    pipeline.write_sweep_csv(rows, tmp_path / "k_sweep.csv")
    assert all(r["status"] == "ok" for r in rows)
    mean = {k: np.mean([float(r["test_nrmse"]) for r in rows if r["value"] == k])
            for k in (20, 40, 60)}
    note(f"mean test nrmse over 3 seeds K=20 {mean[20]:.4f}, K=40 {mean[40]:.4f}, "
         f"K=60 {mean[60]:.4f}, {seconds:.0f} s")
    assert abs(mean[60] - mean[40]) / mean[40] < 0.10
    assert mean[20] >= 1.5 * mean[40]
    assert seconds < 20 * 60


@pytest.mark.criterion(6, "Adam and RMSProp reach the loss threshold at K=5, SGD does not")
def test_optimizer_study(tmp_path, note):
    cfg = preset("pam2_narx").replace(model={"K": 5}, train={"loss_threshold": 1e-3},
                                      sweep={"optimizer": "sgd,adam,rmsprop"})
    rows = pipeline.sweep_runs(cfg, "optimizer")
    pipeline.write_sweep_csv(rows, tmp_path / "optimizer_sweep.csv")
    text = (tmp_path / "optimizer_sweep.csv").read_text()
    by = {r["value"]: r for r in rows}
    assert all(r["status"] == "ok" for r in rows) and text.count("\n") == 4
    note(", ".join(f"{k}: threshold epoch {by[k]['epochs_to_threshold'] or 'none'}, "
                   f"final loss {float(by[k]['final_train_loss']):.2e}" for k in by))
    assert by["adam"]["epochs_to_threshold"] != ""
    assert by["rmsprop"]["epochs_to_threshold"] != ""
    assert by["sgd"]["epochs_to_threshold"] == ""
    assert by["sgd"]["epochs_run"] == cfg.train.epochs


def test_pam2_preset_converges(narx_preset):
    res, test = narx_preset
    assert res.error is None and test < 0.05


@pytest.fixture(scope="module")
def narx_preset():
    res = _train(preset("pam2_narx"))
    return res, _test_nrmse(res)


# ---------------------------------------------------------------------------
# 7, 8, 10: the PAM4 ERNN preset end to end
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pam4(tmp_path_factory):
    out = tmp_path_factory.mktemp("pam4")
    cfg = preset("pam4_ernn")
    t0 = time.perf_counter()
    ds = generate(cfg.oracle)
    res = pipeline.train_model(cfg, ds)
    fresh = generate(dataclasses.replace(cfg.oracle, n_symbols=FRESH_SAMPLES // 16,
                                         seed=FRESH_SEED))
    pred = pipeline.predict_dataset(res.run, fresh)["v_ro"]
    truth = fresh.column("v_ro")
    cmp = pipeline.compare_eyes(pred, truth, cfg, out / "eye")
    seconds = time.perf_counter() - t0
    return dict(cfg=cfg, ds=ds, res=res, fresh=fresh, pred=pred, truth=truth, cmp=cmp,
                seconds=seconds, out=out)


@pytest.mark.criterion(7, "PAM4 ERNN eye agreement on a fresh 200k-sample PRBS")
def test_pam4_eye_agreement(pam4, note):
    cfg, cmp = pam4["cfg"], pam4["cmp"]
    assert len(pam4["ds"]) == 10_000 and len(pam4["pred"]) == FRESH_SAMPLES
    assert pam4["res"].error is None
    w = pipeline.warmup_length(pam4["res"].run)
    note(f"nrmse {analysis.nrmse(pam4['pred'][w:], pam4['truth'][w:]):.4f}, "
         f"height delta {cmp.height_delta:.3f}, width delta {cmp.width_delta:.3f}, "
         f"phase {cmp.phase_bins} bins, {pam4['seconds']:.0f} s")
    assert cfg.eye.bins_phase == 256
    assert not cmp.truth.closed and len(cmp.truth.heights) == 3
    assert cmp.height_delta < 0.05
    assert cmp.width_delta < 0.05
    assert cmp.phase_bins <= 2
    assert pam4["seconds"] < 30 * 60


@pytest.mark.criterion(7, "PAM4 ERNN eye agreement on a fresh 200k-sample PRBS")
def test_pam4_preset_test_split_nrmse(pam4, note):
    test = pipeline.evaluate(pam4["res"].run, pam4["ds"])["v_ro"][1]
    note(f"own test split v_ro nrmse {test:.4f}")
    assert test < 0.08


@pytest.mark.criterion(8, "windowed readout error grows along the 200k-sample prediction")
def test_error_accumulation(pam4, note):
    report = analysis.drift_report(pam4["pred"], pam4["truth"], 1000)
    analysis.write_drift_csv(report, pam4["out"] / "drift.csv")
    assert report.n_windows == FRESH_SAMPLES // 1000 and report.defined
    half = report.n_windows // 2
    note(f"spearman trend {report.trend:+.3f}, mean rmse first/second half "
         f"{report.rmse[:half].mean():.4g}/{report.rmse[half:].mean():.4g}")
    assert report.trend > 0


@pytest.mark.criterion(10, "batch inference contract and throughput")
def test_batch_equals_sequential(pam4):
    run = pam4["res"].run
    task = build_task(pam4["fresh"].slice(0, 20_000), run.normalizer, run.config.model)
    windows = np.stack([task.exo[s:s + 1180] for s in range(0, 18_000, 1000)])
    assert np.array_equal(ernn_batch_infer(run.net, windows),
                          ernn_sequential_infer(run.net, windows))


@pytest.mark.criterion(10, "batch inference contract and throughput")
def test_narx_batch_rejected(narx_preset):
    run = narx_preset[0].run
    with pytest.raises(TopologyError, match="NARX cannot utilize batch inference"):
        pipeline.predict_dataset(run, generate(run.config.oracle), "batch")


@pytest.mark.criterion(10, "batch inference contract and throughput")
def test_throughput_logged(pam4, narx_preset, note):
    log = pam4["out"] / "benchmark.log"
    res = pipeline.benchmark_log(narx_preset[0].run, pam4["res"].run, 100_000, log)
    text = log.read_text()
    assert "throughput_ratio = " in text and res["samples"] == 100_000
    assert np.isfinite(res["throughput_ratio"]) and res["throughput_ratio"] > 0
    note(f"ERNN batch / NARX step loop throughput {res['throughput_ratio']:.1f}x")


# ---------------------------------------------------------------------------
# 9: byte-identical reruns
# ---------------------------------------------------------------------------

DET_NARX = """
[oracle]
n_symbols = 150
delay = 4
[model]
layers = 2
hidden = 6
K = 6
[train]
epochs = 3
batch = 8
schedule = scheduled
p_end = 0.5
decay_epochs = 2
[sweep]
k = 4,6
"""

DET_ERNN = """
[oracle]
modulation = pam4
n_symbols = 200
[model]
topology = ernn
layers = 2
hidden = 6
K = 50
[train]
epochs = 3
regime = tbptt
batch = 2
[eye]
channel = v_ro
"""


def _pipeline(d):
    d.mkdir()
    (d / "narx.ini").write_text(DET_NARX)
    (d / "ernn.ini").write_text(DET_ERNN)
    steps = [
        ("generate", "--config", d / "narx.ini", "--out", d / "narx.csv"),
        ("generate", "--config", d / "ernn.ini", "--out", d / "ernn.csv"),
        ("train", "--config", d / "narx.ini", "--data", d / "narx.csv", "--checkpoint", d / "n.ckpt"),
        ("train", "--config", d / "ernn.ini", "--data", d / "ernn.csv", "--checkpoint", d / "e.ckpt"),
        ("infer", "--checkpoint", d / "n.ckpt", "--data", d / "narx.csv", "--out", d / "n_pred.csv"),
        ("infer", "--checkpoint", d / "e.ckpt", "--data", d / "ernn.csv", "--out", d / "e_pred.csv"),
        ("infer", "--checkpoint", d / "e.ckpt", "--data", d / "ernn.csv", "--mode", "batch",
         "--out", d / "e_batch.csv"),
        ("eye", "--config", d / "ernn.ini", "--waveform", d / "e_pred.csv", "--data", d / "ernn.csv",
         "--out", d / "eye"),
        ("sweep", "--config", d / "narx.ini", "--sweep", "k", "--out", d / "sweep.csv"),
        ("activation-demo", "--out", d / "act"),
    ]
    for step in steps:
        assert main([str(a) for a in step]) == 0, step
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.suffix != ".ini"}


@pytest.mark.criterion(9, "reruns produce byte-identical outputs")
def test_reruns_byte_identical(tmp_path, note):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    kinds = {n.rsplit(".", 1)[1] for n in a}
    assert {"csv", "ppm", "ckpt"} <= kinds
    assert "eye_drift.csv" in a
    assert a.keys() == b.keys()
    differ = [n for n in a if a[n] != b[n]]
    note(f"{len(a)} files compared")
    assert not differ
