"""Command implementations shared by the CLI and the acceptance suite."""

from __future__ import annotations

import copy
import csv
import hashlib
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis
from .config import RunConfig
from .gradcheck import format_report, timed_matrix
from .oracle import COLUMNS, WaveformDataset, generate, write_dataset
from .topology import (
    PredictedWaveform, TopologyError, build_task, ernn_batch_infer, ernn_predict_readout,
    input_channels, narx_predict, output_channels, read_waveform, segment_windows,
    stitch_segments, write_waveform,
)
from .training import (
    NumericError, TrainRun, fit_normalizer, load_checkpoint, new_run, save_checkpoint,
    train_epoch, train_length,
)

BATCH_SEGMENT = 1000


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, out) -> WaveformDataset:
    ds = generate(cfg.oracle)
    o = cfg.oracle
    comment = (f"oracle dataset: modulation={o.modulation} prbs{o.prbs_order} seed={o.seed} "
               f"symbols={o.n_symbols} oversample={o.oversample}")
    write_dataset(ds, out, comment)
    return ds


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

def _snapshot(run: TrainRun):
    return ({k: v.copy() for k, v in run.net.params().items()},
            copy.deepcopy(run.optimizer.state), run.optimizer.t, run.rng.state,
            run.epoch, list(run.loss_history))


def _restore(run: TrainRun, snap) -> None:
    params, opt_state, t, rng_state, epoch, history = snap
    for k, p in run.net.params().items():
        p[...] = params[k]
    run.optimizer.state = opt_state
    run.optimizer.t = t
    run.rng.state = rng_state
    run.epoch = epoch
    run.loss_history = history


@dataclass
class TrainResult:
    run: TrainRun
    epochs_to_threshold: int | None
    seconds: float
    error: str | None = None


def train_model(cfg: RunConfig, ds: WaveformDataset, *, on_epoch=None) -> TrainResult:
    """Fit a fresh model; on a non-finite loss the last good state is kept."""
    tc = cfg.train
    norm = fit_normalizer(ds, tc.train_fraction)
    task = build_task(ds, norm, cfg.model)
    n_train = train_length(len(ds), tc.train_fraction)
    run = new_run(cfg, norm, task.n_in, task.n_out)
    reached = None
    t0 = time.perf_counter()
    for _ in range(tc.epochs):
        snap = _snapshot(run)
        try:
            loss = train_epoch(run, task, n_train)
        except NumericError as exc:
            _restore(run, snap)
            return TrainResult(run, reached, time.perf_counter() - t0, str(exc))
        if on_epoch is not None:
            on_epoch(run, loss)
        if tc.loss_threshold > 0 and loss < tc.loss_threshold:
            reached = run.epoch
            break
    return TrainResult(run, reached, time.perf_counter() - t0)


def write_loss_csv(run: TrainRun, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "loss"))
        for k, loss in enumerate(run.loss_history, start=1):
            w.writerow((k, repr(float(loss))))


def loss_csv_path(checkpoint) -> Path:
    p = Path(checkpoint)
    return p.with_name(p.stem + ".loss.csv")


def cmd_train(cfg: RunConfig, data, checkpoint_out) -> TrainResult:
    from .oracle import read_dataset
    ds = read_dataset(data)
    result = train_model(cfg, ds)
    save_checkpoint(result.run, checkpoint_out)
    write_loss_csv(result.run, loss_csv_path(checkpoint_out))
    return result


def predict_dataset(run: TrainRun, ds, mode: str = "readout") -> dict[str, np.ndarray]:
    """Denormalised predictions over a whole dataset.

    ``readout``: NARX runs closed loop after ``max(K_x, K_y)`` true steps;
    ERNN carries its hidden state from the first sample and its first ``K``
    outputs are the truth.  ``batch`` (ERNN only) cuts the input into
    overlapping segments that are evaluated together.
    """
    model = run.config.model
    if mode not in ("readout", "batch"):
        raise ValueError(f"unknown inference mode {mode!r}")
    task = build_task(ds, run.normalizer, model)
    if model.topology == "narx":
        if mode == "batch":
            raise TopologyError("NARX cannot utilize batch inference")
        out = narx_predict(run.net, task, task.first)
    elif mode == "readout":
        out = ernn_predict_readout(run.net, task, model.K)
    else:
        windows, n = segment_windows(task.exo, BATCH_SEGMENT, 2 * model.K)
        out = stitch_segments(ernn_batch_infer(run.net, windows), n, 2 * model.K)
        out[:model.K] = task.targets[:model.K]
    return {ch: run.normalizer.denormalize(ch, out[:, k])
            for k, ch in enumerate(output_channels(model))}


def warmup_length(run: TrainRun) -> int:
    m = run.config.model
    return max(m.lags_x, m.lags_y) if m.topology == "narx" else m.K


def evaluate(run: TrainRun, ds: WaveformDataset) -> dict[str, tuple[float, float]]:
    """(train, test) NRMSE per output channel on the run's own split.

    NARX test predictions restart from a zero state at the split with true
    history, so they measure free-running error over the held-out part only.
    """
    model = run.config.model
    n = len(ds)
    n_train = train_length(n, run.config.train.train_fraction)
    w = warmup_length(run)
    if model.topology == "narx":
        train_pred = predict_dataset(run, ds.slice(0, n_train))
        test_ds = ds.slice(n_train - w, n)
        test_pred = predict_dataset(run, test_ds)
        out = {}
        for ch, p in train_pred.items():
            tr = analysis.nrmse(p[w:], ds.column(ch)[w:n_train])
            te = analysis.nrmse(test_pred[ch][w:], test_ds.column(ch)[w:])
            out[ch] = (tr, te)
        return out
    pred = predict_dataset(run, ds)
    return {ch: (analysis.nrmse(p[w:n_train], ds.column(ch)[w:n_train]),
                 analysis.nrmse(p[n_train:], ds.column(ch)[n_train:]))
            for ch, p in pred.items()}


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def checkpoint_id(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.blake2b(fh.read(), digest_size=8).hexdigest()


class _TableDataset:
    """Dataset-like view over a CSV that may lack some columns."""

    def __init__(self, wf: PredictedWaveform):
        self.wf = wf
        self.dt = wf.dt

    def __len__(self):
        return len(self.wf)

    def column(self, name):
        if name in self.wf.channels:
            return self.wf.channels[name]
        # unknown targets never influence ERNN inputs; zeros keep shapes valid
        return np.zeros(len(self.wf))


def cmd_infer(checkpoint, data, mode: str, out) -> tuple[PredictedWaveform, dict[str, float]]:
    run = load_checkpoint(checkpoint)
    model = run.config.model
    table = read_waveform(data)
    need = list(input_channels(model))
    if model.topology == "narx":
        need.append("v_rx")             # warmup history
    missing = [c for c in need if c not in table.channels]
    if missing:
        raise TopologyError(f"checkpoint needs columns {missing} that {data} does not have")
    preds = predict_dataset(run, _TableDataset(table), mode)
    w = warmup_length(run)
    scores = {}
    for ch, p in preds.items():
        if ch in table.channels and len(p) > w:
            scores[ch] = analysis.nrmse(p[w:], table.channels[ch][w:])
    channels = {c: table.channels[c] for c in input_channels(model)}
    channels.update(preds)
    extras = {f"nrmse_{ch}": repr(v) for ch, v in scores.items()}
    wf = PredictedWaveform(table.dt, channels,
                           f"checkpoint {checkpoint_id(checkpoint)} mode {mode}",
                           tuple(preds), extras)
    write_waveform(wf, out)
    return wf, scores


# ---------------------------------------------------------------------------
# eye
# ---------------------------------------------------------------------------

@dataclass
class EyeComparison:
    prediction: analysis.EyeMetrics
    truth: analysis.EyeMetrics | None
    height_delta: float | None = None
    width_delta: float | None = None
    phase_bins: float | None = None


def compare_eyes(pred, truth, cfg: RunConfig, prefix=None) -> EyeComparison:
    """Fold both waveforms on a shared voltage axis and compare their metrics."""
    e = cfg.eye
    u = cfg.ui_samples
    lo = float(np.min(pred)) if truth is None else float(min(np.min(pred), np.min(truth)))
    hi = float(np.max(pred)) if truth is None else float(max(np.max(pred), np.max(truth)))
    eye_p = analysis.fold_eye(pred, u, e.bins_phase, e.bins_volt, v_range=(lo, hi))
    m_p = analysis.eye_metrics(eye_p, cfg.levels)
    rows = analysis.metrics_rows("prediction", m_p)
    if prefix is not None:
        analysis.write_ppm(eye_p, f"{prefix}_prediction.ppm")
    if truth is None:
        if prefix is not None:
            analysis.write_metrics_csv(f"{prefix}_metrics.csv", rows)
        return EyeComparison(m_p, None)
    eye_t = analysis.fold_eye(truth, u, e.bins_phase, e.bins_volt, v_range=(lo, hi))
    m_t = analysis.eye_metrics(eye_t, cfg.levels)
    cmp = EyeComparison(m_p, m_t, analysis.relative_delta(m_p.height, m_t.height),
                        analysis.relative_delta(m_p.width, m_t.width),
                        analysis.phase_bin_distance(m_p, m_t, e.bins_phase))
    if prefix is not None:
        analysis.write_ppm(eye_t, f"{prefix}_truth.ppm")
        rows += analysis.metrics_rows("truth", m_t)
        rows += [("delta", "eye_height_rel", repr(cmp.height_delta)),
                 ("delta", "eye_width_rel", repr(cmp.width_delta)),
                 ("delta", "optimal_phase_bins", repr(cmp.phase_bins))]
        analysis.write_metrics_csv(f"{prefix}_metrics.csv", rows)
    return cmp


DRIFT_WINDOW = 1000


def cmd_eye(waveform, cfg: RunConfig, out_prefix, truth_path=None) -> EyeComparison:
    """Eye of ``cfg.eye.channel`` in ``waveform``; truth comes from ``truth_path``
    or, for plain datasets, from the waveform file itself.  With a truth
    waveform long enough, a windowed-RMSE drift report is written as well."""
    ch = cfg.eye.channel
    wf = read_waveform(waveform)
    pred = wf.column(ch)
    truth = None
    if truth_path is not None:
        truth = read_waveform(truth_path).column(ch)
        if len(truth) != len(pred):
            raise analysis.AnalysisError(
                f"truth has {len(truth)} samples, prediction has {len(pred)}")
    cmp = compare_eyes(pred, truth, cfg, out_prefix)
    if truth is not None and len(pred) >= 2 * DRIFT_WINDOW:
        report = analysis.drift_report(pred, truth, DRIFT_WINDOW)
        analysis.write_drift_csv(report, f"{out_prefix}_drift.csv")
    return cmp


# ---------------------------------------------------------------------------
# gradient check, sweeps, activation demo, benchmark
# ---------------------------------------------------------------------------

def cmd_gradcheck(cfg: RunConfig | None = None, matrix=None) -> tuple[bool, str]:
    seed = 0 if cfg is None else cfg.train.seed
    results, seconds = timed_matrix(matrix=matrix, seed=seed)
    return all(r.passed for r in results), format_report(results, seconds)


SWEEP_FIELDS = ("sweep", "value", "seed", "status", "epochs_run", "epochs_to_threshold",
                "final_train_loss", "train_nrmse", "test_nrmse", "error")


def _sweep_config(cfg: RunConfig, kind: str, value, seed: int) -> RunConfig:
    if kind == "k":
        return cfg.replace(model={"K": value}, train={"seed": seed})
    if kind == "optimizer":
        return cfg.replace(train={"optimizer": value, "seed": seed})
    if kind == "cell":
        return cfg.replace(model={"cell": value}, train={"seed": seed})
    raise ValueError(f"unknown sweep {kind!r}; choose k, optimizer or cell")


def sweep_runs(cfg: RunConfig, kind: str, ds: WaveformDataset | None = None, on_row=None):
    if kind not in ("k", "optimizer", "cell"):
        raise ValueError(f"unknown sweep {kind!r}; choose k, optimizer or cell")
    ds = generate(cfg.oracle) if ds is None else ds
    primary = output_channels(cfg.model)[-1]
    rows = []
    for value in cfg.sweep.values(kind):
        for seed in cfg.sweep.seed_list():
            row = dict.fromkeys(SWEEP_FIELDS, "")
            row.update(sweep=kind, value=value, seed=seed)
            try:
                sub = _sweep_config(cfg, kind, value, seed)
                res = train_model(sub, ds)
                scores = evaluate(res.run, ds)[primary]
                row.update(status="ok" if res.error is None else "numeric_failure",
                           epochs_run=res.run.epoch,
                           epochs_to_threshold="" if res.epochs_to_threshold is None
                           else res.epochs_to_threshold,
                           final_train_loss=repr(res.run.loss_history[-1])
                           if res.run.loss_history else "",
                           train_nrmse=repr(scores[0]), test_nrmse=repr(scores[1]),
                           error=res.error or "")
            except Exception as exc:         # recorded; the sweep goes on
                row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, SWEEP_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in SWEEP_FIELDS})


def cmd_sweep(cfg: RunConfig, kind: str, out, on_row=None):
    rows = sweep_runs(cfg, kind, on_row=on_row)
    write_sweep_csv(rows, out)
    return rows


ACTIVATION_KINDS = ("sigmoid", "tanh", "relu")


def cmd_activation_demo(out_prefix, passes: int = 3, kinds=ACTIVATION_KINDS) -> dict[str, np.ndarray]:
    tables = {}
    for kind in kinds:
        table = analysis.activation_pass_demo(kind, passes)
        analysis.write_activation_csv(table, f"{out_prefix}_{kind}.csv")
        tables[kind] = table
    return tables


def benchmark_log(narx_run: TrainRun, ernn_run: TrainRun, n_samples: int, path=None,
                  seed: int = 1) -> dict[str, float]:
    """Time NARX closed-loop against ERNN batched inference on the same input."""
    from .topology import benchmark_inference
    symbols = -(-n_samples // narx_run.config.oracle.oversample)
    ds = generate(narx_run.config.oracle.__class__(
        **{**narx_run.config.oracle.__dict__, "n_symbols": symbols, "seed": seed}))
    ds = ds.slice(0, n_samples)
    narx_task = build_task(ds, narx_run.normalizer, narx_run.config.model)
    ernn_task = build_task(ds, ernn_run.normalizer, ernn_run.config.model)
    res = benchmark_inference(narx_run.net, narx_task, ernn_run.net, ernn_task.exo,
                              BATCH_SEGMENT, 2 * ernn_run.config.model.K)
    narx, ernn = res["narx_step_loop"], res["ernn_batch"]
    out = {"samples": float(n_samples), "narx_seconds": narx.seconds,
           "ernn_batch_seconds": ernn.seconds, "narx_samples_per_s": narx.rate,
           "ernn_samples_per_s": ernn.rate, "throughput_ratio": ernn.rate / narx.rate}
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            for k, v in out.items():
                fh.write(f"{k} = {v:.6g}\n")
    return out
