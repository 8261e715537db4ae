"""NARX (output feedback) and Elman (hidden-state only) macromodels.

NARX input vector at step ``t`` (K_x input lags, K_y output lags)::

    [v_tx0(t), ..., v_tx0(t-K_x), v_tx(t), ..., v_tx(t-K_x), v_rx(t-1), ..., v_rx(t-K_y)]

The recurrent stack also carries its hidden state from step to step, so
prediction is strictly sequential: every step needs the previous predicted
``v_rx``.  The Elman model sees only the exogenous channels, which lets
independent windows be evaluated as one batch.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .cells import Feedback, NetState, StackedNetwork
from .config import ModelConfig
from .oracle import DatasetError, WaveformDataset, read_table
from .training import Normalizer, SequenceTask, run_window

NARX_EXOGENOUS = ("v_tx0", "v_tx")
NARX_OUTPUT = "v_rx"


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class NarxConfig:
    K_x: int
    K_y: int

    def __post_init__(self):
        if self.K_x < 0 or self.K_y < 1:
            raise ValueError("NARX needs K_x >= 0 and K_y >= 1")

    @property
    def n_features(self) -> int:
        return 2 * (self.K_x + 1) + self.K_y

    @property
    def history(self) -> int:
        return max(self.K_x, self.K_y)


@dataclass(frozen=True)
class ErnnIoMap:
    inputs: tuple[str, ...] = ("v_tx0",)
    outputs: tuple[str, ...] = ("v_tx", "v_rx", "v_ro")

    def __post_init__(self):
        if set(self.inputs) & set(self.outputs):
            raise ValueError("ERNN input and output channels must be disjoint")


def narx_assemble(v_tx0, v_tx, v_rx, t: int, cfg: NarxConfig) -> np.ndarray:
    """Feature vector for time ``t`` in the documented lag order."""
    if t < cfg.history:
        raise TopologyError(f"time {t} has fewer than {cfg.history} steps of history")
    lags_x = t - np.arange(cfg.K_x + 1)
    lags_y = t - 1 - np.arange(cfg.K_y)
    return np.concatenate([np.asarray(v_tx0)[lags_x], np.asarray(v_tx)[lags_x],
                           np.asarray(v_rx)[lags_y]])


def _lagged(col: np.ndarray, lags: int) -> np.ndarray:
    """``out[t, j] = col[t - j]``; rows with missing history are zero."""
    n = len(col)
    out = np.zeros((n, lags + 1))
    for j in range(lags + 1):
        out[j:, j] = col[:n - j]
    return out


def narx_task(ds: WaveformDataset, norm: Normalizer, cfg: NarxConfig) -> SequenceTask:
    exo = np.concatenate([_lagged(norm.normalize(c, ds.column(c)), cfg.K_x)
                          for c in NARX_EXOGENOUS], axis=1)
    targets = norm.normalize(NARX_OUTPUT, ds.column(NARX_OUTPUT))[:, None]
    return SequenceTask(exo, targets, fb_lags=cfg.K_y, fb_channel=0, first=cfg.history)


def ernn_task(ds: WaveformDataset, norm: Normalizer, io: ErnnIoMap) -> SequenceTask:
    exo = np.stack([norm.normalize(c, ds.column(c)) for c in io.inputs], axis=1)
    targets = np.stack([norm.normalize(c, ds.column(c)) for c in io.outputs], axis=1)
    return SequenceTask(exo, targets)


def build_task(ds: WaveformDataset, norm: Normalizer, model: ModelConfig) -> SequenceTask:
    if model.topology == "narx":
        return narx_task(ds, norm, NarxConfig(model.lags_x, model.lags_y))
    return ernn_task(ds, norm, ErnnIoMap(model.input_channels, model.output_channels))


def output_channels(model: ModelConfig) -> tuple[str, ...]:
    return (NARX_OUTPUT,) if model.topology == "narx" else model.output_channels


def input_channels(model: ModelConfig) -> tuple[str, ...]:
    return NARX_EXOGENOUS if model.topology == "narx" else model.input_channels


# ---------------------------------------------------------------------------
# predicted waveforms
# ---------------------------------------------------------------------------

@dataclass
class PredictedWaveform:
    dt: float
    channels: dict[str, np.ndarray]
    provenance: str = ""
    predicted: tuple[str, ...] = ()
    extras: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        lengths = {len(v) for v in self.channels.values()}
        if len(lengths) > 1:
            raise DatasetError("predicted channels differ in length")

    def __len__(self):
        return len(next(iter(self.channels.values())))

    def column(self, name: str) -> np.ndarray:
        try:
            return self.channels[name]
        except KeyError:
            raise DatasetError(f"waveform has no column {name!r}") from None


def write_waveform(wf: PredictedWaveform, path) -> None:
    names = list(wf.channels)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# provenance: {wf.provenance}\n")
        fh.write(f"# predicted: {','.join(wf.predicted)}\n")
        for k, v in wf.extras.items():
            fh.write(f"# {k}: {v}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t"] + names)
        cols = [wf.channels[n] for n in names]
        for k in range(len(wf)):
            writer.writerow([repr(k * wf.dt)] + [repr(float(c[k])) for c in cols])


def read_waveform(path) -> PredictedWaveform:
    """Read any CSV with a ``t`` column (datasets and predictions alike)."""
    header, data, comments = read_table(path)
    t = data[:, header.index("t")]
    dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
    channels = {h: data[:, i].copy() for i, h in enumerate(header) if h != "t"}
    meta = {}
    for line in comments:
        key, sep, val = line.partition(":")
        if sep:
            meta[key.strip()] = val.strip()
    predicted = tuple(c for c in meta.pop("predicted", "").split(",") if c)
    return PredictedWaveform(dt, channels, meta.pop("provenance", ""), predicted, meta)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def narx_predict(net: StackedNetwork, task: SequenceTask, warmup: int, *,
                 open_loop: bool = False) -> np.ndarray:
    """Closed-loop NARX prediction over the whole task, normalised units.

    The network starts from a zero state at ``task.first``.  Steps before
    ``warmup`` are fed true feedback and their outputs are replaced by the
    truth; afterwards each step consumes the previously predicted output
    (or the truth when ``open_loop``).
    """
    if task.fb_lags < 1:
        raise TopologyError("narx_predict needs an output-feedback task")
    n = len(task)
    if warmup < task.first:
        raise TopologyError(f"warmup {warmup} shorter than the required history {task.first}")
    out = task.targets.copy()
    if warmup >= n:
        return out
    t = np.arange(task.first, n)
    teacher = (t < warmup) | open_loop
    feedback = Feedback(task.true_history(np.array([task.first])),
                        task.targets[t, task.fb_channel][:, None], teacher[:, None],
                        task.fb_channel)
    ys, _ = net.infer(task.exo[t][:, None, :], feedback=feedback)
    out[warmup:] = ys[warmup - task.first:, 0]
    return out


def narx_open_loop_windows(net: StackedNetwork, task: SequenceTask, starts, K: int) -> np.ndarray:
    """Teacher-fed window outputs; equals the training forward pass exactly."""
    ys, _, _ = run_window(net, task, starts, K, teacher_prob=1.0, record=False)
    return ys


def ernn_readout(net: StackedNetwork, exo: np.ndarray,
                 init: NetState | None = None) -> tuple[np.ndarray, NetState]:
    """Run one sequence with carried hidden state; returns outputs and final state."""
    exo = np.asarray(exo, dtype=np.float64)
    ys, state = net.infer(exo[:, None, :], init)
    return ys[:, 0, :], state


def ernn_predict_readout(net: StackedNetwork, task: SequenceTask, K: int) -> np.ndarray:
    """Readout prediction over the task; the first ``K`` rows are the truth."""
    if task.fb_lags:
        raise TopologyError("ERNN readout takes exogenous inputs only")
    if len(task) < K:
        raise TopologyError(f"sequence of {len(task)} steps is shorter than K={K}")
    out, _ = ernn_readout(net, task.exo)
    out[:K] = task.targets[:K]
    return out


def ernn_batch_infer(net: StackedNetwork, windows) -> np.ndarray:
    """Evaluate ``(n_windows, K, n_in)`` windows as one batch from zero state."""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3:
        raise TopologyError(f"windows must be (n, K, n_in), got {windows.shape}")
    ys, _ = net.infer(windows.transpose(1, 0, 2))
    return ys.transpose(1, 0, 2)


def ernn_sequential_infer(net: StackedNetwork, windows) -> np.ndarray:
    """Reference loop: one window at a time."""
    windows = np.asarray(windows, dtype=np.float64)
    return np.stack([ernn_readout(net, w)[0] for w in windows])


def segment_windows(exo: np.ndarray, segment: int, warmup: int):
    """Cut a long input into overlapping windows for batch inference.

    Window ``i`` covers ``[i*segment - warmup, (i+1)*segment)`` (clipped at
    0); its first ``warmup`` outputs only prime the hidden state.
    """
    n = len(exo)
    n_seg = -(-n // segment)
    length = segment + warmup
    pad = np.concatenate([np.zeros((warmup, exo.shape[1])), exo,
                          np.zeros((n_seg * segment - n, exo.shape[1]))])
    idx = np.arange(n_seg)[:, None] * segment + np.arange(length)
    return pad[idx], n


def stitch_segments(ys: np.ndarray, n: int, warmup: int) -> np.ndarray:
    return ys[:, warmup:, :].reshape(-1, ys.shape[-1])[:n]


@dataclass
class Throughput:
    samples: int
    seconds: float

    @property
    def rate(self) -> float:
        return self.samples / self.seconds if self.seconds > 0 else float("inf")


def benchmark_inference(narx_net: StackedNetwork, narx_task_: SequenceTask,
                        ernn_net: StackedNetwork, ernn_exo: np.ndarray,
                        segment: int = 1000, warmup: int = 200) -> dict[str, Throughput]:
    """Wall-clock of the NARX step loop against ERNN segmented batch inference."""
    t0 = time.perf_counter()
    narx_predict(narx_net, narx_task_, narx_task_.first)
    t1 = time.perf_counter()
    windows, n = segment_windows(ernn_exo, segment, warmup)
    stitch_segments(ernn_batch_infer(ernn_net, windows), n, warmup)
    t2 = time.perf_counter()
    return {"narx_step_loop": Throughput(len(narx_task_), t1 - t0),
            "ernn_batch": Throughput(len(ernn_exo), t2 - t1)}
