"""Eye diagrams, waveform error metrics, drift statistics and activation passes.

Eye measurement
---------------
The waveform is linearly interpolated so that every phase column of the
histogram receives samples, folded modulo two unit intervals and binned.  In
each phase column the occupied voltage bins form clusters separated by empty
gaps.  Opening ``e`` of an ``M``-level eye is the empty gap that contains its
decision threshold (initially the ``e/M`` quantile of the waveform, then
re-centred on the widest opening).  The eye width is the longest contiguous
phase span, taken circularly, in which all ``M - 1`` openings are clear; the
optimal sampling phase is the middle of that span and the reported heights
are the opening gaps in that column.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .mathkit import Activation, activate, apply


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# eye diagram
# ---------------------------------------------------------------------------

@dataclass
class EyeDiagram:
    counts: np.ndarray              # (bins_volt, bins_phase); row 0 is the lowest voltage
    v_lo: float
    v_hi: float
    ui_samples: int
    n_samples: int                  # number of folded (interpolated) points

    @property
    def bins_volt(self) -> int:
        return self.counts.shape[0]

    @property
    def bins_phase(self) -> int:
        return self.counts.shape[1]

    @property
    def bin_height(self) -> float:
        return (self.v_hi - self.v_lo) / self.bins_volt

    @property
    def phase_axis(self) -> np.ndarray:
        """Left edge of each phase column in UI, spanning [0, 2)."""
        return np.arange(self.bins_phase) * (2.0 / self.bins_phase)


def interpolation_factor(ui_samples: int, bins_phase: int) -> int:
    return max(1, int(math.ceil(bins_phase / (2.0 * ui_samples))))


def fold_eye(waveform, ui_samples: int, bins_phase: int = 256, bins_volt: int = 256, *,
             v_range: tuple[float, float] | None = None, interpolate: bool = True) -> EyeDiagram:
    """Fold ``waveform`` modulo 2 UI into a ``bins_volt x bins_phase`` histogram."""
    v = np.asarray(waveform, dtype=np.float64)
    if ui_samples < 1:
        raise AnalysisError("ui_samples must be >= 1")
    if v.ndim != 1 or len(v) < 2 * ui_samples:
        raise AnalysisError(
            f"waveform of {len(v)} samples is shorter than two unit intervals "
            f"({2 * ui_samples} samples)")
    if not np.all(np.isfinite(v)):
        raise AnalysisError("waveform contains non-finite values")
    factor = interpolation_factor(ui_samples, bins_phase) if interpolate else 1
    if factor > 1:
        frac = np.arange(factor) / factor
        fine = (v[:-1, None] * (1.0 - frac) + v[1:, None] * frac).ravel()
        fine = np.append(fine, v[-1])
    else:
        fine = v
    period = 2 * ui_samples * factor
    phase = np.arange(len(fine)) % period
    col = (phase * bins_phase) // period
    lo, hi = (float(v.min()), float(v.max())) if v_range is None else map(float, v_range)
    if hi <= lo:
        hi = lo + 1.0 if hi == lo else hi
        if hi <= lo:
            raise AnalysisError("voltage range must have hi > lo")
    row = np.floor((fine - lo) / (hi - lo) * bins_volt).astype(np.int64)
    row = np.clip(row, 0, bins_volt - 1)
    counts = np.zeros((bins_volt, bins_phase), dtype=np.int64)
    np.add.at(counts, (row, col), 1)
    return EyeDiagram(counts, lo, hi, ui_samples, len(fine))


@dataclass
class EyeMetrics:
    levels: int
    heights: list[float]            # one per opening, volts, lowest opening first
    width: float                    # UI
    optimal_phase: float            # UI, in [0, 1)
    optimal_column: int
    closed: bool = False
    thresholds: list[float] = field(default_factory=list)

    @property
    def height(self) -> float:
        return min(self.heights) if self.heights else 0.0


def _gap_containing(occupied_col: np.ndarray, row: int) -> int:
    """Length in bins of the empty interior run containing ``row`` (0 if none)."""
    if occupied_col[row]:
        return 0
    n = len(occupied_col)
    lo = row
    while lo >= 0 and not occupied_col[lo]:
        lo -= 1
    hi = row
    while hi < n and not occupied_col[hi]:
        hi += 1
    if lo < 0 or hi >= n:
        return 0                    # not bounded by clusters on both sides
    return hi - lo - 1


def _opening_gaps(occupied: np.ndarray, rows: list[int]) -> np.ndarray:
    """``(n_openings, bins_phase)`` gap length per opening and column."""
    gaps = np.zeros((len(rows), occupied.shape[1]), dtype=np.int64)
    for c in range(occupied.shape[1]):
        col = occupied[:, c]
        for e, r in enumerate(rows):
            gaps[e, c] = _gap_containing(col, r)
    return gaps


def _widest_circular_run(mask: np.ndarray) -> tuple[int, int]:
    """(start, length) of the longest run of True, wrapping around the end."""
    n = len(mask)
    if mask.all():
        return 0, n
    if not mask.any():
        return 0, 0
    first_false = int(np.argmin(mask))
    best_start, best_len = 0, 0
    run_start, run_len = 0, 0
    for k in range(1, n + 1):
        idx = (first_false + k) % n
        if mask[idx]:
            if run_len == 0:
                run_start = idx
            run_len += 1
            if run_len > best_len:
                best_start, best_len = run_start, run_len
        else:
            run_len = 0
    return best_start, best_len


def _rows_for(eye: EyeDiagram, volts) -> list[int]:
    r = np.floor((np.asarray(volts) - eye.v_lo) / (eye.v_hi - eye.v_lo) * eye.bins_volt)
    return [int(x) for x in np.clip(r, 0, eye.bins_volt - 1)]


def _volts_for(eye: EyeDiagram, row: float) -> float:
    return eye.v_lo + (row + 0.5) * eye.bin_height


def eye_metrics(eye: EyeDiagram, levels: int = 2) -> EyeMetrics:
    if levels not in (2, 4):
        raise AnalysisError("levels must be 2 or 4")
    if eye.counts.sum() == 0:
        raise AnalysisError("empty eye diagram")
    occupied = eye.counts > 0
    n_open = levels - 1
    # initial thresholds: quantiles of the voltage distribution
    dist = eye.counts.sum(axis=1).astype(np.float64)
    cdf = np.cumsum(dist) / dist.sum()
    rows = [int(np.searchsorted(cdf, e / levels)) for e in range(1, levels)]
    closed = EyeMetrics(levels, [0.0] * n_open, 0.0, 0.0, 0, True,
                        [_volts_for(eye, r) for r in rows])
    for _ in range(2):
        gaps = _opening_gaps(occupied, rows)
        # re-centre each threshold on the middle of its widest opening
        new_rows = []
        for e in range(n_open):
            c = int(np.argmax(gaps[e]))
            if gaps[e, c] == 0:
                return closed
            r = rows[e]
            col = occupied[:, c]
            lo = r
            while not col[lo]:
                lo -= 1
            new_rows.append(lo + 1 + gaps[e, c] // 2)
        rows = new_rows
    gaps = _opening_gaps(occupied, rows)
    open_all = (gaps > 0).all(axis=0)
    start, length = _widest_circular_run(open_all)
    if length == 0:
        closed.thresholds = [_volts_for(eye, r) for r in rows]
        return closed
    P = eye.bins_phase
    mid = (start + (length - 1) / 2.0) % P
    col = int(math.floor(mid)) % P
    # heights at the optimal column, widths in UI, phase in [0, 1)
    heights = [float(gaps[e, col] * eye.bin_height) for e in range(n_open)]
    width = min(1.0, length * 2.0 / P)
    phase = ((mid + 0.5) * 2.0 / P) % 1.0
    return EyeMetrics(levels, heights, width, phase, col, False,
                      [_volts_for(eye, r) for r in rows])


def phase_bin_distance(a: EyeMetrics, b: EyeMetrics, bins_phase: int) -> float:
    """Circular distance between optimal phases, in phase bins (period 1 UI)."""
    per_ui = bins_phase / 2.0
    d = abs(a.optimal_phase - b.optimal_phase) % 1.0
    return min(d, 1.0 - d) * per_ui


def relative_delta(pred: float, truth: float) -> float:
    if truth == 0:
        return 0.0 if pred == 0 else math.inf
    return abs(pred - truth) / abs(truth)


# ---------------------------------------------------------------------------
# waveform errors and drift
# ---------------------------------------------------------------------------

def nrmse(pred, truth) -> float:
    """RMS error normalised by the range of ``truth``."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise AnalysisError(f"prediction shape {pred.shape} differs from truth {truth.shape}")
    span = float(truth.max() - truth.min())
    if span == 0:
        raise AnalysisError("truth is constant; NRMSE undefined")
    return float(np.sqrt(np.mean((pred - truth) ** 2)) / span)


@dataclass
class DriftReport:
    window: int
    rmse: np.ndarray
    trend: float
    defined: bool = True

    @property
    def n_windows(self) -> int:
        return len(self.rmse)


def drift_report(pred, truth, window: int) -> DriftReport:
    """RMSE over consecutive windows and its Spearman trend against window index."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise AnalysisError(f"prediction length {len(pred)} differs from truth {len(truth)}")
    if window < 1 or len(pred) < 2 * window:
        raise AnalysisError(f"need at least two windows of {window} samples")
    n = len(pred) // window
    err = (pred[:n * window] - truth[:n * window]).reshape(n, window)
    rmse = np.sqrt(np.mean(err * err, axis=1))
    if np.all(rmse == rmse[0]):
        return DriftReport(window, rmse, 0.0, defined=False)
    rho = spearmanr(np.arange(n), rmse).statistic
    return DriftReport(window, rmse, float(rho))


# ---------------------------------------------------------------------------
# repeated activation passes
# ---------------------------------------------------------------------------

def default_grid(n: int = 10001) -> np.ndarray:
    return np.linspace(-10.0, 10.0, n)


def activation_pass_demo(kind, passes: int, grid=None) -> np.ndarray:
    """Columns: input, then the activation applied 1..``passes`` times."""
    if passes < 1:
        raise AnalysisError("passes must be >= 1")
    kind = Activation.parse(kind)
    x = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    cols = [x]
    v = x
    for _ in range(passes):
        v = apply(kind, v)
        cols.append(v)
    return np.stack(cols, axis=1)


def max_derivative(kind, grid=None) -> float:
    x = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    return float(activate(kind, x)[1].max())


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------

def write_ppm(eye: EyeDiagram, path) -> None:
    """Plain (ASCII) PPM; brightness proportional to count, highest voltage on top."""
    peak = int(eye.counts.max())
    scaled = np.zeros_like(eye.counts) if peak == 0 else (eye.counts * 255 + peak // 2) // peak
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"P3\n{eye.bins_phase} {eye.bins_volt}\n255\n")
        for row in scaled[::-1]:
            fh.write(" ".join(f"{v} {v} {v}" for v in row.tolist()))
            fh.write("\n")


def metrics_rows(name: str, m: EyeMetrics) -> list[tuple[str, str, str]]:
    rows = [(name, "closed", str(int(m.closed))),
            (name, "eye_height", repr(m.height)),
            (name, "eye_width", repr(m.width)),
            (name, "optimal_phase", repr(m.optimal_phase))]
    rows += [(name, f"eye_height_{k}", repr(h)) for k, h in enumerate(m.heights)]
    return rows


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("source", "metric", "value"))
        w.writerows(rows)


def write_drift_csv(report: DriftReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# window = {report.window}\n")
        fh.write(f"# spearman_trend = {report.trend!r}\n")
        fh.write(f"# trend_defined = {int(report.defined)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("window_index", "start_sample", "rmse"))
        for k, r in enumerate(report.rmse):
            w.writerow((k, k * report.window, repr(float(r))))


def write_activation_csv(table: np.ndarray, path) -> None:
    passes = table.shape[1] - 1
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["input"] + [f"pass{k}" for k in range(1, passes + 1)])
        for row in table:
            w.writerow([repr(float(v)) for v in row])
