"""Synthetic transmitter / channel / receiver used as ground truth.

The link is a chain of simple blocks whose memory is known by construction:

* source: PRBS bits mapped to PAM2 or Gray-coded PAM4 levels, held for
  ``oversample`` samples and smoothed by a single-pole filter (``v_tx0``);
* transmitter: ``v_tx = A * tanh(v_tx0 / A)``;
* channel: pure delay of ``delay`` samples followed by an FIR made of an
  exponential decay plus one reflection tap (``v_rx``);
* receiver buffer: ``v_ro = A_rx * tanh(gain * v_rx / A_rx)``.

All constants are illustrative; they do not describe any real transceiver.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .config import OracleConfig

COLUMNS = ("v_tx0", "v_tx", "v_rx", "v_ro")

# Fibonacci LFSR taps (polynomial exponents); x^7+x^6+1 and x^15+x^14+1.
PRBS_TAPS = {7: (7, 6), 15: (15, 14)}


class DatasetError(ValueError):
    pass


def prbs_bits(order: int, n: int, seed: int = 1) -> np.ndarray:
    """``n`` bits of PRBS``order``, most significant register bit first."""
    if order not in PRBS_TAPS:
        raise ValueError(f"unsupported PRBS order {order}")
    if n < 1:
        raise ValueError("need at least one bit")
    mask = (1 << order) - 1
    state = seed & mask
    if state == 0:
        raise ValueError("LFSR seed must be nonzero")
    a, b = PRBS_TAPS[order]
    out = np.empty(n, dtype=np.int8)
    for k in range(n):
        bit = ((state >> (a - 1)) ^ (state >> (b - 1))) & 1
        out[k] = (state >> (order - 1)) & 1
        state = ((state << 1) | bit) & mask
    return out


_PAM4_GRAY = {(0, 0): -1.0, (0, 1): -1.0 / 3.0, (1, 1): 1.0 / 3.0, (1, 0): 1.0}


def pam_map(bits, modulation: str) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64)
    if modulation == "pam2":
        return np.where(bits == 1, 1.0, -1.0)
    if modulation == "pam4":
        if bits.size % 2:
            raise ValueError("PAM4 needs an even number of bits")
        pairs = bits.reshape(-1, 2)
        return np.array([_PAM4_GRAY[(int(p[0]), int(p[1]))] for p in pairs])
    raise ValueError(f"unknown modulation {modulation!r}")


@dataclass
class WaveformDataset:
    dt: float
    v_tx0: np.ndarray
    v_tx: np.ndarray
    v_rx: np.ndarray
    v_ro: np.ndarray

    def __post_init__(self):
        lengths = {len(getattr(self, c)) for c in COLUMNS}
        if len(lengths) != 1:
            raise DatasetError(f"columns have unequal lengths {sorted(lengths)}")
        if not self.dt > 0:
            raise DatasetError("dt must be positive")

    def __len__(self):
        return len(self.v_tx0)

    def column(self, name: str) -> np.ndarray:
        if name not in COLUMNS:
            raise DatasetError(f"unknown column {name!r}")
        return getattr(self, name)

    def columns(self, names) -> np.ndarray:
        return np.stack([self.column(n) for n in names], axis=1)

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt

    def slice(self, start: int, stop: int) -> "WaveformDataset":
        return WaveformDataset(self.dt, *(getattr(self, c)[start:stop].copy() for c in COLUMNS))


@dataclass
class LinkModel:
    oversample: int
    ui: float
    tx_smoothing: float
    tx_amplitude: float
    fir: np.ndarray
    delay: int
    rx_gain: float
    rx_amplitude: float

    @property
    def dt(self) -> float:
        return self.ui / self.oversample

    @classmethod
    def from_config(cls, cfg: OracleConfig) -> "LinkModel":
        return cls(cfg.oversample, cfg.ui, cfg.tx_smoothing, cfg.tx_amplitude,
                   channel_fir(cfg), cfg.delay, cfg.rx_gain, cfg.rx_amplitude)

    def source(self, symbols) -> np.ndarray:
        held = np.repeat(np.asarray(symbols, dtype=np.float64), self.oversample)
        a = self.tx_smoothing
        return lfilter([a], [1.0, a - 1.0], held)

    def transmitter(self, v):
        return self.tx_amplitude * np.tanh(v / self.tx_amplitude)

    def channel(self, v_tx: np.ndarray) -> np.ndarray:
        """Delay then FIR, causal and truncated to the input length."""
        n = len(v_tx)
        delayed = np.concatenate([np.zeros(min(self.delay, n)), v_tx[:max(n - self.delay, 0)]])
        return lfilter(self.fir, [1.0], delayed)

    def receiver(self, v):
        return self.rx_amplitude * np.tanh(self.rx_gain * v / self.rx_amplitude)


def channel_fir(cfg: OracleConfig) -> np.ndarray:
    os_ = cfg.oversample
    n = max(1, int(round(cfg.channel_length * os_)))
    k = np.arange(n)
    h = np.exp(-k / (cfg.channel_tau * os_))
    h /= h.sum()
    refl = int(round(cfg.reflection_ui * os_))
    h[refl] += cfg.reflection
    return h * (cfg.dc_gain / h.sum())


def simulate_link(model: LinkModel, symbols) -> WaveformDataset:
    symbols = np.asarray(symbols, dtype=np.float64)
    if symbols.size == 0:
        raise ValueError("no symbols to simulate")
    v_tx0 = model.source(symbols)
    v_tx = model.transmitter(v_tx0)
    v_rx = model.channel(v_tx)
    v_ro = model.receiver(v_rx)
    return WaveformDataset(model.dt, v_tx0, v_tx, v_rx, v_ro)


def generate(cfg: OracleConfig) -> WaveformDataset:
    """Dataset for ``cfg``: PRBS -> PAM -> link."""
    bits_per_symbol = 2 if cfg.modulation == "pam4" else 1
    bits = prbs_bits(cfg.prbs_order, cfg.n_symbols * bits_per_symbol, cfg.seed)
    return simulate_link(LinkModel.from_config(cfg), pam_map(bits, cfg.modulation))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def write_dataset(ds: WaveformDataset, path, comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("t",) + COLUMNS)
        t = ds.t
        cols = [getattr(ds, c) for c in COLUMNS]
        for k in range(len(ds)):
            writer.writerow([repr(float(t[k]))] + [repr(float(c[k])) for c in cols])


def read_table(path, required=("t",)) -> tuple[list[str], np.ndarray, list[str]]:
    """Parse a CSV with a header row; returns (header, rows, comments)."""
    comments = []
    with open(path, newline="", encoding="utf-8") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                comments.append(line[1:].strip())
            elif line.strip():
                lines.append(line)
    if not lines:
        raise DatasetError(f"{path}: empty file")
    reader = csv.reader(lines)
    header = [h.strip() for h in next(reader)]
    for name in required:
        if name not in header:
            raise DatasetError(f"{path}: missing column {name!r} in header")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise DatasetError(
                f"{path}: row {lineno} has {len(row)} fields, header has {len(header)}")
        try:
            rows.append([float(v) for v in row])
        except ValueError:
            raise DatasetError(f"{path}: malformed number in row {lineno}") from None
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    data = np.array(rows, dtype=np.float64)
    t = data[:, header.index("t")]
    if len(t) > 1 and not np.all(np.diff(t) > 0):
        raise DatasetError(f"{path}: time column is not strictly increasing")
    return header, data, comments


def read_dataset(path) -> WaveformDataset:
    header, data, _ = read_table(path, required=("t",) + COLUMNS)
    t = data[:, header.index("t")]
    dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
    if len(t) > 2 and not math.isclose(dt, (t[-1] - t[0]) / (len(t) - 1), rel_tol=1e-9):
        raise DatasetError(f"{path}: time column is not uniformly sampled")
    cols = [data[:, header.index(c)].copy() for c in COLUMNS]
    return WaveformDataset(dt, *cols)
