"""Recurrent cells, stacking with inter-layer dropout, and the dense head.

Arrays are time-major: a window is ``(K, batch, features)``.  Each cell keeps
its input-side weights for all gates in one ``W_x`` block and the
hidden-side weights in one ``W_h`` block, gate-major; the per-gate matrices
(``W_ii``, ``W_hf``, ...) are available as views through
:meth:`Cell.named_matrices`.

Single cells step through :func:`rnnlink.mathkit.affine`; whole stacks run
in the compiled kernels of :mod:`rnnlink.kernels`, which use the same
formulas.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .mathkit import Activation, DimensionError, Rng, affine, apply, derivative_from_value, sigmoid


@dataclass
class CellState:
    h: np.ndarray
    c: np.ndarray | None = None

    def copy(self) -> "CellState":
        return CellState(self.h.copy(), None if self.c is None else self.c.copy())


@dataclass
class StepCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray | None = None
    pre: np.ndarray | None = None       # vanilla pre-activation
    h: np.ndarray | None = None
    i: np.ndarray | None = None
    f: np.ndarray | None = None
    g: np.ndarray | None = None
    o: np.ndarray | None = None
    c: np.ndarray | None = None
    tanh_c: np.ndarray | None = None
    r: np.ndarray | None = None
    z: np.ndarray | None = None
    n: np.ndarray | None = None
    hn: np.ndarray | None = None        # W_hn h_{t-1}, needed by the GRU reset path


class Cell:
    """Common parameter handling; subclasses define the gate algebra."""

    kind = ""
    n_gates = 1
    gate_names: tuple[str, ...] = ()

    def __init__(self, n_in: int, n_hidden: int, W_x: np.ndarray, W_h: np.ndarray,
                 b: np.ndarray | None = None):
        G = self.n_gates * n_hidden
        if W_x.shape != (G, n_in) or W_h.shape != (G, n_hidden):
            raise DimensionError(
                f"{self.kind} cell expects W_x {(G, n_in)} and W_h {(G, n_hidden)}, "
                f"got {W_x.shape} and {W_h.shape}")
        if b is not None and b.shape != (G,):
            raise DimensionError(f"{self.kind} bias must have shape {(G,)}, got {b.shape}")
        self.n_in = n_in
        self.n_hidden = n_hidden
        self.W_x = W_x
        self.W_h = W_h
        self.b = b

    @classmethod
    def initialize(cls, n_in: int, n_hidden: int, rng: Rng, bias: bool = False, **kw):
        G = cls.n_gates * n_hidden
        lim_x = 1.0 / np.sqrt(n_in)
        lim_h = 1.0 / np.sqrt(n_hidden)
        W_x = rng.uniform(-lim_x, lim_x, (G, n_in))
        W_h = rng.uniform(-lim_h, lim_h, (G, n_hidden))
        b = np.zeros(G) if bias else None
        return cls(n_in, n_hidden, W_x, W_h, b, **kw)

    def params(self) -> dict[str, np.ndarray]:
        out = {"W_x": self.W_x, "W_h": self.W_h}
        if self.b is not None:
            out["b"] = self.b
        return out

    def named_matrices(self) -> dict[str, np.ndarray]:
        H = self.n_hidden
        out = {}
        for k, gate in enumerate(self.gate_names):
            out[f"W_i{gate}"] = self.W_x[k * H:(k + 1) * H]
            out[f"W_h{gate}"] = self.W_h[k * H:(k + 1) * H]
        return out

    def init_state(self, batch: int) -> CellState:
        return CellState(np.zeros((batch, self.n_hidden)))

    def _check(self, x: np.ndarray, prev: CellState) -> None:
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"{self.kind} cell input size {self.n_in}, got {x.shape}")
        if prev.h.shape[-1] != self.n_hidden or prev.h.shape[:-1] != x.shape[:-1]:
            raise DimensionError(
                f"{self.kind} cell state shape {prev.h.shape} does not fit input {x.shape}")

    def _pre_x(self, x):
        return affine(self.W_x, x, self.b)

    def step(self, x: np.ndarray, prev: CellState) -> tuple[CellState, StepCache]:
        raise NotImplementedError

    def step_back(self, cache: StepCache, dh: np.ndarray, dc: np.ndarray | None):
        """Back-propagate one step.

        Returns ``(dpx, dph, dh_direct, dc_prev)``: gradients of the input-side
        and hidden-side pre-activations, any gradient reaching ``h_{t-1}``
        outside ``W_h``, and the gradient for ``c_{t-1}`` (LSTM only).
        """
        raise NotImplementedError


class VanillaCell(Cell):
    kind = "vanilla"
    n_gates = 1
    gate_names = ("h",)

    def __init__(self, n_in, n_hidden, W_x, W_h, b=None, activation=Activation.TANH):
        super().__init__(n_in, n_hidden, W_x, W_h, b)
        activation = Activation.parse(activation)
        if activation not in (Activation.TANH, Activation.RELU):
            raise ValueError("vanilla cells take tanh or relu activations")
        self.activation = activation

    def named_matrices(self):
        return {"W_ih": self.W_x, "W_hh": self.W_h}

    def step(self, x, prev):
        self._check(x, prev)
        pre = self._pre_x(x) + affine(self.W_h, prev.h)
        h = apply(self.activation, pre)
        return CellState(h), StepCache(x=x, h_prev=prev.h, pre=pre, h=h)

    def step_back(self, cache, dh, dc):
        dpre = dh * derivative_from_value(self.activation, cache.h, cache.pre)
        return dpre, dpre, None, None


class LstmCell(Cell):
    kind = "lstm"
    n_gates = 4
    gate_names = ("i", "f", "g", "o")

    def init_state(self, batch):
        return CellState(np.zeros((batch, self.n_hidden)), np.zeros((batch, self.n_hidden)))

    def step(self, x, prev):
        self._check(x, prev)
        if prev.c is None:
            raise DimensionError("lstm cell needs a cell state c")
        H = self.n_hidden
        pre = self._pre_x(x) + affine(self.W_h, prev.h)
        i = sigmoid(pre[..., :H])
        f = sigmoid(pre[..., H:2 * H])
        g = np.tanh(pre[..., 2 * H:3 * H])
        o = sigmoid(pre[..., 3 * H:])
        c = f * prev.c + i * g
        tanh_c = np.tanh(c)
        h = o * tanh_c
        cache = StepCache(x=x, h_prev=prev.h, c_prev=prev.c, i=i, f=f, g=g, o=o,
                          c=c, tanh_c=tanh_c, h=h)
        return CellState(h, c), cache

    def step_back(self, cache, dh, dc):
        do = dh * cache.tanh_c
        dc_total = dh * cache.o * (1.0 - cache.tanh_c * cache.tanh_c)
        if dc is not None:
            dc_total = dc_total + dc
        di = dc_total * cache.g
        dg = dc_total * cache.i
        df = dc_total * cache.c_prev
        dpre = np.concatenate([
            di * cache.i * (1.0 - cache.i),
            df * cache.f * (1.0 - cache.f),
            dg * (1.0 - cache.g * cache.g),
            do * cache.o * (1.0 - cache.o),
        ], axis=-1)
        return dpre, dpre, None, dc_total * cache.f


class GruCell(Cell):
    kind = "gru"
    n_gates = 3
    gate_names = ("r", "z", "n")

    def step(self, x, prev):
        self._check(x, prev)
        H = self.n_hidden
        px = self._pre_x(x)
        ph = affine(self.W_h, prev.h)
        r = sigmoid(px[..., :H] + ph[..., :H])
        z = sigmoid(px[..., H:2 * H] + ph[..., H:2 * H])
        hn = ph[..., 2 * H:]
        n = np.tanh(px[..., 2 * H:] + r * hn)
        h = (1.0 - z) * n + z * prev.h
        return CellState(h), StepCache(x=x, h_prev=prev.h, r=r, z=z, n=n, hn=hn, h=h)

    def step_back(self, cache, dh, dc):
        dn = dh * (1.0 - cache.z)
        dz = dh * (cache.h_prev - cache.n)
        dn_pre = dn * (1.0 - cache.n * cache.n)
        dr_pre = dn_pre * cache.hn * cache.r * (1.0 - cache.r)
        dz_pre = dz * cache.z * (1.0 - cache.z)
        dpx = np.concatenate([dr_pre, dz_pre, dn_pre], axis=-1)
        dph = np.concatenate([dr_pre, dz_pre, dn_pre * cache.r], axis=-1)
        return dpx, dph, dh * cache.z, None


CELL_TYPES = {cls.kind: cls for cls in (VanillaCell, LstmCell, GruCell)}


def make_cell(kind: str, n_in: int, n_hidden: int, rng: Rng, bias: bool = False,
              activation: Activation | str = Activation.TANH) -> Cell:
    try:
        cls = CELL_TYPES[kind]
    except KeyError:
        raise ValueError(f"unknown cell kind {kind!r}") from None
    if cls is VanillaCell:
        return cls.initialize(n_in, n_hidden, rng, bias=bias, activation=Activation.parse(activation))
    return cls.initialize(n_in, n_hidden, rng, bias=bias)


def vanilla_step(cell: VanillaCell, x, prev: CellState):
    return cell.step(np.asarray(x, dtype=np.float64), prev)


def lstm_step(cell: LstmCell, x, prev: CellState):
    return cell.step(np.asarray(x, dtype=np.float64), prev)


def gru_step(cell: GruCell, x, prev: CellState):
    return cell.step(np.asarray(x, dtype=np.float64), prev)


# ---------------------------------------------------------------------------
# stacked network
# ---------------------------------------------------------------------------

@dataclass
class NetState:
    """Hidden (and LSTM cell) state of every layer, shape ``(L, batch, H)``."""

    h: np.ndarray
    c: np.ndarray

    def copy(self) -> "NetState":
        return NetState(self.h.copy(), self.c.copy())

    @property
    def batch(self) -> int:
        return self.h.shape[1]

    def layer(self, l: int, lstm: bool = False) -> CellState:
        return CellState(self.h[l], self.c[l] if lstm else None)


@dataclass
class Feedback:
    """Output feedback for a window: ``history`` holds the last ``K_y``
    fed-back values (newest first); after step ``t`` the truth enters when
    ``teacher[t]`` is set, the prediction of output ``channel`` otherwise."""

    history: np.ndarray
    truth: np.ndarray
    teacher: np.ndarray
    channel: int = 0


@dataclass
class Trace:
    """Everything recorded by a forward pass that backward needs."""

    masks: np.ndarray
    xs: np.ndarray
    hs: np.ndarray
    cs: np.ndarray
    gates: np.ndarray
    aux: np.ndarray
    state: NetState
    history: np.ndarray | None = None

    @property
    def steps(self) -> int:
        return self.xs.shape[0]


def _kind_code(cell: Cell) -> int:
    if cell.kind == "lstm":
        return kernels.LSTM
    if cell.kind == "gru":
        return kernels.GRU
    return kernels.VANILLA_RELU if cell.activation is Activation.RELU else kernels.VANILLA_TANH


class StackedNetwork:
    """Layers of equally sized recurrent cells followed by a dense output head.

    The weights of all layers live in packed arrays (see :mod:`kernels`); the
    cells hold views into them, so updating either is the same thing.
    """

    def __init__(self, cells: list[Cell], head_W: np.ndarray, head_b: np.ndarray | None = None,
                 dropout: float = 0.0):
        if not cells:
            raise ValueError("a network needs at least one layer")
        kinds = {(c.kind, getattr(c, "activation", None)) for c in cells}
        if len(kinds) != 1:
            raise ValueError("all layers must use the same cell kind")
        H = cells[0].n_hidden
        for lower, upper in zip(cells, cells[1:]):
            if upper.n_in != lower.n_hidden:
                raise DimensionError(
                    f"layer input size {upper.n_in} does not match previous hidden size "
                    f"{lower.n_hidden}")
        if any(c.n_hidden != H for c in cells):
            raise DimensionError("all layers must have the same hidden size")
        if len({c.b is None for c in cells}) != 1:
            raise ValueError("either every layer has a bias or none does")
        if head_W.ndim != 2 or head_W.shape[1] != H:
            raise DimensionError(f"head expects {head_W.shape[-1]} inputs, top layer has {H}")
        if head_b is not None and head_b.shape != (head_W.shape[0],):
            raise DimensionError(f"head bias shape {head_b.shape} does not match {head_W.shape}")
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {dropout}")
        L = len(cells)
        GH = cells[0].W_h.shape[0]
        self.code = _kind_code(cells[0])
        self.has_bias = cells[0].b is not None
        self.Wx0 = np.array(cells[0].W_x, dtype=np.float64)
        self.Wxs = np.zeros((L - 1, GH, H))
        self.Wh = np.zeros((L, GH, H))
        self.bias = np.zeros((L, GH))
        for l, cell in enumerate(cells):
            if l > 0:
                self.Wxs[l - 1] = cell.W_x
                cell.W_x = self.Wxs[l - 1]
            else:
                cell.W_x = self.Wx0
            self.Wh[l] = cell.W_h
            cell.W_h = self.Wh[l]
            if self.has_bias:
                self.bias[l] = cell.b
                cell.b = self.bias[l]
        self.cells = cells
        self.head_W = np.array(head_W, dtype=np.float64)
        self.head_b = None if head_b is None else np.array(head_b, dtype=np.float64)
        self._zero_head_b = np.zeros(self.head_W.shape[0])
        self.dropout = float(dropout)

    @classmethod
    def build(cls, kind: str, n_in: int, hidden: int, layers: int, n_out: int, rng: Rng, *,
              activation="tanh", bias: bool = False, dropout: float = 0.0) -> "StackedNetwork":
        cells = []
        size = n_in
        for _ in range(layers):
            cells.append(make_cell(kind, size, hidden, rng, bias=bias, activation=activation))
            size = hidden
        lim = 1.0 / np.sqrt(hidden)
        head_W = rng.uniform(-lim, lim, (n_out, hidden))
        head_b = np.zeros(n_out) if bias else None
        return cls(cells, head_W, head_b, dropout=dropout)

    @property
    def n_in(self) -> int:
        return self.Wx0.shape[1]

    @property
    def n_out(self) -> int:
        return self.head_W.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.Wh.shape[2]

    @property
    def layers(self) -> int:
        return self.Wh.shape[0]

    @property
    def kind(self) -> str:
        return self.cells[0].kind

    def params(self) -> dict[str, np.ndarray]:
        """Flat, ordered view of every trainable array (shared, not copied)."""
        out = {}
        for l, cell in enumerate(self.cells):
            for name, arr in cell.params().items():
                out[f"layer{l}.{name}"] = arr
        out["head.W"] = self.head_W
        if self.head_b is not None:
            out["head.b"] = self.head_b
        return out

    def init_states(self, batch: int) -> NetState:
        shape = (self.layers, batch, self.n_hidden)
        return NetState(np.zeros(shape), np.zeros(shape))

    def make_masks(self, batch: int, rng: Rng | None) -> np.ndarray:
        """Inverted-dropout masks, one per lower layer, held for a whole window.

        The top layer (and every layer when ``rng`` is None) gets ones.
        """
        masks = np.ones((self.layers, batch, self.n_hidden))
        if rng is None or self.dropout == 0.0:
            return masks
        keep = 1.0 - self.dropout
        for l in range(self.layers - 1):
            u = rng.random((batch, self.n_hidden))
            masks[l] = (u >= self.dropout) / keep
        return masks

    def run(self, exo: np.ndarray, init: NetState | None = None, *, masks=None,
            feedback: Feedback | None = None, record: bool = True,
            train_rng: Rng | None = None) -> tuple[np.ndarray, Trace]:
        """Unroll over ``exo`` of shape ``(K, batch, n_exo)``.

        With ``feedback`` the network input is ``exo`` followed by the fed-back
        history.  Returns ``(K, batch, n_out)`` outputs and the trace; the
        final state and history are in ``trace.state``/``trace.history``.
        """
        exo = np.ascontiguousarray(exo, dtype=np.float64)
        if exo.ndim != 3 or exo.shape[0] == 0:
            raise DimensionError(f"window must have shape (K>=1, batch, n_in), got {exo.shape}")
        K, B, E = exo.shape
        L, H = self.layers, self.n_hidden
        GH = self.Wh.shape[1]
        if feedback is None:
            hist = np.zeros((B, 0))
            truth = np.zeros((K, B))
            teacher = np.zeros((K, B), dtype=np.bool_)
            channel = 0
        else:
            hist = np.array(feedback.history, dtype=np.float64)
            truth = np.ascontiguousarray(feedback.truth, dtype=np.float64)
            teacher = np.ascontiguousarray(feedback.teacher, dtype=np.bool_)
            channel = int(feedback.channel)
            if hist.shape[0] != B or truth.shape != (K, B) or teacher.shape != (K, B):
                raise DimensionError("feedback arrays do not match the window shape")
        if E + hist.shape[1] != self.n_in:
            raise DimensionError(
                f"network takes {self.n_in} inputs, window supplies {E + hist.shape[1]}")
        state = self.init_states(B) if init is None else init.copy()
        if state.h.shape != (L, B, H):
            raise DimensionError(f"initial state shape {state.h.shape}, expected {(L, B, H)}")
        if masks is None:
            masks = self.make_masks(B, train_rng)
        masks = np.ascontiguousarray(masks, dtype=np.float64)
        R = K if record else 1
        xs = np.empty((R, B, self.n_in))
        hs = np.empty((R + 1 if record else 1, L, B, H))
        cs = np.empty_like(hs)
        gates = np.empty((R, L, B, GH))
        aux = np.empty((R, L, B, H))
        ys = np.empty((K, B, self.n_out))
        head_b = self._zero_head_b if self.head_b is None else self.head_b
        kernels.run_stack(self.code, self.Wx0, self.Wxs, self.Wh, self.bias, self.head_W, head_b,
                          masks, exo, truth, teacher, channel, hist, state.h, state.c,
                          record, xs, hs, cs, gates, aux, ys)
        trace = Trace(masks, xs, hs, cs, gates, aux, state, hist if feedback is not None else None)
        if not record:
            trace.xs = xs[:0]
        return ys, trace

    def forward(self, xs: np.ndarray, init: NetState | None = None, *,
                train_rng: Rng | None = None, masks=None) -> tuple[np.ndarray, Trace]:
        """Unroll over a ``(K, batch, n_in)`` window; returns ``(K, batch, n_out)``."""
        return self.run(xs, init, masks=masks, train_rng=train_rng)

    def infer(self, xs: np.ndarray, init: NetState | None = None,
              feedback: Feedback | None = None) -> tuple[np.ndarray, NetState]:
        """Forward pass without caches or dropout; returns outputs and final state."""
        ys, trace = self.run(xs, init, feedback=feedback, record=False)
        return ys, trace.state

    def backward(self, trace: Trace, dys: np.ndarray) -> dict[str, np.ndarray]:
        """BPTT over the whole recorded window.

        Gradients from every step are summed into shared weights; the initial
        states are treated as constants.
        """
        K = trace.steps
        dys = np.ascontiguousarray(dys, dtype=np.float64)
        if K == 0 or dys.shape != (K, trace.xs.shape[1], self.n_out):
            raise DimensionError(
                f"loss gradient shape {dys.shape} does not match a {K}-step trace "
                f"with {self.n_out} outputs")
        gWx0 = np.zeros_like(self.Wx0)
        gWxs = np.zeros_like(self.Wxs)
        gWh = np.zeros_like(self.Wh)
        gB = np.zeros_like(self.bias)
        gHW = np.zeros_like(self.head_W)
        gHB = np.zeros(self.n_out)
        kernels.backward_stack(self.code, self.Wx0, self.Wxs, self.Wh, self.head_W, trace.masks,
                               trace.xs, trace.hs, trace.cs, trace.gates, trace.aux, dys,
                               gWx0, gWxs, gWh, gB, gHW, gHB)
        grads = {}
        for l in range(self.layers):
            grads[f"layer{l}.W_x"] = gWx0 if l == 0 else gWxs[l - 1]
            grads[f"layer{l}.W_h"] = gWh[l]
            if self.has_bias:
                grads[f"layer{l}.b"] = gB[l]
        grads["head.W"] = gHW
        if self.head_b is not None:
            grads["head.b"] = gHB
        return grads


def stack_forward(net: StackedNetwork, window, init=None, rng: Rng | None = None):
    """Functional alias: ``rng`` given means train mode (dropout active)."""
    return net.forward(window, init, train_rng=rng)


def stack_backward(net: StackedNetwork, trace: Trace, loss_grads):
    return net.backward(trace, loss_grads)
