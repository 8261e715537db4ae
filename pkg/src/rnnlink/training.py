"""Normalisation, windowing, loss, optimisers, the TBPTT loop and checkpoints.

Two ways of cutting the training split into BPTT windows are supported:

``windows``
    Stride-``s`` sliding windows of ``K`` steps, visited in a seeded shuffled
    order, each starting from a zero hidden state.
``tbptt``
    The split is divided into ``batch`` contiguous streams, walked in
    consecutive ``K``-step chunks.  Hidden state (and the feedback history) is
    carried from one chunk to the next but gradients stop at chunk borders,
    i.e. truncated BPTT with ``k1 = k2 = K``.

In both regimes every window gets one forward pass, one backward pass over all
of its ``K`` steps and one optimiser update.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .cells import Feedback, NetState, StackedNetwork
from .config import ConfigError, RunConfig, parse_config
from .mathkit import Rng

FORMAT_TAG = "CRNN1"


class NumericError(RuntimeError):
    """Non-finite loss or gradient."""


# ---------------------------------------------------------------------------
# normalisation and windows
# ---------------------------------------------------------------------------

@dataclass
class Normalizer:
    """Per-column affine map taking the training min/max onto [-1, 1]."""

    columns: tuple[str, ...]
    offset: np.ndarray
    scale: np.ndarray

    def _index(self, name):
        try:
            return self.columns.index(name)
        except ValueError:
            raise KeyError(f"normalizer has no column {name!r}") from None

    def normalize(self, name: str, x):
        k = self._index(name)
        return (np.asarray(x, dtype=np.float64) - self.offset[k]) / self.scale[k]

    def denormalize(self, name: str, x):
        k = self._index(name)
        return np.asarray(x, dtype=np.float64) * self.scale[k] + self.offset[k]


def train_length(n: int, train_fraction: float) -> int:
    return int(math.floor(n * train_fraction + 1e-9))


def fit_normalizer(dataset, train_fraction: float, columns=None) -> Normalizer:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    if columns is None:
        from .oracle import COLUMNS as columns
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    n_train = max(1, train_length(n, train_fraction))
    offset, scale = [], []
    for name in columns:
        col = np.asarray(dataset.column(name))[:n_train]
        lo, hi = float(col.min()), float(col.max())
        if not hi > lo:
            raise ValueError(f"column {name!r} is constant over the training split")
        offset.append(0.5 * (hi + lo))
        scale.append(0.5 * (hi - lo))
    return Normalizer(tuple(columns), np.array(offset), np.array(scale))


@dataclass
class WindowConfig:
    K: int
    stride: int = 1

    def __post_init__(self):
        if self.K < 1 or self.stride < 1:
            raise ValueError("window length and stride must be >= 1")

    def count(self, n: int) -> int:
        return 0 if n < self.K else (n - self.K) // self.stride + 1


def window_starts(n: int, cfg: WindowConfig, first: int = 0) -> np.ndarray:
    """Start indices of every full window inside ``[first, n)``."""
    if n - first < cfg.K:
        raise ValueError(f"sequence of {n - first} steps is shorter than K={cfg.K}")
    return first + cfg.stride * np.arange(cfg.count(n - first))


def make_windows(inputs, targets, cfg: WindowConfig):
    """Aligned ``(windows, K, features)`` views of inputs and targets."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    if targets.ndim == 1:
        targets = targets[:, None]
    if len(inputs) != len(targets):
        raise ValueError("inputs and targets differ in length")
    starts = window_starts(len(inputs), cfg)
    idx = starts[:, None] + np.arange(cfg.K)
    return inputs[idx], targets[idx]


# ---------------------------------------------------------------------------
# loss and optimisers
# ---------------------------------------------------------------------------

def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


class Optimizer:
    """In-place update of a ``{name: array}`` parameter dict."""

    slots: tuple[str, ...] = ()

    def __init__(self, lr: float, epsilon: float = 1e-8):
        if not lr > 0:
            raise ValueError("learning rate must be > 0")
        self.lr = lr
        self.epsilon = epsilon
        self.t = 0
        self.state: dict[str, dict[str, np.ndarray]] = {s: {} for s in self.slots}

    def _slot(self, slot, name, like):
        buf = self.state[slot].get(name)
        if buf is None:
            buf = self.state[slot][name] = np.zeros_like(like)
        return buf

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}")
        self.t += 1
        for name, p in params.items():
            self._update(name, p, grads[name])

    def _update(self, name, p, g):
        raise NotImplementedError


class Sgd(Optimizer):
    def _update(self, name, p, g):
        p -= self.lr * g


class SgdMomentum(Optimizer):
    slots = ("velocity",)

    def __init__(self, lr, momentum=0.9, epsilon=1e-8):
        super().__init__(lr, epsilon)
        self.momentum = momentum

    def _update(self, name, p, g):
        v = self._slot("velocity", name, p)
        v *= self.momentum
        v += g
        p -= self.lr * v


class RmsProp(Optimizer):
    slots = ("square_avg", "velocity")

    def __init__(self, lr, alpha=0.99, momentum=0.0, epsilon=1e-8):
        super().__init__(lr, epsilon)
        self.alpha = alpha
        self.momentum = momentum

    def _update(self, name, p, g):
        s = self._slot("square_avg", name, p)
        s *= self.alpha
        s += (1.0 - self.alpha) * g * g
        step = g / (np.sqrt(s) + self.epsilon)
        if self.momentum:
            v = self._slot("velocity", name, p)
            v *= self.momentum
            v += step
            step = v
        p -= self.lr * step


class Adam(Optimizer):
    slots = ("m", "v")

    def __init__(self, lr, beta1=0.9, beta2=0.999, epsilon=1e-8):
        super().__init__(lr, epsilon)
        self.beta1 = beta1
        self.beta2 = beta2

    def _update(self, name, p, g):
        m = self._slot("m", name, p)
        v = self._slot("v", name, p)
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * g * g
        m_hat = m / (1.0 - self.beta1 ** self.t)
        v_hat = v / (1.0 - self.beta2 ** self.t)
        p -= self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)


def make_optimizer(cfg) -> Optimizer:
    kind = cfg.optimizer
    if kind == "sgd":
        return Sgd(cfg.lr, cfg.epsilon)
    if kind == "momentum":
        return SgdMomentum(cfg.lr, cfg.momentum, cfg.epsilon)
    if kind == "rmsprop":
        return RmsProp(cfg.lr, cfg.alpha, 0.0, cfg.epsilon)
    if kind == "rmsprop_momentum":
        return RmsProp(cfg.lr, cfg.alpha, cfg.momentum, cfg.epsilon)
    if kind == "adam":
        return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon)
    raise ConfigError(f"unknown optimizer {kind!r}")


def optimizer_step(opt: Optimizer, params: dict, grads: dict) -> dict:
    opt.step(params, grads)
    return params


# ---------------------------------------------------------------------------
# sampling schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingSchedule:
    mode: str = "teacher"          # readout | teacher | scheduled
    p_start: float = 1.0
    p_end: float = 0.0
    decay_epochs: int = 0

    @classmethod
    def from_config(cls, cfg) -> "SamplingSchedule":
        return cls(cfg.schedule, 1.0, cfg.p_end, cfg.decay_epochs)

    def teacher_prob(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        if self.mode == "teacher":
            return 1.0
        if self.mode == "readout":
            return 0.0
        if self.decay_epochs == 0 or epoch >= self.decay_epochs:
            return self.p_end
        frac = epoch / self.decay_epochs
        return self.p_start + (self.p_end - self.p_start) * frac


def schedule_teacher_prob(schedule: SamplingSchedule, epoch: int) -> float:
    return schedule.teacher_prob(epoch)


# ---------------------------------------------------------------------------
# sequences and windows
# ---------------------------------------------------------------------------

@dataclass
class SequenceTask:
    """Normalised model-ready view of one dataset.

    The network input at step ``t`` is ``exo[t]`` followed by the fed-back
    history ``fb[t-1], ..., fb[t-fb_lags]`` of target column ``fb_channel``.
    """

    exo: np.ndarray
    targets: np.ndarray
    fb_lags: int = 0
    fb_channel: int = 0
    first: int = 0

    def __post_init__(self):
        if len(self.exo) != len(self.targets):
            raise ValueError("exogenous features and targets differ in length")

    def __len__(self):
        return len(self.targets)

    @property
    def n_in(self) -> int:
        return self.exo.shape[1] + self.fb_lags

    @property
    def n_out(self) -> int:
        return self.targets.shape[1]

    def true_history(self, starts) -> np.ndarray:
        """Ground-truth feedback values before each start, newest first."""
        idx = np.asarray(starts)[:, None] - 1 - np.arange(self.fb_lags)
        return self.targets[idx, self.fb_channel]


def run_window(net: StackedNetwork, task: SequenceTask, starts, K: int, *,
               teacher_prob: float = 1.0, rng: Rng | None = None, train: bool = False,
               init: NetState | None = None, history: np.ndarray | None = None,
               record: bool = True):
    """Unroll ``K`` steps from each start, choosing feedback per step.

    After every step a coin (probability ``teacher_prob``) decides whether the
    true target or the network's own prediction enters the feedback history.
    Predictions fed back this way are constants for the backward pass.
    Returns ``(predictions, trace, history)``.
    """
    starts = np.asarray(starts)
    batch = len(starts)
    idx = starts[None, :] + np.arange(K)[:, None]
    exo = task.exo[idx]
    feedback = None
    if task.fb_lags:
        if history is None:
            history = task.true_history(starts)
        if teacher_prob >= 1.0:
            teacher = np.ones((K, batch), dtype=bool)
        elif teacher_prob <= 0.0:
            teacher = np.zeros((K, batch), dtype=bool)
        else:
            teacher = rng.random((K, batch)) < teacher_prob
        feedback = Feedback(history, task.targets[idx, task.fb_channel], teacher, task.fb_channel)
    masks = net.make_masks(batch, rng if train else None)
    ys, trace = net.run(exo, init, masks=masks, feedback=feedback, record=record)
    return ys, trace, trace.history


# ---------------------------------------------------------------------------
# training run
# ---------------------------------------------------------------------------

@dataclass
class TrainRun:
    config: RunConfig
    net: StackedNetwork
    normalizer: Normalizer
    optimizer: Optimizer
    rng: Rng
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)

    @property
    def schedule(self) -> SamplingSchedule:
        return SamplingSchedule.from_config(self.config.train)

    @property
    def window(self) -> WindowConfig:
        return WindowConfig(self.config.model.K, self.config.train.stride)


def new_run(config: RunConfig, normalizer: Normalizer, n_in: int, n_out: int) -> TrainRun:
    m = config.model
    rng = Rng(config.train.seed)
    net = StackedNetwork.build(m.cell, n_in, m.hidden, m.layers, n_out, rng.split(),
                               activation=m.activation, bias=m.bias, dropout=m.dropout)
    if m.forget_bias:
        net.bias[:, m.hidden:2 * m.hidden] = m.forget_bias
    return TrainRun(config, net, normalizer, make_optimizer(config.train), rng)


def learning_rate(cfg, epoch: int) -> float:
    """Geometric decay from ``lr`` to ``lr_final`` across the epoch budget."""
    if cfg.lr_final <= 0 or cfg.epochs <= 1:
        return cfg.lr
    frac = min(epoch / (cfg.epochs - 1), 1.0)
    return cfg.lr * (cfg.lr_final / cfg.lr) ** frac


def clip_gradients(grads: dict, limit: float) -> dict:
    if limit <= 0:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > limit:
        scale = limit / norm
        return {k: g * scale for k, g in grads.items()}
    return grads


def _apply(run: TrainRun, ys, trace, targets) -> float:
    loss, dys = mse_loss(ys, targets)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss at epoch {run.epoch}")
    grads = clip_gradients(run.net.backward(trace, dys), run.config.train.clip)
    run.optimizer.step(run.net.params(), grads)
    return loss


def train_epoch(run: TrainRun, task: SequenceTask, n_train: int) -> float:
    """One pass over ``task[:n_train]``; returns the mean window loss."""
    cfg = run.config.train
    K = run.config.model.K
    p = run.schedule.teacher_prob(run.epoch)
    run.optimizer.lr = learning_rate(cfg, run.epoch)
    rng = run.rng
    losses = []
    if cfg.regime == "windows":
        starts = window_starts(n_train, run.window, task.first)
        order = starts[rng.permutation(len(starts))]
        for i in range(0, len(order), cfg.batch):
            chunk = order[i:i + cfg.batch]
            ys, trace, _ = run_window(run.net, task, chunk, K, teacher_prob=p, rng=rng, train=True)
            idx = chunk[None, :] + np.arange(K)[:, None]
            losses.append((_apply(run, ys, trace, task.targets[idx]), len(chunk)))
    else:
        offset = int(rng.next_u64() % K)
        span = n_train - task.first - offset
        per_stream = (span // cfg.batch) // K * K
        if per_stream < K * (cfg.burn_in + 1):
            raise ValueError(
                f"training split too short for {cfg.batch} streams of {K}-step chunks")
        base = task.first + offset + per_stream * np.arange(cfg.batch)
        states = None
        history = None
        for c in range(per_stream // K):
            chunk = base + c * K
            burn = c < cfg.burn_in
            ys, trace, history = run_window(run.net, task, chunk, K, teacher_prob=p, rng=rng,
                                            train=not burn, init=states, history=history,
                                            record=not burn)
            states = trace.state
            if burn:
                continue
            idx = chunk[None, :] + np.arange(K)[:, None]
            losses.append((_apply(run, ys, trace, task.targets[idx]), len(chunk)))
    total = sum(l * n for l, n in losses) / sum(n for _, n in losses)
    run.loss_history.append(total)
    run.epoch += 1
    return total


def fit(run: TrainRun, task: SequenceTask, n_train: int, epochs: int | None = None,
        on_epoch=None) -> TrainRun:
    """Train until the epoch budget or the loss threshold is reached."""
    cfg = run.config.train
    budget = cfg.epochs if epochs is None else epochs
    for _ in range(budget):
        loss = train_epoch(run, task, n_train)
        if on_epoch is not None:
            on_epoch(run, loss)
        if cfg.loss_threshold > 0 and loss < cfg.loss_threshold:
            break
    return run


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def _checksum(payload: bytes) -> str:
    return hashlib.blake2b(payload, digest_size=8).hexdigest()


def _tensor_lines(name: str, arr: np.ndarray) -> list[str]:
    a = np.asarray(arr, dtype=np.float64)
    a2 = a.reshape(1, -1) if a.ndim <= 1 else a
    lines = [f"tensor {name} {a2.shape[0]} {a2.shape[1]}"]
    for row in a2:
        lines.append(" ".join(repr(float(v)) for v in row))
    return lines


def checkpoint_text(run: TrainRun) -> str:
    net = run.net
    norm = run.normalizer
    opt = run.optimizer
    state = {
        "epoch": run.epoch,
        "rng_state": run.rng.state,
        "opt_step": opt.t,
        "n_in": net.n_in,
        "n_out": net.n_out,
        "norm_columns": ",".join(norm.columns),
    }
    tensors: list[tuple[str, np.ndarray]] = [("norm.offset", norm.offset), ("norm.scale", norm.scale)]
    tensors += [(f"param.{k}", v) for k, v in net.params().items()]
    for slot in opt.slots:
        for k, v in opt.state[slot].items():
            tensors.append((f"opt.{slot}.{k}", v))
    tensors.append(("loss_history", np.array(run.loss_history, dtype=np.float64)))
    lines = [FORMAT_TAG, "[config]"]
    lines += run.config.to_ini().strip().splitlines()
    lines.append("[end]")
    lines.append("[state]")
    lines += [f"{k} = {v}" for k, v in state.items()]
    lines.append(f"tensors = {len(tensors)}")
    for name, arr in tensors:
        lines += _tensor_lines(name, arr)
    body = "\n".join(lines) + "\n"
    return body + f"checksum {_checksum(body.encode('utf-8'))}\n"


def save_checkpoint(run: TrainRun, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(checkpoint_text(run))


def _verify(raw: bytes) -> str:
    first = raw.split(b"\n", 1)[0].strip()
    if first != FORMAT_TAG.encode():
        tag = first.decode("utf-8", "replace")
        raise CheckpointVersionError(
            f"checkpoint version tag {tag!r}, this reader understands {FORMAT_TAG!r}")
    body, sep, tail = raw.rstrip(b"\n").rpartition(b"\nchecksum ")
    if not sep or len(tail.strip()) != 16:
        raise CheckpointTruncatedError("checkpoint has no trailing checksum line")
    body += b"\n"
    if _checksum(body) != tail.strip().decode("ascii", "replace"):
        raise CheckpointChecksumError("checkpoint checksum mismatch")
    return body.decode("utf-8")


def _parse_checkpoint(raw: bytes) -> TrainRun:
    body = _verify(raw)
    lines = body.splitlines()
    try:
        end = lines.index("[end]")
        st = lines.index("[state]", end)
    except ValueError:
        raise CheckpointTruncatedError("checkpoint is missing its config or state block") from None
    try:
        config = parse_config("\n".join(lines[2:end]))
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint config invalid: {exc}") from None
    pos = st + 1
    state = {}
    while pos < len(lines) and not lines[pos].startswith("tensors ="):
        key, _, val = lines[pos].partition("=")
        state[key.strip()] = val.strip()
        pos += 1
    if pos >= len(lines):
        raise CheckpointTruncatedError("checkpoint ends inside the state block")
    n_tensors = int(lines[pos].split("=")[1])
    pos += 1
    tensors = {}
    for _ in range(n_tensors):
        if pos >= len(lines):
            raise CheckpointTruncatedError("checkpoint ends before all tensors were read")
        _, name, rows, cols = lines[pos].split()
        rows, cols = int(rows), int(cols)
        pos += 1
        if pos + rows > len(lines):
            raise CheckpointTruncatedError(f"checkpoint ends inside tensor {name}")
        data = [[float(v) for v in lines[pos + r].split()] for r in range(rows)]
        if any(len(r) != cols for r in data):
            raise CheckpointTruncatedError(f"tensor {name} has rows of the wrong length")
        tensors[name] = np.array(data, dtype=np.float64).reshape(rows, cols)
        pos += rows

    columns = tuple(state["norm_columns"].split(","))
    normalizer = Normalizer(columns, tensors["norm.offset"].ravel(), tensors["norm.scale"].ravel())
    run = new_run(config, normalizer, int(state["n_in"]), int(state["n_out"]))
    for k, p in run.net.params().items():
        src = tensors[f"param.{k}"]
        p[...] = src.reshape(p.shape)
    opt = run.optimizer
    opt.t = int(state["opt_step"])
    for slot in opt.slots:
        for k, p in run.net.params().items():
            key = f"opt.{slot}.{k}"
            if key in tensors:
                opt.state[slot][k] = tensors[key].reshape(p.shape).copy()
    run.rng.state = int(state["rng_state"])
    run.epoch = int(state["epoch"])
    run.loss_history = [float(v) for v in tensors["loss_history"].ravel()]
    return run


def load_checkpoint(path) -> TrainRun:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        return _parse_checkpoint(raw)
    except (KeyError, IndexError) as exc:
        raise CheckpointTruncatedError(f"checkpoint is incomplete: {exc}") from None
