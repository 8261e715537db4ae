"""INI run configuration with strict validation.

A config file has the sections ``[oracle]``, ``[model]``, ``[train]``,
``[eye]`` and ``[sweep]``, all optional.  Missing keys take the defaults below; unknown sections or
keys, and out-of-range values, raise :class:`ConfigError` before any work
starts.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    pass


@dataclass
class OracleConfig:
    modulation: str = "pam2"
    prbs_order: int = 15
    seed: int = 1                 # initial LFSR register
    ui: float = 1.0e-10           # seconds
    oversample: int = 16
    n_symbols: int = 700
    tx_smoothing: float = 0.35    # single-pole coefficient per sample
    tx_amplitude: float = 1.2     # tx saturation level A (volts)
    channel_tau: float = 0.3      # exponential decay constant (UI)
    channel_length: float = 6.0   # FIR length (UI)
    reflection_ui: float = 4.0
    reflection: float = 0.05      # reflection tap relative to the main response
    dc_gain: float = 0.8
    delay: int = 40               # pure channel delay (samples)
    rx_gain: float = 1.5
    rx_amplitude: float = 1.0

    def validate(self):
        _choice("oracle.modulation", self.modulation, ("pam2", "pam4"))
        _choice("oracle.prbs_order", self.prbs_order, (7, 15))
        _positive("oracle.ui", self.ui)
        _at_least("oracle.oversample", self.oversample, 1)
        _at_least("oracle.n_symbols", self.n_symbols, 1)
        if self.seed <= 0 or self.seed >= (1 << self.prbs_order):
            raise ConfigError(f"oracle.seed must be a nonzero {self.prbs_order}-bit register value")
        if not 0.0 < self.tx_smoothing <= 1.0:
            raise ConfigError("oracle.tx_smoothing must lie in (0, 1]")
        _positive("oracle.tx_amplitude", self.tx_amplitude)
        _positive("oracle.channel_tau", self.channel_tau)
        _positive("oracle.channel_length", self.channel_length)
        if not 0.0 <= self.reflection_ui < self.channel_length:
            raise ConfigError("oracle.reflection_ui must lie inside the channel length")
        if not 0.0 < self.dc_gain <= 1.0:
            raise ConfigError("oracle.dc_gain must lie in (0, 1]")
        _at_least("oracle.delay", self.delay, 0)
        _positive("oracle.rx_gain", self.rx_gain)
        _positive("oracle.rx_amplitude", self.rx_amplitude)


@dataclass
class ModelConfig:
    topology: str = "narx"
    cell: str = "lstm"
    activation: str = "tanh"
    layers: int = 4
    hidden: int = 20
    dropout: float = 0.0
    bias: bool = False
    forget_bias: float = 0.0      # initial LSTM forget-gate bias (needs bias = true)
    K: int = 10
    K_x: int = -1                 # -1: follow K
    K_y: int = -1
    inputs: str = "v_tx0"         # ERNN input channels
    outputs: str = "v_tx,v_rx,v_ro"

    @property
    def lags_x(self) -> int:
        return self.K if self.K_x < 0 else self.K_x

    @property
    def lags_y(self) -> int:
        return self.K if self.K_y < 0 else self.K_y

    @property
    def input_channels(self) -> tuple[str, ...]:
        return tuple(c.strip() for c in self.inputs.split(",") if c.strip())

    @property
    def output_channels(self) -> tuple[str, ...]:
        return tuple(c.strip() for c in self.outputs.split(",") if c.strip())

    def validate(self):
        _choice("model.topology", self.topology, ("narx", "ernn"))
        _choice("model.cell", self.cell, ("vanilla", "lstm", "gru"))
        _choice("model.activation", self.activation, ("tanh", "relu"))
        _at_least("model.layers", self.layers, 1)
        _at_least("model.hidden", self.hidden, 1)
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.dropout must lie in [0, 1)")
        if self.forget_bias and not (self.bias and self.cell == "lstm"):
            raise ConfigError("model.forget_bias needs an lstm cell with bias = true")
        _at_least("model.K", self.K, 1)
        _at_least("model.K_x", self.lags_x, 0)
        _at_least("model.K_y", self.lags_y, 1)
        channels = ("v_tx0", "v_tx", "v_rx", "v_ro")
        ins, outs = self.input_channels, self.output_channels
        for name in ins + outs:
            _choice("model channel", name, channels)
        if not ins or not outs:
            raise ConfigError("model.inputs and model.outputs must be non-empty")
        if set(ins) & set(outs):
            raise ConfigError("model.inputs and model.outputs must be disjoint")


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 0.001
    lr_final: float = 0.0         # 0: constant rate; else geometric decay to this value
    clip: float = 0.0             # global gradient-norm limit, 0 disables
    momentum: float = 0.9
    alpha: float = 0.99
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 50
    train_fraction: float = 0.9
    schedule: str = "teacher"
    p_end: float = 0.0
    decay_epochs: int = 0
    seed: int = 0
    loss_threshold: float = 0.0
    batch: int = 1
    stride: int = 1
    regime: str = "windows"
    burn_in: int = 0              # tbptt: leading chunks per epoch run without an update

    def validate(self):
        _choice("train.optimizer", self.optimizer,
                ("sgd", "momentum", "rmsprop", "rmsprop_momentum", "adam"))
        _positive("train.lr", self.lr)
        if self.lr_final < 0 or self.lr_final > self.lr:
            raise ConfigError("train.lr_final must lie in [0, train.lr]")
        if self.clip < 0:
            raise ConfigError("train.clip must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("train.momentum must lie in [0, 1)")
        for key in ("alpha", "beta1", "beta2"):
            if not 0.0 < getattr(self, key) < 1.0:
                raise ConfigError(f"train.{key} must lie in (0, 1)")
        _positive("train.epsilon", self.epsilon)
        _at_least("train.epochs", self.epochs, 0)
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train.train_fraction must lie in (0, 1)")
        _choice("train.schedule", self.schedule, ("readout", "teacher", "scheduled"))
        if not 0.0 <= self.p_end <= 1.0:
            raise ConfigError("train.p_end must lie in [0, 1]")
        _at_least("train.decay_epochs", self.decay_epochs, 0)
        if self.loss_threshold < 0:
            raise ConfigError("train.loss_threshold must be >= 0")
        _at_least("train.batch", self.batch, 1)
        _at_least("train.stride", self.stride, 1)
        _choice("train.regime", self.regime, ("windows", "tbptt"))
        _at_least("train.burn_in", self.burn_in, 0)


@dataclass
class EyeConfig:
    bins_phase: int = 256
    bins_volt: int = 256
    ui_samples: int = 0           # 0: use oracle.oversample
    channel: str = "v_ro"

    def validate(self):
        _at_least("eye.bins_phase", self.bins_phase, 2)
        _at_least("eye.bins_volt", self.bins_volt, 2)
        _at_least("eye.ui_samples", self.ui_samples, 0)
        _choice("eye.channel", self.channel, ("v_tx0", "v_tx", "v_rx", "v_ro"))


@dataclass
class SweepConfig:
    k: str = "4,10"
    optimizer: str = "sgd,adam,rmsprop"
    cell: str = "vanilla,lstm"
    seeds: str = "0"

    def values(self, kind: str) -> list:
        raw = {"k": self.k, "optimizer": self.optimizer, "cell": self.cell}[kind]
        items = [v.strip() for v in raw.split(",") if v.strip()]
        return [int(v) for v in items] if kind == "k" else items

    def seed_list(self) -> list[int]:
        return [int(v) for v in self.seeds.split(",") if v.strip()]

    def validate(self):
        try:
            ks = self.values("k")
            seeds = self.seed_list()
        except ValueError:
            raise ConfigError("sweep.k and sweep.seeds must be comma-separated integers") from None
        if not ks or min(ks) < 1:
            raise ConfigError("sweep.k values must be >= 1")
        if not seeds:
            raise ConfigError("sweep.seeds must list at least one seed")
        for v in self.values("optimizer"):
            _choice("sweep.optimizer", v, ("sgd", "momentum", "rmsprop", "rmsprop_momentum", "adam"))
        for v in self.values("cell"):
            _choice("sweep.cell", v, ("vanilla", "lstm", "gru"))


@dataclass
class RunConfig:
    oracle: OracleConfig = field(default_factory=OracleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eye: EyeConfig = field(default_factory=EyeConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def validate(self) -> "RunConfig":
        self.oracle.validate()
        self.model.validate()
        self.train.validate()
        self.eye.validate()
        self.sweep.validate()
        return self

    @property
    def levels(self) -> int:
        return 4 if self.oracle.modulation == "pam4" else 2

    @property
    def ui_samples(self) -> int:
        return self.eye.ui_samples or self.oracle.oversample

    def replace(self, **sections) -> "RunConfig":
        """Copy with per-section overrides, e.g. ``replace(model={"K": 4})``."""
        out = {}
        for f in fields(self):
            section = getattr(self, f.name)
            out[f.name] = dataclasses.replace(section, **sections.get(f.name, {}))
        return RunConfig(**out).validate()

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        for f in fields(self):
            section = getattr(self, f.name)
            parser[f.name] = {sf.name: _format(getattr(section, sf.name)) for sf in fields(section)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw, 0)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


_SECTIONS = {"oracle": OracleConfig, "model": ModelConfig, "train": TrainConfig, "eye": EyeConfig,
             "sweep": SweepConfig}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = base if base is not None else RunConfig()
    overrides: dict[str, dict] = {}
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        types = {f.name: f.type for f in fields(_SECTIONS[name])}
        current = getattr(cfg, name)
        for key, raw in parser[name].items():
            if key not in types:
                raise ConfigError(f"unknown key {name}.{key}")
            kind = type(getattr(current, key))
            overrides.setdefault(name, {})[key] = _coerce(f"{name}.{key}", raw, kind)
    return cfg.replace(**overrides)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("preset"):
        # single line "preset = name" followed by optional overrides
        first, _, rest = text.lstrip().partition("\n")
        name = first.split("=", 1)[1].strip()
        return parse_config(rest, preset(name))
    return parse_config(text)


def preset(name: str) -> RunConfig:
    """Settings mirroring the two published experiments."""
    if name == "pam2_narx":
        return RunConfig(
            oracle=OracleConfig(modulation="pam2", n_symbols=700, delay=4),
            model=ModelConfig(topology="narx", cell="lstm", layers=4, hidden=20, dropout=0.0, K=10),
            train=TrainConfig(optimizer="adam", lr=0.001, epochs=100, schedule="scheduled",
                              p_end=0.5, decay_epochs=40, regime="tbptt", batch=8),
        ).validate()
    if name == "pam4_ernn":
        return RunConfig(
            oracle=OracleConfig(modulation="pam4", ui=1.0 / 14e9, n_symbols=625, tx_smoothing=0.5,
                                channel_tau=0.15, reflection_ui=2.0, reflection=0.03),
            model=ModelConfig(topology="ernn", cell="lstm", layers=6, hidden=30, dropout=0.0,
                              bias=True, forget_bias=1.0, K=90),
            train=TrainConfig(optimizer="adam", lr=0.001, lr_final=3e-5, clip=1.0, epochs=2100,
                              regime="tbptt", batch=1, burn_in=1),
        ).validate()
    raise ConfigError(f"unknown preset {name!r}; choose pam2_narx or pam4_ernn")


def _choice(key, value, allowed):
    if value not in allowed:
        raise ConfigError(f"{key} must be one of {allowed}, got {value!r}")


def _positive(key, value):
    if not value > 0:
        raise ConfigError(f"{key} must be > 0, got {value!r}")


def _at_least(key, value, lo):
    if value < lo:
        raise ConfigError(f"{key} must be >= {lo}, got {value!r}")
