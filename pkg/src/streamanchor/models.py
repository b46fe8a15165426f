"""Lightweight streaming detectors producing one probability per frame.

Three architectures:

* ``KWS_CNN``  - causal depthwise-separable dilated 1-D CNN
* ``MTD_GRU``  - single-layer GRU over two upstream score streams
* ``SOD_LSTM`` - LSTM(128) followed by dense 128->32->2 with dropout

Every model is causal and can be run chunk by chunk with carried state.
Inputs are (T, D) or (B, T, D) arrays; outputs are (T,) or (B, T).
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

CKPT_MAGIC = b"ASCK"
CKPT_VERSION = 1


class ModelKind(str, Enum):
    KWS_CNN = "KWS_CNN"
    MTD_GRU = "MTD_GRU"
    SOD_LSTM = "SOD_LSTM"

    @classmethod
    def parse(cls, value: "str | ModelKind") -> "ModelKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().upper())
        except ValueError:
            raise ValueError(
                f"unknown model {value!r}; expected one of {[k.value for k in cls]}"
            ) from None


class ArchitectureError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    kind: ModelKind = ModelKind.KWS_CNN
    input_dim: int = 16
    # KWS_CNN
    channels: int = 66
    kernel_size: int = 5
    dilations: tuple[int, ...] = (1, 1, 2, 4, 6, 10, 14)
    # recurrent models
    hidden: int = 64
    dense: int = 32
    dropout: float = 0.0
    seed: int = 0
    # build-time conformance targets; None disables the check
    target_rf: int | None = None
    target_params: int | None = None
    param_tolerance: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind.parse(self.kind))
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.input_dim < 1:
            raise ValueError(f"invalid ModelConfig.input_dim: {self.input_dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"invalid ModelConfig.dropout: {self.dropout}")
        if self.kind is ModelKind.KWS_CNN:
            if self.kernel_size < 1 or self.channels < 1:
                raise ValueError("invalid ModelConfig.kernel_size/channels")
            if len(self.dilations) != 7 or min(self.dilations) < 1:
                raise ValueError(
                    f"invalid ModelConfig.dilations: need 7 positive values, got {self.dilations}")
        elif self.hidden < 1 or self.dense < 1:
            raise ValueError("invalid ModelConfig.hidden/dense")


MODEL_DEFAULTS: dict[ModelKind, dict] = {
    ModelKind.KWS_CNN: dict(input_dim=16, channels=66, kernel_size=5,
                            dilations=(1, 1, 2, 4, 6, 10, 14),
                            target_rf=153, target_params=12_000),
    ModelKind.MTD_GRU: dict(input_dim=2, hidden=64, target_params=13_000),
    ModelKind.SOD_LSTM: dict(input_dim=40, hidden=128, dense=32, dropout=0.2),
}


def default_model_config(kind: ModelKind | str, **overrides) -> ModelConfig:
    kind = ModelKind.parse(kind)
    params = dict(MODEL_DEFAULTS[kind])
    params.update(overrides)
    return ModelConfig(kind=kind, **params)


def solve_dilations(target_rf: int, kernel_size: int, n_layers: int = 7) -> tuple[int, ...]:
    """Roughly doubling dilation schedule whose receptive field is exactly ``target_rf``."""
    span = target_rf - 1
    if kernel_size < 2 or span % (kernel_size - 1):
        raise ArchitectureError(
            f"receptive field {target_rf} unreachable with kernel {kernel_size}: "
            f"{span} is not a multiple of {kernel_size - 1}")
    total = span // (kernel_size - 1)
    if total < n_layers:
        raise ArchitectureError(
            f"receptive field {target_rf} too small for {n_layers} layers of kernel {kernel_size}")
    base = [2 ** i for i in range(n_layers)]
    scale = total / sum(base)
    dil = [max(1, int(b * scale)) for b in base]
    i = n_layers - 1
    while sum(dil) < total:
        dil[i] += 1
        i = i - 1 if i > 0 else n_layers - 1
    while sum(dil) > total:
        j = max(range(n_layers), key=lambda k: dil[k])
        dil[j] -= 1
    return tuple(sorted(dil))


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
             gain: float = 1.0 / 3.0) -> np.ndarray:
    """Uniform init with variance ``gain / fan_in``.

    The default matches the common ``1/sqrt(fan_in)`` bound; the convolutional
    stack uses gain 1 (linear) and 2 (before ReLU) so that activations keep
    their scale through eleven layers.
    """
    bound = math.sqrt(3.0 * gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class StreamingModel:
    """Base class; subclasses define parameters, ``init_state`` and ``_run``."""

    recurrent = False

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}

    # -- parameters -----------------------------------------------------------
    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise CheckpointError(
                f"parameter names differ: {sorted(set(state) ^ set(self.params))}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise CheckpointError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def receptive_field(self, seq_len: int | None = None) -> int | None:
        """Frames of context that influence one output; recurrent models report ``seq_len``."""
        raise NotImplementedError

    # -- inference ------------------------------------------------------------
    def init_state(self, batch: int):
        raise NotImplementedError

    def _run(self, x, state, training: bool, rng):
        raise NotImplementedError

    def _prepare(self, features):
        x = nx._data(features)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        if x.ndim != 3 or x.shape[-1] != self.config.input_dim:
            raise nx.ShapeError(f"{self.config.kind.value}.forward", x.shape,
                                detail=f"expected (..., T, {self.config.input_dim})")
        if x.shape[1] < 1:
            raise nx.ShapeError(f"{self.config.kind.value}.forward", x.shape,
                                detail="need at least one frame")
        return x, squeeze

    def forward(self, features, training: bool = False, rng: np.random.Generator | None = None):
        """Per-frame positive-class probabilities over a whole sequence (or batch)."""
        x, squeeze = self._prepare(features)
        probs, _ = self._run(x, None, training, rng)
        return probs[0] if squeeze else probs

    def stream(self, chunk, state=None):
        """Process the next chunk of frames; returns ``(probs, new_state)``."""
        x, squeeze = self._prepare(chunk)
        if state is None:
            state = self.init_state(x.shape[0])
        probs, state = self._run(x, state, False, None)
        probs = nx._data(probs)
        return (probs[0] if squeeze else probs), state

    def predict(self, features) -> np.ndarray:
        return np.asarray(nx._data(self.forward(features, training=False)))

    def descriptor(self) -> str:
        d = asdict(self.config)
        d["kind"] = self.config.kind.value
        d["dilations"] = list(self.config.dilations)
        return json.dumps(d, sort_keys=True)


class CausalCNN(StreamingModel):
    """1 depthwise block, 3 x (2 depthwise + 1 pointwise), pointwise output.

    Depthwise layers are linear temporal filters (kernel ``k``, dilation from
    the schedule); pointwise layers mix channels and are followed by ReLU.
    """

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        rng = np.random.default_rng(config.seed)
        k, C, D = config.kernel_size, config.channels, config.input_dim
        dil = iter(config.dilations)
        # (name, kind, dilation)
        self.layers: list[tuple[str, str, int]] = []

        def depthwise(name: str, width: int) -> None:
            self._add(f"{name}.kernel", _uniform(rng, (k, width), k, gain=1.0))
            self._add(f"{name}.bias", np.zeros(width))
            self.layers.append((name, "dw", next(dil)))

        def pointwise(name: str, n_in: int, n_out: int) -> None:
            self._add(f"{name}.weight", _uniform(rng, (n_in, n_out), n_in, gain=2.0))
            self._add(f"{name}.bias", np.zeros(n_out))
            self.layers.append((name, "pw", 0))

        depthwise("dw0", D)
        width = D
        for g in range(3):
            depthwise(f"g{g}.dw0", width)
            depthwise(f"g{g}.dw1", width)
            pointwise(f"g{g}.pw", width, C)
            width = C
        self._add("out.weight", _uniform(rng, (C, 1), C, gain=1.0))
        self._add("out.bias", np.zeros(1))

    def receptive_field(self, seq_len: int | None = None) -> int:
        k = self.config.kernel_size
        return 1 + sum((k - 1) * d for d in self.config.dilations)

    def _pads(self) -> list[int]:
        k = self.config.kernel_size
        return [(k - 1) * d for _, kind, d in self.layers if kind == "dw"]

    def init_state(self, batch: int):
        widths = []
        width = self.config.input_dim
        for name, kind, _ in self.layers:
            if kind == "dw":
                widths.append(width)
            else:
                width = self.config.channels
        return [np.zeros((batch, pad, w)) for pad, w in zip(self._pads(), widths)]

    def _run(self, x, state, training, rng):
        p = self.params
        h = x
        new_state = [] if state is not None else None
        # inference must agree bit for bit between whole and chunked runs
        rowwise = not training
        i = 0
        for name, kind, d in self.layers:
            if kind == "dw":
                if state is None:
                    h = nx.conv1d(h, p[f"{name}.kernel"], d) + p[f"{name}.bias"]
                else:
                    buf = state[i]
                    pad = buf.shape[1]
                    full = nx.concat([buf, h], axis=1)
                    hd = nx._data(full)
                    new_state.append(hd[:, hd.shape[1] - pad:].copy())
                    h = nx.conv1d(full, p[f"{name}.kernel"], d)[:, pad:] + p[f"{name}.bias"]
                i += 1
            else:
                h = nx.relu(nx.matmul(h, p[f"{name}.weight"], rowwise) + p[f"{name}.bias"])
        logits = nx.matmul(h, p["out.weight"], rowwise) + p["out.bias"]
        probs = nx.sigmoid(logits)
        return probs[..., 0], new_state


class GRUFusion(StreamingModel):
    """GRU over per-frame (audio score, gesture score) pairs, sigmoid output."""

    recurrent = True

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        rng = np.random.default_rng(config.seed)
        D, H = config.input_dim, config.hidden
        self._add("gru.w_x", _uniform(rng, (D, 3 * H), H))
        self._add("gru.w_h", _uniform(rng, (H, 3 * H), H))
        self._add("gru.bias", np.zeros(3 * H))
        self._add("out.weight", _uniform(rng, (H, 1), H))
        self._add("out.bias", np.zeros(1))

    def receptive_field(self, seq_len: int | None = None) -> int | None:
        return seq_len

    def init_state(self, batch: int):
        return np.zeros((batch, self.config.hidden))

    def _run(self, x, state, training, rng):
        p = self.params
        H = self.config.hidden
        B, T, _ = x.shape
        h = np.zeros((B, H)) if state is None else state
        xw = nx.matmul(x, p["gru.w_x"]) + p["gru.bias"]
        outs = []
        for t in range(T):
            xt = xw[:, t]
            hh = nx.matmul(h, p["gru.w_h"])
            zr = nx.sigmoid(xt[:, :2 * H] + hh[:, :2 * H])
            z, r = zr[:, :H], zr[:, H:]
            n = nx.tanh(xt[:, 2 * H:] + r * hh[:, 2 * H:])
            h = n + z * (h - n)
            outs.append(h)
        hs = nx.stack(outs, axis=1)
        probs = nx.sigmoid(nx.matmul(hs, p["out.weight"]) + p["out.bias"])
        return probs[..., 0], nx._data(h).copy()


class LSTMOnset(StreamingModel):
    """LSTM(hidden) -> dropout -> dense(dense) -> ReLU -> dropout -> dense(2) -> softmax."""

    recurrent = True

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        rng = np.random.default_rng(config.seed)
        D, H, M = config.input_dim, config.hidden, config.dense
        self._add("lstm.w_x", _uniform(rng, (D, 4 * H), H))
        self._add("lstm.w_h", _uniform(rng, (H, 4 * H), H))
        bias = np.zeros(4 * H)
        bias[H:2 * H] = 1.0  # gate order i, f, g, o
        self._add("lstm.bias", bias)
        self._add("fc1.weight", _uniform(rng, (H, M), H))
        self._add("fc1.bias", np.zeros(M))
        self._add("fc2.weight", _uniform(rng, (M, 2), M))
        self._add("fc2.bias", np.zeros(2))

    def receptive_field(self, seq_len: int | None = None) -> int | None:
        return seq_len

    def init_state(self, batch: int):
        H = self.config.hidden
        return (np.zeros((batch, H)), np.zeros((batch, H)))

    def _run(self, x, state, training, rng):
        p = self.params
        H = self.config.hidden
        B, T, _ = x.shape
        if state is None:
            h, c = np.zeros((B, H)), np.zeros((B, H))
        else:
            h, c = state
        xw = nx.matmul(x, p["lstm.w_x"]) + p["lstm.bias"]
        outs = []
        for t in range(T):
            gates = xw[:, t] + nx.matmul(h, p["lstm.w_h"])
            ifo = nx.sigmoid(gates[:, :2 * H])
            i, f = ifo[:, :H], ifo[:, H:]
            g = nx.tanh(gates[:, 2 * H:3 * H])
            o = nx.sigmoid(gates[:, 3 * H:])
            c = f * c + i * g
            h = o * nx.tanh(c)
            outs.append(h)
        hs = nx.stack(outs, axis=1)
        rate = self.config.dropout
        z = nx.dropout(hs, rate, rng, training)
        z = nx.relu(nx.matmul(z, p["fc1.weight"]) + p["fc1.bias"])
        z = nx.dropout(z, rate, rng, training)
        logits = nx.matmul(z, p["fc2.weight"]) + p["fc2.bias"]
        probs = nx.softmax(logits)
        return probs[..., 1], (nx._data(h).copy(), nx._data(c).copy())


_CLASSES = {
    ModelKind.KWS_CNN: CausalCNN,
    ModelKind.MTD_GRU: GRUFusion,
    ModelKind.SOD_LSTM: LSTMOnset,
}


def build(config: ModelConfig) -> StreamingModel:
    """Instantiate and check architecture targets (receptive field, size)."""
    model = _CLASSES[config.kind](config)
    problems = []
    if config.target_rf is not None and config.kind is ModelKind.KWS_CNN:
        rf = model.receptive_field()
        if rf != config.target_rf:
            problems.append(f"receptive field {rf} != target {config.target_rf}")
    if config.target_params is not None:
        n = model.param_count()
        lo = config.target_params * (1 - config.param_tolerance)
        hi = config.target_params * (1 + config.param_tolerance)
        if not lo <= n <= hi:
            problems.append(
                f"parameter count {n} outside {config.target_params} "
                f"+/- {config.param_tolerance:.0%} [{lo:.0f}, {hi:.0f}]")
    if problems:
        raise ArchitectureError(f"{config.kind.value}: " + "; ".join(problems))
    return model


def receptive_field(model: StreamingModel, seq_len: int | None = None) -> int | None:
    return model.receptive_field(seq_len)


def param_count(model: StreamingModel) -> int:
    return model.param_count()


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(model: StreamingModel, path: Path | str) -> Path:
    """Write ``ASCK`` | u32 version | descriptor | u32 n | (name, shape, f64 values)*."""
    path = Path(path)
    desc = model.descriptor().encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(desc)), desc,
             struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path: Path | str) -> StreamingModel:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    desc = json.loads(r.take(r.u32("descriptor length"), "descriptor").decode("utf-8"))
    desc["dilations"] = tuple(desc["dilations"])
    config = ModelConfig(**desc)
    state = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        ndim = r.u32("rank")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "shape"))
        count = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(r.take(8 * count, name), dtype="<f8").reshape(shape)
        state[name] = values.astype(np.float64)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    model = _CLASSES[config.kind](config)
    model.load_state_dict(state)
    return model
