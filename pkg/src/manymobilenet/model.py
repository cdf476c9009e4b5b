"""Width-scaled MobileNetV2-style backbone with SE gates, parameter accounting and checkpoints."""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn_blocks as nn
from .errors import CheckpointError, ConfigError, ShapeError
from .nn_blocks import BlockParams, LayerParams
from .tensor_core import (
    DTYPE,
    RNG_ALGORITHM,
    STREAM_INIT,
    KaimingNormal,
    Rng,
    conv_output_size,
    tensor_create,
)

# (expand t, base channels c, repeats n, first stride s)
MOBILENET_V2_PLAN = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)

CHECKPOINT_MAGIC = b"MMNCKPT1"
CHECKPOINT_VERSION = 1


def round_to_multiple(value: float, multiple: int) -> int:
    """Round half-up to a multiple of ``multiple``, never below it."""
    return max(multiple, int(math.floor(value / multiple + 0.5)) * multiple)


@dataclass(frozen=True)
class ModelSpec:
    width_multiplier: float = 1.0
    num_classes: int = 2
    stem_channels: int = 32
    block_plan: tuple = MOBILENET_V2_PLAN
    head_channels: int = 1280
    se_reduction: int = 8
    channel_round: int = 8
    input_size: int = 224
    dropout: float = 0.0
    use_se: bool = True
    # reserved: per-block dropout is not implemented
    block_dropout: bool = False

    def __post_init__(self):
        object.__setattr__(self, "block_plan", tuple(tuple(int(v) for v in row) for row in self.block_plan))
        if not self.width_multiplier > 0:
            raise ConfigError(f"width_multiplier must be positive, got {self.width_multiplier}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.channel_round < 1 or self.se_reduction < 1:
            raise ConfigError("channel_round and se_reduction must be >= 1")
        if any(len(row) != 4 or row[3] not in (1, 2) or row[0] < 1 or row[2] < 1 for row in self.block_plan):
            raise ConfigError(f"invalid block plan {self.block_plan}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.block_dropout:
            raise ConfigError("per-block dropout is reserved and not implemented")
        if self.input_size < 1:
            raise ConfigError("input_size must be positive")

    def scaled(self, base: int) -> int:
        return round_to_multiple(base * self.width_multiplier, self.channel_round)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_plan"] = [list(row) for row in self.block_plan]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def block_configs(spec: ModelSpec) -> list[BlockParams]:
    """Channel/stride configuration of every inverted-residual block (no tensors)."""
    blocks = []
    c_in = spec.scaled(spec.stem_channels)
    for t, c, n, s in spec.block_plan:
        c_out = spec.scaled(c)
        for i in range(n):
            blocks.append(
                BlockParams(
                    in_channels=c_in,
                    out_channels=c_out,
                    hidden=c_in * t,
                    stride=s if i == 0 else 1,
                    expand_ratio=t,
                    use_se=spec.use_se,
                )
            )
            c_in = c_out
    return blocks


def spatial_trace(spec: ModelSpec) -> list[int]:
    """Feature-map side length after the stem and after every strided block."""
    size = conv_output_size(spec.input_size, 3, 2, 1)
    trace = [spec.input_size, size]
    for b in block_configs(spec):
        if b.stride == 2:
            size = conv_output_size(size, 3, 2, 1)
            trace.append(size)
    return trace


def _conv_shapes(name, c_out, c_in_per_group, k):
    return [(name, "weight", (c_out, c_in_per_group, k, k), c_in_per_group * k * k)]


def _bn_shapes(name, c):
    return [(name, f, (c,), None) for f in ("gamma", "beta", "running_mean", "running_var")]


def _fc_shapes(name, k, c):
    return [(name, "weight", (k, c), c), (name, "bias", (k,), None)]


def layer_shapes(spec: ModelSpec) -> list[tuple]:
    """Ordered ``(layer, field, shape, fan_in)`` records for every tensor of the model.

    ``fan_in`` is set for kaiming-initialized weights and ``None`` otherwise.
    """
    rows = []
    stem = spec.scaled(spec.stem_channels)
    rows += _conv_shapes("stem.conv", stem, 3, 3)
    rows += _bn_shapes("stem.bn", stem)
    for i, b in enumerate(block_configs(spec)):
        p = f"blocks.{i}"
        if b.expand_ratio != 1:
            rows += _conv_shapes(f"{p}.expand_conv", b.hidden, b.in_channels, 1)
            rows += _bn_shapes(f"{p}.expand_bn", b.hidden)
        rows += _conv_shapes(f"{p}.dw_conv", b.hidden, 1, 3)
        rows += _bn_shapes(f"{p}.dw_bn", b.hidden)
        if b.use_se:
            r = max(1, b.hidden // spec.se_reduction)
            rows += _fc_shapes(f"{p}.se_fc1", r, b.hidden)
            rows += _fc_shapes(f"{p}.se_fc2", b.hidden, r)
        rows += _conv_shapes(f"{p}.project_conv", b.out_channels, b.hidden, 1)
        rows += _bn_shapes(f"{p}.project_bn", b.out_channels)
        last = b.out_channels
    head = spec.scaled(spec.head_channels)
    rows += _conv_shapes("head.conv", head, last, 1)
    rows += _bn_shapes("head.bn", head)
    rows += _fc_shapes("classifier", spec.num_classes, head)
    return rows


@dataclass
class ParamStats:
    param_count: int
    bytes_f32: int
    per_layer: dict = field(default_factory=dict)


def param_stats(model_or_spec) -> ParamStats:
    """Trainable parameter count from shapes alone; BN running buffers are not counted."""
    spec = model_or_spec.spec if isinstance(model_or_spec, Model) else model_or_spec
    per_layer: dict[str, int] = {}
    for layer, fld, shape, _ in layer_shapes(spec):
        if fld in nn.BUFFER_FIELDS:
            continue
        per_layer[layer] = per_layer.get(layer, 0) + math.prod(shape)
    total = sum(per_layer.values())
    return ParamStats(total, 4 * total, per_layer)


def param_count(model_or_spec) -> int:
    return param_stats(model_or_spec).param_count


def _compute_dtype(layers) -> np.dtype:
    return layers["stem.conv"].weight.dtype


class Model:
    """Bound parameters/buffers for a :class:`ModelSpec`.

    ``layers`` maps a layer name (``"blocks.3.dw_conv"``) to its
    :class:`LayerParams`; parameter names append the field
    (``"blocks.3.dw_conv.weight"``).
    """

    def __init__(self, spec: ModelSpec, layers: dict[str, LayerParams], meta: dict | None = None):
        self.spec = spec
        self.layers = layers
        self.training = False
        self.meta = dict(meta or {})
        self.blocks = block_configs(spec)
        for i, b in enumerate(self.blocks):
            prefix = f"blocks.{i}."
            b.layers = {k[len(prefix):]: v for k, v in layers.items() if k.startswith(prefix)}

    def train(self, mode: bool = True) -> "Model":
        self.training = mode
        return self

    def eval(self) -> "Model":
        return self.train(False)

    def named_parameters(self):
        for lname, lp in self.layers.items():
            for f, v in lp.trainable():
                yield f"{lname}.{f}", v

    def named_buffers(self):
        for lname, lp in self.layers.items():
            for f, v in lp.buffers():
                yield f"{lname}.{f}", v

    def named_tensors(self):
        """Parameters and buffers in checkpoint order."""
        for lname, lp in self.layers.items():
            for f in nn.TRAINABLE_FIELDS + nn.BUFFER_FIELDS:
                v = getattr(lp, f)
                if v is not None:
                    yield f"{lname}.{f}", v

    def get(self, name: str) -> np.ndarray:
        lname, f = name.rsplit(".", 1)
        return getattr(self.layers[lname], f)

    def set(self, name: str, value: np.ndarray) -> None:
        lname, f = name.rsplit(".", 1)
        setattr(self.layers[lname], f, value)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, old in self.named_tensors():
            new = np.asarray(state[name], dtype=DTYPE)
            if new.shape != old.shape:
                raise ShapeError(f"{name}: shape {new.shape} != {old.shape}")
            self.set(name, new.copy())

    # -- forward / backward --

    def _check_input(self, x):
        s = self.spec.input_size
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise ShapeError(f"expected input (N,3,{s},{s}), got {x.shape}")

    def forward(self, x: np.ndarray, rng: Rng | None = None) -> np.ndarray:
        """Logits (N, num_classes).  In train mode use :meth:`forward_train` instead."""
        if self.training:
            return self.forward_train(x, rng)[0]
        return self._run(x, None)[0]

    def forward_train(self, x: np.ndarray, rng: Rng | None):
        """Logits plus the tape list that :meth:`backward` consumes."""
        if not self.training:
            raise RuntimeError("forward_train called on a model in eval mode")
        if rng is None and self.spec.dropout > 0:
            raise ValueError("train-mode forward needs an rng for dropout")
        return self._run(x, rng)

    def _run(self, x, rng):
        self._check_input(x)
        # float32 normally; float64 when the weights are (used by gradient checks)
        x = np.asarray(x, dtype=_compute_dtype(self.layers))
        training = self.training
        L = self.layers
        tapes = []
        h, t = nn.conv2d(x, L["stem.conv"], stride=2, pad=1)
        tapes.append(("stem.conv", t))
        h, t = nn.batchnorm(h, L["stem.bn"], training)
        tapes.append(("stem.bn", t))
        h, t = nn.activation("relu6", h)
        tapes.append(("stem.act", t))
        for i, b in enumerate(self.blocks):
            h, t = nn.inverted_residual(h, b, training)
            tapes.append((f"blocks.{i}", t))
        h, t = nn.conv2d(h, L["head.conv"])
        tapes.append(("head.conv", t))
        h, t = nn.batchnorm(h, L["head.bn"], training)
        tapes.append(("head.bn", t))
        h, t = nn.activation("relu6", h)
        tapes.append(("head.act", t))
        h, t = nn.global_avg_pool(h)
        tapes.append(("pool", t))
        n, c = h.shape[:2]
        h = h.reshape(n, c)
        h, t = nn.dropout(h, self.spec.dropout, training, rng)
        tapes.append(("dropout", t))
        logits, t = nn.fully_connected(h, L["classifier"])
        tapes.append(("classifier", t))
        return logits, tapes

    def backward(self, tapes, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients keyed like :meth:`named_parameters`."""
        grads = {}
        g = np.asarray(grad_logits, dtype=_compute_dtype(self.layers))
        for name, tape in reversed(tapes):
            if name == "pool":
                g = g.reshape(tape.out_shape)
            g, pg = nn.backward(tape, g)
            for k, v in pg.items():
                grads[f"{name}.{k}"] = v
        return grads

    # -- checkpoint snapshots --

    def copy(self) -> "Model":
        return Model.from_state(self.spec, self.state_dict(), self.meta)

    @classmethod
    def empty(cls, spec: ModelSpec) -> "Model":
        layers: dict[str, LayerParams] = {}
        for lname, fld, shape, _ in layer_shapes(spec):
            lp = layers.setdefault(lname, LayerParams())
            fill = 1.0 if fld in ("gamma", "running_var") else 0.0
            setattr(lp, fld, np.full(shape, fill, dtype=DTYPE))
        return cls(spec, layers)

    @classmethod
    def from_state(cls, spec: ModelSpec, state: dict, meta: dict | None = None) -> "Model":
        m = cls.empty(spec)
        m.load_state_dict(state)
        m.meta = dict(meta or {})
        return m


def build_model(spec: ModelSpec, rng: Rng) -> Model:
    """Kaiming-normal conv/FC weights (one child stream per layer index), zero biases, BN at identity."""
    model = Model.empty(spec)
    index = {}
    for lname, fld, shape, fan_in in layer_shapes(spec):
        if fan_in is None:
            continue
        i = index.setdefault(lname, len(index))
        model.set(f"{lname}.{fld}", tensor_create(shape, KaimingNormal(fan_in), rng.child(STREAM_INIT, i)))
    model.meta["rng"] = {"algorithm": RNG_ALGORITHM, "seed": rng.seed}
    return model


# -- checkpoint file --------------------------------------------------------


def save_checkpoint(model: Model, path, meta: dict | None = None) -> None:
    """Write the binary checkpoint (little-endian, CRC32 per tensor, JSON trailer)."""
    tensors = list(model.named_tensors())
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors:
        nb = name.encode("utf-8")
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<I", zlib.crc32(payload)))
        parts.append(payload)
    trailer = dict(model.meta)
    if meta:
        trailer.update(meta)
    trailer["spec"] = model.spec.to_dict()
    text = json.dumps(trailer, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(text)))
    parts.append(text)
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Model:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if r.take(8) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, count = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    state = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        (crc,) = r.unpack("<I")
        payload = r.take(4 * math.prod(shape))
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"{path}: CRC mismatch in tensor {name!r}")
        state[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(DTYPE)
    (tlen,) = r.unpack("<I")
    try:
        trailer = json.loads(r.take(tlen).decode("utf-8"))
        spec = ModelSpec.from_dict(trailer.pop("spec"))
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable spec trailer ({exc})") from exc
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")
    model = Model.empty(spec)
    expected = {k: v.shape for k, v in model.named_tensors()}
    if set(expected) != set(state):
        missing = sorted(set(expected) ^ set(state))[:3]
        raise CheckpointError(f"{path}: tensor names disagree with embedded spec, e.g. {missing}")
    for k, shape in expected.items():
        if state[k].shape != shape:
            raise CheckpointError(f"{path}: {k} has shape {state[k].shape}, spec says {shape}")
    model.load_state_dict(state)
    model.meta = trailer
    return model
