"""Loss, AdamP, cosine schedule, training configs and the epoch loop."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .augment import AUGMENT_PROFILES, IMAGENET, Dataset, NormProfile, augment_sample, dataset_profile, normalize
from .errors import ConfigError, NonFiniteError, ShapeError
from .metrics import SELECTION_METRICS, MetricsReport, evaluate
from .model import Model, ModelSpec, build_model
from .tensor_core import STREAM_AUGMENT, STREAM_DROPOUT, STREAM_SHUFFLE, Rng

log = logging.getLogger(__name__)

BATCH_SIZES = (8, 16, 32)
LEARNING_RATES = (1e-3, 1e-4, 1e-5, 1e-6)
DROPOUT_PRESETS = (0.01, 0.02, 0.05)
DROPOUT_MAX = 0.10
WIDTHS = (1.0, 3.0)
WEIGHT_DECAY = 0.005
EPOCHS = 500
LR_MIN_RATIO = 0.01


# -- loss -------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row softmax in float64 with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient ``(softmax - onehot) / N``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape} labels for {n} logit rows")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, labels]))
    grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return loss, (grad / n).astype(logits.dtype)


# -- schedule ---------------------------------------------------------------


def cosine_lr(t: float, total: float, lr_max: float, lr_min: float) -> float:
    if total < 1:
        raise ValueError("total must be >= 1")
    if not 0 <= t <= total:
        raise ValueError(f"t={t} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


# -- AdamP ------------------------------------------------------------------


@dataclass
class AdamPState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    delta: float = 0.1
    wd_ratio: float = 0.1
    projection: bool = True  # False gives plain Adam with decoupled decay
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def decay_exempt(name: str) -> bool:
    """Biases and BN affine parameters are not weight-decayed."""
    return name.endswith((".bias", ".gamma", ".beta")) or name in ("bias", "gamma", "beta")


def project_update(w: np.ndarray, grad: np.ndarray, update: np.ndarray, delta: float, wd_ratio: float, eps: float):
    """Drop the radial component of ``update`` when ``w`` looks scale-invariant.

    The test is ``|cos(w, grad)| < delta / sqrt(w.size)`` on the flattened
    tensors.  Returns ``(update, decay_ratio)``.
    """
    wf = w.ravel()
    w_norm = float(np.linalg.norm(wf))
    g_norm = float(np.linalg.norm(grad))
    if w_norm == 0.0:
        return update, 1.0
    cos = abs(float(wf @ grad.ravel())) / max(w_norm * g_norm, eps)
    if cos < delta / math.sqrt(wf.size):
        unit = wf / w_norm
        update = update - (unit @ update.ravel()) * unit.reshape(update.shape)
        return update, wd_ratio
    return update, 1.0


def adamp_step(state: AdamPState, params: dict, grads: dict, lr: float, weight_decay: float, exempt=decay_exempt) -> dict:
    """One AdamP step with decoupled weight decay; returns the new parameter dict.

    Moments live in ``state`` (float64).  Tensors with ndim > 1 may be
    projected; ``exempt(name)`` tensors skip decay.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    out = {}
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = w
            continue
        if g.shape != w.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {w.shape}")
        g64 = g.astype(np.float64)
        w64 = w.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(w64)
            state.v[name] = np.zeros_like(w64)
        m = b1 * m + (1.0 - b1) * g64
        v = b2 * state.v[name] + (1.0 - b2) * g64 * g64
        state.m[name], state.v[name] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        ratio = 1.0
        if state.projection and w.ndim > 1:
            update, ratio = project_update(w64, g64, update, state.delta, state.wd_ratio, state.eps)
        decay = 0.0 if exempt(name) else weight_decay
        out[name] = (w64 - lr * update - lr * decay * ratio * w64).astype(w.dtype)
    return out


# -- config -----------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr_max: float = 1e-5
    lr_min_ratio: float = LR_MIN_RATIO
    weight_decay: float = WEIGHT_DECAY
    dropout: float = 0.01
    epochs: int = EPOCHS
    width: float = 1.0
    metric: str = "acc"
    augment_profile: str = "imagenet"
    seed: int = 0

    @property
    def lr_min(self) -> float:
        return self.lr_max * self.lr_min_ratio

    def validate(self, allow_off_grid: bool = False) -> "TrainConfig":
        """Hard limits always; grid membership unless ``allow_off_grid``."""
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm needs more than one sample)")
        if not self.lr_max > 0:
            raise ConfigError("lr_max must be positive")
        if not 0.0 <= self.lr_min_ratio <= 1.0:
            raise ConfigError("lr_min_ratio must be in [0, 1]")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.width > 0:
            raise ConfigError("width must be positive")
        if self.metric not in SELECTION_METRICS:
            raise ConfigError(f"metric must be one of {SELECTION_METRICS}")
        if self.augment_profile not in AUGMENT_PROFILES:
            raise ConfigError(f"augment_profile must be one of {sorted(AUGMENT_PROFILES)}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if allow_off_grid:
            return self
        checks = [
            ("batch_size", self.batch_size in BATCH_SIZES, BATCH_SIZES),
            ("lr_max", any(math.isclose(self.lr_max, v) for v in LEARNING_RATES), LEARNING_RATES),
            ("weight_decay", math.isclose(self.weight_decay, WEIGHT_DECAY), WEIGHT_DECAY),
            ("dropout", 0.0 <= self.dropout <= DROPOUT_MAX, f"[0, {DROPOUT_MAX}]"),
            ("epochs", self.epochs == EPOCHS, EPOCHS),
            ("width", self.width in WIDTHS, WIDTHS),
        ]
        for key, ok, allowed in checks:
            if not ok:
                exc = ConfigError(f"{key}={getattr(self, key)} is off the training grid {allowed}; pass allow_off_grid")
                exc.key = key
                raise exc
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name}={value if isinstance(value, str) else repr(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, allow_off_grid: bool = False) -> "TrainConfig":
        """Parse ``key=value`` lines; ``#`` comments and blank lines are ignored."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        linenos = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ConfigError(f"line {lineno}: expected key=value")
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            linenos[key] = lineno
            try:
                if types[key] == "int":
                    values[key] = int(value)
                elif types[key] == "float":
                    values[key] = float(value)
                else:
                    values[key] = value
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value {value!r} for {key}") from None
            try:
                cls(**{key: values[key]}).validate(allow_off_grid=True)
            except ConfigError as exc:
                raise ConfigError(f"line {lineno}: {exc}") from None
        cfg = cls(**values)
        try:
            cfg.validate(allow_off_grid)
        except ConfigError as exc:
            key = getattr(exc, "key", None)
            if key in linenos:
                raise ConfigError(f"line {linenos[key]}: {exc}") from None
            raise
        return cfg

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


# -- history ----------------------------------------------------------------


def best_index(values) -> int:
    """Index of the maximum; ties resolve to the earliest entry."""
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    train_acc: float
    val: MetricsReport


HISTORY_HEADER = (
    "epoch,lr,loss,train_acc,val_accuracy,val_auroc,val_auprc,val_sensitivity,val_specificity,val_metric"
)


@dataclass
class TrainHistory:
    metric: str
    records: list = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    @property
    def best_epoch(self) -> int:
        return self.records[best_index([r.val.metric_value for r in self.records])].epoch

    def to_csv(self) -> str:
        lines = [HISTORY_HEADER]
        for r in self.records:
            v = r.val
            cells = [r.epoch, r.lr, r.loss, r.train_acc, v.accuracy, v.auroc, v.auprc, v.sensitivity, v.specificity, v.metric_value]
            lines.append(",".join(repr(c) for c in cells))
        return "\n".join(lines) + "\n"


# -- epoch loop -------------------------------------------------------------


def resolve_profile(profile_id: str, train_images: np.ndarray | None = None) -> NormProfile:
    if profile_id == "imagenet":
        return IMAGENET
    if profile_id == "dataset":
        if train_images is None:
            raise ConfigError("the 'dataset' profile needs training images to compute statistics")
        return dataset_profile(train_images)
    raise ConfigError(f"unknown normalization profile {profile_id!r}")


def predict_proba(model: Model, images: np.ndarray, profile: NormProfile, batch_size: int = 32) -> np.ndarray:
    """Inference-mode class probabilities for raw [0,1] images."""
    was_training = model.training
    model.eval()
    try:
        out = [softmax(model.forward(normalize(images[i : i + batch_size], profile))) for i in range(0, len(images), batch_size)]
    finally:
        model.train(was_training)
    return np.concatenate(out)


def batch_slices(n: int, batch_size: int) -> list[slice]:
    """Consecutive batches; the last partial batch is kept, but a single leftover sample joins the batch before it."""
    starts = list(range(0, n, batch_size))
    slices = [slice(s, min(s + batch_size, n)) for s in starts]
    if len(slices) > 1 and slices[-1].stop - slices[-1].start == 1:
        slices[-2] = slice(slices[-2].start, n)
        slices.pop()
    return slices


def fit(
    config: TrainConfig,
    train_set: Dataset,
    val_set: Dataset,
    model: Model | None = None,
    allow_off_grid: bool = False,
) -> tuple[Model, TrainHistory]:
    """Train for ``config.epochs`` epochs; return the best-validation snapshot and the history.

    When ``model`` is given it is trained in place (its final state is the
    last epoch's); otherwise one is built from the config.
    """
    config.validate(allow_off_grid)
    if len(train_set) == 0 or len(val_set) == 0:
        raise ShapeError("train and validation sets must be non-empty")
    if train_set.image_size != val_set.image_size:
        raise ShapeError("train and validation image sizes differ")
    root = Rng(config.seed)
    if model is None:
        spec = ModelSpec(width_multiplier=config.width, dropout=config.dropout, input_size=train_set.image_size)
        model = build_model(spec, root)
    policy = AUGMENT_PROFILES[config.augment_profile]
    profile = resolve_profile(policy.profile, train_set.images)
    meta = {
        "norm_profile": profile.to_dict(),
        "train_config": asdict(config),
        "config_digest": config.digest(),
        "rng": {"algorithm": Rng.algorithm, "seed": config.seed},
    }
    model.meta.update(meta)
    state = AdamPState()
    history = TrainHistory(config.metric)
    best_model, best_value = None, -math.inf
    n = len(train_set)
    val_labels = val_set.labels

    model.train()
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr_max, config.lr_min)
        order = root.child(STREAM_SHUFFLE, epoch).permutation(n)
        loss_sum, correct = 0.0, 0
        for b, sl in enumerate(batch_slices(n, config.batch_size)):
            idx = order[sl]
            batch = np.stack(
                [augment_sample(train_set.images[i], policy, root.child(STREAM_AUGMENT, epoch, int(i))) for i in idx]
            )
            labels = train_set.labels[idx]
            # overflow surfaces as NonFiniteError below, not as numpy warnings
            with np.errstate(over="ignore", invalid="ignore"):
                logits, tapes = model.forward_train(normalize(batch, profile), root.child(STREAM_DROPOUT, epoch, b))
                loss, grad = cross_entropy(logits, labels)
                if not math.isfinite(loss):
                    raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b} (lr={lr:g})")
                grads = model.backward(tapes, grad)
                params = dict(model.named_parameters())
                for name, value in adamp_step(state, params, grads, lr, config.weight_decay).items():
                    model.set(name, value)
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == labels))
        probs = predict_proba(model, val_set.images, profile)
        report = evaluate(probs[:, 1], val_labels, metric=config.metric)
        record = EpochRecord(epoch, lr, loss_sum / n, correct / n, report)
        history.records.append(record)
        if report.metric_value > best_value:
            best_value = report.metric_value
            best_model = model.copy()
            best_model.meta["best_epoch"] = epoch
        log.info(
            "epoch %d lr %.3g loss %.5f train_acc %.3f val_%s %.4f",
            epoch, lr, record.loss, record.train_acc, config.metric, report.metric_value,
        )
    model.eval()
    return best_model, history
