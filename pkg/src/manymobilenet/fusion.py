"""Prediction voting across independently trained members.

Each member normalizes images with its own profile, runs inference and
emits class probabilities; the ensemble fuses them by componentwise mean or
componentwise max (renormalized).  ``argmax_confidence`` instead hands the
decision to the single most confident member.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import IMAGENET, NormProfile, normalize
from .errors import CheckpointError, ConfigError, DataError, ShapeError
from .model import Model, load_checkpoint
from .train import softmax

FUSION_MODES = ("max", "average", "argmax_confidence")
FUSE_ON = ("probs", "logits", "labels")

# two lightweight members and one medium-width member, each with its own profile
MANY_MOBILENET_PRESET = (
    (1.0, "imagenet"),
    (1.0, "dataset"),
    (3.0, "imagenet"),
)


def _stack(member_probs) -> np.ndarray:
    arr = np.asarray(member_probs, dtype=np.float64)
    if arr.ndim == 1:
        raise ShapeError("expected a list of member vectors")
    if arr.shape[0] < 1:
        raise ShapeError("need at least one member")
    return arr


def _check_simplex(arr, tol=1e-5):
    if not np.allclose(arr.sum(axis=-1), 1.0, atol=tol, rtol=0):
        raise ValueError("member probability vectors must sum to 1")


def fuse_average(member_probs) -> np.ndarray:
    """Componentwise mean over members (axis 0).

    Values are sorted along the member axis before summing so the result is
    bitwise independent of member order.
    """
    try:
        arr = _stack(member_probs)
    except ValueError as exc:
        raise ShapeError(f"member vectors differ in length: {exc}") from None
    _check_simplex(arr)
    return np.sort(arr, axis=0).sum(axis=0) / arr.shape[0]


def fuse_max(member_probs) -> np.ndarray:
    """Componentwise max over members, renormalized to sum to 1."""
    try:
        arr = _stack(member_probs)
    except ValueError as exc:
        raise ShapeError(f"member vectors differ in length: {exc}") from None
    _check_simplex(arr)
    peak = arr.max(axis=0)
    total = peak.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise ValueError("max-fused vector is all zeros")
    return peak / total


def fuse_argmax_confidence(member_probs) -> np.ndarray:
    """Output of the member whose top probability is highest (ties -> lower member index)."""
    arr = _stack(member_probs)
    _check_simplex(arr)
    winner = np.argmax(arr.max(axis=-1), axis=0)
    if arr.ndim == 2:
        return arr[winner].copy()
    return arr[winner, np.arange(arr.shape[1])]


_FUSERS = {"average": fuse_average, "max": fuse_max, "argmax_confidence": fuse_argmax_confidence}


def fuse(member_outputs, mode: str = "average", fuse_on: str = "probs") -> np.ndarray:
    """Fuse (M, ..., K) member outputs.  ``member_outputs`` are logits unless ``fuse_on='probs'``.

    ``probs``: fuse softmax probabilities.  ``logits``: fuse raw logits then
    softmax.  ``labels``: fuse one-hot hard votes.
    """
    if mode not in _FUSERS:
        raise ConfigError(f"unknown fusion mode {mode!r}")
    arr = np.asarray(member_outputs, dtype=np.float64)
    if fuse_on == "probs":
        return _FUSERS[mode](arr)
    if fuse_on == "labels":
        k = arr.shape[-1]
        return _FUSERS[mode](np.eye(k)[np.argmax(arr, axis=-1)])
    if fuse_on == "logits":
        if mode == "average":
            z = np.sort(arr, axis=0).sum(axis=0) / arr.shape[0]
        elif mode == "max":
            z = arr.max(axis=0)
        else:
            return fuse_argmax_confidence(softmax(arr.reshape(-1, arr.shape[-1])).reshape(arr.shape))
        return softmax(z.reshape(-1, z.shape[-1])).reshape(z.shape)
    raise ConfigError(f"fuse_on must be one of {FUSE_ON}")


@dataclass
class FusedPrediction:
    member_probs: np.ndarray  # (M, K)
    fused_probs: np.ndarray  # (K,)
    predicted: int
    score: float  # fused probability of class 1


@dataclass
class EnsembleSpec:
    members: list = field(default_factory=list)  # [(checkpoint path, profile id), ...]
    mode: str = "average"
    fuse_on: str = "probs"

    def validate(self) -> "EnsembleSpec":
        if len(self.members) < 2:
            raise ConfigError("an ensemble spec needs at least 2 members")
        if self.mode not in FUSION_MODES:
            raise ConfigError(f"mode must be one of {FUSION_MODES}")
        if self.fuse_on not in FUSE_ON:
            raise ConfigError(f"fuse_on must be one of {FUSE_ON}")
        return self

    def to_text(self) -> str:
        lines = [f"member={path},{profile}" for path, profile in self.members]
        lines.append(f"mode={self.mode}")
        if self.fuse_on != "probs":
            lines.append(f"fuse_on={self.fuse_on}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base_dir=None) -> "EnsembleSpec":
        """Parse ``member=<path>,<profile>`` / ``mode=`` / ``fuse_on=`` lines.

        Relative member paths resolve against ``base_dir`` when given.
        """
        spec = cls()
        seen_mode = False
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected key=value")
            key, value = key.strip(), value.strip()
            if key == "member":
                path, comma, profile = value.rpartition(",")
                if not comma or not path or not profile:
                    raise ConfigError(f"line {lineno}: member needs '<checkpoint>,<profile>'")
                if base_dir is not None and not Path(path).is_absolute():
                    path = str(Path(base_dir) / path)
                spec.members.append((path, profile))
            elif key == "mode":
                if seen_mode:
                    raise ConfigError(f"line {lineno}: duplicate mode")
                seen_mode = True
                spec.mode = value
            elif key == "fuse_on":
                spec.fuse_on = value
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        return spec.validate()


@dataclass
class Member:
    model: Model
    profile: NormProfile
    name: str = ""


def member_profile(model: Model, profile_id: str) -> NormProfile:
    """``imagenet`` is fixed; ``dataset`` uses the statistics stored with the checkpoint."""
    if profile_id == "imagenet":
        return IMAGENET
    if profile_id == "dataset":
        stored = model.meta.get("norm_profile")
        if not stored or stored.get("name") != "dataset":
            raise ConfigError("checkpoint carries no 'dataset' normalization statistics")
        return NormProfile.from_dict(stored)
    raise ConfigError(f"unknown normalization profile {profile_id!r}")


def load_members(spec: EnsembleSpec) -> list[Member]:
    members = []
    for i, (path, profile_id) in enumerate(spec.members):
        try:
            model = load_checkpoint(path)
            profile = member_profile(model, profile_id)
        except FileNotFoundError:
            raise CheckpointError(f"member {i}: checkpoint {path} not found") from None
        except (CheckpointError, ConfigError) as exc:
            raise type(exc)(f"member {i} ({path}): {exc}") from None
        members.append(Member(model.eval(), profile, f"member_{i}"))
    classes = {m.model.spec.num_classes for m in members}
    if len(classes) != 1:
        raise ConfigError(f"members disagree on num_classes: {sorted(classes)}")
    return members


class Ensemble:
    """Members plus fusion settings.  ``predict`` is deterministic for any ``workers`` value."""

    def __init__(self, members: list[Member], mode: str = "average", fuse_on: str = "probs"):
        if not members:
            raise ConfigError("an ensemble needs at least one member")
        if mode not in FUSION_MODES:
            raise ConfigError(f"mode must be one of {FUSION_MODES}")
        if fuse_on not in FUSE_ON:
            raise ConfigError(f"fuse_on must be one of {FUSE_ON}")
        if len({m.model.spec.num_classes for m in members}) != 1:
            raise ConfigError("members disagree on num_classes")
        self.members = members
        self.mode = mode
        self.fuse_on = fuse_on
        self.member_seconds = [0.0] * len(members)

    @classmethod
    def from_spec(cls, spec: EnsembleSpec) -> "Ensemble":
        spec.validate()
        return cls(load_members(spec), spec.mode, spec.fuse_on)

    def _member_logits(self, member: Member, images: np.ndarray, batch_size: int):
        start = time.perf_counter()
        model = member.model.eval()
        out = [
            model.forward(normalize(images[i : i + batch_size], member.profile)).astype(np.float64)
            for i in range(0, len(images), batch_size)
        ]
        return np.concatenate(out), time.perf_counter() - start

    def predict(self, images: np.ndarray, batch_size: int = 32, workers: int = 1) -> list[FusedPrediction]:
        images = np.asarray(images)
        if images.ndim != 4:
            raise DataError(f"expected (N,3,H,W) images, got {images.shape}")
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda m: self._member_logits(m, images, batch_size), self.members))
        else:
            results = [self._member_logits(m, images, batch_size) for m in self.members]
        logits = np.stack([r[0] for r in results])  # (M, N, K)
        self.member_seconds = [r[1] for r in results]
        probs = softmax(logits.reshape(-1, logits.shape[-1])).reshape(logits.shape)
        fused = fuse(probs if self.fuse_on == "probs" else logits, self.mode, self.fuse_on)
        preds = []
        for i in range(images.shape[0]):
            p = fused[i]
            preds.append(FusedPrediction(probs[:, i, :], p, int(np.argmax(p)), float(p[1])))
        return preds


def ensemble_predict(spec: EnsembleSpec, images: np.ndarray, workers: int = 1) -> list[FusedPrediction]:
    return Ensemble.from_spec(spec).predict(images, workers=workers)


def format_score(x: float) -> str:
    return f"{x:.6f}"


def fused_csv(ids, preds: list[FusedPrediction]) -> str:
    """``id,score,pred,member_0,...`` with the positive-class score of every member."""
    m = preds[0].member_probs.shape[0] if preds else 0
    lines = [",".join(["id", "score", "pred"] + [f"member_{j}" for j in range(m)])]
    for sid, p in zip(ids, preds):
        cells = [sid, format_score(p.score), str(p.predicted)]
        cells += [format_score(v) for v in p.member_probs[:, 1]]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def member_csv(ids, preds: list[FusedPrediction], index: int) -> str:
    lines = ["id,score,pred"]
    for sid, p in zip(ids, preds):
        probs = p.member_probs[index]
        lines.append(f"{sid},{format_score(probs[1])},{int(np.argmax(probs))}")
    return "\n".join(lines) + "\n"
