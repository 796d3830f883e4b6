"""The fusion model: per-modality alignment, staged row fusion, the learned
per-modality gate, the convolution + channel-attention trunk, and the
softmax head, plus a bit-exact text checkpoint format.

Geometry: each enabled modality is projected to a common d_align vector;
the projected rows are stacked (face, then body, then text) as the height
axis of a single-channel 2D map, so the convolution kernels span
modalities. The gate multiplies each modality row by a learned scale once
training latches it on; before that the scales are absent from the graph.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, Mapping, Optional

import numpy as np

from . import rng
from .autodiff import Tensor, make_node
from .errors import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointVersionError,
    ConfigError,
    DimensionError,
    InputError,
)
from .layers import (
    ClassifierParams,
    SEParams,
    conv2d,
    global_max_pool,
    linear,
    scale_heights,
    se_excite,
    se_scale,
    se_squeeze,
    softmax,
    stack_rows,
)

CHECKPOINT_VERSION = 1

DEFAULT_LABELS = ("angry", "disgust", "happy", "sad", "scared")
DEFAULT_INPUT_DIMS = {"face": 2048, "body": 2048, "text": 768}


class Modality(str, Enum):
    FACE = "face"
    BODY = "body"
    TEXT = "text"


CANONICAL_ORDER = (Modality.FACE, Modality.BODY, Modality.TEXT)
_RANK = {m: i for i, m in enumerate(CANONICAL_ORDER)}


def parse_modality(value) -> Modality:
    if isinstance(value, Modality):
        return value
    try:
        return Modality(str(value).strip().lower())
    except ValueError:
        raise InputError(f"unknown modality {value!r}; expected face, body, or text")


def canonical_modalities(values: Iterable) -> tuple:
    """Normalize to the canonical (face, body, text) order, rejecting dups."""
    parsed = [parse_modality(v) for v in values]
    if not parsed:
        raise ConfigError("at least one modality must be enabled")
    if len(set(parsed)) != len(parsed):
        raise ConfigError("duplicate modality in selection")
    return tuple(sorted(parsed, key=_RANK.__getitem__))


def canonical_key(values: Iterable) -> str:
    """Canonical string key for a modality set, e.g. 'face+body+text'."""
    return "+".join(m.value for m in canonical_modalities(values))


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults are desk-scale."""

    enabled_modalities: tuple = CANONICAL_ORDER
    input_dims: Dict[Modality, int] = field(default_factory=dict)
    d_align: int = 32
    conv_out_channels: int = 16
    kernel_h: int = 3
    kernel_w: int = 3
    stride: int = 1
    pad: int = 1
    reduction_ratio: int = 4
    num_classes: int = 5
    label_names: tuple = DEFAULT_LABELS

    def __post_init__(self):
        self.enabled_modalities = canonical_modalities(self.enabled_modalities)
        dims = {parse_modality(k): int(v) for k, v in (self.input_dims or {}).items()}
        for m in Modality:
            dims.setdefault(m, DEFAULT_INPUT_DIMS[m.value])
        self.input_dims = dims
        self.label_names = tuple(str(n) for n in self.label_names)
        if len(self.label_names) != self.num_classes:
            raise ConfigError(
                f"{len(self.label_names)} label names for {self.num_classes} classes"
            )
        if len(set(self.label_names)) != len(self.label_names):
            raise ConfigError("label names must be distinct")
        for name in ("d_align", "conv_out_channels", "kernel_h", "kernel_w",
                     "stride", "num_classes", "reduction_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.pad < 0:
            raise ConfigError("pad must be nonnegative")
        if self.conv_out_channels % self.reduction_ratio != 0:
            raise ConfigError(
                f"reduction ratio {self.reduction_ratio} must divide "
                f"{self.conv_out_channels} channels"
            )
        for m in self.enabled_modalities:
            if self.input_dims[m] < 1:
                raise ConfigError(f"input dim for {m.value} must be positive")

    @property
    def modality_key(self) -> str:
        return canonical_key(self.enabled_modalities)

    def to_dict(self) -> dict:
        return {
            "enabled_modalities": [m.value for m in self.enabled_modalities],
            "input_dims": {m.value: d for m, d in sorted(self.input_dims.items(), key=lambda kv: _RANK[kv[0]])},
            "d_align": self.d_align,
            "conv_out_channels": self.conv_out_channels,
            "kernel_h": self.kernel_h,
            "kernel_w": self.kernel_w,
            "stride": self.stride,
            "pad": self.pad,
            "reduction_ratio": self.reduction_ratio,
            "num_classes": self.num_classes,
            "label_names": list(self.label_names),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(
            enabled_modalities=tuple(d["enabled_modalities"]),
            input_dims=dict(d.get("input_dims", {})),
            d_align=int(d["d_align"]),
            conv_out_channels=int(d["conv_out_channels"]),
            kernel_h=int(d["kernel_h"]),
            kernel_w=int(d["kernel_w"]),
            stride=int(d["stride"]),
            pad=int(d["pad"]),
            reduction_ratio=int(d["reduction_ratio"]),
            num_classes=int(d["num_classes"]),
            label_names=tuple(d["label_names"]),
        )


def parameter_shapes(config: ModelConfig) -> Dict[str, tuple]:
    """Canonical parameter names and shapes, in initialization order."""
    shapes: Dict[str, tuple] = {}
    for m in config.enabled_modalities:
        shapes[f"align.{m.value}.weight"] = (config.d_align, config.input_dims[m])
        shapes[f"align.{m.value}.bias"] = (config.d_align,)
    shapes["conv.kernels"] = (config.conv_out_channels, 1, config.kernel_h, config.kernel_w)
    c, r = config.conv_out_channels, config.reduction_ratio
    shapes["se.w1"] = (c // r, c)
    shapes["se.w2"] = (c, c // r)
    shapes["logit_scale"] = (len(config.enabled_modalities),)
    shapes["classifier.weight"] = (config.num_classes, config.conv_out_channels)
    shapes["classifier.bias"] = (config.num_classes,)
    return shapes


def _init_array(name: str, shape: tuple, stream: rng.SplitMix64) -> np.ndarray:
    if name == "logit_scale":
        return np.ones(shape, dtype=np.float32)
    if name.endswith(".bias"):
        return np.zeros(shape, dtype=np.float32)
    # weights and kernels: uniform in +/- sqrt(6 / fan_in)
    fan_in = int(np.prod(shape[1:]))
    bound = float(np.sqrt(6.0 / fan_in))
    return stream.uniform(-bound, bound, shape).astype(np.float32)


def fuse(rows: Tensor) -> Tensor:
    """View aligned rows [n x d] as a single-record fused map [1,1,n,d]."""
    if rows.data.ndim != 2:
        raise DimensionError(f"fuse: expected [rows x d_align], got {rows.shape}")

    def backward_fn(g):
        return (np.ascontiguousarray(g[0, 0]),)

    return make_node(np.ascontiguousarray(rows.data[None, None]), (rows,), backward_fn)


def apply_gate(fused: Tensor, logit_scale: Tensor, gate_active: bool) -> Tensor:
    """Multiply modality row m by logit_scale[m] when the gate is latched.

    With the gate off the map passes through untouched and the scales are
    not part of the gradient graph.
    """
    if not gate_active:
        return fused
    return scale_heights(fused, logit_scale)


def build_probabilities(
    features: Mapping[Modality, np.ndarray],
    params: Mapping[str, Tensor],
    config: ModelConfig,
    gate_active: bool,
) -> Tensor:
    return softmax(build_logits(features, params, config, gate_active))


def build_logits(
    features: Mapping[Modality, np.ndarray],
    params: Mapping[str, Tensor],
    config: ModelConfig,
    gate_active: bool,
) -> Tensor:
    """Full pipeline from per-modality batches to class logits.

    Pure function of the given parameter tensors, so the same graph can be
    rebuilt in float64 for gradient checking.
    """
    dtype = params["conv.kernels"].dtype
    rows = []
    for m in config.enabled_modalities:
        x = Tensor(np.asarray(features[m], dtype=dtype))
        rows.append(linear(x, params[f"align.{m.value}.weight"], params[f"align.{m.value}.bias"]))
    fused = stack_rows(rows)
    gated = apply_gate(fused, params["logit_scale"], gate_active)
    conv = conv2d(gated, params["conv.kernels"], stride=config.stride, pad=config.pad)
    squeezed = se_squeeze(conv)
    gates = se_excite(squeezed, SEParams(params["se.w1"], params["se.w2"], config.reduction_ratio))
    attended = se_scale(conv, gates)
    pooled = global_max_pool(attended)
    return linear(pooled, params["classifier.weight"], params["classifier.bias"])


class FafModel:
    """All learnable parameters plus the architecture config and gate latch.

    Immutable during inference (forward never writes to parameters), so a
    loaded model is safe to share across concurrent readers. Training
    mutates its own private instance.
    """

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor], gate_active: bool = False):
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter set mismatch: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(
                    f"parameter {name} has shape {params[name].shape}, expected {shape}"
                )
        if not np.isfinite(params["logit_scale"].data).all():
            raise ConfigError("logit_scale must be finite")
        self.config = config
        self.params = params
        self.gate_active = bool(gate_active)

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "FafModel":
        """Fresh model; weights drawn from the seed's init substream in
        canonical parameter order."""
        stream = rng.stream(seed, rng.STREAM_INIT)
        params = {
            name: Tensor(_init_array(name, shape, stream), requires_grad=True, name=name)
            for name, shape in parameter_shapes(config).items()
        }
        return cls(config, params, gate_active=False)

    # ---- feature handling -------------------------------------------------

    def coerce_features(self, features: Mapping) -> Dict[Modality, np.ndarray]:
        """Validate and batch per-modality inputs.

        Accepts single vectors or [B x dim] batches keyed by modality (enum
        or string). Raises InputError naming any missing modality and
        DimensionError for wrong vector lengths.
        """
        table: Dict[Modality, np.ndarray] = {}
        for key, value in features.items():
            if value is None:
                continue
            table[parse_modality(key)] = np.asarray(value, dtype=np.float32)
        batch_size = None
        out: Dict[Modality, np.ndarray] = {}
        for m in self.config.enabled_modalities:
            if m not in table:
                raise InputError(f"missing modality: {m.value}")
            arr = table[m]
            if arr.ndim == 1:
                arr = arr[None, :]
            if arr.ndim != 2:
                raise DimensionError(
                    f"{m.value} features must be a vector or [batch x dim] matrix"
                )
            want = self.config.input_dims[m]
            if arr.shape[1] != want:
                raise DimensionError(
                    f"{m.value} vector has length {arr.shape[1]}, expected {want}"
                )
            if batch_size is None:
                batch_size = arr.shape[0]
            elif arr.shape[0] != batch_size:
                raise DimensionError("modalities disagree on batch size")
            out[m] = arr
        return out

    # ---- forward surfaces --------------------------------------------------

    def align(self, features: Mapping) -> Tensor:
        """Aligned rows [|M| x d_align] for one record, canonical row order."""
        batch = self.coerce_features(features)
        rows = []
        for m in self.config.enabled_modalities:
            if batch[m].shape[0] != 1:
                raise DimensionError("align expects a single record")
            x = Tensor(batch[m])
            rows.append(
                linear(x, self.params[f"align.{m.value}.weight"], self.params[f"align.{m.value}.bias"])
            )
        stacked = stack_rows(rows)  # [1, 1, |M|, d]

        def backward_fn(g):
            return (np.ascontiguousarray(g[None, None]),)

        return make_node(np.ascontiguousarray(stacked.data[0, 0]), (stacked,), backward_fn)

    def forward_logits(self, features: Mapping) -> Tensor:
        return build_logits(self.coerce_features(features), self.params, self.config, self.gate_active)

    def forward(self, features: Mapping) -> Tensor:
        """Class probabilities [B x num_classes]; rows sum to 1."""
        return softmax(self.forward_logits(features))

    def predict(self, features: Mapping) -> dict:
        """Scores per label plus the argmax label (lowest index on ties)."""
        probs = self.forward(features).data
        if probs.shape[0] != 1:
            raise DimensionError("predict expects a single record")
        row = probs[0]
        scores = {label: float(p) for label, p in zip(self.config.label_names, row)}
        predicted = self.config.label_names[int(np.argmax(row))]
        return {"scores": scores, "predicted": predicted}

    def predict_dataset(self, records, batch_size: int = 256):
        """(y_true, y_pred, scores[N x C]) over FeatureRecord-like rows."""
        labels = list(self.config.label_names)
        y_true = np.array([labels.index(r.label) for r in records], dtype=np.int64)
        chunks = []
        for start in range(0, len(records), batch_size):
            part = records[start : start + batch_size]
            feats = {
                m: np.stack([getattr(r, m.value) for r in part])
                for m in self.config.enabled_modalities
            }
            chunks.append(self.forward(feats).data)
        scores = np.concatenate(chunks, axis=0)
        return y_true, scores.argmax(axis=1), scores

    # ---- persistence --------------------------------------------------------

    def save(self, path) -> None:
        """Write a versioned text checkpoint; float32 payloads are base64 of
        little-endian bytes, so load reproduces every parameter bit-exactly."""
        doc = {
            "format_version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "gate_active": self.gate_active,
            "label_names": list(self.config.label_names),
            "parameters": {
                name: {
                    "shape": list(t.shape),
                    "data": base64.b64encode(
                        np.ascontiguousarray(t.data, dtype="<f4").tobytes()
                    ).decode("ascii"),
                }
                for name, t in self.params.items()
            },
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "FafModel":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"unreadable checkpoint {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise CheckpointFormatError(f"checkpoint {path} is not an object")
        version = doc.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"checkpoint version {version!r} unsupported (expected {CHECKPOINT_VERSION})"
            )
        try:
            config = ModelConfig.from_dict(doc["config"])
            gate_active = bool(doc["gate_active"])
            raw_params = doc["parameters"]
        except (KeyError, TypeError, ConfigError, InputError) as exc:
            raise CheckpointFormatError(f"malformed checkpoint {path}: {exc}") from exc

        expected = parameter_shapes(config)
        if set(raw_params) != set(expected):
            raise CheckpointFormatError(
                f"checkpoint {path} parameter names do not match its config"
            )
        params: Dict[str, Tensor] = {}
        for name, shape in expected.items():
            entry = raw_params[name]
            try:
                stored_shape = tuple(int(s) for s in entry["shape"])
                payload = base64.b64decode(entry["data"], validate=True)
            except (KeyError, TypeError, ValueError) as exc:
                raise CheckpointFormatError(
                    f"malformed payload for parameter {name}: {exc}"
                ) from exc
            if stored_shape != shape:
                raise CheckpointShapeError(
                    f"parameter {name} has shape {stored_shape}, config implies {shape}"
                )
            count = int(np.prod(shape))
            if len(payload) != 4 * count:
                raise CheckpointFormatError(
                    f"parameter {name}: payload holds {len(payload)} bytes, "
                    f"expected {4 * count}"
                )
            data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
            params[name] = Tensor(data.copy(), requires_grad=True, name=name)
        return cls(config, params, gate_active=gate_active)
