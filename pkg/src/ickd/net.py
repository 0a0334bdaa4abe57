"""Fully-connected ReLU classifiers with hand-written reverse mode.

Parameters live in a single flat float64 vector, laid out layer by layer:
the ``(fan_in, fan_out)`` weight matrix in row-major order followed by the
``fan_out`` biases. A layer computes ``a @ W + b``.

The activation list of a forward pass is indexed from 0 (the input) to
``L - 1`` (the logits). ``feature_layer_index`` picks the activation that
plays the role of the feature vector ``h``; everything after it is the
classifier head.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgumentError, NumericInstabilityError

CHECKPOINT_MAGIC = b"ICKD"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpArchitecture:
    layer_widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise InvalidArgumentError("an architecture needs at least input and output widths")
        if any(w < 1 for w in widths):
            raise InvalidArgumentError(f"layer widths must be >= 1, got {widths}")
        if self.activation != "relu":
            raise InvalidArgumentError(f"unsupported activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths)

    @property
    def n_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def default_feature_index(self) -> int:
        return self.n_layers - 2


def _layer_slices(arch: MlpArchitecture):
    out = []
    offset = 0
    w = arch.layer_widths
    for i in range(len(w) - 1):
        nw = w[i] * w[i + 1]
        out.append((slice(offset, offset + nw), slice(offset + nw, offset + nw + w[i + 1])))
        offset += nw + w[i + 1]
    return out


@dataclass(frozen=True)
class MlpModel:
    architecture: MlpArchitecture
    parameters: np.ndarray
    feature_layer_index: int = -1

    def __post_init__(self):
        params = np.array(self.parameters, dtype=np.float64).ravel()
        if params.size != self.architecture.n_params:
            raise InvalidArgumentError(
                f"parameter count {params.size} does not match architecture ({self.architecture.n_params})"
            )
        params.flags.writeable = False
        object.__setattr__(self, "parameters", params)
        idx = self.feature_layer_index
        if idx == -1:
            idx = self.architecture.default_feature_index()
        if not 0 <= idx < self.architecture.n_layers:
            raise InvalidArgumentError(f"feature_layer_index {idx} out of range")
        object.__setattr__(self, "feature_layer_index", int(idx))

    def layers(self):
        """Yield ``(W, b)`` views for each affine layer."""
        w = self.architecture.layer_widths
        for i, (ws, bs) in enumerate(_layer_slices(self.architecture)):
            yield self.parameters[ws].reshape(w[i], w[i + 1]), self.parameters[bs]

    def with_parameters(self, parameters) -> "MlpModel":
        return MlpModel(self.architecture, parameters, self.feature_layer_index)


@dataclass(frozen=True)
class ForwardRecord:
    features: np.ndarray
    logits: np.ndarray
    activations: tuple = field(repr=False)
    architecture: MlpArchitecture = field(repr=False)


def init_model(arch: MlpArchitecture, seed: int, feature_layer_index: int = -1) -> MlpModel:
    """Gaussian weights with std 1/sqrt(fan_in), zero biases (Philox stream)."""
    rng = np.random.Generator(np.random.Philox(int(seed)))
    params = np.zeros(arch.n_params)
    w = arch.layer_widths
    for i, (ws, _) in enumerate(_layer_slices(arch)):
        params[ws] = rng.standard_normal(w[i] * w[i + 1]) / np.sqrt(w[i])
    return MlpModel(arch, params, feature_layer_index)


def forward(model: MlpModel, x) -> ForwardRecord:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.architecture.layer_widths[0] or x.ndim not in (1, 2):
        raise InvalidArgumentError(
            f"input shape {x.shape} does not match input width {model.architecture.layer_widths[0]}"
        )
    acts = [x]
    a = x
    layers = list(model.layers())
    for i, (W, b) in enumerate(layers):
        a = a @ W + b
        if i < len(layers) - 1:
            a = np.maximum(a, 0.0)
        acts.append(a)
    return ForwardRecord(acts[model.feature_layer_index], acts[-1], tuple(acts), model.architecture)


def backward(model: MlpModel, record: ForwardRecord, logit_gradient) -> np.ndarray:
    """Parameter gradient given dLoss/dlogits (batch rows are summed)."""
    if record.architecture != model.architecture:
        raise InvalidArgumentError("forward record was produced by a different architecture")
    g = np.asarray(logit_gradient, dtype=np.float64)
    if g.shape != record.logits.shape:
        raise InvalidArgumentError(f"logit gradient shape {g.shape} != logits shape {record.logits.shape}")
    acts = record.activations
    batched = g.ndim == 2
    grad = np.zeros(model.architecture.n_params)
    slices = _layer_slices(model.architecture)
    layers = list(model.layers())
    for i in range(len(layers) - 1, -1, -1):
        a_in = acts[i]
        ws, bs = slices[i]
        if batched:
            grad[ws] = (a_in.T @ g).ravel()
            grad[bs] = g.sum(axis=0)
        else:
            grad[ws] = np.outer(a_in, g).ravel()
            grad[bs] = g
        if i > 0:
            g = (g @ layers[i][0].T) * (acts[i] > 0.0)
    return grad


def sgd_step(model: MlpModel, gradient, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, state=None):
    """One heavy-ball SGD update; returns ``(new_model, new_velocity)``."""
    g = np.asarray(gradient, dtype=np.float64)
    theta = model.parameters
    if g.shape != theta.shape:
        raise InvalidArgumentError(f"gradient length {g.size} != parameter count {theta.size}")
    if not np.all(np.isfinite(g)):
        raise NumericInstabilityError("non-finite gradient in SGD step")
    v = np.zeros_like(theta) if state is None else np.asarray(state, dtype=np.float64)
    v = momentum * v + g + weight_decay * theta
    return model.with_parameters(theta - lr * v), v


def save_checkpoint(model: MlpModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def checkpoint_bytes(model: MlpModel) -> bytes:
    widths = model.architecture.layer_widths
    head = CHECKPOINT_MAGIC + struct.pack("<HH", CHECKPOINT_VERSION, len(widths))
    head += struct.pack(f"<{len(widths)}I", *widths)
    head += struct.pack("<H", model.feature_layer_index)
    return head + model.parameters.astype("<f8").tobytes()


def load_checkpoint(path) -> MlpModel:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_bytes(buf: bytes) -> MlpModel:
    if len(buf) < 8:
        raise FormatError("checkpoint header truncated", len(buf))
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version, n_layers = struct.unpack_from("<HH", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos = 8
    need = pos + 4 * n_layers + 2
    if len(buf) < need:
        raise FormatError("checkpoint layer table truncated", len(buf))
    widths = struct.unpack_from(f"<{n_layers}I", buf, pos)
    pos += 4 * n_layers
    (feature_index,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    try:
        arch = MlpArchitecture(widths)
    except InvalidArgumentError as exc:
        raise FormatError(str(exc), 8) from None
    n_bytes = 8 * arch.n_params
    if len(buf) - pos != n_bytes:
        raise FormatError(f"expected {n_bytes} parameter bytes, found {len(buf) - pos}", min(len(buf), pos + n_bytes))
    params = np.frombuffer(buf, dtype="<f8", count=arch.n_params, offset=pos).astype(np.float64)
    try:
        return MlpModel(arch, params, feature_index)
    except InvalidArgumentError as exc:
        raise FormatError(str(exc), pos - 2) from None
