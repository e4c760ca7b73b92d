"""
Feed-forward Network Core
Glorot-initialized MLP with a canonical flat parameter view, greedy action
selection, manual backprop for the squared TD error, and the EVSD checkpoint
format shared by training runs, workers and the results service.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence, Union

import numpy as np

from app.models import Activation, MlpSpec

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"EVSD"
CHECKPOINT_VERSION = 1
_ACTIVATION_TAGS = {Activation.TANH: 0, Activation.RELU: 1}
_TAG_ACTIVATIONS = {tag: act for act, tag in _ACTIVATION_TAGS.items()}


class ShapeMismatchError(ValueError):
    """Raised when an input or parameter vector does not match the network spec."""
    pass


class CheckpointFormatError(ValueError):
    """Raised when checkpoint bytes are truncated, corrupt or of an unknown version."""
    pass


@dataclass(frozen=True, eq=False)
class MlpPolicy:
    """
    Immutable MLP. weights[k] has shape (fan_out, fan_in) and maps h_k to
    h_{k+1} = act(weights[k] @ h_k + biases[k]); the last layer is affine.
    """
    spec: MlpSpec
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        for w, b in zip(self.weights, self.biases):
            w.flags.writeable = False
            b.flags.writeable = False


class TdBatch(NamedTuple):
    observations: np.ndarray   # (B, input_dim)
    actions: np.ndarray        # (B,) int
    targets: np.ndarray        # (B,)


# ── Construction ──────────────────────────────────────────────────────────────

def init_policy(spec: MlpSpec, seed: int) -> MlpPolicy:
    """Glorot-uniform weights, zero biases; a pure function of (spec, seed)."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_dims:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpPolicy(spec, tuple(weights), tuple(biases))


def from_layers(spec: MlpSpec, weights: Sequence, biases: Sequence) -> MlpPolicy:
    """Build a policy from explicit per-layer arrays (copied, validated)."""
    layers = spec.layer_dims
    if len(weights) != len(layers) or len(biases) != len(layers):
        raise ShapeMismatchError(f"expected {len(layers)} layers, got {len(weights)} weights / {len(biases)} biases")
    ws, bs = [], []
    for k, ((fan_in, fan_out), w, b) in enumerate(zip(layers, weights, biases)):
        if np.size(w) != fan_in * fan_out or np.size(b) != fan_out:
            raise ShapeMismatchError(f"layer {k}: expected W {fan_out}x{fan_in} and b {fan_out}")
        ws.append(np.array(w, dtype=np.float64).reshape(fan_out, fan_in))
        bs.append(np.array(b, dtype=np.float64).reshape(fan_out))
    return MlpPolicy(spec, tuple(ws), tuple(bs))


# ── Flat parameter view ───────────────────────────────────────────────────────

def flatten(policy: MlpPolicy) -> np.ndarray:
    """W0 row-major, b0, W1, b1, ... as one float64 vector."""
    parts: list[np.ndarray] = []
    for w, b in zip(policy.weights, policy.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts).astype(np.float64, copy=False)


def unflatten(spec: MlpSpec, values: np.ndarray) -> MlpPolicy:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size != spec.param_count:
        raise ShapeMismatchError(
            f"parameter vector has length {values.size}, spec requires {spec.param_count}"
        )
    weights, biases = [], []
    offset = 0
    for fan_in, fan_out in spec.layer_dims:
        n_w = fan_in * fan_out
        weights.append(values[offset:offset + n_w].reshape(fan_out, fan_in).copy())
        offset += n_w
        biases.append(values[offset:offset + fan_out].copy())
        offset += fan_out
    return MlpPolicy(spec, tuple(weights), tuple(biases))


def layer_slices(spec: MlpSpec) -> list[slice]:
    """Flat-vector slice covering each layer's (W, b) block."""
    slices, offset = [], 0
    for fan_in, fan_out in spec.layer_dims:
        size = (fan_in + 1) * fan_out
        slices.append(slice(offset, offset + size))
        offset += size
    return slices


# ── Forward ───────────────────────────────────────────────────────────────────

def _activate(activation: Activation, z: np.ndarray) -> np.ndarray:
    if activation == Activation.TANH:
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _forward_layers(policy: MlpPolicy, x: np.ndarray) -> list[np.ndarray]:
    """Return [h_0, h_1, ..., output] for a (B, input_dim) batch."""
    hs = [x]
    last = len(policy.weights) - 1
    for k, (w, b) in enumerate(zip(policy.weights, policy.biases)):
        z = hs[-1] @ w.T + b
        hs.append(z if k == last else _activate(policy.spec.activation, z))
    return hs


def _as_batch(policy: MlpPolicy, observation) -> tuple[np.ndarray, bool]:
    x = np.asarray(observation, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != policy.spec.input_dim:
        raise ShapeMismatchError(
            f"observation shape {np.shape(observation)} does not match input_dim {policy.spec.input_dim}"
        )
    return x, single


def forward(policy: MlpPolicy, observation) -> np.ndarray:
    """Action scores / Q-values for one observation (1-D) or a batch (2-D)."""
    x, single = _as_batch(policy, observation)
    out = _forward_layers(policy, x)[-1]
    return out[0] if single else out


def hidden_features(policy: MlpPolicy, observation) -> np.ndarray:
    """Activations feeding the output layer (the input itself for a linear model)."""
    x, single = _as_batch(policy, observation)
    h = _forward_layers(policy, x)[-2]
    return h[0] if single else h


def argmax_action(scores) -> int:
    scores = np.asarray(scores)
    if scores.size == 0:
        raise ShapeMismatchError("cannot take argmax of an empty score vector")
    # np.argmax returns the first maximal index
    return int(np.argmax(scores))


def greedy_action(policy: MlpPolicy, observation) -> int:
    return argmax_action(forward(policy, observation))


# ── Backward (squared TD error) ───────────────────────────────────────────────

def _to_td_batch(policy: MlpPolicy, batch) -> TdBatch:
    if isinstance(batch, TdBatch):
        obs, actions, targets = batch
    else:
        if len(batch) == 0:
            raise ShapeMismatchError("TD batch is empty")
        obs = [s[0] for s in batch]
        actions = [s[1] for s in batch]
        targets = [s[2] for s in batch]
    obs, _ = _as_batch(policy, np.atleast_2d(np.asarray(obs, dtype=np.float64)))
    actions = np.asarray(actions, dtype=np.int64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if obs.shape[0] == 0 or not (obs.shape[0] == actions.size == targets.size):
        raise ShapeMismatchError("TD batch observations, actions and targets must be non-empty and equal length")
    if actions.min() < 0 or actions.max() >= policy.spec.output_dim:
        raise ShapeMismatchError(f"action index out of range [0, {policy.spec.output_dim})")
    if not np.all(np.isfinite(targets)):
        raise ShapeMismatchError("TD targets must be finite")
    return TdBatch(obs, actions, targets)


def backward_td(
    policy: MlpPolicy,
    batch: Union[TdBatch, Sequence[tuple]],
) -> tuple[np.ndarray, float]:
    """
    Loss (1/B) Σ (y_j - Q(s_j, a_j))² and its gradient in flatten ordering.
    Only the chosen action's output carries error for each sample.
    """
    obs, actions, targets = _to_td_batch(policy, batch)
    B = obs.shape[0]
    hs = _forward_layers(policy, obs)
    rows = np.arange(B)
    residual = targets - hs[-1][rows, actions]
    loss = float(np.mean(residual ** 2))

    delta = np.zeros_like(hs[-1])
    delta[rows, actions] = -2.0 * residual / B

    grads_w: list[np.ndarray] = [None] * len(policy.weights)  # type: ignore[list-item]
    grads_b: list[np.ndarray] = [None] * len(policy.weights)  # type: ignore[list-item]
    for k in range(len(policy.weights) - 1, -1, -1):
        grads_w[k] = delta.T @ hs[k]
        grads_b[k] = delta.sum(axis=0)
        if k > 0:
            h = hs[k]
            if policy.spec.activation == Activation.TANH:
                d_act = 1.0 - h ** 2
            else:
                d_act = (h > 0.0).astype(np.float64)
            delta = (delta @ policy.weights[k]) * d_act

    parts: list[np.ndarray] = []
    for gw, gb in zip(grads_w, grads_b):
        parts.append(gw.ravel())
        parts.append(gb)
    return np.concatenate(parts), loss


# ── Checkpoint format ─────────────────────────────────────────────────────────
# "EVSD" | u32 version | u32 n_dims | n_dims × u32 | u8 activation | d × f64, little-endian

def encode_checkpoint(policy: MlpPolicy) -> bytes:
    spec = policy.spec
    dims = [spec.input_dim, *spec.hidden_dims, spec.output_dim]
    header = CHECKPOINT_MAGIC + struct.pack(
        f"<II{len(dims)}IB", CHECKPOINT_VERSION, len(dims), *dims, _ACTIVATION_TAGS[spec.activation]
    )
    return header + flatten(policy).astype("<f8").tobytes()


def decode_checkpoint(data: bytes) -> MlpPolicy:
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("missing EVSD magic header")
    version, n_dims = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if n_dims < 2:
        raise CheckpointFormatError(f"checkpoint declares {n_dims} layer dims, need at least 2")
    offset = 12
    header_end = offset + 4 * n_dims + 1
    if len(data) < header_end:
        raise CheckpointFormatError("checkpoint header truncated")
    dims = struct.unpack_from(f"<{n_dims}I", data, offset)
    tag = data[header_end - 1]
    if tag not in _TAG_ACTIVATIONS:
        raise CheckpointFormatError(f"unknown activation tag {tag}")
    try:
        spec = MlpSpec(
            input_dim=dims[0],
            hidden_dims=tuple(dims[1:-1]),
            output_dim=dims[-1],
            activation=_TAG_ACTIVATIONS[tag],
        )
    except ValueError as e:
        raise CheckpointFormatError(f"invalid network dims {dims}: {e}") from e
    payload = data[header_end:]
    if len(payload) != 8 * spec.param_count:
        raise CheckpointFormatError(
            f"expected {spec.param_count} parameters ({8 * spec.param_count} bytes), got {len(payload)} bytes"
        )
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise CheckpointFormatError("checkpoint contains non-finite parameters")
    return unflatten(spec, values)


def save_checkpoint(policy: MlpPolicy, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(policy))
    logger.debug("Wrote checkpoint %s (d=%d)", path, policy.spec.param_count)
    return path


def load_checkpoint(path: Union[str, Path]) -> MlpPolicy:
    return decode_checkpoint(Path(path).read_bytes())


def params_checksum(values: np.ndarray) -> str:
    """sha256 over the little-endian f64 bytes of a flat parameter vector."""
    return hashlib.sha256(np.asarray(values, dtype="<f8").tobytes()).hexdigest()
