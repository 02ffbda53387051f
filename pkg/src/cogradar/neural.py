"""A small float64 neural-network engine for Q-value regression.

Dense layers (ReLU or linear), one optional LSTM layer, squared-error loss on
the selected action's output, plain SGD and a versioned binary checkpoint
format.  Gradients are derived by hand and checked against central finite
differences in :func:`gradient_check`.
"""

from __future__ import annotations

import copy
import struct
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAGIC = b"CRQN"
FORMAT_VERSION = 1
_KINDS = {"dense": 0, "lstm": 1}
_ACTIVATIONS = {"linear": 0, "relu": 1}


class CheckpointError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


def _uniform(rng, fan_in, shape, gain=1.0):
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class DenseLayer:
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, activation: str = "relu", rng=None):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out, self.activation = n_in, n_out, activation
        # variance-preserving through ReLU (gain sqrt 2) or unit gain for linear
        gain = np.sqrt(2.0) if activation == "relu" else 1.0
        self.weights = _uniform(rng, n_in, (n_out, n_in), gain)
        self.biases = np.zeros(n_out)

    @property
    def params(self) -> list[np.ndarray]:
        return [self.weights, self.biases]

    def forward(self, x):
        z = x @ self.weights.T + self.biases
        y = np.maximum(z, 0.0) if self.activation == "relu" else z
        return y, (x, z)

    def backward(self, dy, cache):
        x, z = cache
        dz = dy * (z > 0) if self.activation == "relu" else dy
        return dz @ self.weights, [dz.T @ x, dz.sum(axis=0)]


class LstmLayer:
    """LSTM with gate blocks ordered input, forget, output, candidate."""

    kind = "lstm"
    activation = "linear"

    def __init__(self, n_in: int, n_units: int, rng=None, forget_bias: float = 1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_units
        fan = n_in + n_units
        self.input_weights = _uniform(rng, fan, (4 * n_units, n_in))
        self.recurrent_weights = _uniform(rng, fan, (4 * n_units, n_units))
        self.biases = np.zeros(4 * n_units)
        self.biases[n_units:2 * n_units] = forget_bias
        self.reset_state()

    @property
    def params(self) -> list[np.ndarray]:
        return [self.input_weights, self.recurrent_weights, self.biases]

    def reset_state(self, batch: int = 1):
        self.hidden_state = np.zeros((batch, self.n_out))
        self.cell_state = np.zeros((batch, self.n_out))

    def forward_sequence(self, xs):
        """Run ``xs`` of shape (B, L, n_in) from a zero state; returns hidden states (B, L, U)."""
        B, L, _ = xs.shape
        U = self.n_out
        self.reset_state(B)
        # time-major so each step reads a contiguous block
        zx = (xs.transpose(1, 0, 2).reshape(L * B, -1) @ self.input_weights.T + self.biases).reshape(L, B, 4 * U)
        h, c = self.hidden_state, self.cell_state
        hs = np.empty((B, L, U))
        steps = []
        for t in range(L):
            z = zx[t] + h @ self.recurrent_weights.T
            gates = _sigmoid(z[:, :3 * U])
            i, f, o = gates[:, :U], gates[:, U:2 * U], gates[:, 2 * U:]
            g = np.tanh(z[:, 3 * U:])
            c_prev, h_prev = c, h
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            hs[:, t] = h
            steps.append((i, f, o, g, c_prev, h_prev, tc))
        self.hidden_state, self.cell_state = h, c
        return hs, (xs, steps)

    def backward_sequence(self, dhs, cache):
        xs, steps = cache
        B, L, _ = xs.shape
        U = self.n_out
        d_wh = np.zeros_like(self.recurrent_weights)
        dh_next = np.zeros((B, U))
        dc_next = np.zeros((B, U))
        dzs = np.empty((L, B, 4 * U))
        for t in reversed(range(L)):
            i, f, o, g, c_prev, h_prev, tc = steps[t]
            dh = dhs[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dzs[t]
            dz[:, :U] = dc * g * i * (1.0 - i)
            dz[:, U:2 * U] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * U:3 * U] = dh * tc * o * (1.0 - o)
            dz[:, 3 * U:] = dc * i * (1.0 - g * g)
            d_wh += dz.T @ h_prev
            dh_next = dz @ self.recurrent_weights
            dc_next = dc * f
        flat_dz = dzs.reshape(L * B, -1)
        flat_x = xs.transpose(1, 0, 2).reshape(L * B, -1)
        d_wx = flat_dz.T @ flat_x
        d_b = flat_dz.sum(axis=0)
        dxs = (flat_dz @ self.input_weights).reshape(L, B, -1).transpose(1, 0, 2)
        return dxs, [d_wx, d_wh, d_b]


@dataclass
class SgdConfig:
    learning_rate: float = 1e-3
    clip_norm: float | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive when set")


class QNetwork:
    """Stack of dense layers with at most one LSTM layer.

    Layers before the LSTM run on every element of a sequence; layers after it
    see only the final hidden state.  Without an LSTM a plain input batch is
    treated as length-1 sequences.
    """

    def __init__(self, layers: Sequence, role: str = "policy"):
        layers = list(layers)
        kinds = [layer.kind for layer in layers]
        if kinds.count("lstm") > 1:
            raise ValueError("at most one LSTM layer is supported")
        for a, b in zip(layers, layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")
        self.layers = layers
        self.role = role
        split = kinds.index("lstm") if "lstm" in kinds else len(layers)
        self.pre = layers[:split]
        self.lstm = layers[split] if split < len(layers) else None
        self.post = layers[split + 1:] if self.lstm is not None else []

    @classmethod
    def build(cls, n_inputs: int, n_outputs: int, hidden: Sequence[int] = (256, 128, 84),
              lstm_units: int | None = None, seed=None) -> "QNetwork":
        rng = np.random.default_rng(seed)
        layers, width = [], n_inputs
        for size in hidden:
            layers.append(DenseLayer(width, size, "relu", rng))
            width = size
        if lstm_units:
            layers.append(LstmLayer(width, lstm_units, rng))
            width = lstm_units
        layers.append(DenseLayer(width, n_outputs, "linear", rng))
        return cls(layers)

    @property
    def recurrent(self) -> bool:
        return self.lstm is not None

    @property
    def n_inputs(self) -> int:
        return self.layers[0].n_in

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].n_out

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def _as_batch(self, xs, sequence: bool):
        xs = np.asarray(xs, dtype=float)
        single = xs.ndim == (2 if sequence else 1)
        if single:
            xs = xs[None]
        if not sequence:
            xs = xs[:, None, :]
        if xs.ndim != 3 or xs.shape[2] != self.n_inputs:
            raise ValueError(f"expected input width {self.n_inputs}, got shape {np.shape(xs)}")
        if xs.shape[1] < 1:
            raise ValueError("empty sequence")
        if not np.all(np.isfinite(xs)):
            raise ValueError("non-finite input")
        return xs, single

    def _run(self, xs, all_steps: bool = False):
        B, L, _ = xs.shape
        h = xs.reshape(B * L, -1)
        pre_caches = []
        for layer in self.pre:
            h, cache = layer.forward(h)
            pre_caches.append(cache)
        h = h.reshape(B, L, -1)
        lstm_cache = None
        if self.lstm is not None:
            h, lstm_cache = self.lstm.forward_sequence(h)
        h = h.reshape(B * L, -1) if all_steps else h[:, -1]
        post_caches = []
        for layer in self.post:
            h, cache = layer.forward(h)
            post_caches.append(cache)
        return h, (B, L, pre_caches, lstm_cache, post_caches)

    def forward(self, x):
        """Q-values for a state (n_in,) or a batch (B, n_in)."""
        xs, single = self._as_batch(x, sequence=False)
        out, _ = self._run(xs)
        return out[0] if single else out

    def forward_sequence(self, xs):
        """Q-values after the last element of (L, n_in) or (B, L, n_in)."""
        xs, single = self._as_batch(xs, sequence=True)
        out, _ = self._run(xs)
        return out[0] if single else out

    def forward_all_steps(self, xs):
        """Q-values after every prefix of (B, L, n_in) sequences, shape (B, L, n_out)."""
        xs, single = self._as_batch(xs, sequence=True)
        out, _ = self._run(xs, all_steps=True)
        out = out.reshape(xs.shape[0], xs.shape[1], -1)
        return out[0] if single else out

    def backward(self, xs, actions, targets, sequence: bool | None = None):
        """Loss and gradients of the batch mean of (Q(x, a) - y)^2.

        Only the selected action's output unit receives error.  For sequences,
        ``actions`` and ``targets`` of shape (B, L) score every prefix; shape
        (B,) scores only the full sequence.
        """
        if sequence is None:
            sequence = np.ndim(xs) == 3
        xs, _ = self._as_batch(xs, sequence)
        actions = np.asarray(actions, dtype=int)
        all_steps = sequence and actions.ndim == 2
        actions = actions.reshape(-1)
        targets = np.asarray(targets, dtype=float).reshape(-1)
        out, (B, L, pre_caches, lstm_cache, post_caches) = self._run(xs, all_steps)
        rows = np.arange(len(out))
        err = out[rows, actions] - targets
        loss = float(np.mean(err ** 2))
        d = np.zeros_like(out)
        d[rows, actions] = 2.0 * err / len(out)
        grads_post = []
        for layer, cache in zip(reversed(self.post), reversed(post_caches)):
            d, g = layer.backward(d, cache)
            grads_post.append(g)
        if self.lstm is not None:
            if all_steps:
                dhs = d.reshape(B, L, -1)
            else:
                dhs = np.zeros((B, L, self.lstm.n_out))
                dhs[:, -1] = d
            d, grads_lstm = self.lstm.backward_sequence(dhs, lstm_cache)
        else:
            if all_steps:
                d_full = d.reshape(B, L, -1)
            else:
                d_full = np.zeros((B, L, d.shape[-1]))
                d_full[:, -1] = d
            d, grads_lstm = d_full, None
        d = d.reshape(B * L, -1)
        grads_pre = []
        for layer, cache in zip(reversed(self.pre), reversed(pre_caches)):
            d, g = layer.backward(d, cache)
            grads_pre.append(g)
        grads = [g for pair in reversed(grads_pre) for g in pair]
        if grads_lstm is not None:
            grads += grads_lstm
        grads += [g for pair in reversed(grads_post) for g in pair]
        return loss, grads

    def loss(self, xs, actions, targets, sequence: bool | None = None) -> float:
        if sequence is None:
            sequence = np.ndim(xs) == 3
        batch, _ = self._as_batch(xs, sequence)
        actions = np.asarray(actions, dtype=int)
        out, _ = self._run(batch, all_steps=sequence and actions.ndim == 2)
        actions = actions.reshape(-1)
        err = out[np.arange(len(out)), actions] - np.asarray(targets, dtype=float).reshape(-1)
        return float(np.mean(err ** 2))

    def copy_from(self, other: "QNetwork"):
        for mine, theirs in zip(self.parameters(), other.parameters()):
            mine[...] = theirs


def sgd_step(net: QNetwork, grads: Sequence[np.ndarray], cfg: SgdConfig) -> QNetwork:
    params = net.parameters()
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("gradient shapes do not match the network")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingDiverged("non-finite gradient")
    scale = 1.0
    if cfg.clip_norm is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
    step = cfg.learning_rate * scale
    for p, g in zip(params, grads):
        p -= step * g
    return net


def clone_into_target(net: QNetwork) -> QNetwork:
    target = copy.deepcopy(net)
    target.role = "target"
    return target


# --------------------------------------------------------------------------
# checkpoints

_HEADER = struct.Struct("<4sHH")
_LAYER = struct.Struct("<BBII")


def serialize(net: QNetwork) -> bytes:
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(net.layers))]
    for layer in net.layers:
        parts.append(_LAYER.pack(_KINDS[layer.kind], _ACTIVATIONS[layer.activation], layer.n_in, layer.n_out))
    for p in net.parameters():
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize(blob: bytes) -> QNetwork:
    if len(blob) < _HEADER.size + 4:
        raise CheckpointError("checkpoint truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    magic, version, n_layers = _HEADER.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError("not a network checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    offset = _HEADER.size
    kinds = {v: k for k, v in _KINDS.items()}
    acts = {v: k for k, v in _ACTIVATIONS.items()}
    layers = []
    for _ in range(n_layers):
        kind, act, n_in, n_out = _LAYER.unpack_from(body, offset)
        offset += _LAYER.size
        if kinds.get(kind) == "dense":
            layers.append(DenseLayer(n_in, n_out, acts[act]))
        elif kinds.get(kind) == "lstm":
            layers.append(LstmLayer(n_in, n_out))
        else:
            raise CheckpointError(f"unknown layer kind {kind}")
    net = QNetwork(layers)
    for p in net.parameters():
        n = p.size * 8
        if offset + n > len(body):
            raise CheckpointError("checkpoint truncated")
        p[...] = np.frombuffer(body, dtype="<f8", count=p.size, offset=offset).reshape(p.shape)
        offset += n
    if offset != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return net


def save(net: QNetwork, path):
    with open(path, "wb") as fh:
        fh.write(serialize(net))


def load(path) -> QNetwork:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


# --------------------------------------------------------------------------
# finite-difference verification


def numerical_gradients(net: QNetwork, xs, actions, targets, step: float = 1e-5, sequence=None):
    grads = []
    for p in net.parameters():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = net.loss(xs, actions, targets, sequence)
            flat[k] = orig - step
            down = net.loss(xs, actions, targets, sequence)
            flat[k] = orig
            gflat[k] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|), with a floor of 1e-3 * max|a|.

    The floor keeps near-zero entries (where both estimates are dominated by
    finite-difference truncation) from swamping the measure.
    """
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    floor = max(1e-3 * float(np.max(np.abs(analytic))) if analytic.size else 0.0, 1e-12)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(scale, floor)))


def _min_relu_margin(net: QNetwork, xs) -> float:
    h = xs.reshape(-1, xs.shape[-1])
    margin = np.inf
    for layer in net.pre:
        z = h @ layer.weights.T + layer.biases
        if layer.activation == "relu":
            margin = min(margin, float(np.min(np.abs(z))))
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return margin


def gradient_check(net: QNetwork, xs, actions, targets, step: float = 1e-5, sequence=None) -> dict:
    """Max relative error per layer kind between analytic and numeric gradients."""
    _, analytic = net.backward(xs, actions, targets, sequence)
    numeric = numerical_gradients(net, xs, actions, targets, step, sequence)
    report: dict[str, float] = {}
    i = 0
    for layer in net.layers:
        for _ in layer.params:
            err = relative_error(analytic[i], numeric[i])
            report[layer.kind] = max(report.get(layer.kind, 0.0), err)
            i += 1
    return report


def random_check_case(kind: str, seed: int, batch: int = 3, seq_len: int = 4):
    """A small random network and batch for the finite-difference check.

    ``kind`` is ``dense``, ``lstm`` or ``mixed``.  Inputs are redrawn until every
    ReLU pre-activation sits at least 1e-3 away from the kink, where the
    derivative is undefined and finite differences are meaningless.
    """
    rng = np.random.default_rng(seed)
    n_in, n_out = 5, 4
    if kind == "dense":
        layers = [DenseLayer(n_in, 7, "relu", rng), DenseLayer(7, 6, "relu", rng), DenseLayer(6, n_out, "linear", rng)]
        shape = (batch, n_in)
    elif kind == "lstm":
        layers = [LstmLayer(n_in, 6, rng), DenseLayer(6, n_out, "linear", rng)]
        shape = (batch, seq_len, n_in)
    elif kind == "mixed":
        layers = [DenseLayer(n_in, 7, "relu", rng), DenseLayer(7, 6, "relu", rng),
                  LstmLayer(6, 5, rng), DenseLayer(5, n_out, "linear", rng)]
        shape = (batch, seq_len, n_in)
    else:
        raise ValueError(f"unknown check kind {kind!r}")
    net = QNetwork(layers)
    for p in net.parameters():
        p += rng.normal(0.0, 0.1, p.shape)
    for _ in range(1000):
        xs = rng.normal(size=shape)
        if _min_relu_margin(net, np.asarray(xs).reshape(batch, -1, n_in)) > 1e-3:
            break
    actions = rng.integers(n_out, size=batch)
    targets = rng.normal(size=batch)
    return net, xs, actions, targets, len(shape) == 3
