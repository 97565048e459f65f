"""Power-allocation network: input encoding, forward pass, power mapping, I/O.

Input layout for K users and M antennas (users in power-vector order):

    [Re h_1[0], Im h_1[0], ..., Re h_1[M-1], Im h_1[M-1], ..., Im h_K[M-1],
     qos_1 / 1e6, ..., qos_K / 1e6,
     log10 PL_1, ..., log10 PL_K]

giving 2KM + 2K features.  The network outputs K+1 logits: K power shares
and one slack share that stays unallocated.

Model file ("RNM1"): magic, uint32 count of dims, uint32 dims, then W_1, b_1,
W_2, b_2, ... as little-endian float64 in row-major order (W_i has shape
(dims[i-1], dims[i])), then a uint64 checksum equal to the byte sum of
everything before it, mod 2**64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tape as tp
from .channel import make_rng
from .errors import DimensionMismatch, FormatVersionMismatch, ModelIOError

MAGIC = b"RNM1"
DEFAULT_HIDDEN = (128, 128)
# budget fraction held back so sum(p) < p_max survives rounding when the
# slack share underflows relative to 1
POWER_RESERVE = 1e-9


@dataclass
class NetworkWeights:
    layer_dims: tuple
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        pairs = list(zip(self.layer_dims[:-1], self.layer_dims[1:]))
        if len(self.weights) != len(pairs) or len(self.biases) != len(pairs):
            raise DimensionMismatch("layer count does not match layer_dims")
        for (i, o), W, b in zip(pairs, self.weights, self.biases):
            if np.shape(W) != (i, o) or np.shape(b) != (o,):
                raise DimensionMismatch(f"expected W {(i, o)} and b {(o,)}, "
                                        f"got {np.shape(W)} and {np.shape(b)}")

    @property
    def num_users(self) -> int:
        return self.layer_dims[-1] - 1

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @classmethod
    def from_arrays(cls, layer_dims, arrays) -> NetworkWeights:
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        return cls(layer_dims, arrays[0::2], arrays[1::2])

    def on_tape(self, tape: tp.Tape) -> list[tp.Var]:
        """Leaf Vars for every array, in `arrays()` order."""
        return [tape.constant(a) for a in self.arrays()]

    def copy(self) -> NetworkWeights:
        return NetworkWeights.from_arrays(self.layer_dims, [a.copy() for a in self.arrays()])


def input_dim(num_users: int, num_antennas: int) -> int:
    return 2 * num_users * num_antennas + 2 * num_users


def layer_dims_for(num_users: int, num_antennas: int, hidden=DEFAULT_HIDDEN) -> tuple:
    return (input_dim(num_users, num_antennas), *hidden, num_users + 1)


def init_weights(layer_dims, rng_seed) -> NetworkWeights:
    """Glorot-uniform matrices, zero biases."""
    rng = make_rng(rng_seed)
    dims = tuple(int(d) for d in layer_dims)
    Ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        Ws.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return NetworkWeights(dims, Ws, bs)


def encode_inputs(H, qos, path_loss):
    """Flatten combined channels H (..., K, M), QoS (bit/s) and path loss.

    H may be a complex array or a tape ComplexVar; the output follows suit.
    """
    H = tp.ComplexVar.of(H)
    lead = H.shape[:-2]
    K, M = H.shape[-2:]
    chan = tp.stack([H.re, H.im], axis=-1)
    chan = tp.reshape(chan, lead + (2 * K * M,))
    extra = np.concatenate([np.asarray(qos, dtype=float) / 1e6,
                            np.log10(np.asarray(path_loss, dtype=float))], axis=-1)
    extra = np.broadcast_to(extra, lead + (2 * K,))
    return tp.concat([chan, extra], axis=-1)


def forward(params, x):
    """Affine layers, tanh on hidden layers, identity output.

    `params` is [W_1, b_1, W_2, b_2, ...] as arrays or tape Vars; x is
    (..., input_dim).
    """
    Ws, bs = params[0::2], params[1::2]
    h = x
    squeeze = len(tp.shape_of(h)) == 1
    if squeeze:
        h = tp.reshape(h, (1,) + tuple(tp.shape_of(h)))
    for i, (W, b) in enumerate(zip(Ws, bs)):
        h = tp.matmul(h, W) + b
        if i < len(Ws) - 1:
            h = tp.tanh(h)
    if squeeze:
        h = tp.reshape(h, tuple(tp.shape_of(h))[1:])
    return h


def map_to_power(logits, p_max):
    """Softmax over K+1 logits scaled by p_max; the last share is slack.

    Every power is positive and their sum is strictly below p_max.
    """
    z = logits
    zmax = np.max(tp.value_of(z), axis=-1, keepdims=True)
    e = tp.exp(z - zmax)
    total = tp.vsum(e, axis=-1, keepdims=True)
    share = e / total
    K = tp.shape_of(z)[-1] - 1
    return (p_max * (1.0 - POWER_RESERVE)) * share[..., :K]


# ---------------------------------------------------------------------------
# model files

def _checksum(data: bytes) -> int:
    return int(np.frombuffer(data, dtype=np.uint8).sum(dtype=np.uint64))


def save_weights(weights: NetworkWeights, path) -> None:
    dims = weights.layer_dims
    body = bytearray(MAGIC)
    body += struct.pack(f"<I{len(dims)}I", len(dims), *dims)
    for a in weights.arrays():
        body += np.ascontiguousarray(a, dtype="<f8").tobytes()
    body += struct.pack("<Q", _checksum(bytes(body)))
    try:
        Path(path).write_bytes(bytes(body))
    except OSError as exc:
        raise ModelIOError(str(exc)) from exc


def load_weights(path, expected_dims=None) -> NetworkWeights:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ModelIOError(str(exc)) from exc
    if data[:4] != MAGIC:
        raise FormatVersionMismatch(f"bad magic {data[:4]!r}")
    if len(data) < 16:
        raise ModelIOError("file truncated")
    (stored,) = struct.unpack("<Q", data[-8:])
    if stored != _checksum(data[:-8]):
        raise ModelIOError("checksum mismatch (truncated or corrupted file)")
    (count,) = struct.unpack_from("<I", data, 4)
    head = 8 + 4 * count
    if head > len(data) - 8:
        raise DimensionMismatch("dims header runs past the payload")
    dims = struct.unpack_from(f"<{count}I", data, 8)
    if count < 2:
        raise DimensionMismatch(f"need at least two layer dims, got {dims}")
    shapes = []
    for i, o in zip(dims[:-1], dims[1:]):
        shapes += [(i, o), (o,)]
    n_floats = sum(int(np.prod(s)) for s in shapes)
    payload = data[head:-8]
    if len(payload) != 8 * n_floats:
        raise DimensionMismatch(f"dims {dims} need {8 * n_floats} payload bytes, file has {len(payload)}")
    if expected_dims is not None and tuple(expected_dims) != tuple(dims):
        raise DimensionMismatch(f"expected dims {tuple(expected_dims)}, file has {dims}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    arrays, pos = [], 0
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(flat[pos:pos + n].reshape(s).copy())
        pos += n
    return NetworkWeights.from_arrays(dims, arrays)
