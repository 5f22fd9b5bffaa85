"""Graph isomorphism network encoder with an explicit backward pass.

Forward pass over one local subgraph with features X and dense adjacency A:

    H0 = X @ W_in + b_in
    Hl = MLP_l((1 + eps_l) * H(l-1) + A @ H(l-1))     for each layer
    e  = normalize(mean_rows(H_last) @ W_out + b_out)

Each layer's MLP has one hidden ReLU layer of the embedding width.  The
final embedding is L2-normalized; a zero-norm output (possible only for
degenerate parameters) maps to the zero vector rather than dividing by zero.

Encoders come in pairs: the query side is trained by gradient descent, the
key side trails it as an exponential moving average (momentum update) and is
never touched by gradients.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .binio import Reader, read_file, write_file, write_str, write_tensors
from .errors import ConfigError, FormatError, ShapeError
from .graph import EgoSubgraph
from .numerics import MlpParams, glorot_uniform, mlp_backward, mlp_forward
from .rng import RNG_ALGORITHM, substream


@dataclass
class EncoderParams:
    """All trainable tensors of one encoder.

    ``tensors()`` exposes them in a fixed order — input projection, then per
    layer the scalar eps and the MLP weights, then the output projection —
    which optimizer state, gradients, and checkpoints all share.
    """

    w_in: np.ndarray
    b_in: np.ndarray
    eps: list
    mlps: list
    w_out: np.ndarray
    b_out: np.ndarray

    def __post_init__(self):
        if len(self.eps) != len(self.mlps):
            raise ShapeError("need one eps per layer")
        d_in, d = self.w_in.shape
        if self.b_in.shape != (d,) or self.w_out.shape != (d, d) \
                or self.b_out.shape != (d,):
            raise ShapeError("projection shapes are inconsistent")
        for mlp in self.mlps:
            if mlp.dims != [d, d, d]:
                raise ShapeError("layer MLPs must map d -> d -> d")

    @property
    def d_in(self) -> int:
        return int(self.w_in.shape[0])

    @property
    def d(self) -> int:
        return int(self.w_in.shape[1])

    @property
    def num_layers(self) -> int:
        return len(self.mlps)

    def tensors(self) -> list:
        out = [self.w_in, self.b_in]
        for eps, mlp in zip(self.eps, self.mlps):
            out.append(eps)
            out.extend(mlp.tensors())
        out.extend((self.w_out, self.b_out))
        return out

    def copy(self) -> "EncoderParams":
        return EncoderParams(w_in=self.w_in.copy(), b_in=self.b_in.copy(),
                             eps=[e.copy() for e in self.eps],
                             mlps=[m.copy() for m in self.mlps],
                             w_out=self.w_out.copy(), b_out=self.b_out.copy())


@dataclass
class EncoderPair:
    """Query encoder plus its momentum-trailed key twin."""

    query: EncoderParams
    key: EncoderParams
    momentum: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")


def init_encoder(seed: int, d_in: int, d: int, num_layers: int = 3,
                 momentum: float = 0.999) -> EncoderPair:
    """Glorot-uniform weights, zero biases, eps = 0; key starts as a copy."""
    if d_in < 1 or d < 1 or num_layers < 1:
        raise ConfigError("dimensions and layer count must be >= 1")
    stream = substream(seed, "encoder-init")
    query = EncoderParams(
        w_in=glorot_uniform(stream, d_in, d, (d_in, d)),
        b_in=np.zeros(d),
        eps=[np.zeros(()) for _ in range(num_layers)],
        mlps=[MlpParams([glorot_uniform(stream, d, d, (d, d)),
                         glorot_uniform(stream, d, d, (d, d))],
                        [np.zeros(d), np.zeros(d)])
              for _ in range(num_layers)],
        w_out=glorot_uniform(stream, d, d, (d, d)),
        b_out=np.zeros(d),
    )
    return EncoderPair(query=query, key=query.copy(), momentum=momentum)


# ---------------------------------------------------------------------------
# Forward / backward

_NORM_FLOOR = 1e-30


@dataclass
class GinTape:
    """Intermediates from gin_forward needed for the exact backward pass."""

    features: np.ndarray
    adj: np.ndarray
    layer_inputs: list   # H entering each layer
    mlp_tapes: list
    pooled: np.ndarray
    raw_out: np.ndarray
    norm: float
    embedding: np.ndarray


def gin_forward(params: EncoderParams, sub: EgoSubgraph):
    """Encode one subgraph; returns (embedding, tape)."""
    feats = sub.features
    if feats.shape[1] != params.d_in:
        raise ShapeError(
            f"subgraph features have width {feats.shape[1]}, encoder expects "
            f"{params.d_in}")
    adj = sub.local_adj
    h = feats @ params.w_in + params.b_in
    layer_inputs, mlp_tapes = [], []
    for eps, mlp in zip(params.eps, params.mlps):
        layer_inputs.append(h)
        mixed = (1.0 + eps) * h + adj @ h
        h, tape = mlp_forward(mlp, mixed)
        mlp_tapes.append(tape)
    pooled = h.mean(axis=0)
    raw = pooled @ params.w_out + params.b_out
    norm = float(np.linalg.norm(raw))
    emb = raw / norm if norm > _NORM_FLOOR else np.zeros_like(raw)
    return emb, GinTape(features=feats, adj=adj, layer_inputs=layer_inputs,
                        mlp_tapes=mlp_tapes, pooled=pooled, raw_out=raw,
                        norm=norm, embedding=emb)


def gin_backward(params: EncoderParams, tape: GinTape,
                 d_emb: np.ndarray) -> list:
    """Gradients of a scalar loss w.r.t. every tensor, in tensors() order."""
    if d_emb.shape != tape.embedding.shape:
        raise ShapeError("upstream gradient has the wrong shape")
    if tape.norm > _NORM_FLOOR:
        e = tape.embedding
        d_raw = (d_emb - e * float(e @ d_emb)) / tape.norm
    else:
        d_raw = np.zeros_like(d_emb)
    d_w_out = np.outer(tape.pooled, d_raw)
    d_b_out = d_raw.copy()
    d_pooled = params.w_out @ d_raw
    n = tape.features.shape[0]
    d_h = np.repeat(d_pooled[None, :] / n, n, axis=0)
    d_eps = [None] * params.num_layers
    d_mlps = [None] * params.num_layers
    for l in range(params.num_layers - 1, -1, -1):
        d_mixed, d_w, d_b = mlp_backward(params.mlps[l], tape.mlp_tapes[l], d_h)
        d_mlps[l] = (d_w, d_b)
        h_in = tape.layer_inputs[l]
        d_eps[l] = np.array(np.sum(d_mixed * h_in))
        d_h = (1.0 + params.eps[l]) * d_mixed + tape.adj @ d_mixed
    grads = [tape.features.T @ d_h, d_h.sum(axis=0)]
    for l in range(params.num_layers):
        grads.append(d_eps[l])
        d_w, d_b = d_mlps[l]
        for w, b in zip(d_w, d_b):
            grads.extend((w, b))
    grads.extend((d_w_out, d_b_out))
    return grads


def momentum_update(pair: EncoderPair) -> None:
    """key <- momentum * key + (1 - momentum) * query, tensor by tensor."""
    m = pair.momentum
    for q, k in zip(pair.query.tensors(), pair.key.tensors()):
        k *= m
        k += (1.0 - m) * q


# ---------------------------------------------------------------------------
# Checkpoints

_MAGIC = b"XRENC1\n"
_VERSION = 1


def save_encoder(path, pair: EncoderPair, fingerprint: str = "") -> None:
    """Serialize both encoders with their hyperparameter header."""
    q = pair.query
    out = [_MAGIC, struct.pack("<I", _VERSION),
           struct.pack("<III", q.d_in, q.d, q.num_layers),
           struct.pack("<d", pair.momentum)]
    write_str(out, RNG_ALGORITHM)
    write_str(out, fingerprint)
    write_tensors(out, q.tensors())
    write_tensors(out, pair.key.tensors())
    write_file(path, out)


def _params_from_tensors(d_in: int, d: int, num_layers: int,
                         tensors: list) -> EncoderParams:
    expected = 2 + 5 * num_layers + 2
    if len(tensors) != expected:
        raise FormatError(f"expected {expected} tensors, found {len(tensors)}")
    it = iter(tensors)
    w_in, b_in = next(it), next(it)
    eps, mlps = [], []
    for _ in range(num_layers):
        eps.append(next(it).reshape(()))
        w1, b1, w2, b2 = next(it), next(it), next(it), next(it)
        mlps.append(MlpParams([w1, w2], [b1, b2]))
    w_out, b_out = next(it), next(it)
    params = EncoderParams(w_in=w_in, b_in=b_in, eps=eps, mlps=mlps,
                           w_out=w_out, b_out=b_out)
    if (params.d_in, params.d) != (d_in, d):
        raise FormatError("tensor shapes contradict the checkpoint header")
    return params


def load_encoder(path):
    """Load a checkpoint; returns (EncoderPair, fingerprint).

    Rejects unknown magic bytes and any version other than the current one.
    """
    rd = Reader(read_file(path))
    rd.expect_magic(_MAGIC, _VERSION)
    d_in, d, num_layers = struct.unpack("<III", rd.take(12))
    momentum = rd.f64()
    rd.text()  # RNG identifier, informational
    fingerprint = rd.text()
    query = _params_from_tensors(d_in, d, num_layers, rd.tensors())
    key = _params_from_tensors(d_in, d, num_layers, rd.tensors())
    return EncoderPair(query=query, key=key, momentum=momentum), fingerprint
