"""Dense numeric kernels with explicit reverse-mode gradients.

Arrays are plain float64 numpy ndarrays throughout.  Nothing here is
stochastic except initialization, which takes an explicit generator.

The MLP keeps weights and biases per layer with ReLU between layers and no
activation after the last; its backward pass replays a tape recorded during
the forward pass and is exact (tested against central finite differences).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError


def glorot_uniform(stream: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple) -> np.ndarray:
    """Uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return stream.uniform(-bound, bound, size=shape)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sum_exp(values: np.ndarray) -> float:
    """max-shifted log(sum(exp(values))); exact for a single element."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ShapeError("log_sum_exp expects a non-empty vector")
    m = float(np.max(values))
    return m + float(np.log(np.sum(np.exp(values - m))))


# ---------------------------------------------------------------------------
# Multi-layer perceptron


@dataclass
class MlpParams:
    """Affine layers ``x @ W_l + b_l`` with ReLU between layers only."""

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need matching, non-empty weight/bias lists")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {l}: weight {w.shape} / bias {b.shape}")
            if l > 0 and w.shape[0] != self.weights[l - 1].shape[1]:
                raise ShapeError(f"layer {l} input dim mismatch")

    @property
    def dims(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def tensors(self) -> list:
        """Parameters in a fixed, documented order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])


@dataclass
class MlpTape:
    """Intermediates recorded by mlp_forward, consumed by mlp_backward."""

    inputs: list       # input to each affine layer
    preacts: list      # pre-ReLU outputs of each hidden layer


def init_mlp(dims: list, stream: np.random.Generator) -> MlpParams:
    """Glorot-uniform weights, zero biases, for the given dim chain."""
    if len(dims) < 2:
        raise ShapeError("an MLP needs at least one layer")
    weights = [glorot_uniform(stream, dims[l], dims[l + 1], (dims[l], dims[l + 1]))
               for l in range(len(dims) - 1)]
    biases = [np.zeros(dims[l + 1]) for l in range(len(dims) - 1)]
    return MlpParams(weights, biases)


def mlp_forward(params: MlpParams, x: np.ndarray):
    """Return (output, tape).  ``x`` is (n, dims[0])."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ShapeError(f"input {x.shape} does not match dims {params.dims}")
    n_layers = len(params.weights)
    inputs, preacts = [], []
    h = x
    for l in range(n_layers):
        inputs.append(h)
        z = h @ params.weights[l] + params.biases[l]
        if l < n_layers - 1:
            preacts.append(z)
            h = np.maximum(z, 0.0)
        else:
            h = z
    return h, MlpTape(inputs, preacts)


def mlp_backward(params: MlpParams, tape: MlpTape, d_out: np.ndarray):
    """Return (d_input, d_weights, d_biases) for the recorded forward pass."""
    n_layers = len(params.weights)
    if len(tape.inputs) != n_layers:
        raise ShapeError("tape does not match parameter layer count")
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_out.shape != (tape.inputs[0].shape[0], params.weights[-1].shape[1]):
        raise ShapeError("gradient shape does not match forward output")
    d_weights = [None] * n_layers
    d_biases = [None] * n_layers
    d = d_out
    for l in range(n_layers - 1, -1, -1):
        dz = d if l == n_layers - 1 else d * (tape.preacts[l] > 0)
        d_weights[l] = tape.inputs[l].T @ dz
        d_biases[l] = dz.sum(axis=0)
        d = dz @ params.weights[l].T
    return d, d_weights, d_biases


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    lr: float
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: list, lr: float) -> AdamState:
    return AdamState(lr=lr,
                     m=[np.zeros_like(p) for p in params],
                     v=[np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: list, grads: list) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Raises NumericError if any gradient entry is non-finite; the parameters
    are left untouched in that case.
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError("parameter/gradient/state lengths differ")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Spectral helpers


def normalized_laplacian(adj: np.ndarray) -> np.ndarray:
    """Symmetric normalized Laplacian with pseudo-inverse degree scaling.

    Rows/columns of isolated nodes are all zero (their diagonal entry is 0,
    not 1), so an edgeless graph maps to the zero matrix.
    """
    adj = np.asarray(adj, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ShapeError("adjacency must be square")
    if not np.array_equal(adj, adj.T):
        raise ShapeError("adjacency must be symmetric")
    deg = adj.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    lap = np.diag((deg > 0).astype(np.float64))
    lap -= inv_sqrt[:, None] * adj * inv_sqrt[None, :]
    return (lap + lap.T) / 2.0


def topk_eigenvectors(adj: np.ndarray, k: int):
    """Eigen-decomposition of the normalized Laplacian of ``adj``.

    Returns (values, vectors) for the k smallest eigenvalues, ascending;
    vectors are orthonormal columns.  k must not exceed the node count.
    """
    lap = normalized_laplacian(adj)
    n = lap.shape[0]
    if not 0 <= k <= n:
        raise ShapeError(f"k={k} out of range for {n} nodes")
    values, vectors = np.linalg.eigh(lap)
    return values[:k].copy(), vectors[:, :k].copy()
