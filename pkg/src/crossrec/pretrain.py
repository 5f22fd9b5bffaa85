"""Contrastive pre-training of the subgraph encoder.

Each step takes a batch of positive subgraph pairs.  Queries go through the
query encoder, keys through the momentum (key) encoder, and every query is
scored against its own key plus all embeddings currently in a fixed-capacity
FIFO queue of past keys — negatives come only from that queue, never from
the other pairs in the batch.  The loss is the temperature-scaled softmax
cross-entropy with the positive in slot zero; gradients flow into the query
encoder only.

A step always applies its three updates in the same order: Adam step on the
query encoder, momentum update of the key encoder, enqueue of the batch's
keys.  Training state (both encoders, optimizer moments, queue contents,
step counter) can be checkpointed and resumed bit-for-bit.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .binio import Reader, read_file, write_file, write_str, write_tensors
from .encoder import (EncoderPair, EncoderParams, gin_backward, gin_forward,
                      init_encoder, momentum_update)
from .errors import ConfigError, DataIOError, FormatError, NumericError
from .graph import (BipartiteGraph, SamplerConfig, featurize_pair,
                    make_positive_pair)
from .numerics import AdamState, adam_step, init_adam, log_sum_exp
from .rng import RNG_ALGORITHM, substream


# ---------------------------------------------------------------------------
# Key queue


@dataclass
class KeyQueue:
    """Fixed-capacity FIFO ring buffer of unit-norm key embeddings.

    Starts empty; once ``capacity`` keys have been pushed it stays full and
    each push overwrites the oldest entries.
    """

    capacity: int
    dim: int
    buf: np.ndarray = field(default=None)
    cursor: int = 0
    fill: int = 0

    def __post_init__(self):
        if self.capacity < 1 or self.dim < 1:
            raise ConfigError("queue capacity and dim must be >= 1")
        if self.buf is None:
            self.buf = np.zeros((self.capacity, self.dim))
        elif self.buf.shape != (self.capacity, self.dim):
            raise ConfigError("queue buffer has the wrong shape")

    def negatives(self) -> np.ndarray:
        """Current contents, unordered (row order is storage order)."""
        return self.buf[:self.fill]

    def snapshot(self) -> np.ndarray:
        """Contents ordered oldest to newest (copies)."""
        if self.fill < self.capacity:
            return self.buf[:self.fill].copy()
        return np.vstack((self.buf[self.cursor:], self.buf[:self.cursor]))


def enqueue(queue: KeyQueue, keys: np.ndarray) -> None:
    """Push key rows, overwriting the oldest entries once full.

    Every key must be unit-norm to 1e-6; violations raise NumericError.
    Pushing more rows than the capacity keeps only the newest ``capacity``.
    """
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    if keys.shape[1] != queue.dim:
        raise ConfigError(f"key width {keys.shape[1]} != queue dim {queue.dim}")
    norms = np.linalg.norm(keys, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise NumericError("enqueued keys must be unit-norm")
    for row in keys:
        queue.buf[queue.cursor] = row
        queue.cursor = (queue.cursor + 1) % queue.capacity
        queue.fill = min(queue.fill + 1, queue.capacity)


# ---------------------------------------------------------------------------
# Loss


def infonce_loss(query: np.ndarray, key_pos: np.ndarray, queue: KeyQueue,
                 temperature: float):
    """Contrastive loss for one query; returns (loss, d_query).

    Logit zero is the positive similarity, the rest are queue similarities,
    all divided by the temperature; the loss is the log-sum-exp minus the
    positive logit.  With an empty queue both the loss and the gradient are
    exactly zero.  The gradient is with respect to the query only.
    """
    if temperature <= 0.0:
        raise ConfigError("temperature must be positive")
    query = np.asarray(query, dtype=np.float64)
    key_pos = np.asarray(key_pos, dtype=np.float64)
    negatives = queue.negatives()
    logits = np.empty(1 + negatives.shape[0])
    logits[0] = query @ key_pos / temperature
    if negatives.shape[0]:
        logits[1:] = negatives @ query / temperature
    lse = log_sum_exp(logits)
    loss = lse - logits[0]
    probs = np.exp(logits - lse)
    d_query = (probs[0] - 1.0) * key_pos
    if negatives.shape[0]:
        d_query = d_query + negatives.T @ probs[1:]
    return loss, d_query / temperature


# ---------------------------------------------------------------------------
# Training loop


@dataclass(frozen=True)
class PretrainConfig:
    """Hyperparameters for contrastive pre-training."""

    feature_dim: int = 32
    embed_dim: int = 64
    num_layers: int = 3
    temperature: float = 0.07
    momentum: float = 0.999
    queue_capacity: int = 512
    lr: float = 0.005
    batch_size: int = 32
    epochs: int = 1
    max_steps: int = 0           # 0 means no cap beyond epochs
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    checkpoint_interval: int = 0  # steps between state dumps; 0 disables

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ConfigError("temperature must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.lr <= 0.0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.max_steps < 0:
            raise ConfigError("batch_size >= 1; epochs and max_steps >= 0")
        if self.queue_capacity < 1:
            raise ConfigError("queue capacity must be >= 1")
        if self.feature_dim < 3:
            raise ConfigError("feature_dim must be >= 3")


def pretrain_step(pair: EncoderPair, batch: list, queue: KeyQueue,
                  cfg: PretrainConfig, adam: AdamState) -> float:
    """One optimization step over a batch of featurized subgraph pairs.

    Mutates the encoder pair, optimizer state, and queue in place and
    returns the mean contrastive loss.  Negatives are the queue contents
    from before this batch's keys are enqueued.
    """
    if not batch:
        raise ConfigError("batch must be non-empty")
    n = len(batch)
    keys = np.empty((n, pair.query.d))
    totals = [np.zeros_like(t) for t in pair.query.tensors()]
    loss_sum = 0.0
    for row, sp in enumerate(batch):
        q_emb, q_tape = gin_forward(pair.query, sp.query)
        k_emb, _ = gin_forward(pair.key, sp.key)
        keys[row] = k_emb
        loss, d_q = infonce_loss(q_emb, k_emb, queue, cfg.temperature)
        loss_sum += loss
        for acc, grad in zip(totals, gin_backward(pair.query, q_tape, d_q / n)):
            acc += grad
    mean_loss = loss_sum / n
    if not np.isfinite(mean_loss):
        raise NumericError("non-finite contrastive loss")
    adam_step(adam, pair.query.tensors(), totals)
    momentum_update(pair)
    enqueue(queue, keys)
    return float(mean_loss)


@dataclass
class PretrainResult:
    """Final training state plus the per-step loss trace."""

    pair: EncoderPair
    loss_trace: list
    steps_done: int

    @property
    def encoder(self) -> EncoderParams:
        return self.pair.query


def _batches_per_epoch(num_nodes: int, batch_size: int) -> int:
    return (num_nodes + batch_size - 1) // batch_size


def _make_batch(graph: BipartiteGraph, cfg: PretrainConfig, epoch: int,
                offset: int) -> list:
    perm = substream(cfg.seed, "schedule", epoch).permutation(graph.num_nodes)
    nodes = perm[offset * cfg.batch_size:(offset + 1) * cfg.batch_size]
    batch = []
    for node in nodes:
        stream = substream(cfg.seed, "pair", epoch, int(node))
        pair = make_positive_pair(graph, int(node), cfg.sampler, stream)
        batch.append(featurize_pair(pair, cfg.feature_dim))
    return batch


def run_pretrain(graph: BipartiteGraph, cfg: PretrainConfig,
                 resume_path=None, checkpoint_dir=None) -> PretrainResult:
    """Pre-train on one source graph; deterministic for a fixed config.

    The schedule visits every node (users and items) once per epoch in a
    seed-keyed shuffled order; each node's pair sampler stream is keyed by
    (seed, epoch, node), so a step depends only on its position, never on
    wall clock or interruption history.  Passing ``resume_path`` continues
    an interrupted run bit-for-bit.
    """
    if graph.num_nodes == 0:
        raise ConfigError("cannot pre-train on a graph with no nodes")
    if resume_path is not None:
        pair, adam, queue, start_step = load_train_state(resume_path)
        found = (pair.query.d_in, pair.query.d, pair.query.num_layers)
        if found != (cfg.feature_dim, cfg.embed_dim, cfg.num_layers):
            raise ConfigError("resume state dimensions do not match config")
    else:
        pair = init_encoder(cfg.seed, cfg.feature_dim, cfg.embed_dim,
                            cfg.num_layers, cfg.momentum)
        adam = init_adam(pair.query.tensors(), cfg.lr)
        queue = KeyQueue(capacity=cfg.queue_capacity, dim=cfg.embed_dim)
        start_step = 0
    bpe = _batches_per_epoch(graph.num_nodes, cfg.batch_size)
    total = cfg.epochs * bpe
    if cfg.max_steps:
        total = min(total, cfg.max_steps)
    trace = []
    for step in range(start_step, total):
        batch = _make_batch(graph, cfg, step // bpe, step % bpe)
        loss = pretrain_step(pair, batch, queue, cfg, adam)
        trace.append(loss)
        done = step + 1
        if (cfg.checkpoint_interval and checkpoint_dir is not None
                and done % cfg.checkpoint_interval == 0 and done < total):
            save_train_state(f"{checkpoint_dir}/state_{done:07d}.bin",
                             pair, adam, queue, done)
    return PretrainResult(pair=pair, loss_trace=trace, steps_done=total)


# ---------------------------------------------------------------------------
# Loss trace and resumable state on disk


def write_loss_trace(path, trace: list, start_step: int = 0) -> None:
    """One `step<TAB>loss` line per step, loss in full float64 precision."""
    try:
        with open(path, "w", encoding="ascii") as fh:
            for k, loss in enumerate(trace):
                fh.write(f"{start_step + k}\t{loss!r}\n")
    except OSError as exc:
        raise DataIOError(f"cannot write loss trace {path}: {exc}") from exc


def read_loss_trace(path) -> list:
    try:
        with open(path, "r", encoding="ascii") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataIOError(f"cannot read loss trace {path}: {exc}") from exc
    trace = []
    for line in lines:
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2:
            raise FormatError("malformed loss trace line")
        trace.append((int(parts[0]), float(parts[1])))
    return trace


_STATE_MAGIC = b"XRSTA1\n"
_STATE_VERSION = 1


def save_train_state(path, pair: EncoderPair, adam: AdamState,
                     queue: KeyQueue, steps_done: int,
                     fingerprint: str = "") -> None:
    """Serialize everything needed to continue a run bit-for-bit."""
    q = pair.query
    out = [_STATE_MAGIC, struct.pack("<I", _STATE_VERSION),
           struct.pack("<III", q.d_in, q.d, q.num_layers),
           struct.pack("<d", pair.momentum),
           struct.pack("<q", steps_done),
           struct.pack("<IIII", queue.capacity, queue.dim, queue.cursor,
                       queue.fill),
           struct.pack("<dddd", adam.lr, adam.beta1, adam.beta2, adam.eps),
           struct.pack("<q", adam.step)]
    write_str(out, RNG_ALGORITHM)
    write_str(out, fingerprint)
    write_tensors(out, q.tensors())
    write_tensors(out, pair.key.tensors())
    write_tensors(out, adam.m)
    write_tensors(out, adam.v)
    write_tensors(out, [queue.buf])
    write_file(path, out)


def load_train_state(path):
    """Inverse of save_train_state; returns (pair, adam, queue, steps_done)."""
    from .encoder import _params_from_tensors

    rd = Reader(read_file(path))
    rd.expect_magic(_STATE_MAGIC, _STATE_VERSION)
    d_in, d, num_layers = struct.unpack("<III", rd.take(12))
    momentum = rd.f64()
    steps_done = rd.i64()
    capacity, dim, cursor, fill = struct.unpack("<IIII", rd.take(16))
    lr, beta1, beta2, eps = struct.unpack("<dddd", rd.take(32))
    adam_steps = rd.i64()
    rd.text()  # RNG identifier
    rd.text()  # fingerprint
    query = _params_from_tensors(d_in, d, num_layers, rd.tensors())
    key = _params_from_tensors(d_in, d, num_layers, rd.tensors())
    m = rd.tensors()
    v = rd.tensors()
    buf = rd.tensors()[0]
    rd.done()
    pair = EncoderPair(query=query, key=key, momentum=momentum)
    adam = AdamState(lr=lr, m=m, v=v, step=adam_steps, beta1=beta1,
                     beta2=beta2, eps=eps)
    queue = KeyQueue(capacity=capacity, dim=dim, buf=buf, cursor=cursor,
                     fill=fill)
    return pair, adam, queue, steps_done
