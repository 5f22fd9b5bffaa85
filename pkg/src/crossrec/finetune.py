"""Transfer of pre-trained representations and BPR fine-tuning.

The target domain is modeled by free user/item embedding tables scored with
a dot product.  Tables are initialized by one of five transfer modes, then
(except for the no-fine-tune ablations) trained with the Bayesian pairwise
ranking loss over (user, positive item, sampled negative item) triples, with
optional linear propagation of the tables over the interaction graph before
scoring (the light graph-convolution variant).

Transfer modes
    random    every row uniform in [-1/sqrt(d), 1/sqrt(d)]
    pre-only  every row encoded from its target-domain subgraph
    cu-pe     only common users replaced, encoded from source subgraphs
    cu-pm     only common users replaced, encoded from target subgraphs
    full      same table as pre-only (the difference is downstream: full is
              fine-tuned, pre-only is frozen)

Whatever the mode, the underlying random table is generated first and
identically, so modes differ only in the rows they overwrite.
"""

import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .binio import Reader, read_file, write_file, write_str, write_tensors
from .encoder import EncoderParams, gin_forward
from .errors import (ConfigError, ContractError, DataIOError,
                     NoNegativeAvailableError, NumericError, ShapeError)
from .graph import (BipartiteGraph, SamplerConfig, graph_from_edge_arrays,
                    sample_rw_subgraph, subgraph_features)
from .ids import CommonUserAlignment
from .numerics import adam_step, init_adam, sigmoid
from .rng import substream


@dataclass
class EmbeddingTable:
    """Free user and item embeddings over one domain."""

    user_emb: np.ndarray
    item_emb: np.ndarray

    def __post_init__(self):
        if self.user_emb.ndim != 2 or self.item_emb.ndim != 2 \
                or self.user_emb.shape[1] != self.item_emb.shape[1]:
            raise ShapeError("user/item tables must share their width")
        if not (np.isfinite(self.user_emb).all()
                and np.isfinite(self.item_emb).all()):
            raise NumericError("embedding tables must be finite")

    @property
    def d(self) -> int:
        return int(self.user_emb.shape[1])

    @property
    def num_users(self) -> int:
        return int(self.user_emb.shape[0])

    @property
    def num_items(self) -> int:
        return int(self.item_emb.shape[0])

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.user_emb.copy(), self.item_emb.copy())


def score(table: EmbeddingTable, user: int, item: int) -> float:
    """Dot-product preference score; raises IndexError out of range."""
    if not 0 <= user < table.num_users:
        raise IndexError(f"user {user} out of range")
    if not 0 <= item < table.num_items:
        raise IndexError(f"item {item} out of range")
    return float(table.user_emb[user] @ table.item_emb[item])


class TransferMode(str, Enum):
    RANDOM = "random"
    PRE_ONLY = "pre-only"
    CU_PE = "cu-pe"
    CU_PM = "cu-pm"
    FULL = "full"


def parse_mode(text: str) -> TransferMode:
    try:
        return TransferMode(text)
    except ValueError:
        valid = ", ".join(m.value for m in TransferMode)
        raise ConfigError(f"unknown transfer mode {text!r} (one of: {valid})")


# ---------------------------------------------------------------------------
# Transfer initialization


@dataclass(frozen=True)
class InitConfig:
    """Settings for building the initial target tables."""

    feature_dim: int = 32
    embed_dim: int = 64          # used only when no encoder is involved
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    # In full mode, encode common users from their source subgraphs instead
    # of their target subgraphs.
    full_common_from_source: bool = False


def _encode_node(encoder: EncoderParams, graph: BipartiteGraph, node: int,
                 cfg: InitConfig, domain: str) -> np.ndarray:
    stream = substream(cfg.seed, "init-emb", domain, node)
    sub = sample_rw_subgraph(graph, node, cfg.sampler, stream)
    emb, _ = gin_forward(encoder, subgraph_features(sub, cfg.feature_dim))
    return emb


def init_target_embeddings(encoder, target: BipartiteGraph,
                           mode: TransferMode,
                           alignment: CommonUserAlignment = None,
                           source: BipartiteGraph = None,
                           cfg: InitConfig = InitConfig()) -> EmbeddingTable:
    """Build the initial target-domain tables for one transfer mode.

    The random fill is drawn first for all rows, identically across modes;
    the mode then decides which rows are overwritten with encoder outputs.
    ``alignment`` is required for the common-user modes, ``source`` whenever
    source-domain subgraphs are encoded.
    """
    if mode != TransferMode.RANDOM:
        if encoder is None:
            raise ConfigError(f"mode {mode.value} needs a pre-trained encoder")
        if encoder.d_in != cfg.feature_dim:
            raise ConfigError("encoder input width != configured feature_dim")
    d = cfg.embed_dim if encoder is None else encoder.d
    stream = substream(cfg.seed, "init-emb", "random")
    bound = 1.0 / np.sqrt(d)
    table = EmbeddingTable(
        user_emb=stream.uniform(-bound, bound, (target.num_users, d)),
        item_emb=stream.uniform(-bound, bound, (target.num_items, d)))
    if mode == TransferMode.RANDOM:
        return table

    needs_alignment = mode in (TransferMode.CU_PE, TransferMode.CU_PM) \
        or (mode == TransferMode.FULL and cfg.full_common_from_source)
    if needs_alignment and alignment is None:
        raise ConfigError(f"mode {mode.value} needs a common-user alignment")
    from_source = mode == TransferMode.CU_PE \
        or (mode == TransferMode.FULL and cfg.full_common_from_source)
    if from_source and source is None:
        raise ConfigError("encoding source subgraphs needs the source graph")

    if mode in (TransferMode.PRE_ONLY, TransferMode.FULL):
        for u in range(target.num_users):
            table.user_emb[u] = _encode_node(encoder, target, u, cfg, "target")
        for i in range(target.num_items):
            table.item_emb[i] = _encode_node(encoder, target,
                                             target.num_users + i, cfg,
                                             "target")
    if mode == TransferMode.CU_PM:
        for _, t in alignment.pairs:
            table.user_emb[t] = _encode_node(encoder, target, t, cfg, "target")
    if from_source:
        for s, t in alignment.pairs:
            table.user_emb[t] = _encode_node(encoder, source, s, cfg, "source")
    return table


# ---------------------------------------------------------------------------
# Pairwise ranking loss


@dataclass
class RowGrads:
    """Sparse gradients: one row per distinct touched user/item index."""

    user_rows: np.ndarray
    user_grads: np.ndarray
    item_rows: np.ndarray
    item_grads: np.ndarray


def bpr_loss(table: EmbeddingTable, triples: np.ndarray, l2: float = 1e-4,
             graph: BipartiteGraph = None):
    """Summed pairwise ranking loss over (user, pos item, neg item) triples.

    loss = sum log(1 + exp(-(s_ui - s_uj))) + l2 * ||touched rows||^2,
    where each distinct touched row is regularized once regardless of how
    many triples hit it.  Returns (loss, RowGrads).  When ``graph`` is given
    the membership precondition is checked (pos interacted, neg did not) and
    violations raise ContractError.
    """
    triples = np.asarray(triples, dtype=np.int64)
    if triples.ndim != 2 or triples.shape[1] != 3 or triples.shape[0] == 0:
        raise ShapeError("triples must be a non-empty (n, 3) array")
    users, pos, neg = triples[:, 0], triples[:, 1], triples[:, 2]
    if users.min() < 0 or users.max() >= table.num_users:
        raise IndexError("user index out of range")
    items_all = np.concatenate((pos, neg))
    if items_all.min() < 0 or items_all.max() >= table.num_items:
        raise IndexError("item index out of range")
    if graph is not None:
        for u, i, j in triples:
            row = graph.user_items(int(u))
            at_i = np.searchsorted(row, i)
            if at_i >= row.size or row[at_i] != i:
                raise ContractError(f"positive item {i} not interacted by {u}")
            at_j = np.searchsorted(row, j)
            if at_j < row.size and row[at_j] == j:
                raise ContractError(f"negative item {j} interacted by {u}")

    xu = table.user_emb[users]
    xdiff = table.item_emb[pos] - table.item_emb[neg]
    margins = np.einsum("nd,nd->n", xu, xdiff)
    loss = float(np.logaddexp(0.0, -margins).sum())
    coef = -sigmoid(-margins)

    user_rows, u_inv = np.unique(users, return_inverse=True)
    user_grads = np.zeros((user_rows.size, table.d))
    np.add.at(user_grads, u_inv, coef[:, None] * xdiff)
    item_rows, i_inv = np.unique(items_all, return_inverse=True)
    item_grads = np.zeros((item_rows.size, table.d))
    np.add.at(item_grads, i_inv[:len(pos)], coef[:, None] * xu)
    np.add.at(item_grads, i_inv[len(pos):], -coef[:, None] * xu)

    if l2 > 0.0:
        u_block = table.user_emb[user_rows]
        i_block = table.item_emb[item_rows]
        loss += l2 * float((u_block ** 2).sum() + (i_block ** 2).sum())
        user_grads += 2.0 * l2 * u_block
        item_grads += 2.0 * l2 * i_block
    return loss, RowGrads(user_rows, user_grads, item_rows, item_grads)


def sample_negatives(graph: BipartiteGraph, user: int, count: int,
                     stream: np.random.Generator) -> np.ndarray:
    """Rejection-sample ``count`` items the user never interacted with.

    Uniform over the complement of the user's item set; items may repeat
    across draws.  Raises NoNegativeAvailableError when the complement is
    empty.
    """
    if not 0 <= user < graph.num_users:
        raise IndexError(f"user {user} out of range")
    positives = graph.user_items(user)
    if positives.size >= graph.num_items:
        raise NoNegativeAvailableError(f"user {user} interacted with all items")
    out = np.empty(count, dtype=np.int64)
    have = 0
    while have < count:
        cand = stream.integers(0, graph.num_items, size=count - have)
        good = cand[~np.isin(cand, positives)]
        out[have:have + good.size] = good
        have += good.size
    return out


# ---------------------------------------------------------------------------
# Light graph-convolution propagation


def _propagate_arrays(user_arr: np.ndarray, item_arr: np.ndarray,
                      graph: BipartiteGraph, layers: int):
    edges = graph.edges()
    eu, ei = edges[:, 0], edges[:, 1]
    weights = 1.0 / np.sqrt(graph.user_degrees[eu] * graph.item_degrees[ei])
    acc_u = user_arr.copy()
    acc_i = item_arr.copy()
    cur_u, cur_i = user_arr, item_arr
    for _ in range(layers):
        nxt_u = np.zeros_like(user_arr)
        nxt_i = np.zeros_like(item_arr)
        np.add.at(nxt_u, eu, cur_i[ei] * weights[:, None])
        np.add.at(nxt_i, ei, cur_u[eu] * weights[:, None])
        cur_u, cur_i = nxt_u, nxt_i
        acc_u += cur_u
        acc_i += cur_i
    return acc_u / (layers + 1), acc_i / (layers + 1)


def lightgcn_propagate(table: EmbeddingTable, graph: BipartiteGraph,
                       layers: int) -> EmbeddingTable:
    """Mean of propagation layers 0..layers under symmetric normalization.

    Layer k+1 embeddings are degree-normalized sums over neighbors of layer
    k: e_u <- sum_i e_i / sqrt(deg_u * deg_i), and symmetrically.  There are
    no weights — the whole transform is linear in the input tables.
    Isolated nodes keep their layer-0 row shrunk by 1/(layers+1).
    """
    if layers < 1:
        raise ConfigError("propagation needs at least one layer")
    if (table.num_users, table.num_items) != (graph.num_users, graph.num_items):
        raise ShapeError("table size does not match the graph")
    out_u, out_i = _propagate_arrays(table.user_emb, table.item_emb, graph,
                                     layers)
    return EmbeddingTable(out_u, out_i)


# ---------------------------------------------------------------------------
# Training loop


@dataclass(frozen=True)
class FinetuneConfig:
    """Hyperparameters for BPR fine-tuning."""

    lr: float = 0.001
    l2: float = 1e-4
    negatives: int = 1           # sampled negatives per observed edge
    batch_size: int = 1024
    epochs: int = 100
    eval_interval: int = 5       # epochs between validation evaluations
    patience: int = 10           # non-improving evaluations before stopping
    eval_k: int = 20
    lgcn_layers: int = 0         # 0 = plain matrix factorization
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0.0 or self.l2 < 0.0:
            raise ConfigError("lr must be positive and l2 non-negative")
        if self.negatives < 1:
            raise ConfigError("need at least one negative per positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size >= 1 and epochs >= 0 required")
        if self.eval_interval < 1 or self.patience < 1 or self.eval_k < 1:
            raise ConfigError("eval_interval, patience, eval_k must be >= 1")
        if self.lgcn_layers not in (0, 1, 3):
            raise ConfigError("lgcn_layers must be one of 0, 1, 3")


@dataclass
class TrainResult:
    """Best snapshot plus the loss/validation curves."""

    table: EmbeddingTable
    loss_trace: list             # (epoch, mean train loss per positive)
    val_trace: list              # (epoch, validation recall)
    best_epoch: int


def _train_graph(split, num_users: int, num_items: int) -> BipartiteGraph:
    return graph_from_edge_arrays(num_users, num_items,
                                  split.train[:, 0], split.train[:, 1])


def scoring_table(table: EmbeddingTable, split,
                  lgcn_layers: int) -> EmbeddingTable:
    """The table rankings are computed from: propagated when layers > 0.

    Propagation runs over the train-split graph — the same graph the
    training loop propagates over — so evaluation never sees held-out edges.
    """
    if lgcn_layers == 0:
        return table
    graph = _train_graph(split, table.num_users, table.num_items)
    return lightgcn_propagate(table, graph, lgcn_layers)


def _val_recall(table: EmbeddingTable, graph: BipartiteGraph, split,
                cfg: FinetuneConfig) -> float:
    from .evaluate import evaluate

    report = evaluate(scoring_table(table, split, cfg.lgcn_layers), graph,
                      split, ks=(cfg.eval_k,), stage="val")
    return report.recall[cfg.eval_k]


def train_mf(table: EmbeddingTable, graph: BipartiteGraph, split,
             cfg: FinetuneConfig) -> TrainResult:
    """Fine-tune embedding tables with BPR; returns the best snapshot.

    One epoch visits every train edge once in a seed-keyed shuffled order
    with ``cfg.negatives`` freshly sampled negatives each (uniform over
    items the user has no *train* edge to).  Validation recall@eval_k is measured before
    training and every ``eval_interval`` epochs; training stops early after
    ``patience`` consecutive non-improving evaluations, and the table with
    the best validation recall is returned (a copy; with a zero-epoch
    budget this is the initialization unchanged).

    With ``lgcn_layers > 0`` the loss is computed on propagated tables and
    gradients flow back through the (linear, self-adjoint) propagation onto
    the layer-0 parameters; the L2 penalty stays on the layer-0 rows.
    """
    if (table.num_users, table.num_items) != (graph.num_users, graph.num_items):
        raise ShapeError("table size does not match the graph")
    train_edges = np.asarray(split.train, dtype=np.int64)
    if train_edges.shape[0] == 0:
        raise ConfigError("cannot fine-tune with an empty train split")
    tgraph = _train_graph(split, graph.num_users, graph.num_items)
    if np.any(tgraph.user_degrees >= graph.num_items):
        raise NoNegativeAvailableError(
            "some user has a train edge to every item")

    table = table.copy()
    adam = init_adam([table.user_emb, table.item_emb], cfg.lr)
    n_edges = train_edges.shape[0]
    membership = np.sort(train_edges[:, 0] * np.int64(graph.num_items)
                         + train_edges[:, 1])

    def draw_negatives(users: np.ndarray, stream) -> np.ndarray:
        negs = stream.integers(0, graph.num_items, size=users.size)
        while True:
            keys = users * np.int64(graph.num_items) + negs
            pos = np.minimum(np.searchsorted(membership, keys),
                             membership.size - 1)
            bad = membership[pos] == keys
            if not bad.any():
                return negs
            negs[bad] = stream.integers(0, graph.num_items,
                                        size=int(bad.sum()))

    best = table.copy()
    best_recall = _val_recall(table, graph, split, cfg)
    best_epoch = -1
    val_trace = [(-1, best_recall)]
    loss_trace = []
    stale = 0
    for epoch in range(cfg.epochs):
        order = substream(cfg.seed, "finetune", "order", epoch) \
            .permutation(n_edges)
        neg_stream = substream(cfg.seed, "finetune", "neg", epoch)
        epoch_loss = 0.0
        n_triples = 0
        for lo in range(0, n_edges, cfg.batch_size):
            chunk = train_edges[order[lo:lo + cfg.batch_size]]
            if cfg.negatives > 1:
                chunk = np.repeat(chunk, cfg.negatives, axis=0)
            n_triples += chunk.shape[0]
            negs = draw_negatives(chunk[:, 0], neg_stream)
            triples = np.column_stack((chunk[:, 0], chunk[:, 1], negs))
            if cfg.lgcn_layers > 0:
                prop_u, prop_i = _propagate_arrays(
                    table.user_emb, table.item_emb, tgraph, cfg.lgcn_layers)
                loss, rows = bpr_loss(EmbeddingTable(prop_u, prop_i),
                                      triples, l2=0.0)
                grad_u = np.zeros_like(table.user_emb)
                grad_i = np.zeros_like(table.item_emb)
                grad_u[rows.user_rows] = rows.user_grads
                grad_i[rows.item_rows] = rows.item_grads
                grad_u, grad_i = _propagate_arrays(grad_u, grad_i, tgraph,
                                                   cfg.lgcn_layers)
                if cfg.l2 > 0.0:
                    u_block = table.user_emb[rows.user_rows]
                    i_block = table.item_emb[rows.item_rows]
                    loss += cfg.l2 * float((u_block ** 2).sum()
                                           + (i_block ** 2).sum())
                    grad_u[rows.user_rows] += 2.0 * cfg.l2 * u_block
                    grad_i[rows.item_rows] += 2.0 * cfg.l2 * i_block
            else:
                loss, rows = bpr_loss(table, triples, l2=cfg.l2)
                grad_u = np.zeros_like(table.user_emb)
                grad_i = np.zeros_like(table.item_emb)
                grad_u[rows.user_rows] = rows.user_grads
                grad_i[rows.item_rows] = rows.item_grads
            adam_step(adam, [table.user_emb, table.item_emb],
                      [grad_u, grad_i])
            epoch_loss += loss
        loss_trace.append((epoch, epoch_loss / n_triples))
        if (epoch + 1) % cfg.eval_interval == 0 or epoch == cfg.epochs - 1:
            recall = _val_recall(table, graph, split, cfg)
            val_trace.append((epoch, recall))
            if recall > best_recall:
                best_recall = recall
                best_epoch = epoch
                best = table.copy()
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    return TrainResult(table=best, loss_trace=loss_trace,
                       val_trace=val_trace, best_epoch=best_epoch)


# ---------------------------------------------------------------------------
# Table serialization

_TABLE_MAGIC = b"XRTAB1\n"
_TABLE_VERSION = 1


def save_table(path, table: EmbeddingTable, fingerprint: str = "") -> None:
    out = [_TABLE_MAGIC, struct.pack("<I", _TABLE_VERSION),
           struct.pack("<qqq", table.num_users, table.num_items, table.d)]
    write_str(out, fingerprint)
    write_tensors(out, [table.user_emb, table.item_emb])
    write_file(path, out)


def load_table(path):
    """Returns (EmbeddingTable, fingerprint); rejects foreign or stale files."""
    rd = Reader(read_file(path))
    rd.expect_magic(_TABLE_MAGIC, _TABLE_VERSION)
    num_users, num_items, d = (rd.i64(), rd.i64(), rd.i64())
    fingerprint = rd.text()
    user_emb, item_emb = rd.tensors()
    rd.done()
    if user_emb.shape != (num_users, d) or item_emb.shape != (num_items, d):
        raise ShapeError("table tensors contradict the header")
    return EmbeddingTable(user_emb, item_emb), fingerprint


def write_table_text(path, table: EmbeddingTable, idmap=None) -> None:
    """Human-inspectable dump: one ``node_id<TAB>v1,...,vd`` line per node.

    Users come first (global node ids 0..num_users-1), then items.  With an
    ``idmap`` the external string ids are written instead of the integers.
    """
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for block, ids in ((table.user_emb, None if idmap is None
                                else idmap.user_ids),
                               (table.item_emb, None if idmap is None
                                else idmap.item_ids)):
                offset = 0 if block is table.user_emb else table.num_users
                for row in range(block.shape[0]):
                    name = str(offset + row) if ids is None else ids[row]
                    vals = ",".join(repr(float(v)) for v in block[row])
                    fh.write(f"{name}\t{vals}\n")
    except OSError as exc:
        raise DataIOError(f"cannot write table text to {path}: {exc}") from exc
