"""Edge splits and top-K ranking metrics.

Interactions are split edge-wise: a test fraction first, then a validation
fraction of what remains.  Ranking quality is measured per user over the
full item set minus the user's already-seen items, with ties broken toward
the smaller item index, then averaged over users that have at least one
held-out relevant item.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, EmptyGraphError, ShapeError
from .graph import BipartiteGraph
from .rng import substream


@dataclass(frozen=True)
class InteractionSplit:
    """Disjoint train/validation/test edge sets over one domain.

    Each array is (n, 2) of [user, item], sorted by (user, item).  Their
    concatenation is exactly the edge set they were built from.
    """

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    num_users: int
    num_items: int

    def __post_init__(self):
        for part in (self.train, self.val, self.test):
            if part.ndim != 2 or part.shape[1] != 2:
                raise ShapeError("split parts must be (n, 2) arrays")
            part.setflags(write=False)


def _sort_edges(edges: np.ndarray, num_items: int) -> np.ndarray:
    if edges.shape[0] == 0:
        return edges.reshape(0, 2)
    order = np.argsort(edges[:, 0] * np.int64(num_items) + edges[:, 1])
    return edges[order]


def group_by_user(edges: np.ndarray) -> dict:
    """Map user -> sorted array of that user's items in ``edges``."""
    out = {}
    for u, i in np.asarray(edges, dtype=np.int64):
        out.setdefault(int(u), []).append(int(i))
    return {u: np.array(sorted(items), dtype=np.int64)
            for u, items in out.items()}


def split_interactions(graph: BipartiteGraph, test_fraction: float = 0.2,
                       val_fraction: float = 0.1,
                       seed: int = 0) -> InteractionSplit:
    """Randomly split edges into train/val/test; deterministic per seed.

    ``test_fraction`` is taken from all edges; ``val_fraction`` from the
    remainder.  A repair pass then guarantees that every user with a test
    edge also has at least one train edge: such a user gets one edge moved
    back to train — their smallest-item validation edge if any, else their
    smallest-item test edge.
    """
    if not 0.0 <= test_fraction < 1.0 or not 0.0 <= val_fraction < 1.0:
        raise ConfigError("fractions must lie in [0, 1)")
    edges = graph.edges()
    n = edges.shape[0]
    if n == 0:
        raise EmptyGraphError("cannot split a graph with no edges")
    perm = substream(seed, "split").permutation(n)
    n_test = int(round(test_fraction * n))
    pool = perm[n_test:]
    n_val = int(round(val_fraction * pool.size))
    # 0 = train, 1 = val, 2 = test
    assign = np.zeros(n, dtype=np.int8)
    assign[perm[:n_test]] = 2
    assign[pool[:n_val]] = 1

    users = edges[:, 0]
    has_train = np.zeros(graph.num_users, dtype=bool)
    has_train[users[assign == 0]] = True
    needs_repair = np.zeros(graph.num_users, dtype=bool)
    needs_repair[users[assign == 2]] = True
    needs_repair &= ~has_train
    for u in np.flatnonzero(needs_repair):
        mine = np.flatnonzero(users == u)
        for source_label in (1, 2):
            cand = mine[assign[mine] == source_label]
            if cand.size:
                chosen = cand[np.argmin(edges[cand, 1])]
                assign[chosen] = 0
                break

    return InteractionSplit(
        train=_sort_edges(edges[assign == 0], graph.num_items),
        val=_sort_edges(edges[assign == 1], graph.num_items),
        test=_sort_edges(edges[assign == 2], graph.num_items),
        num_users=graph.num_users, num_items=graph.num_items)


# ---------------------------------------------------------------------------
# Metrics


def rank_from_scores(scores: np.ndarray, exclude: np.ndarray,
                     k: int) -> np.ndarray:
    """Top-k indices of ``scores`` descending, excluded entries dropped.

    Equal scores rank the smaller index first, making the result invariant
    to any strictly monotone transform of the scores.  Fewer than k
    candidates yields a shorter list.
    """
    scores = np.array(scores, dtype=np.float64)
    scores[np.asarray(exclude, dtype=np.int64)] = -np.inf
    order = np.argsort(-scores, kind="stable")
    order = order[np.isfinite(scores[order])]
    return order[:k].astype(np.int64)


def rank_items(table, user: int, exclude: np.ndarray, k: int) -> np.ndarray:
    """Top-k item indices for a user by descending dot-product score.

    ``exclude`` items are never recommended.
    """
    return rank_from_scores(table.item_emb @ table.user_emb[user], exclude, k)


def recall_at_k(recommended, relevant, k: int) -> float:
    """|top-k hits| / |relevant|."""
    relevant = set(int(x) for x in relevant)
    if not relevant:
        raise ContractError("relevant set must be non-empty")
    hits = sum(1 for item in list(recommended)[:k] if int(item) in relevant)
    return hits / len(relevant)


def map_at_k(recommended, relevant, k: int) -> float:
    """Average precision truncated at k, normalized by min(|relevant|, k)."""
    relevant = set(int(x) for x in relevant)
    if not relevant:
        raise ContractError("relevant set must be non-empty")
    score = 0.0
    hits = 0
    for pos, item in enumerate(list(recommended)[:k], start=1):
        if int(item) in relevant:
            hits += 1
            score += hits / pos
    return score / min(len(relevant), k)


@dataclass
class MetricsReport:
    """Averaged ranking metrics for one table on one split stage."""

    recall: dict
    mean_ap: dict
    users: int
    stage: str = "test"
    seed: int = 0
    fingerprint: str = ""

    def text(self) -> str:
        """Stable key=value rendering, one metric per line."""
        lines = [f"stage={self.stage}", f"users={self.users}"]
        for k in sorted(self.recall):
            lines.append(f"recall@{k}={self.recall[k]!r}")
        for k in sorted(self.mean_ap):
            lines.append(f"map@{k}={self.mean_ap[k]!r}")
        lines.append(f"seed={self.seed}")
        lines.append(f"fingerprint={self.fingerprint}")
        return "\n".join(lines) + "\n"

    def json_dict(self) -> dict:
        return {"stage": self.stage, "users": self.users,
                "recall": {str(k): v for k, v in sorted(self.recall.items())},
                "map": {str(k): v for k, v in sorted(self.mean_ap.items())},
                "seed": self.seed, "fingerprint": self.fingerprint}

    def json(self) -> str:
        return json.dumps(self.json_dict(), sort_keys=True,
                          separators=(",", ":")) + "\n"

    @staticmethod
    def from_json(text: str) -> "MetricsReport":
        raw = json.loads(text)
        return MetricsReport(
            recall={int(k): float(v) for k, v in raw["recall"].items()},
            mean_ap={int(k): float(v) for k, v in raw["map"].items()},
            users=int(raw["users"]), stage=raw["stage"],
            seed=int(raw["seed"]), fingerprint=raw["fingerprint"])


def evaluate(table, graph: BipartiteGraph, split: InteractionSplit,
             ks=(20, 40), stage: str = "test", seed: int = 0,
             fingerprint: str = "") -> MetricsReport:
    """Average recall@k and map@k over users with held-out edges.

    For the test stage the ranking excludes each user's train and validation
    items; for the validation stage it excludes train items only.  Users
    without a relevant item in the stage's edge set are skipped.  Users are
    visited in ascending index order, so the aggregation is deterministic.
    """
    if stage not in ("test", "val"):
        raise ConfigError(f"unknown stage {stage!r}")
    if (table.num_users, table.num_items) != (graph.num_users,
                                              graph.num_items):
        raise ShapeError("table size does not match the graph")
    if not ks or any(k < 1 for k in ks):
        raise ConfigError("ks must be positive")
    relevant_sets = group_by_user(split.test if stage == "test" else split.val)
    exclude_sets = group_by_user(split.train if stage == "val"
                                 else np.vstack((split.train, split.val)))
    kmax = max(ks)
    totals_recall = {k: 0.0 for k in ks}
    totals_map = {k: 0.0 for k in ks}
    count = 0
    empty = np.empty(0, dtype=np.int64)
    for u in sorted(relevant_sets):
        relevant = relevant_sets[u]
        top = rank_items(table, u, exclude_sets.get(u, empty), kmax)
        for k in ks:
            totals_recall[k] += recall_at_k(top, relevant, k)
            totals_map[k] += map_at_k(top, relevant, k)
        count += 1
    if count == 0:
        raise ConfigError(f"no users have {stage} edges to evaluate")
    return MetricsReport(
        recall={k: totals_recall[k] / count for k in ks},
        mean_ap={k: totals_map[k] / count for k in ks},
        users=count, stage=stage, seed=seed, fingerprint=fingerprint)
