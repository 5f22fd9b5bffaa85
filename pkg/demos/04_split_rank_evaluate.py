"""
Interaction splits, top-k ranking, and the metrics document
===========================================================

The evaluation layer in isolation, on numbers small enough to check by
hand: how edges get split, how ties rank, what recall@k and MAP@k count,
and what the serialized report looks like.
"""

import numpy as np

from crossrec.evaluate import (MetricsReport, evaluate, map_at_k, rank_items,
                               rank_from_scores, recall_at_k,
                               split_interactions)
from crossrec.finetune import EmbeddingTable
from crossrec.graph import graph_from_edge_arrays

# --- splitting -----------------------------------------------------------
# 20% of edges to test, 10% of the rest to validation; a repair pass makes
# sure no user appears ONLY in test (such users could never be trained).
users = np.repeat(np.arange(8), 4)
items = (users * 3 + np.tile(np.arange(4), 8)) % 10
graph = graph_from_edge_arrays(8, 10, users, items)
split = split_interactions(graph, test_fraction=0.2, val_fraction=0.1, seed=0)
print(f"edges: train {len(split.train)}, val {len(split.val)}, "
      f"test {len(split.test)} (of {graph.edge_count})")

# --- ranking -------------------------------------------------------------
# Ties break toward the smaller index, so any strictly monotone transform
# of the scores produces the same ranking.
scores = np.array([2.0, 5.0, 5.0, 1.0, 3.0])
print("\nrank by score, item 1 excluded:",
      rank_from_scores(scores, exclude=np.array([1]), k=4).tolist())

table = EmbeddingTable(
    user_emb=np.array([[1.0, 0.0], [0.0, 1.0]]),
    item_emb=np.array([[0.9, 0.1], [0.4, 0.4], [0.1, 0.9], [0.8, 0.0]]))
print("user 0 prefers items:",
      rank_items(table, 0, exclude=np.array([], dtype=np.int64), k=4).tolist())

# --- metrics -------------------------------------------------------------
recommended = [7, 3, 9, 1]
relevant = {3, 1, 5}
# hits at ranks 2 and 4 -> recall 2/3; precision-at-hit 1/2 and 2/4,
# averaged over min(|relevant|, k) = 3.
print(f"\nrecall@4 = {recall_at_k(recommended, relevant, 4):.4f}")
print(f"map@4    = {map_at_k(recommended, relevant, 4):.4f}"
      f"   (by hand: (1/2 + 2/4) / 3 = {(0.5 + 0.5) / 3:.4f})")

# --- the full report -----------------------------------------------------
# evaluate() ranks every user with test edges, excluding what they already
# interacted with during training (and validation, for the test stage).
ideal = EmbeddingTable(user_emb=np.eye(8),
                       item_emb=np.zeros((10, 8)))
for user, item in split.test:
    ideal.item_emb[item, user] = 10.0        # oracle table: test items first
report = evaluate(ideal, graph, split, ks=(2, 5), stage="test", seed=0,
                  fingerprint="demo")
print("\nmetrics document (text form):")
print(report.text())
print("canonical JSON round-trips byte-for-byte:",
      MetricsReport.from_json(report.json()).json() == report.json())
