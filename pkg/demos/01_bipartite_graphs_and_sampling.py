"""
Bipartite graphs, k-cores, and contrastive view sampling
========================================================

Build a user-item graph from raw pairs, peel it to a k-core, and sample
the two kinds of local subgraphs everything downstream consumes: exact
r-ego networks and restart random-walk views of them.
"""

import numpy as np

from crossrec.graph import (SamplerConfig, build_graph, ego_network, k_core,
                            make_positive_pair, sample_rw_subgraph,
                            subgraph_features)
from crossrec.rng import substream

# Interactions arrive as (user, item) id pairs — any hashable ids work.
# Duplicates collapse to one edge.
pairs = [
    ("ana", "violin"), ("ana", "cello"), ("ana", "flute"),
    ("bob", "violin"), ("bob", "cello"), ("bob", "drums"),
    ("cho", "violin"), ("cho", "cello"), ("cho", "flute"),
    ("dee", "drums"), ("dee", "triangle"),
    ("eve", "flute"), ("eve", "violin"), ("eve", "cello"),
]
graph, idmap = build_graph(pairs)
print(f"graph: {graph.num_users} users x {graph.num_items} items, "
      f"{graph.edge_count} edges")
print("user degrees:",
      {name: int(d) for name, d in zip(idmap.user_ids, graph.user_degrees)})

# A (2, 2)-core keeps users with >= 2 remaining edges and items with >= 2.
# Peeling runs to a fixpoint: dropping "triangle" (degree 1) strands "dee".
core = k_core(graph, 2, 2)
survivors = [idmap.user_ids[u] for u in np.flatnonzero(core.user_degrees)]
print(f"\n(2,2)-core: {core.edge_count} edges, surviving users {survivors}")

# Nodes share one global id space: users first, then items.
ana = idmap.user_index["ana"]
ego = ego_network(core, ana, r=2)
print(f"\n2-ego network of 'ana': {ego.n_local} nodes, "
      f"ego at local index {ego.ego_index}")

# Random walks with restart sample a sparser view of the same ego network.
# Two independent views of one center form a contrastive positive pair.
cfg = SamplerConfig(r=2, restart_prob=0.8, max_subgraph_nodes=6)
stream = substream(7, "demo-walks")
view = sample_rw_subgraph(core, ana, cfg, stream)
print(f"one walk view: {view.n_local} of {ego.n_local} ego nodes")

pair = make_positive_pair(core, ana, cfg, stream)
print(f"positive pair views: {pair.query.n_local} and {pair.key.n_local} "
      f"nodes, both centered on node {pair.origin}")

# Features are purely structural: d_in - 2 Laplacian eigenvector columns,
# then log(1 + degree), then a 0/1 ego flag.  The encoder sees shape, never
# ids — that is what lets a source-trained encoder read target subgraphs.
feat = subgraph_features(pair.query, d_in=8)
print(f"\nstructural features: {feat.features.shape}")
print(f"degree column: {feat.features[:, -2].round(3)}")
print(f"ego flag:      {feat.features[:, -1]}")
