"""Bipartite interaction graphs and local subgraph extraction.

A graph stores user-item edges in CSR form, both directions, with arrays
frozen after construction.  Node ids come in two flavors:

* per-side indices — users in ``[0, num_users)``, items in ``[0, num_items)``;
* global ids — users keep their index, items are offset by ``num_users``.

Global ids are what the subgraph samplers and the pre-training schedule use,
so a single integer always identifies a node unambiguously.

On top of the graph type this module provides k-core peeling, hop-limited
ego networks, restart random-walk sampling of local subgraphs, positive pair
construction for contrastive learning, structural node features, and a
synthetic generator that produces a source/target domain pair with a shared
user population.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (ConfigError, EmptyGraphError, NodeNotFoundError,
                     ShapeError)
from .ids import CommonUserAlignment, IdMap
from .rng import substream

# ---------------------------------------------------------------------------
# Graph type


@dataclass(frozen=True)
class BipartiteGraph:
    """Immutable undirected user-item graph with CSR adjacency both ways.

    ``user_adj[user_ptr[u]:user_ptr[u+1]]`` holds the item indices adjacent
    to user ``u``, sorted ascending; the item side mirrors this.  Edges are
    unique and unweighted.
    """

    num_users: int
    num_items: int
    user_ptr: np.ndarray
    user_adj: np.ndarray
    item_ptr: np.ndarray
    item_adj: np.ndarray

    def __post_init__(self):
        if self.num_users < 0 or self.num_items < 0:
            raise ShapeError("negative node counts")
        if self.user_ptr.shape != (self.num_users + 1,):
            raise ShapeError("user_ptr length must be num_users + 1")
        if self.item_ptr.shape != (self.num_items + 1,):
            raise ShapeError("item_ptr length must be num_items + 1")
        if self.user_adj.size != self.item_adj.size:
            raise ShapeError("the two adjacency directions disagree on edge count")
        for arr in (self.user_ptr, self.user_adj, self.item_ptr, self.item_adj):
            arr.setflags(write=False)

    # -- size -------------------------------------------------------------

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    @property
    def edge_count(self) -> int:
        return int(self.user_adj.size)

    # -- per-side access ----------------------------------------------------

    def user_items(self, u: int) -> np.ndarray:
        """Items interacted with by user ``u`` (sorted item indices)."""
        return self.user_adj[self.user_ptr[u]:self.user_ptr[u + 1]]

    def item_users(self, i: int) -> np.ndarray:
        """Users who interacted with item ``i`` (sorted user indices)."""
        return self.item_adj[self.item_ptr[i]:self.item_ptr[i + 1]]

    @property
    def user_degrees(self) -> np.ndarray:
        return np.diff(self.user_ptr)

    @property
    def item_degrees(self) -> np.ndarray:
        return np.diff(self.item_ptr)

    # -- global-id access ---------------------------------------------------

    def neighbors(self, node: int) -> np.ndarray:
        """Neighbors of a global node id, as sorted global node ids."""
        self.check_node(node)
        if node < self.num_users:
            return self.user_items(node) + self.num_users
        return self.item_users(node - self.num_users)

    def degree(self, node: int) -> int:
        self.check_node(node)
        if node < self.num_users:
            return int(self.user_ptr[node + 1] - self.user_ptr[node])
        i = node - self.num_users
        return int(self.item_ptr[i + 1] - self.item_ptr[i])

    def check_node(self, node: int) -> None:
        if not 0 <= node < self.num_nodes:
            raise NodeNotFoundError(f"node {node} not in [0, {self.num_nodes})")

    def edges(self) -> np.ndarray:
        """All edges as an (E, 2) array of [user, item] per-side indices."""
        users = np.repeat(np.arange(self.num_users, dtype=np.int64),
                          self.user_degrees)
        return np.column_stack((users, self.user_adj.astype(np.int64)))


def graph_from_edge_arrays(num_users: int, num_items: int,
                           users: np.ndarray, items: np.ndarray) -> BipartiteGraph:
    """Build a graph from parallel user/item index arrays; duplicates collapse."""
    users = np.asarray(users, dtype=np.int64).ravel()
    items = np.asarray(items, dtype=np.int64).ravel()
    if users.size != items.size:
        raise ShapeError("user and item arrays differ in length")
    if users.size:
        if users.min() < 0 or users.max() >= num_users:
            raise NodeNotFoundError("user index out of range")
        if items.min() < 0 or items.max() >= num_items:
            raise NodeNotFoundError("item index out of range")
        key = np.unique(users * np.int64(num_items) + items)
        users = key // num_items
        items = key % num_items
    user_ptr = np.zeros(num_users + 1, dtype=np.int64)
    np.cumsum(np.bincount(users, minlength=num_users), out=user_ptr[1:])
    item_order = np.argsort(items * np.int64(max(num_users, 1)) + users,
                            kind="stable")
    item_ptr = np.zeros(num_items + 1, dtype=np.int64)
    np.cumsum(np.bincount(items, minlength=num_items), out=item_ptr[1:])
    return BipartiteGraph(num_users=num_users, num_items=num_items,
                          user_ptr=user_ptr, user_adj=items.copy(),
                          item_ptr=item_ptr, item_adj=users[item_order].copy())


def build_graph(pairs) -> tuple:
    """Turn (user id, item id) pairs into a graph plus its id map.

    External ids may be strings or integers; dense indices are assigned in
    first-appearance order.  Duplicate pairs collapse to a single edge.
    Raises EmptyGraphError when no pairs are given.
    """
    idmap = IdMap()
    users, items = [], []
    for ext_u, ext_i in pairs:
        users.append(idmap.add_user(ext_u))
        items.append(idmap.add_item(ext_i))
    if not users:
        raise EmptyGraphError("no interaction pairs")
    graph = graph_from_edge_arrays(idmap.num_users, idmap.num_items,
                                   np.array(users), np.array(items))
    return graph, idmap


# ---------------------------------------------------------------------------
# k-core and compaction


def k_core(graph: BipartiteGraph, k_user: int, k_item: int) -> BipartiteGraph:
    """Largest subgraph where users keep >= k_user and items >= k_item edges.

    Peeling never renumbers: the result lives in the same index space, with
    peeled nodes simply ending up isolated.  Peeling everything away returns
    an empty graph, not an error.
    """
    if k_user < 1 or k_item < 1:
        raise ConfigError("k-core thresholds must be >= 1")
    edges = graph.edges()
    users, items = edges[:, 0], edges[:, 1]
    keep = np.ones(users.size, dtype=bool)
    while True:
        udeg = np.bincount(users[keep], minlength=graph.num_users)
        ideg = np.bincount(items[keep], minlength=graph.num_items)
        dying = keep & ((udeg[users] < k_user) | (ideg[items] < k_item))
        if not dying.any():
            break
        keep &= ~dying
    return graph_from_edge_arrays(graph.num_users, graph.num_items,
                                  users[keep], items[keep])


def compact(graph: BipartiteGraph) -> tuple:
    """Drop isolated nodes and reindex densely.

    Returns (graph, kept_users, kept_items) where the kept arrays give the
    old index of each new row, in ascending order.
    """
    kept_users = np.flatnonzero(graph.user_degrees > 0)
    kept_items = np.flatnonzero(graph.item_degrees > 0)
    edges = graph.edges()
    new_u = np.searchsorted(kept_users, edges[:, 0])
    new_i = np.searchsorted(kept_items, edges[:, 1])
    out = graph_from_edge_arrays(kept_users.size, kept_items.size, new_u, new_i)
    return out, kept_users, kept_items


# ---------------------------------------------------------------------------
# Local subgraphs


@dataclass(frozen=True)
class EgoSubgraph:
    """Induced subgraph around an ego node.

    ``nodes`` are the member global ids, sorted ascending; ``local_adj`` is
    the dense symmetric 0/1 adjacency over them (zero diagonal).  ``features``
    starts empty ((n, 0)) and is filled by :func:`subgraph_features`.
    """

    nodes: np.ndarray
    local_adj: np.ndarray
    ego_index: int
    features: np.ndarray

    def __post_init__(self):
        n = self.nodes.size
        if self.local_adj.shape != (n, n):
            raise ShapeError("local adjacency must be n x n")
        if not 0 <= self.ego_index < n:
            raise ShapeError("ego index out of range")
        if self.features.shape[0] != n:
            raise ShapeError("feature rows must match node count")
        reached = np.zeros(n, dtype=bool)
        reached[self.ego_index] = True
        while True:
            grown = reached | (self.local_adj[reached].any(axis=0))
            if grown.sum() == reached.sum():
                break
            reached = grown
        if not reached.all():
            raise ShapeError("subgraph has members unreachable from the ego")
        self.nodes.setflags(write=False)
        self.local_adj.setflags(write=False)
        self.features.setflags(write=False)

    @property
    def n_local(self) -> int:
        return int(self.nodes.size)


@dataclass(frozen=True)
class SubgraphPair:
    """Two views of the same ego node, used as a contrastive positive pair."""

    query: EgoSubgraph
    key: EgoSubgraph
    origin: int

    def __post_init__(self):
        for view in (self.query, self.key):
            if int(view.nodes[view.ego_index]) != self.origin:
                raise ShapeError("pair views must be centered on the origin node")


@dataclass(frozen=True)
class SamplerConfig:
    """Knobs for restart random-walk subgraph sampling."""

    r: int = 2
    restart_prob: float = 0.8
    max_walk_steps: int = 0      # 0 means the default of 64 * r
    max_subgraph_nodes: int = 128

    def __post_init__(self):
        if self.r < 1:
            raise ConfigError("hop radius r must be >= 1")
        if not 0.0 <= self.restart_prob <= 1.0:
            raise ConfigError("restart_prob must lie in [0, 1]")
        if self.max_walk_steps < 0:
            raise ConfigError("max_walk_steps must be >= 0")
        if self.max_subgraph_nodes < 1:
            raise ConfigError("max_subgraph_nodes must be >= 1")

    @property
    def walk_steps(self) -> int:
        return self.max_walk_steps if self.max_walk_steps else 64 * self.r


def _induced_subgraph(graph: BipartiteGraph, nodes: np.ndarray,
                      ego: int) -> EgoSubgraph:
    """Dense induced adjacency over sorted ``nodes`` (which include ego)."""
    n = nodes.size
    adj = np.zeros((n, n))
    for li in range(n):
        nbrs = graph.neighbors(int(nodes[li]))
        present = nbrs[np.isin(nbrs, nodes, assume_unique=True)]
        adj[li, np.searchsorted(nodes, present)] = 1.0
    ego_index = int(np.searchsorted(nodes, ego))
    return EgoSubgraph(nodes=nodes, local_adj=adj, ego_index=ego_index,
                       features=np.zeros((n, 0)))


def ego_network(graph: BipartiteGraph, node: int, r: int) -> EgoSubgraph:
    """Induced subgraph on all nodes within shortest-path distance r of node."""
    graph.check_node(node)
    if r < 0:
        raise ConfigError("hop radius r must be >= 0")
    dist = np.full(graph.num_nodes, -1, dtype=np.int64)
    dist[node] = 0
    frontier = [node]
    members = [node]
    for depth in range(1, r + 1):
        nxt = []
        for cur in frontier:
            for nb in graph.neighbors(cur):
                if dist[nb] < 0:
                    dist[nb] = depth
                    nxt.append(int(nb))
        members.extend(nxt)
        frontier = nxt
        if not frontier:
            break
    return _induced_subgraph(graph, np.sort(np.array(members, dtype=np.int64)),
                             node)


def sample_rw_subgraph(graph: BipartiteGraph, node: int, cfg: SamplerConfig,
                       stream: np.random.Generator) -> EgoSubgraph:
    """Random walk with restart around ``node``, induced on visited nodes.

    The walk tracks the hop distance along the path it actually took; a step
    that would put the walker beyond ``cfg.r`` hops restarts at the ego
    instead, so the visited set is always a subset of the r-hop ego network.
    The walk also restarts from a dead end (an isolated ego just stays put).
    Collection stops once ``max_subgraph_nodes`` distinct nodes are visited
    or the step budget runs out.
    """
    graph.check_node(node)
    dist = {node: 0}
    cur = node
    for _ in range(cfg.walk_steps):
        if len(dist) >= cfg.max_subgraph_nodes:
            break
        if stream.random() < cfg.restart_prob:
            cur = node
            continue
        nbrs = graph.neighbors(cur)
        if nbrs.size == 0:
            cur = node
            continue
        nxt = int(nbrs[stream.integers(0, nbrs.size)])
        stepped = dist[cur] + 1
        if nxt in dist:
            dist[nxt] = min(dist[nxt], stepped)
            cur = nxt
        elif stepped > cfg.r:
            cur = node
        else:
            dist[nxt] = stepped
            cur = nxt
    members = np.sort(np.fromiter(dist.keys(), dtype=np.int64, count=len(dist)))
    return _induced_subgraph(graph, members, node)


def make_positive_pair(graph: BipartiteGraph, node: int, cfg: SamplerConfig,
                       stream: np.random.Generator) -> SubgraphPair:
    """Two independent walk subgraphs of the same ego node.

    The given stream is split into two child sub-streams, one per member, so
    the query sample never perturbs the key sample.
    """
    q_stream, k_stream = stream.spawn(2)
    return SubgraphPair(query=sample_rw_subgraph(graph, node, cfg, q_stream),
                        key=sample_rw_subgraph(graph, node, cfg, k_stream),
                        origin=node)


# ---------------------------------------------------------------------------
# Structural features


def subgraph_features(sub: EgoSubgraph, d_in: int) -> EgoSubgraph:
    """Attach positional/structural features, returning a new subgraph.

    Layout per row (node): the first d_in - 2 columns hold the node's entries
    in the eigenvectors of the subgraph's normalized Laplacian for the
    smallest eigenvalues (zero-padded when the subgraph has fewer nodes than
    columns); then log(1 + degree); then a 0/1 ego indicator.  Each
    eigenvector's sign is fixed so its first entry over 1e-12 in magnitude is
    positive.  A single-node subgraph gets an all-zero eigenvector block.
    """
    from .numerics import topk_eigenvectors  # local import to keep layering flat

    if d_in < 3:
        raise ConfigError("d_in must be >= 3 (eigen block + degree + ego flag)")
    n = sub.n_local
    k = d_in - 2
    feats = np.zeros((n, d_in))
    if n > 1:
        take = min(k, n)
        _, vectors = topk_eigenvectors(sub.local_adj, take)
        for c in range(take):
            col = vectors[:, c]
            big = np.flatnonzero(np.abs(col) > 1e-12)
            if big.size and col[big[0]] < 0:
                col = -col
            feats[:, c] = col
    feats[:, k] = np.log1p(sub.local_adj.sum(axis=1))
    feats[sub.ego_index, k + 1] = 1.0
    return EgoSubgraph(nodes=sub.nodes.copy(), local_adj=sub.local_adj.copy(),
                       ego_index=sub.ego_index, features=feats)


def featurize_pair(pair: SubgraphPair, d_in: int) -> SubgraphPair:
    return SubgraphPair(query=subgraph_features(pair.query, d_in),
                        key=subgraph_features(pair.key, d_in),
                        origin=pair.origin)


# ---------------------------------------------------------------------------
# Synthetic domain pairs


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings for a paired source/target benchmark.

    Users and items carry latent cluster positions; interaction propensity is
    a dot product plus per-user activity and per-item popularity offsets, and
    exactly the top ``density`` fraction of pairs becomes edges.  Shared users
    reuse the same latent vector (and activity) in both domains, which is
    what makes transferring their representations meaningful.
    """

    source_users: int = 2000
    source_items: int = 1000
    target_users: int = 1500
    target_items: int = 800
    shared_user_fraction: float = 0.5
    latent_dim: int = 8
    density: float = 0.005
    seed: int = 0
    num_clusters: int = 6
    cluster_scale: float = 1.0
    activity_scale: float = 2.0
    popularity_scale: float = 3.0

    def __post_init__(self):
        if min(self.source_users, self.source_items, self.target_users,
               self.target_items) < 1:
            raise ConfigError("all four node counts must be >= 1")
        if not 0.0 <= self.shared_user_fraction <= 1.0:
            raise ConfigError("shared_user_fraction must lie in [0, 1]")
        if self.latent_dim < 1 or self.num_clusters < 1:
            raise ConfigError("latent_dim and num_clusters must be >= 1")
        if not 0.0 < self.density < 1.0:
            raise ConfigError("density must lie strictly between 0 and 1")


@dataclass(frozen=True)
class SyntheticPair:
    """A generated source/target domain pair with aligned shared users."""

    source: BipartiteGraph
    target: BipartiteGraph
    alignment: CommonUserAlignment
    source_ids: IdMap
    target_ids: IdMap


def _threshold_edges(affinity: np.ndarray, density: float) -> tuple:
    """Pick exactly round(density * size) highest-affinity pairs as edges."""
    num_users, num_items = affinity.shape
    m = int(round(density * num_users * num_items))
    if m < 1:
        raise ConfigError("density too low: no edges would be generated")
    if m >= num_users * num_items:
        raise ConfigError("density too high: graph would be complete")
    flat = affinity.ravel()
    top = np.argpartition(flat, flat.size - m)[flat.size - m:]
    return top // num_items, top % num_items


def _connected_after_peel(graph: BipartiteGraph) -> bool:
    """True if the 2-core is non-empty and spans one connected component."""
    core = k_core(graph, 2, 2)
    if core.edge_count == 0:
        return False
    degs = np.concatenate((core.user_degrees, core.item_degrees))
    alive = np.flatnonzero(degs > 0)
    seen = np.zeros(core.num_nodes, dtype=bool)
    stack = [int(alive[0])]
    seen[alive[0]] = True
    while stack:
        cur = stack.pop()
        for nb in core.neighbors(cur):
            if not seen[nb]:
                seen[nb] = True
                stack.append(int(nb))
    return bool(seen[alive].all())


def generate_synthetic_pair(cfg: SynthConfig) -> SyntheticPair:
    """Generate the two domains, sharing the first S users of each.

    S = round(shared_user_fraction * target_users); shared users occupy
    indices [0, S) on both sides with identical external ids, so the
    alignment is simply (i, i).  Raises ConfigError if either domain fails
    the structure check (non-empty, connected after 2-core peeling) — the
    usual fix is a higher density or fewer clusters.
    """
    n_shared = int(round(cfg.shared_user_fraction * cfg.target_users))
    if n_shared > cfg.source_users:
        raise ConfigError("more shared users than source users")
    stream = substream(cfg.seed, "synth")
    centers = stream.normal(0.0, cfg.cluster_scale,
                            (cfg.num_clusters, cfg.latent_dim))

    def draw_points(count):
        member = stream.integers(0, cfg.num_clusters, size=count)
        return centers[member] + stream.normal(0.0, 1.0, (count, cfg.latent_dim))

    shared_lat = draw_points(n_shared)
    shared_act = stream.normal(0.0, cfg.activity_scale, n_shared)

    def domain(num_users, num_items):
        own = num_users - n_shared
        user_lat = np.vstack((shared_lat, draw_points(own)))
        user_act = np.concatenate((shared_act,
                                   stream.normal(0.0, cfg.activity_scale, own)))
        item_lat = draw_points(num_items)
        item_pop = stream.normal(0.0, cfg.popularity_scale, num_items)
        affinity = user_lat @ item_lat.T + user_act[:, None] + item_pop[None, :]
        users, items = _threshold_edges(affinity, cfg.density)
        return graph_from_edge_arrays(num_users, num_items, users, items)

    source = domain(cfg.source_users, cfg.source_items)
    target = domain(cfg.target_users, cfg.target_items)
    for name, g in (("source", source), ("target", target)):
        if not _connected_after_peel(g):
            raise ConfigError(
                f"synthetic {name} domain is not connected after 2-core "
                "peeling; raise density or reduce cluster count")

    source_ids = IdMap()
    target_ids = IdMap()
    for n in range(cfg.source_users):
        source_ids.add_user(f"cu{n:06d}" if n < n_shared else f"su{n:06d}")
    for n in range(cfg.source_items):
        source_ids.add_item(f"si{n:06d}")
    for n in range(cfg.target_users):
        target_ids.add_user(f"cu{n:06d}" if n < n_shared else f"tu{n:06d}")
    for n in range(cfg.target_items):
        target_ids.add_item(f"ti{n:06d}")
    alignment = CommonUserAlignment(tuple((n, n) for n in range(n_shared)))
    return SyntheticPair(source=source, target=target, alignment=alignment,
                         source_ids=source_ids, target_ids=target_ids)
