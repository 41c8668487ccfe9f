"""Graph construction, adjacency normalization, and partitioning.

A partition owns a contiguous-in-sorted-order set of global node ids, plus a
halo: the non-local neighbors its local nodes aggregate from. The sliced
adjacency block keeps global normalization weights (degrees are computed on
the full graph before slicing), with columns ordered local-first then halo,
both sorted by global id. That column order is part of the wire contract:
received halo rows are written into halo slots in this order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .linalg import CsrMatrix

STRATEGIES = ("contiguous", "bfs_blocks", "hash")


class GraphConfigError(ValueError):
    pass


@dataclass
class Graph:
    num_nodes: int
    edges: np.ndarray          # (E, 2) directed; undirected graphs store both directions
    features: np.ndarray       # (num_nodes, d) float64
    labels: np.ndarray         # (num_nodes,) int
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    num_classes: int = 0

    def __post_init__(self):
        if self.edges.size and self.edges.max() >= self.num_nodes:
            raise GraphConfigError("edge endpoint out of range")
        if self.features.shape[0] != self.num_nodes:
            raise GraphConfigError("feature row count mismatch")
        overlap = (self.train_mask & self.val_mask) | (self.train_mask & self.test_mask) \
            | (self.val_mask & self.test_mask)
        if np.any(overlap):
            raise GraphConfigError("masks must be disjoint")
        if self.num_classes == 0:
            self.num_classes = int(self.labels.max()) + 1 if self.num_nodes else 0

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class PartitionPlan:
    num_partitions: int
    assignment: np.ndarray  # node id -> partition id

    def __post_init__(self):
        counts = np.bincount(self.assignment, minlength=self.num_partitions)
        if len(counts) > self.num_partitions or np.any(counts == 0):
            raise GraphConfigError("every partition must own at least one node")

    def nodes_of(self, part: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == part)


@dataclass
class Partition:
    """One worker's world: local nodes, halo, peer send/recv sets, sliced block."""

    id: int
    num_partitions: int
    local_nodes: np.ndarray      # sorted global ids
    halo_nodes: np.ndarray       # sorted global ids, disjoint from local
    send_sets: list              # per peer: local row indices to send
    recv_sets: list              # per peer: halo slot indices that peer fills
    adj_block: CsrMatrix         # |V_n| x (|V_n| + |halo|)
    mean_block: CsrMatrix | None  # same slicing of the row-mean adjacency (SAGE)
    features: np.ndarray         # local rows
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    @property
    def num_local(self) -> int:
        return len(self.local_nodes)

    @property
    def num_halo(self) -> int:
        return len(self.halo_nodes)

    def send_global_ids(self, peer: int) -> np.ndarray:
        return self.local_nodes[self.send_sets[peer]]

    def recv_global_ids(self, peer: int) -> np.ndarray:
        return self.halo_nodes[self.recv_sets[peer]]


def _clean_edges(g: Graph) -> np.ndarray:
    """Dedupe and drop input self-loops (the canonical self-loop is added once)."""
    e = g.edges.reshape(-1, 2)
    if e.size == 0:
        return e.reshape(0, 2)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0)


def _adjacency(g: Graph) -> sp.csr_matrix:
    e = _clean_edges(g)
    n = g.num_nodes
    a = sp.csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    a.data[:] = 1.0  # unique() already deduped; defensive
    return a


def normalize_adjacency(g: Graph, degree_with_self_loops: bool = True) -> CsrMatrix:
    """Symmetric GCN normalization D^{-1/2} (A + I) D^{-1/2}.

    Degrees are row sums of (A + I) by default; an isolated node keeps a
    lone self-loop of weight 1.
    """
    a = _adjacency(g)
    a_hat = a + sp.identity(g.num_nodes, format="csr")
    deg = np.asarray((a_hat if degree_with_self_loops else a).sum(axis=1)).ravel()
    deg[deg == 0] = 1.0
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    norm = sp.diags(d_inv_sqrt) @ a_hat @ sp.diags(d_inv_sqrt)
    return CsrMatrix.from_scipy(norm)


def mean_adjacency(g: Graph) -> CsrMatrix:
    """Row-mean neighbor aggregation D^{-1} A (no self-loop; the SAGE self
    path is concatenated separately). Isolated rows are all-zero."""
    a = _adjacency(g)
    deg = np.asarray(a.sum(axis=1)).ravel()
    deg[deg == 0] = 1.0
    return CsrMatrix.from_scipy(sp.diags(1.0 / deg) @ a)


def _hash_node(seed: int, node: int, n_parts: int) -> int:
    digest = hashlib.blake2b(f"{seed}:{node}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % n_parts


def partition_nodes(g: Graph, n: int, strategy: str = "contiguous",
                    seed: int = 0) -> PartitionPlan:
    """Deterministic node-to-partition assignment.

    contiguous: equal ranges of node ids. bfs_blocks: BFS order from node
    (seed mod |V|), then equal ranges. hash: keyed hash of the node id.
    """
    if n < 1 or n > g.num_nodes:
        raise GraphConfigError(f"cannot split {g.num_nodes} nodes into {n} partitions")
    if strategy not in STRATEGIES:
        raise GraphConfigError(f"unknown strategy {strategy!r}")

    assignment = np.zeros(g.num_nodes, dtype=np.int64)
    if strategy == "hash":
        for v in range(g.num_nodes):
            assignment[v] = _hash_node(seed, v, n)
    else:
        if strategy == "contiguous":
            order = np.arange(g.num_nodes)
        else:
            order = _bfs_order(g, start=seed % g.num_nodes)
        bounds = np.linspace(0, g.num_nodes, n + 1).astype(int)
        for p in range(n):
            assignment[order[bounds[p]:bounds[p + 1]]] = p
    return PartitionPlan(n, assignment)


def _bfs_order(g: Graph, start: int) -> np.ndarray:
    e = _clean_edges(g)
    both = np.concatenate([e, e[:, ::-1]], axis=0) if e.size else e
    adj = [[] for _ in range(g.num_nodes)]
    for s, d in both:
        adj[s].append(d)
    for lst in adj:
        lst.sort()
    seen = np.zeros(g.num_nodes, dtype=bool)
    order = []
    queue = [start]
    seen[start] = True
    while queue:
        next_queue = []
        for v in queue:
            order.append(v)
            for u in adj[v]:
                if not seen[u]:
                    seen[u] = True
                    next_queue.append(u)
        queue = next_queue
        if not queue:
            rest = np.flatnonzero(~seen)
            if rest.size:
                queue = [int(rest[0])]
                seen[rest[0]] = True
    return np.array(order, dtype=np.int64)


def build_partition(g: Graph, a_hat: CsrMatrix, plan: PartitionPlan, n: int,
                    mean_hat: CsrMatrix | None = None) -> Partition:
    """Slice the normalized adjacency for partition n and derive halo and
    per-peer send/recv sets (1-hop in-neighbors; symmetric normalization
    makes in/out equivalent)."""
    local = np.sort(plan.nodes_of(n))
    local_set = set(local.tolist())
    a = a_hat.to_scipy()

    sub = a[local]
    neigh = np.unique(sub.indices)
    halo = np.array(sorted(set(neigh.tolist()) - local_set), dtype=np.int64)

    # Column map: local first, then halo, both sorted by global id.
    col_map = np.full(g.num_nodes, -1, dtype=np.int64)
    col_map[local] = np.arange(len(local))
    col_map[halo] = len(local) + np.arange(len(halo))

    def slice_block(mat: sp.csr_matrix) -> CsrMatrix:
        rows = mat[local].tocoo()
        keep = col_map[rows.col] >= 0
        block = sp.csr_matrix(
            (rows.data[keep], (rows.row[keep], col_map[rows.col[keep]])),
            shape=(len(local), len(local) + len(halo)))
        return CsrMatrix.from_scipy(block)

    adj_block = slice_block(a)
    mean_block = slice_block(mean_hat.to_scipy()) if mean_hat is not None else None

    owner = plan.assignment
    # R_k: my halo slots owned by peer k (the halo partitions exactly).
    recv_sets = [np.flatnonzero(owner[halo] == k) if k != n else
                 np.empty(0, dtype=np.int64) for k in range(plan.num_partitions)]
    # S_k = V_n intersect HALO_k: local nodes adjacent to some node of peer k.
    send_sets = []
    rp, ci = a_hat.row_ptr, a_hat.col_idx
    for k in range(plan.num_partitions):
        if k == n:
            send_sets.append(np.empty(0, dtype=np.int64))
            continue
        idx = [i for i, v in enumerate(local)
               if np.any(owner[ci[rp[v]:rp[v + 1]]] == k)]
        send_sets.append(np.array(idx, dtype=np.int64))

    return Partition(
        id=n, num_partitions=plan.num_partitions,
        local_nodes=local, halo_nodes=halo,
        send_sets=send_sets, recv_sets=recv_sets,
        adj_block=adj_block, mean_block=mean_block,
        features=g.features[local], labels=g.labels[local],
        train_mask=g.train_mask[local], val_mask=g.val_mask[local],
        test_mask=g.test_mask[local])
