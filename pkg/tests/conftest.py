"""Shared test fixtures and graph-building helpers."""

import numpy as np
import pytest

from halobit.graph import Graph, build_partition, normalize_adjacency, partition_nodes


def make_graph(num_nodes, edges, features=None, labels=None, masks=None,
               num_classes=0, symmetric=True):
    """Small-graph builder. `edges` is a list of (src, dst) pairs; when
    `symmetric`, both directions are materialized."""
    e = np.array(edges, dtype=np.int64).reshape(-1, 2)
    if symmetric and e.size:
        e = np.unique(np.concatenate([e, e[:, ::-1]], axis=0), axis=0)
    if features is None:
        features = np.eye(num_nodes)
    features = np.asarray(features, dtype=np.float64)
    if labels is None:
        labels = np.zeros(num_nodes, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if masks is None:
        masks = np.ones(num_nodes, dtype=np.uint8)  # everything trains
    masks = np.asarray(masks)
    return Graph(num_nodes=num_nodes, edges=e, features=features, labels=labels,
                 train_mask=masks == 1, val_mask=masks == 2, test_mask=masks == 3,
                 num_classes=num_classes)


def make_partitions(graph, n, strategy="contiguous", seed=0, mean_hat=None):
    a_hat = normalize_adjacency(graph)
    plan = partition_nodes(graph, n, strategy, seed)
    return a_hat, [build_partition(graph, a_hat, plan, k, mean_hat) for k in range(n)]


@pytest.fixture
def path4():
    """Path graph 0-1-2-3 with identity features."""
    return make_graph(4, [(0, 1), (1, 2), (2, 3)])
