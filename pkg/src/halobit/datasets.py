"""Dataset directory format and synthetic graph generation.

Directory layout (versioned by meta.json):
    edges.tsv     two integer columns, tab-separated, one edge per line
    features.f32  raw little-endian row-major |V| x d float32
    labels.u32    little-endian uint32 per node
    masks.u8      one byte per node: 0=none, 1=train, 2=val, 3=test
    meta.json     {"num_nodes": int, "feature_dim": int, "num_classes": int}

Loaded graphs are symmetrized (both edge directions materialized).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import Graph
from .rngstream import keyed_generator

REQUIRED_FILES = ("edges.tsv", "features.f32", "labels.u32", "masks.u8", "meta.json")


class DatasetError(ValueError):
    pass


def load_dataset(path) -> Graph:
    root = Path(path)
    for name in REQUIRED_FILES:
        if not (root / name).exists():
            raise DatasetError(f"missing dataset file: {root / name}")

    meta = json.loads((root / "meta.json").read_text())
    try:
        n = int(meta["num_nodes"])
        d = int(meta["feature_dim"])
        num_classes = int(meta["num_classes"])
    except KeyError as e:
        raise DatasetError(f"meta.json missing key {e}") from None

    feats_raw = np.fromfile(root / "features.f32", dtype="<f4")
    if feats_raw.size != n * d:
        raise DatasetError(
            f"features.f32 holds {feats_raw.size} floats, expected {n}x{d}")
    features = feats_raw.reshape(n, d).astype(np.float64)

    labels = np.fromfile(root / "labels.u32", dtype="<u4")
    if labels.size != n:
        raise DatasetError(f"labels.u32 holds {labels.size} entries, expected {n}")
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise DatasetError(
            f"labels.u32 offset {bad[0]}: class {labels[bad[0]]} >= {num_classes}")

    masks = np.fromfile(root / "masks.u8", dtype=np.uint8)
    if masks.size != n:
        raise DatasetError(f"masks.u8 holds {masks.size} entries, expected {n}")
    if masks.max(initial=0) > 3:
        raise DatasetError("masks.u8 contains values outside 0..3")

    edges = _read_edges(root / "edges.tsv", n)
    if edges.size:
        edges = np.unique(np.concatenate([edges, edges[:, ::-1]], axis=0), axis=0)

    return Graph(num_nodes=n, edges=edges, features=features,
                 labels=labels.astype(np.int64),
                 train_mask=masks == 1, val_mask=masks == 2, test_mask=masks == 3,
                 num_classes=num_classes)


def _read_edges(path: Path, num_nodes: int) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DatasetError(f"{path} line {lineno}: expected two columns")
            try:
                s, t = int(parts[0]), int(parts[1])
            except ValueError:
                raise DatasetError(f"{path} line {lineno}: non-integer endpoint") from None
            if not (0 <= s < num_nodes and 0 <= t < num_nodes):
                raise DatasetError(f"{path} line {lineno}: dangling endpoint")
            rows.append((s, t))
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def save_dataset(g: Graph, path) -> None:
    """Write a graph in the directory format (used for fixtures and tooling)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "edges.tsv", "w") as fh:
        for s, t in g.edges:
            fh.write(f"{s}\t{t}\n")
    g.features.astype("<f4").tofile(root / "features.f32")
    g.labels.astype("<u4").tofile(root / "labels.u32")
    masks = np.zeros(g.num_nodes, dtype=np.uint8)
    masks[g.train_mask] = 1
    masks[g.val_mask] = 2
    masks[g.test_mask] = 3
    masks.tofile(root / "masks.u8")
    (root / "meta.json").write_text(json.dumps({
        "num_nodes": g.num_nodes,
        "feature_dim": g.feature_dim,
        "num_classes": g.num_classes,
    }, indent=2) + "\n")


@dataclass(frozen=True)
class SbmSpec:
    """Stochastic block model: k communities of nodes_per_community nodes,
    intra/inter edge probabilities, noisy one-hot features tiled to dim d."""

    nodes_per_community: int = 125
    communities: int = 4
    p_in: float = 0.15
    p_out: float = 0.01
    feature_dim: int = 32
    feature_noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.p_out < self.p_in <= 1.0):
            raise DatasetError("require 0 <= p_out < p_in <= 1")
        if self.feature_dim < self.communities:
            raise DatasetError("feature_dim must be >= number of communities")


def generate_sbm(spec: SbmSpec) -> Graph:
    """Deterministic SBM graph: labels are community ids, features are the
    community one-hot tiled to feature_dim plus Gaussian noise, masks split
    60/20/20 by seeded shuffle."""
    n = spec.nodes_per_community * spec.communities
    labels = np.repeat(np.arange(spec.communities), spec.nodes_per_community)

    rng = keyed_generator(spec.seed, "sbm-edges")
    prob = np.where(labels[:, None] == labels[None, :], spec.p_in, spec.p_out)
    draw = rng.random((n, n))
    upper = np.triu(draw < prob, k=1)
    src, dst = np.nonzero(upper)
    edges = np.concatenate(
        [np.stack([src, dst], axis=1), np.stack([dst, src], axis=1)], axis=0)
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]

    reps = -(-spec.feature_dim // spec.communities)
    onehot = np.eye(spec.communities)[labels]
    base = np.tile(onehot, (1, reps))[:, :spec.feature_dim]
    frng = keyed_generator(spec.seed, "sbm-features")
    features = base + spec.feature_noise * frng.standard_normal((n, spec.feature_dim))

    mrng = keyed_generator(spec.seed, "sbm-masks")
    perm = mrng.permutation(n)
    n_train = int(round(0.6 * n))
    n_val = int(round(0.2 * n))
    train_mask = np.zeros(n, dtype=bool)
    val_mask = np.zeros(n, dtype=bool)
    test_mask = np.zeros(n, dtype=bool)
    train_mask[perm[:n_train]] = True
    val_mask[perm[n_train:n_train + n_val]] = True
    test_mask[perm[n_train + n_val:]] = True

    return Graph(num_nodes=n, edges=edges, features=features, labels=labels,
                 train_mask=train_mask, val_mask=val_mask, test_mask=test_mask,
                 num_classes=spec.communities)
