"""Dataset bundles on disk and a seeded stochastic-block-model generator.

A bundle is a directory with

* ``edges.tsv``    -- ``i<TAB>j`` per line, undirected, 0-based ids
* ``features.csv`` -- one comma-separated row per node
* ``labels.tsv``   -- ``node<TAB>class`` per line
* ``splits.json``  -- ``{"train": [...], "val": [...], "test": [...]}``

Synthetic bundles also carry ``ground_truth.json`` listing the planted
inter-class edges.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidGraph, OutOfRange, ParseError, ValidationError
from .graph import AttributedGraph, LabeledSplit

EDGES, FEATURES, LABELS, SPLITS, GROUND_TRUTH = (
    "edges.tsv", "features.csv", "labels.tsv", "splits.json", "ground_truth.json")


@dataclass
class Dataset:
    graph: AttributedGraph
    split: LabeledSplit
    num_edge_records: int = 0
    ground_truth: dict | None = None

    def summary(self) -> dict:
        return {
            "num_nodes": self.graph.num_nodes,
            "num_edges": self.graph.num_edges,
            "num_edge_records": self.num_edge_records,
            "num_classes": self.split.num_classes,
            "num_features": self.graph.feature_dim,
            "train": int(self.split.train.size),
            "val": int(self.split.val.size),
            "test": int(self.split.test.size),
        }

    @property
    def planted_edges(self) -> set[tuple[int, int]]:
        if not self.ground_truth:
            return set()
        return {(int(a), int(b)) for a, b in self.ground_truth.get("planted_edges", [])}


def _lines(path: Path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if line:
                yield lineno, line


def _read_edges(path: Path) -> list[tuple[int, int]]:
    edges = []
    for lineno, line in _lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(path, lineno, "expected two tab-separated integers")
        try:
            edges.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise ParseError(path, lineno, f"non-integer node id in {line!r}") from None
    return edges


def _read_features(path: Path) -> np.ndarray:
    rows = []
    width = None
    for lineno, line in _lines(path):
        try:
            row = [float(tok) for tok in line.split(",")]
        except ValueError:
            raise ParseError(path, lineno, "non-numeric feature value") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ParseError(path, lineno, f"expected {width} columns, got {len(row)}")
        rows.append(row)
    if not rows:
        raise ParseError(path, 0, "no feature rows")
    return np.asarray(rows, dtype=np.float64)


def _read_labels(path: Path, num_nodes: int) -> np.ndarray:
    labels = np.full(num_nodes, -1, dtype=np.int64)
    for lineno, line in _lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(path, lineno, "expected node<TAB>class")
        try:
            node, cls = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(path, lineno, f"non-integer value in {line!r}") from None
        if not 0 <= node < num_nodes:
            raise ValidationError(f"{path}:{lineno}: node {node} outside [0, {num_nodes})")
        if cls < 0:
            raise ValidationError(f"{path}:{lineno}: negative class id {cls}")
        if labels[node] != -1:
            raise ValidationError(f"{path}:{lineno}: node {node} labeled twice")
        labels[node] = cls
    return labels


def _read_splits(path: Path) -> dict[str, list[int]]:
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from None
    out = {}
    for name in ("train", "val", "test"):
        ids = raw.get(name) if isinstance(raw, dict) else None
        if not isinstance(ids, list) or not all(isinstance(v, int) for v in ids):
            raise ValidationError(f"{path}: '{name}' must be an array of integers")
        out[name] = ids
    return out


def ingest_dataset(path, row_normalize: bool = False) -> Dataset:
    """Parse and validate a bundle directory."""
    root = Path(path)
    for name in (EDGES, FEATURES, LABELS, SPLITS):
        if not (root / name).is_file():
            raise ValidationError(f"{root}: missing {name}")
    features = _read_features(root / FEATURES)
    n = features.shape[0]
    edges = _read_edges(root / EDGES)
    for i, j in edges:
        if not (0 <= i < n and 0 <= j < n):
            raise ValidationError(f"edge ({i}, {j}) references a node outside [0, {n})")
    labels = _read_labels(root / LABELS, n)
    splits = _read_splits(root / SPLITS)
    num_classes = int(labels.max()) + 1 if np.any(labels >= 0) else 0
    for name, ids in splits.items():
        missing = [v for v in ids if not 0 <= v < n or labels[v] < 0]
        if missing:
            raise ValidationError(f"{name} split has unlabeled or unknown node {missing[0]}")
    try:
        graph = AttributedGraph(n, edges, features)
        split = LabeledSplit(labels, splits["train"], splits["val"], splits["test"], num_classes)
    except (InvalidGraph, OutOfRange) as exc:
        raise ValidationError(str(exc)) from None
    if row_normalize:
        graph = graph.row_normalized()
    gt = None
    if (root / GROUND_TRUTH).is_file():
        gt = json.loads((root / GROUND_TRUTH).read_text())
    return Dataset(graph, split, len(edges), gt)


def write_bundle(dataset: Dataset, path) -> Path:
    """Write ``dataset`` so that :func:`ingest_dataset` reads back identical arrays."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    g, s = dataset.graph, dataset.split
    with open(root / EDGES, "w") as fh:
        for i, j in g.edge_list():
            fh.write(f"{i}\t{j}\n")
    with open(root / FEATURES, "w") as fh:
        for row in g.features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    with open(root / LABELS, "w") as fh:
        for v, c in enumerate(s.labels):
            if c >= 0:
                fh.write(f"{v}\t{int(c)}\n")
    splits = {name: [int(v) for v in s.nodes(name)] for name in ("train", "val", "test")}
    (root / SPLITS).write_text(json.dumps(splits) + "\n")
    if dataset.ground_truth is not None:
        (root / GROUND_TRUTH).write_text(json.dumps(dataset.ground_truth, indent=1) + "\n")
    return root


def generate_synthetic(seed: int = 0, blocks: int = 2, nodes_per_block: int = 100, p_in: float = 0.05,
                       p_out: float = 0.005, noise_rate: float = 0.1, feature_dim: int = 16,
                       feature_signal: float = 1.0, feature_noise: float = 1.0,
                       train_frac: float = 0.3, val_frac: float = 0.3) -> Dataset:
    """Planted-partition graph with Gaussian class-conditional features.

    On top of the block-model edges, ``round(noise_rate * |E|)`` extra
    inter-class edges are planted uniformly at random; they are listed in
    ``ground_truth["planted_edges"]``. Splits are stratified per class.
    Everything is a function of ``seed``.
    """
    if not p_in > p_out:
        raise ValidationError("p_in must exceed p_out")
    if blocks < 1 or nodes_per_block < 1:
        raise ValidationError("need at least one block with one node")
    if not (0 < train_frac and 0 <= val_frac and train_frac + val_frac < 1):
        raise ValidationError("train_frac/val_frac must leave room for a test split")
    rng = np.random.default_rng(seed)
    n = blocks * nodes_per_block
    labels = np.repeat(np.arange(blocks), nodes_per_block)

    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    probs = np.where(same, p_in, p_out)
    hit = rng.random(iu.size) < probs
    base_edges = np.stack([iu[hit], ju[hit]], axis=1)

    n_noise = int(round(noise_rate * len(base_edges)))
    candidates = np.flatnonzero(~same & ~hit)
    n_noise = min(n_noise, candidates.size)
    picks = np.sort(rng.choice(candidates, size=n_noise, replace=False)) if n_noise else np.zeros(0, int)
    planted = np.stack([iu[picks], ju[picks]], axis=1)
    edges = np.concatenate([base_edges, planted]) if len(planted) else base_edges

    means = rng.normal(0.0, feature_signal, size=(blocks, feature_dim)) / np.sqrt(feature_dim) * 2.0
    features = means[labels] + rng.normal(0.0, feature_noise, size=(n, feature_dim))

    train, val, test = [], [], []
    for c in range(blocks):
        members = rng.permutation(np.flatnonzero(labels == c))
        n_tr = max(1, int(round(train_frac * members.size)))
        n_va = int(round(val_frac * members.size))
        train.extend(members[:n_tr])
        val.extend(members[n_tr:n_tr + n_va])
        test.extend(members[n_tr + n_va:])
    split = LabeledSplit(labels, np.sort(train), np.sort(val), np.sort(test), blocks)
    graph = AttributedGraph(n, edges, features)
    ground_truth = {
        "planted_edges": [[int(a), int(b)] for a, b in planted],
        "params": {
            "seed": seed, "blocks": blocks, "nodes_per_block": nodes_per_block, "p_in": p_in,
            "p_out": p_out, "noise_rate": noise_rate, "feature_dim": feature_dim,
            "feature_signal": feature_signal, "feature_noise": feature_noise,
            "train_frac": train_frac, "val_frac": val_frac,
        },
    }
    return Dataset(graph, split, graph.num_edges, ground_truth)
