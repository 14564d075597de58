"""Graph data model, synthetic motif-shift dataset generator, batching and
line-oriented JSON persistence.

Every generated graph is one label-irrelevant base graph (wheel, tree,
ladder, star or path) joined to one label-determining 5-node motif by a
single bridge edge. Node features are constant, so the label is decidable
only from structure. The ground-truth invariant edges are exactly the
motif-internal ones; the bridge and all base edges are variant.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError

BASE_KINDS = ("wheel", "tree", "ladder", "star", "path")
MOTIF_KINDS = ("house", "cycle", "crane")

# Motif templates (5 nodes each). "crane" has no canonical drawing in the
# literature this generator mirrors, so we fix it as the bowtie below; any
# fixed pattern distinct from the other two preserves the task.
#
#   house:  4         cycle:  0--1        crane:  0     3
#          / \                |   \               |\   /|
#         3---2               4    2              | 2-- |
#         |   |                \  /               |/   \|
#         0---1                 3                 1     4
_MOTIF_EDGES = {
    "house": [(0, 1), (1, 2), (2, 3), (3, 0), (2, 4), (3, 4)],
    "cycle": [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)],
    "crane": [(0, 1), (1, 2), (0, 2), (2, 3), (3, 4), (2, 4)],
}

MOTIF_SIZE = 5


@dataclass
class Graph:
    """One undirected graph instance with generator-provided ground truth."""

    n_nodes: int
    edges: list[tuple[int, int]]
    node_features: np.ndarray            # (n_nodes, feature_dim)
    label: int
    invariant_edge_mask: np.ndarray      # bool, one flag per edge
    pse: np.ndarray | None = None        # (n_nodes, k), filled by precompute step
    graph_id: str = ""
    base_kind: str = ""
    motif_kind: str = ""
    split: str = ""

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        self.invariant_edge_mask = np.asarray(self.invariant_edge_mask, dtype=bool)
        if self.node_features.shape[0] != self.n_nodes:
            raise ConfigError(f"{self.graph_id}: feature rows != n_nodes")
        if self.invariant_edge_mask.shape[0] != len(self.edges):
            raise ConfigError(f"{self.graph_id}: mask length != edge count")
        seen = set()
        for i, j in self.edges:
            if not (0 <= i < self.n_nodes and 0 <= j < self.n_nodes):
                raise ConfigError(f"{self.graph_id}: edge ({i},{j}) out of range")
            if i == j:
                raise ConfigError(f"{self.graph_id}: self-loop at node {i}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ConfigError(f"{self.graph_id}: duplicate undirected edge {key}")
            seen.add(key)
        self._adjacency: np.ndarray | None = None
        self._propagate: np.ndarray | None = None

    def adjacency(self) -> np.ndarray:
        """Dense symmetric 0/1 adjacency with zero diagonal (cached)."""
        if self._adjacency is None:
            a = np.zeros((self.n_nodes, self.n_nodes))
            for i, j in self.edges:
                a[i, j] = a[j, i] = 1.0
            self._adjacency = a
        return self._adjacency

    def propagate_np(self) -> np.ndarray:
        """Degree-normalized adjacency with self-loops (cached); constant input
        to the backbone's message-passing branch."""
        if self._propagate is None:
            ap = self.adjacency() + np.eye(self.n_nodes)
            s = ap.sum(axis=1) ** -0.5
            self._propagate = ap * np.outer(s, s)
        return self._propagate


@dataclass
class ShiftSpec:
    """Generator settings for one dataset with a controlled distribution shift.

    ``bias`` is the probability that a training graph's base-kind index
    equals its label; otherwise the base kind is uniform over the remaining
    kinds. Validation and test splits always draw the base kind uniformly.
    For the size split the test base-size range must sit strictly above the
    training range.
    """

    split_kind: str = "basis"
    bias: float = 0.9
    classes: int = 3
    train_count: int = 3000
    val_count: int = 600
    test_count: int = 600
    train_base_size: tuple[int, int] = (10, 30)
    test_base_size: tuple[int, int] | None = None
    feature_dim: int = 1

    def __post_init__(self):
        if self.split_kind not in ("basis", "size"):
            raise ConfigError(f"unknown split kind {self.split_kind!r}")
        if self.test_base_size is None:
            self.test_base_size = (40, 60) if self.split_kind == "size" else self.train_base_size
        self.train_base_size = tuple(self.train_base_size)
        self.test_base_size = tuple(self.test_base_size)
        if not 0.0 <= self.bias <= 1.0:
            raise ConfigError(f"bias must lie in [0, 1], got {self.bias}")
        if self.classes != len(MOTIF_KINDS):
            raise ConfigError(f"class count must be {len(MOTIF_KINDS)}, got {self.classes}")
        for name in ("train_count", "val_count", "test_count"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("train_base_size", "test_base_size"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 5:
                raise ConfigError(f"{name} range ({lo}, {hi}) is empty or below 5 nodes")
        if self.split_kind == "size" and self.test_base_size[0] <= self.train_base_size[1]:
            raise ConfigError("size split requires min test base size > max train base size")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train_base_size"] = list(self.train_base_size)
        d["test_base_size"] = list(self.test_base_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftSpec":
        d = dict(d)
        d["train_base_size"] = tuple(d["train_base_size"])
        d["test_base_size"] = tuple(d["test_base_size"])
        return cls(**d)


# -- base graph builders -------------------------------------------------------


def _wheel(size: int) -> list[tuple[int, int]]:
    ring = list(range(1, size))
    edges = [(0, i) for i in ring]
    edges += [(ring[i], ring[(i + 1) % len(ring)]) for i in range(len(ring))]
    return edges


def _tree(size: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    return [(int(rng.integers(0, i)), i) for i in range(1, size)]


def _ladder(size: int) -> list[tuple[int, int]]:
    k = size // 2
    edges = [(i, i + 1) for i in range(k - 1)]
    edges += [(k + i, k + i + 1) for i in range(k - 1)]
    edges += [(i, k + i) for i in range(k)]
    if size % 2:
        edges.append((size - 2, size - 1))
    return edges


def _star(size: int) -> list[tuple[int, int]]:
    return [(0, i) for i in range(1, size)]


def _path(size: int) -> list[tuple[int, int]]:
    return [(i, i + 1) for i in range(size - 1)]


def base_edges(kind: str, size: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    if kind == "wheel":
        return _wheel(size)
    if kind == "tree":
        return _tree(size, rng)
    if kind == "ladder":
        return _ladder(size)
    if kind == "star":
        return _star(size)
    if kind == "path":
        return _path(size)
    raise ConfigError(f"unknown base kind {kind!r}")


def motif_edges(kind: str) -> list[tuple[int, int]]:
    if kind not in _MOTIF_EDGES:
        raise ConfigError(f"unknown motif kind {kind!r}")
    return list(_MOTIF_EDGES[kind])


def assemble_graph(label: int, base_kind: str, base_size: int, feature_dim: int,
                   rng: np.random.Generator, graph_id: str = "", split: str = "") -> Graph:
    """Base + motif + one bridge edge; motif nodes sit after the base nodes."""
    motif_kind = MOTIF_KINDS[label]
    b_edges = base_edges(base_kind, base_size, rng)
    m_edges = [(i + base_size, j + base_size) for i, j in motif_edges(motif_kind)]
    bridge = (int(rng.integers(0, base_size)),
              base_size + int(rng.integers(0, MOTIF_SIZE)))
    edges = b_edges + m_edges + [bridge]
    mask = [False] * len(b_edges) + [True] * len(m_edges) + [False]
    n = base_size + MOTIF_SIZE
    return Graph(
        n_nodes=n,
        edges=edges,
        node_features=np.ones((n, feature_dim)),
        label=label,
        invariant_edge_mask=np.array(mask),
        graph_id=graph_id,
        base_kind=base_kind,
        motif_kind=motif_kind,
        split=split,
    )


def _draw_base_kind(label: int, bias: float | None, rng: np.random.Generator) -> str:
    """bias is the probability of the label-aligned kind; None means uniform."""
    if bias is not None and rng.random() < bias:
        return BASE_KINDS[label]
    others = [k for i, k in enumerate(BASE_KINDS) if bias is None or i != label]
    return others[int(rng.integers(0, len(others)))]


def generate_dataset(spec: ShiftSpec, seed: int) -> dict[str, list[Graph]]:
    """Generate train/val/test splits per the shift specification.

    Each graph gets its own RNG derived from (seed, split, index), so
    generation is order-independent and reproducible.
    """
    splits: dict[str, list[Graph]] = {}
    plan = (("train", spec.train_count, spec.train_base_size),
            ("val", spec.val_count, spec.train_base_size),
            ("test", spec.test_count, spec.test_base_size))
    for split_idx, (split, count, size_range) in enumerate(plan):
        graphs = []
        for i in range(count):
            rng = np.random.default_rng([seed, split_idx, i])
            label = int(rng.integers(0, spec.classes))
            bias = spec.bias if split == "train" else None
            base_kind = _draw_base_kind(label, bias, rng)
            base_size = int(rng.integers(size_range[0], size_range[1] + 1))
            graphs.append(assemble_graph(label, base_kind, base_size, spec.feature_dim,
                                         rng, graph_id=f"{split}-{i:05d}", split=split))
        splits[split] = graphs
    return splits


# -- batching -------------------------------------------------------------------


@dataclass
class Batch:
    """A slice of an epoch, keeping the original dataset positions so
    intervention pairing and logs can refer back to specific graphs."""

    graphs: list[Graph]
    indices: list[int]

    def __len__(self) -> int:
        return len(self.graphs)


def batch(graphs: list[Graph], max_batch: int,
          rng: np.random.Generator | None = None) -> list[Batch]:
    """Chunk graphs into batches of at most ``max_batch``.

    A trailing batch of one graph is merged into the previous batch because
    intervention pairing needs at least two variant sources per batch.
    """
    if max_batch < 2:
        raise ConfigError(f"max_batch must be at least 2, got {max_batch}")
    if len(graphs) < 2:
        raise ConfigError("batching needs at least 2 graphs for intervention pairing")
    order = list(range(len(graphs)))
    if rng is not None:
        order = [int(i) for i in rng.permutation(len(graphs))]
    chunks = [order[i:i + max_batch] for i in range(0, len(order), max_batch)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2].extend(chunks.pop())
    return [Batch(graphs=[graphs[i] for i in chunk], indices=chunk) for chunk in chunks]


# -- persistence ------------------------------------------------------------------

_REQUIRED_FIELDS = ("id", "n_nodes", "edges", "label", "invariant_edge_mask",
                    "node_features", "base_kind", "motif_kind", "split")


def graph_to_record(g: Graph) -> dict:
    return {
        "id": g.graph_id,
        "n_nodes": g.n_nodes,
        "edges": [list(e) for e in g.edges],
        "label": g.label,
        "invariant_edge_mask": [bool(b) for b in g.invariant_edge_mask],
        "node_features": g.node_features.tolist(),
        "pse": None if g.pse is None else g.pse.tolist(),
        "base_kind": g.base_kind,
        "motif_kind": g.motif_kind,
        "split": g.split,
    }


def record_to_graph(rec: dict, line: int | None = None) -> Graph:
    for name in _REQUIRED_FIELDS:
        if name not in rec:
            raise ParseError(f"missing field {name!r}", line=line)
    pse = rec.get("pse")
    return Graph(
        n_nodes=rec["n_nodes"],
        edges=[tuple(e) for e in rec["edges"]],
        node_features=np.asarray(rec["node_features"], dtype=np.float64),
        label=int(rec["label"]),
        invariant_edge_mask=np.asarray(rec["invariant_edge_mask"], dtype=bool),
        pse=None if pse is None else np.asarray(pse, dtype=np.float64),
        graph_id=rec["id"],
        base_kind=rec["base_kind"],
        motif_kind=rec["motif_kind"],
        split=rec["split"],
    )


def write_graphs(path: str | Path, graphs: list[Graph]) -> None:
    """One JSON object per line per graph."""
    path = Path(path)
    with path.open("w") as fh:
        for g in graphs:
            fh.write(json.dumps(graph_to_record(g)) + "\n")


def read_graphs(path: str | Path) -> list[Graph]:
    path = Path(path)
    graphs = []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from exc
            graphs.append(record_to_graph(rec, line=lineno))
    return graphs


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_dataset(out_dir: str | Path, splits: dict[str, list[Graph]],
                  spec: ShiftSpec, seed: int, extra: dict | None = None) -> Path:
    """Write split files plus a manifest with the spec and file checksums."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, graphs in splits.items():
        write_graphs(out / f"{split}.jsonl", graphs)
    manifest = {
        "shift_spec": spec.to_dict(),
        "seed": seed,
        "counts": {split: len(graphs) for split, graphs in splits.items()},
        "checksums": {f"{split}.jsonl": sha256_file(out / f"{split}.jsonl")
                      for split in splits},
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def read_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise ConfigError(f"no manifest.json in {data_dir}")
    return json.loads(path.read_text())


def load_dataset(data_dir: str | Path,
                 splits: tuple[str, ...] = ("train", "val", "test")) -> dict[str, list[Graph]]:
    data_dir = Path(data_dir)
    out = {}
    for split in splits:
        path = data_dir / f"{split}.jsonl"
        if not path.exists():
            raise ConfigError(f"missing split file {path}")
        out[split] = read_graphs(path)
    return out
