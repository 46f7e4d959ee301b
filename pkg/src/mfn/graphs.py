"""Graph data model, TU-format ingestion, synthetic generators and CV splits.

Pure graphs carry topology plus categorical labels; geometric graphs carry 3D
positions, species ids and a cutoff radius from which the edge set is derived.
Both are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConsistencyError,
    DegenerateGeometryError,
    FormatError,
    PreconditionError,
    StratificationWarning,
)

__all__ = [
    "Graph",
    "GeometricGraph",
    "Dataset",
    "FoldPlan",
    "load_tu_dataset",
    "write_tu_dataset",
    "build_radius_graph",
    "make_k_chain",
    "split_folds",
    "read_xyz",
]


def _canonical_edges(edges) -> tuple[tuple[int, int], ...]:
    """Deduplicated, undirected edge tuple with i < j ordering."""
    canon = set()
    for i, j in edges:
        if i == j:
            raise PreconditionError(f"self-edge ({i},{i}) is not allowed")
        canon.add((min(i, j), max(i, j)))
    return tuple(sorted(canon))


@dataclass(frozen=True)
class Graph:
    """Pure graph: topology, categorical attributes and a graph-level target."""

    n: int
    edges: tuple[tuple[int, int], ...]
    node_labels: tuple[int, ...]
    edge_labels: tuple[int, ...] | None = None
    target: float | int = 0

    def __post_init__(self):
        object.__setattr__(self, "edges", _canonical_edges(self.edges))
        if self.edge_labels is not None and len(self.edge_labels) != len(self.edges):
            raise PreconditionError("edge_labels must align with canonical edges")
        for i, j in self.edges:
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise PreconditionError(f"edge ({i},{j}) references node >= n={self.n}")
        if len(self.node_labels) != self.n:
            raise PreconditionError("node_labels length must equal n")

    def neighbors(self) -> list[list[int]]:
        nbr = [[] for _ in range(self.n)]
        for i, j in self.edges:
            nbr[i].append(j)
            nbr[j].append(i)
        return [sorted(v) for v in nbr]

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=np.int64)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg


@dataclass(frozen=True)
class GeometricGraph:
    """Point cloud with radius-derived edges.

    Edges are exactly the unordered pairs at distance 0 < d <= cutoff.
    """

    positions: np.ndarray  # (n, 3) float, Angstrom
    species: tuple[int, ...]
    cutoff: float
    edges: tuple[tuple[int, int], ...]
    target: float = 0.0

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise PreconditionError("positions must be (n, 3)")
        if not np.all(np.isfinite(pos)):
            raise PreconditionError("positions must be finite")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "edges", _canonical_edges(self.edges))
        if len(self.species) != self.n:
            raise PreconditionError("species length must equal node count")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def neighbors(self) -> list[list[int]]:
        nbr = [[] for _ in range(self.n)]
        for i, j in self.edges:
            nbr[i].append(j)
            nbr[j].append(i)
        return [sorted(v) for v in nbr]


@dataclass(frozen=True)
class Dataset:
    """Homogeneous list of graphs plus task metadata.

    task is "regression" or "classification"; num_classes is meaningful only
    for classification and targets then lie in [0, num_classes).
    """

    graphs: tuple
    task: str
    name: str = ""
    num_classes: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in ("regression", "classification"):
            raise PreconditionError(f"unknown task {self.task!r}")
        kinds = {type(g) for g in self.graphs}
        if len(kinds) > 1:
            raise PreconditionError("dataset mixes graph kinds")
        if self.task == "classification":
            for g in self.graphs:
                if not (0 <= int(g.target) < self.num_classes):
                    raise PreconditionError("classification target out of range")

    def __len__(self) -> int:
        return len(self.graphs)

    def targets(self) -> np.ndarray:
        return np.array([g.target for g in self.graphs])


@dataclass(frozen=True)
class FoldPlan:
    """Cross-validation assignment: fold index per graph."""

    k: int
    seed: int
    assignments: tuple[int, ...]

    def __post_init__(self):
        counts = np.bincount(np.asarray(self.assignments), minlength=self.k)
        if counts.max() - counts.min() > 1:
            raise PreconditionError("fold sizes must differ by at most 1")

    def split(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """(train indices, test indices) for one fold."""
        a = np.asarray(self.assignments)
        return np.where(a != fold)[0], np.where(a == fold)[0]


# ---------------------------------------------------------------------------
# TU file format
# ---------------------------------------------------------------------------

_SPLIT = re.compile(r"[,\s]+")


def _read_int_rows(path: Path, ncols: int) -> list[tuple[int, ...]]:
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = [p for p in _SPLIT.split(line) if p]
        if len(parts) != ncols:
            raise FormatError(f"{path.name}:{lineno}: expected {ncols} fields, got {len(parts)}")
        try:
            rows.append(tuple(int(float(p)) for p in parts))
        except ValueError as exc:
            raise FormatError(f"{path.name}:{lineno}: {exc}") from None
    return rows


def _dense_remap(values) -> tuple[list[int], dict]:
    """Remap arbitrary integer labels to a dense 0-based alphabet."""
    alphabet = sorted(set(values))
    mapping = {v: k for k, v in enumerate(alphabet)}
    return [mapping[v] for v in values], mapping


def load_tu_dataset(dir_path) -> Dataset:
    """Parse a TU-format dataset directory.

    Expects the standard layout ``<DS>_A.txt`` (1-indexed edge list),
    ``<DS>_graph_indicator.txt``, ``<DS>_graph_labels.txt`` and optional
    ``<DS>_node_labels.txt`` / ``<DS>_edge_labels.txt``.  All label alphabets
    are remapped to dense 0-based ids; the mappings are recorded in
    ``Dataset.meta`` for reproducibility.
    """
    dir_path = Path(dir_path)
    if not dir_path.is_dir():
        raise FormatError(f"{dir_path} is not a directory")
    a_files = sorted(dir_path.glob("*_A.txt"))
    if not a_files:
        raise FormatError(f"no *_A.txt edge file under {dir_path}")
    prefix = a_files[0].name[: -len("_A.txt")]

    def locate(suffix: str, required: bool) -> Path | None:
        p = dir_path / f"{prefix}_{suffix}.txt"
        if not p.is_file():
            if required:
                raise FormatError(f"missing mandatory file {p.name}")
            return None
        return p

    edges_raw = _read_int_rows(locate("A", True), 2)
    indicator = [r[0] for r in _read_int_rows(locate("graph_indicator", True), 1)]
    graph_labels_raw = [r[0] for r in _read_int_rows(locate("graph_labels", True), 1)]
    node_path = locate("node_labels", False)
    edge_path = locate("edge_labels", False)
    node_labels_raw = [r[0] for r in _read_int_rows(node_path, 1)] if node_path else None
    edge_labels_raw = [r[0] for r in _read_int_rows(edge_path, 1)] if edge_path else None

    n_total = len(indicator)
    n_graphs = len(graph_labels_raw)
    if node_labels_raw is not None and len(node_labels_raw) != n_total:
        raise ConsistencyError("node label count does not match indicator length")
    if edge_labels_raw is not None and len(edge_labels_raw) != len(edges_raw):
        raise ConsistencyError("edge label count does not match edge list length")
    if sorted(set(indicator)) != list(range(1, n_graphs + 1)):
        raise ConsistencyError("graph_indicator ids must cover 1..num_graphs")

    graph_labels, graph_map = _dense_remap(graph_labels_raw)
    if node_labels_raw is not None:
        node_labels, node_map = _dense_remap(node_labels_raw)
    else:
        node_labels, node_map = [0] * n_total, {0: 0}
    if edge_labels_raw is not None:
        edge_labels, edge_map = _dense_remap(edge_labels_raw)
    else:
        edge_labels, edge_map = None, None

    # Global node id -> (graph id, local id), nodes are 1-indexed in files.
    graph_of = np.asarray(indicator, dtype=np.int64) - 1
    local_id = np.zeros(n_total, dtype=np.int64)
    counts = np.zeros(n_graphs, dtype=np.int64)
    for v in range(n_total):
        g = graph_of[v]
        local_id[v] = counts[g]
        counts[g] += 1

    per_edges: list[dict] = [dict() for _ in range(n_graphs)]
    for idx, (a, b) in enumerate(edges_raw):
        if not (1 <= a <= n_total and 1 <= b <= n_total):
            raise ConsistencyError(f"edge ({a},{b}) references node outside 1..{n_total}")
        ga, gb = graph_of[a - 1], graph_of[b - 1]
        if ga != gb:
            raise ConsistencyError(f"edge ({a},{b}) spans graphs {ga + 1} and {gb + 1}")
        i, j = int(local_id[a - 1]), int(local_id[b - 1])
        key = (min(i, j), max(i, j))
        lab = edge_labels[idx] if edge_labels is not None else None
        prev = per_edges[ga].get(key)
        if prev is not None and lab is not None and prev != lab:
            raise ConsistencyError(f"edge ({a},{b}) has conflicting labels")
        per_edges[ga][key] = lab

    graphs = []
    for g in range(n_graphs):
        keys = sorted(per_edges[g])
        labels = tuple(per_edges[g][k] for k in keys) if edge_labels is not None else None
        nl = tuple(node_labels[v] for v in range(n_total) if graph_of[v] == g)
        graphs.append(
            Graph(
                n=int(counts[g]),
                edges=tuple(keys),
                node_labels=nl,
                edge_labels=labels,
                target=graph_labels[g],
            )
        )

    meta = {
        "graph_label_map": graph_map,
        "node_label_map": node_map,
        "edge_label_map": edge_map,
        "num_node_labels": len(node_map),
        "num_edge_labels": len(edge_map) if edge_map else 0,
    }
    return Dataset(
        graphs=tuple(graphs),
        task="classification",
        name=prefix,
        num_classes=len(graph_map),
        meta=meta,
    )


def write_tu_dataset(dataset: Dataset, dir_path, name: str | None = None) -> None:
    """Write a pure-graph dataset in TU format (inverse of load_tu_dataset)."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    name = name or dataset.name or "DS"
    a_lines, ind_lines, nl_lines, el_lines = [], [], [], []
    offset = 0
    has_edge_labels = all(g.edge_labels is not None for g in dataset.graphs)
    for gid, g in enumerate(dataset.graphs, start=1):
        for v in range(g.n):
            ind_lines.append(f"{gid}")
            nl_lines.append(f"{g.node_labels[v]}")
        for eidx, (i, j) in enumerate(g.edges):
            a, b = offset + i + 1, offset + j + 1
            a_lines.append(f"{a}, {b}")
            a_lines.append(f"{b}, {a}")
            if has_edge_labels:
                el_lines.append(f"{g.edge_labels[eidx]}")
                el_lines.append(f"{g.edge_labels[eidx]}")
        offset += g.n
    (dir_path / f"{name}_A.txt").write_text("\n".join(a_lines) + "\n")
    (dir_path / f"{name}_graph_indicator.txt").write_text("\n".join(ind_lines) + "\n")
    (dir_path / f"{name}_graph_labels.txt").write_text(
        "\n".join(str(int(g.target)) for g in dataset.graphs) + "\n"
    )
    (dir_path / f"{name}_node_labels.txt").write_text("\n".join(nl_lines) + "\n")
    if has_edge_labels:
        (dir_path / f"{name}_edge_labels.txt").write_text("\n".join(el_lines) + "\n")


# ---------------------------------------------------------------------------
# Geometric constructions
# ---------------------------------------------------------------------------


def build_radius_graph(positions, species, r_c: float, target: float = 0.0) -> GeometricGraph:
    """Connect every pair within distance r_c (exclusive of coincident pairs)."""
    if r_c <= 0:
        raise PreconditionError("cutoff must be positive")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise PreconditionError("positions must be (n, 3)")
    n = pos.shape[0]
    if n < 1:
        raise PreconditionError("need at least one node")
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    iu, ju = np.triu_indices(n, k=1)
    if np.any(dist[iu, ju] == 0.0):
        raise DegenerateGeometryError("coincident nodes at distance 0")
    mask = dist[iu, ju] <= r_c
    edges = tuple((int(i), int(j)) for i, j in zip(iu[mask], ju[mask]))
    return GeometricGraph(
        positions=pos, species=tuple(int(s) for s in species), cutoff=float(r_c),
        edges=edges, target=float(target),
    )


# k-chain geometry: a unit-spaced backbone of k nodes on the x axis with a bent
# terminal at each end.  The far terminal is always displaced +0.5 in y; the
# near terminal is displaced +0.5 (flipped=False) or -0.5 (flipped=True).  The
# two variants share every pairwise distance except the terminal-terminal one,
# so any model whose receptive field does not span the chain cannot tell them
# apart, while the adjacency under a nearest-neighbor cutoff is identical.
K_CHAIN_CUTOFF = 1.5
K_CHAIN_DISPLACEMENT = 0.5


def make_k_chain(k: int, flipped: bool) -> GeometricGraph:
    """Build one member of the k-chain pair; target is +1 / -1 by flip."""
    if k < 2:
        raise PreconditionError("k must be >= 2")
    pos = np.zeros((k + 2, 3))
    pos[0] = (0.0, K_CHAIN_DISPLACEMENT, 0.0)
    for i in range(1, k + 1):
        pos[i] = (float(i), 0.0, 0.0)
    pos[k + 1] = (float(k + 1), -K_CHAIN_DISPLACEMENT if flipped else K_CHAIN_DISPLACEMENT, 0.0)
    species = (1,) + (0,) * k + (1,)
    target = -1.0 if flipped else 1.0
    return build_radius_graph(pos, species, K_CHAIN_CUTOFF, target=target)


def read_xyz(path) -> tuple[np.ndarray, tuple[int, ...]]:
    """Minimal xyz reader: count line, comment line, then `element x y z` rows.

    Elements may be integers or symbols; symbols are mapped by first
    appearance to 0, 1, 2, ...
    """
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError("empty xyz file")
    try:
        n = int(lines[0].strip())
    except ValueError:
        raise FormatError("first xyz line must be the atom count") from None
    if len(lines) < n + 2:
        raise FormatError("xyz file truncated")
    symbols: dict[str, int] = {}
    pos = np.zeros((n, 3))
    species = []
    for row, line in enumerate(lines[2 : 2 + n]):
        parts = line.split()
        if len(parts) < 4:
            raise FormatError(f"xyz row {row + 3}: expected `element x y z`")
        el = parts[0]
        try:
            species.append(int(el))
        except ValueError:
            species.append(symbols.setdefault(el, len(symbols)))
        pos[row] = [float(p) for p in parts[1:4]]
    return pos, tuple(species)


# ---------------------------------------------------------------------------
# Cross-validation splits
# ---------------------------------------------------------------------------


def split_folds(dataset: Dataset, k: int, seed: int) -> FoldPlan:
    """Deterministic k-fold plan, stratified by class for classification.

    Stratification assigns each class's shuffled members round-robin while the
    fold counter keeps running across classes, so the overall fold sizes still
    differ by at most one.  A class smaller than k triggers
    StratificationWarning and an unstratified split.
    """
    if k < 2:
        raise PreconditionError("k must be >= 2")
    if len(dataset) < k:
        raise PreconditionError("dataset smaller than fold count")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    assignments = np.empty(n, dtype=np.int64)

    stratify = dataset.task == "classification"
    if stratify:
        targets = dataset.targets().astype(np.int64)
        counts = np.bincount(targets, minlength=dataset.num_classes)
        small = [c for c in range(dataset.num_classes) if 0 < counts[c] < k]
        if small:
            warnings.warn(
                f"classes {small} have fewer than {k} members; splitting unstratified",
                StratificationWarning,
                stacklevel=2,
            )
            stratify = False

    if stratify:
        cursor = 0
        for cls in range(dataset.num_classes):
            members = np.where(targets == cls)[0]
            members = members[rng.permutation(len(members))]
            for idx in members:
                assignments[idx] = cursor % k
                cursor += 1
    else:
        order = rng.permutation(n)
        for pos, idx in enumerate(order):
            assignments[idx] = pos % k
    return FoldPlan(k=k, seed=seed, assignments=tuple(int(a) for a in assignments))
