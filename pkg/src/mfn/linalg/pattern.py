"""Block-sparse symmetric matrices and fill-reducing orderings.

A pattern is an undirected block graph on n block-rows with uniform block
size M; the diagonal block is always present.  A BlockSparseMat stores the
diagonal blocks and one M x M block per canonical edge (i < j); the (j, i)
block is implied by self-adjointness as the transpose.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError, PreconditionError, ShapeError

__all__ = [
    "BlockSparsePattern",
    "BlockSparseMat",
    "Ordering",
    "order",
    "path_pattern",
    "grid_pattern",
    "dense_pattern",
]


@dataclass(frozen=True)
class BlockSparsePattern:
    """Structurally symmetric block pattern: canonical edges plus diagonal."""

    n: int
    M: int
    edges: tuple[tuple[int, int], ...]  # canonical i < j, sorted
    rows: tuple[tuple[int, ...], ...] = field(init=False)  # off-diag neighbors per row

    def __post_init__(self):
        if self.n < 1 or self.M < 1:
            raise PreconditionError("pattern needs n >= 1 and M >= 1")
        seen = set()
        nbr = [[] for _ in range(self.n)]
        for i, j in self.edges:
            if not (0 <= i < j < self.n):
                raise PreconditionError(f"edge ({i},{j}) must satisfy 0 <= i < j < n")
            if (i, j) in seen:
                raise PreconditionError(f"duplicate edge ({i},{j})")
            seen.add((i, j))
            nbr[i].append(j)
            nbr[j].append(i)
        object.__setattr__(self, "edges", tuple(sorted(seen)))
        object.__setattr__(self, "rows", tuple(tuple(sorted(v)) for v in nbr))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def edge_index(self) -> dict[tuple[int, int], int]:
        return {e: k for k, e in enumerate(self.edges)}

    def has(self, i: int, j: int) -> bool:
        if i == j:
            return True
        return (min(i, j), max(i, j)) in set(self.edges)


@dataclass
class BlockSparseMat:
    """Self-adjoint block-sparse matrix on a shared pattern.

    diag[i] is the (i, i) block; off[k] is the block for pattern.edges[k]
    oriented (i, j) with i < j.  As a flat (n*M, n*M) matrix the (j, i) block
    equals off[k].T.
    """

    pattern: BlockSparsePattern
    diag: np.ndarray  # (n, M, M)
    off: np.ndarray  # (E, M, M)

    def __post_init__(self):
        n, M, E = self.pattern.n, self.pattern.M, self.pattern.num_edges
        self.diag = np.asarray(self.diag)
        self.off = np.asarray(self.off).reshape(E, M, M) if E else np.zeros((0, M, M))
        if self.diag.shape != (n, M, M):
            raise ShapeError(f"diag must be {(n, M, M)}, got {self.diag.shape}")
        if self.off.shape != (E, M, M):
            raise ShapeError(f"off must be {(E, M, M)}, got {self.off.shape}")
        self._eidx = self.pattern.edge_index()

    def block(self, i: int, j: int) -> np.ndarray:
        """Oriented (i, j) block, using the transpose for i > j."""
        if i == j:
            return self.diag[i]
        key = (min(i, j), max(i, j))
        b = self.off[self._eidx[key]]
        return b if i < j else b.T

    def dense(self) -> np.ndarray:
        n, M = self.pattern.n, self.pattern.M
        A = np.zeros((n * M, n * M), dtype=self.diag.dtype)
        for i in range(n):
            A[i * M : (i + 1) * M, i * M : (i + 1) * M] = self.diag[i]
        for k, (i, j) in enumerate(self.pattern.edges):
            A[i * M : (i + 1) * M, j * M : (j + 1) * M] = self.off[k]
            A[j * M : (j + 1) * M, i * M : (i + 1) * M] = self.off[k].T

        return A

    def norm_max(self) -> float:
        top = np.abs(self.diag).max() if self.diag.size else 0.0
        if self.off.size:
            top = max(top, np.abs(self.off).max())
        return float(top)

    def dump(self, path) -> None:
        """Matrix-market-style text dump: `%%block n M` header, then one line
        `i j v...` (row-major block values) per stored canonical block."""
        lines = [f"%%block {self.pattern.n} {self.pattern.M}"]
        for i in range(self.pattern.n):
            vals = " ".join(repr(float(v)) for v in self.diag[i].ravel())
            lines.append(f"{i} {i} {vals}")
        for k, (i, j) in enumerate(self.pattern.edges):
            vals = " ".join(repr(float(v)) for v in self.off[k].ravel())
            lines.append(f"{i} {j} {vals}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "BlockSparseMat":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("%%block"):
            raise FormatError("missing %%block header")
        try:
            _, n_s, m_s = lines[0].split()
            n, M = int(n_s), int(m_s)
        except ValueError:
            raise FormatError("malformed %%block header") from None
        diag = np.zeros((n, M, M))
        blocks: dict[tuple[int, int], np.ndarray] = {}
        for line in lines[1:]:
            if not line.strip():
                continue
            parts = line.split()
            i, j = int(parts[0]), int(parts[1])
            vals = np.array([float(p) for p in parts[2:]])
            if vals.size != M * M:
                raise FormatError(f"block ({i},{j}) has {vals.size} values, expected {M * M}")
            if i == j:
                diag[i] = vals.reshape(M, M)
            else:
                blocks[(min(i, j), max(i, j))] = vals.reshape(M, M)
        pattern = BlockSparsePattern(n=n, M=M, edges=tuple(sorted(blocks)))
        off = np.array([blocks[e] for e in pattern.edges]).reshape(len(blocks), M, M)
        return cls(pattern=pattern, diag=diag, off=off)


# ---------------------------------------------------------------------------
# Orderings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ordering:
    """Elimination sequence: perm[k] is the block eliminated k-th."""

    perm: tuple[int, ...]
    method: str

    def __post_init__(self):
        if sorted(self.perm) != list(range(len(self.perm))):
            raise PreconditionError("perm must be a permutation of 0..n-1")

    def positions(self) -> np.ndarray:
        pos = np.empty(len(self.perm), dtype=np.int64)
        for p, orig in enumerate(self.perm):
            pos[orig] = p
        return pos


def _bfs_levels(adj, start: int, allowed: set[int]) -> list[list[int]]:
    levels = [[start]]
    seen = {start}
    frontier = [start]
    while frontier:
        nxt = []
        for v in frontier:
            for w in adj[v]:
                if w in allowed and w not in seen:
                    seen.add(w)
                    nxt.append(w)
        if not nxt:
            break
        nxt.sort()
        levels.append(nxt)
        frontier = nxt
    return levels


def _pseudo_peripheral(adj, nodes: list[int]) -> int:
    """Double-sweep BFS heuristic starting from a minimum-degree node."""
    allowed = set(nodes)
    start = min(nodes, key=lambda v: (sum(1 for w in adj[v] if w in allowed), v))
    for _ in range(2):
        levels = _bfs_levels(adj, start, allowed)
        last = levels[-1]
        nxt = min(last, key=lambda v: (sum(1 for w in adj[v] if w in allowed), v))
        if nxt == start:
            break
        start = nxt
    return start


def _components(adj, nodes: list[int]) -> list[list[int]]:
    allowed = set(nodes)
    comps = []
    seen: set[int] = set()
    for v in sorted(nodes):
        if v in seen:
            continue
        comp = []
        dq = deque([v])
        seen.add(v)
        while dq:
            u = dq.popleft()
            comp.append(u)
            for w in adj[u]:
                if w in allowed and w not in seen:
                    seen.add(w)
                    dq.append(w)
        comps.append(sorted(comp))
    return comps


def _rcm_order(pattern: BlockSparsePattern) -> list[int]:
    adj = pattern.rows
    order: list[int] = []
    for comp in _components(adj, list(range(pattern.n))):
        allowed = set(comp)
        start = _pseudo_peripheral(adj, comp)
        seen = {start}
        dq = deque([start])
        comp_order = []
        while dq:
            v = dq.popleft()
            comp_order.append(v)
            nbrs = sorted(
                (w for w in adj[v] if w in allowed and w not in seen),
                key=lambda w: (sum(1 for x in adj[w] if x in allowed), w),
            )
            for w in nbrs:
                seen.add(w)
                dq.append(w)
        order.extend(comp_order)
    order.reverse()
    return order


def _nd_order(adj, nodes: list[int]) -> list[int]:
    """Recursive bisection along BFS levels; separator level eliminated last."""
    if len(nodes) <= 2:
        return sorted(nodes)
    comps = _components(adj, nodes)
    if len(comps) > 1:
        out: list[int] = []
        for comp in comps:
            out.extend(_nd_order(adj, comp))
        return out
    start = _pseudo_peripheral(adj, nodes)
    levels = _bfs_levels(adj, start, set(nodes))
    if len(levels) < 3:
        return sorted(nodes)
    s = (len(levels) - 1) // 2
    sep = levels[s]
    left = [v for lvl in levels[:s] for v in lvl]
    right = [v for lvl in levels[s + 1 :] for v in lvl]
    out = []
    if left:
        out.extend(_nd_order(adj, left))
    if right:
        out.extend(_nd_order(adj, right))
    out.extend(sorted(sep))
    return out


def order(pattern: BlockSparsePattern, method: str) -> Ordering:
    """Compute an elimination ordering: natural, rcm or nested_dissection."""
    if method == "natural":
        perm = tuple(range(pattern.n))
    elif method == "rcm":
        perm = tuple(_rcm_order(pattern))
    elif method == "nested_dissection":
        perm = tuple(_nd_order(pattern.rows, list(range(pattern.n))))
    else:
        raise PreconditionError(f"unknown ordering method {method!r}")
    return Ordering(perm=perm, method=method)


# ---------------------------------------------------------------------------
# Pattern constructors used by tests and benchmarks
# ---------------------------------------------------------------------------


def path_pattern(n: int, M: int = 1) -> BlockSparsePattern:
    return BlockSparsePattern(n=n, M=M, edges=tuple((i, i + 1) for i in range(n - 1)))


def grid_pattern(rows: int, cols: int, M: int = 1) -> BlockSparsePattern:
    edges = []
    for r in range(rows):
        for c in range(cols):
            v = r * cols + c
            if c + 1 < cols:
                edges.append((v, v + 1))
            if r + 1 < rows:
                edges.append((v, v + cols))
    return BlockSparsePattern(n=rows * cols, M=M, edges=tuple(sorted(edges)))


def dense_pattern(n: int, M: int = 1) -> BlockSparsePattern:
    edges = tuple((i, j) for i in range(n) for j in range(i + 1, n))
    return BlockSparsePattern(n=n, M=M, edges=edges)
