"""Sparse complex-symmetric block LDL^T and Takahashi selected inversion.

For a self-adjoint real block matrix H and complex shift z, the matrix
zI - H is complex symmetric (equal to its plain transpose), so it factors as
P (zI - H) P^T = L D L^T with unit block lower-triangular L and block-diagonal
complex-symmetric D, without conjugation and without pivoting.  Im(z) != 0
keeps the factorization well conditioned; pivot magnitudes are monitored and
breakdown raises PivotBreakdownError so callers can fall back to a dense path.

The selected inverse computes the blocks of (zI - H)^{-1} on the fill pattern
of L + L^T (a superset of the original pattern) via the Takahashi recursion
Z_ij = delta_ij D_j^{-1} - sum_{k in struct(L_j)} Z_ik L_kj, swept from the
last eliminated block column back to the first.
"""

from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass, field

import numpy as np

from ..errors import InternalError, PivotBreakdownError, PreconditionError
from .pattern import BlockSparseMat, BlockSparsePattern, Ordering, order

__all__ = ["LDLFactor", "SelectedInverse", "symbolic_factor", "ldl_factor",
           "selected_inverse", "flops_and_peak"]


@dataclass
class SymbolicInfo:
    """Fill structure of L in permuted indexing."""

    parent: list[int]  # elimination tree
    col_rows: list[list[int]]  # rows > j in struct(L_:,j), ascending
    row_cols: list[list[int]]  # columns k < j with L_jk != 0, ascending
    a_lower: list[list[int]]  # original-pattern entries below the diagonal
    fill_blocks: int


def symbolic_factor(pattern: BlockSparsePattern, ordering: Ordering) -> SymbolicInfo:
    n = pattern.n
    pos = ordering.positions()
    padj = [sorted(int(pos[w]) for w in pattern.rows[ordering.perm[p]]) for p in range(n)]
    parent = [-1] * n
    col_rows: list[list[int]] = [[] for _ in range(n)]
    children: list[list[int]] = [[] for _ in range(n)]
    for j in range(n):
        s = {i for i in padj[j] if i > j}
        for c in children[j]:
            s.update(i for i in col_rows[c] if i > j)
        rows = sorted(s)
        col_rows[j] = rows
        if rows:
            parent[j] = rows[0]
            children[rows[0]].append(j)
    row_cols: list[list[int]] = [[] for _ in range(n)]
    for k in range(n):
        for i in col_rows[k]:
            row_cols[i].append(k)
    a_lower = [[i for i in padj[j] if i > j] for j in range(n)]
    fill = sum(len(r) for r in col_rows)
    return SymbolicInfo(parent=parent, col_rows=col_rows, row_cols=row_cols,
                        a_lower=a_lower, fill_blocks=fill)


@dataclass
class LDLFactor:
    """Numeric factorization P (zI - H) P^T = L D L^T plus its counters."""

    pattern: BlockSparsePattern
    ordering: Ordering
    symbolic: SymbolicInfo
    z: complex
    h_norm: float
    L_blocks: list[np.ndarray]  # per column: (len(col_rows[j]), M, M)
    D: np.ndarray  # (n, M, M)
    D_inv: np.ndarray  # (n, M, M)
    min_pivot: float
    op_count: int
    op_count_selinv: int = 0
    _slot: list[dict] = field(default_factory=list, repr=False)

    def slot_maps(self) -> list[dict]:
        if not self._slot:
            self._slot = [
                {r: t for t, r in enumerate(rows)} for rows in self.symbolic.col_rows
            ]
        return self._slot

    @property
    def stored_blocks(self) -> int:
        return self.pattern.n + self.symbolic.fill_blocks

    def reconstruct_dense(self) -> np.ndarray:
        """L D L^T as a flat dense matrix (permuted indexing), for testing."""
        n, M = self.pattern.n, self.pattern.M
        Lf = np.zeros((n * M, n * M), dtype=np.complex128)
        Df = np.zeros((n * M, n * M), dtype=np.complex128)
        for j in range(n):
            Lf[j * M : (j + 1) * M, j * M : (j + 1) * M] = np.eye(M)
            Df[j * M : (j + 1) * M, j * M : (j + 1) * M] = self.D[j]
            for t, i in enumerate(self.symbolic.col_rows[j]):
                Lf[i * M : (i + 1) * M, j * M : (j + 1) * M] = self.L_blocks[j][t]
        return Lf @ Df @ Lf.T


def _pivot_magnitude(Dj: np.ndarray) -> float:
    if Dj.shape[0] == 1:
        return abs(Dj[0, 0])
    return float(np.linalg.svd(Dj, compute_uv=False)[-1])


def ldl_factor(H: BlockSparseMat, z: complex, ordering: Ordering | None = None) -> LDLFactor:
    """Factor P (zI - H) P^T = L D L^T for self-adjoint block-sparse H."""
    if z.imag == 0.0:
        raise PreconditionError("shift z must have a nonzero imaginary part")
    pattern = H.pattern
    if ordering is None:
        ordering = order(pattern, "natural")
    if len(ordering.perm) != pattern.n:
        raise PreconditionError("ordering size does not match pattern")
    sym = symbolic_factor(pattern, ordering)
    n, M = pattern.n, pattern.M
    perm = ordering.perm
    h_norm = H.norm_max()
    pivot_tol = 1e-10 * (abs(z) + h_norm)
    eye = np.eye(M)

    def ablock(p: int, q: int) -> np.ndarray:
        if p == q:
            return z * eye - H.diag[perm[p]]
        return -H.block(perm[p], perm[q])

    L_blocks: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    D = np.zeros((n, M, M), dtype=np.complex128)
    D_inv = np.zeros((n, M, M), dtype=np.complex128)
    scratch = np.zeros((n, M, M), dtype=np.complex128)
    ops = 0
    gemm = 2 * M**3
    min_pivot = np.inf

    for j in range(n):
        rows_j = sym.col_rows[j]
        touched = [j] + rows_j
        scratch[j] = ablock(j, j)
        for i in rows_j:
            scratch[i] = 0.0
        for i in sym.a_lower[j]:
            scratch[i] = ablock(i, j)
        for k in sym.row_cols[j]:
            rows_k = sym.col_rows[k]
            Lk = L_blocks[k]
            t0 = bisect_left(rows_k, j)
            W = (Lk[t0] @ D[k]).T  # rows_k[t0] == j by construction
            ops += gemm
            for t in range(t0, len(rows_k)):
                scratch[rows_k[t]] -= Lk[t] @ W
            ops += gemm * (len(rows_k) - t0)
        Dj = scratch[j]
        Dj = 0.5 * (Dj + Dj.T)  # keep D exactly complex symmetric
        piv = _pivot_magnitude(Dj)
        min_pivot = min(min_pivot, piv)
        if piv < pivot_tol:
            raise PivotBreakdownError(
                f"pivot {piv:.3e} below tolerance {pivot_tol:.3e} at column {j}"
            )
        D[j] = Dj
        D_inv[j] = np.linalg.inv(Dj)
        ops += gemm
        col = np.zeros((len(rows_j), M, M), dtype=np.complex128)
        for t, i in enumerate(rows_j):
            col[t] = scratch[i] @ D_inv[j]
        ops += gemm * len(rows_j)
        L_blocks[j] = col
        for i in touched:
            scratch[i] = 0.0

    return LDLFactor(pattern=pattern, ordering=ordering, symbolic=sym, z=z,
                     h_norm=h_norm, L_blocks=L_blocks, D=D, D_inv=D_inv,
                     min_pivot=float(min_pivot), op_count=ops)


@dataclass
class SelectedInverse:
    """Blocks of (zI - H)^{-1} on the fill pattern, in original indexing.

    diag[i] is the (i, i) block; off maps canonical (i, j), i < j, to the
    block oriented (i, j).  The stored set always covers the original edges.
    """

    n: int
    M: int
    z: complex
    diag: np.ndarray  # (n, M, M) complex
    off: dict[tuple[int, int], np.ndarray]

    def has(self, i: int, j: int) -> bool:
        return i == j or (min(i, j), max(i, j)) in self.off

    def block(self, i: int, j: int) -> np.ndarray:
        if i == j:
            return self.diag[i]
        b = self.off[(min(i, j), max(i, j))]
        return b if i < j else b.T


def selected_inverse(f: LDLFactor) -> SelectedInverse:
    """Takahashi recursion over the elimination tree, last column first."""
    n, M = f.pattern.n, f.pattern.M
    sym = f.symbolic
    slots = f.slot_maps()
    Z_diag = np.zeros((n, M, M), dtype=np.complex128)
    Z_cols: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    ops = 0
    gemm = 2 * M**3

    def z_get(i: int, k: int) -> np.ndarray:
        # (i, k) block of the symmetric permuted inverse; min(i, k) was
        # eliminated after the current column, so it is already available.
        if i == k:
            return Z_diag[i]
        if i > k:
            t = slots[k].get(i)
            if t is None:
                raise InternalError(f"({i},{k}) escaped the fill pattern")
            return Z_cols[k][t]
        t = slots[i].get(k)
        if t is None:
            raise InternalError(f"({i},{k}) escaped the fill pattern")
        return Z_cols[i][t].T

    for j in range(n - 1, -1, -1):
        rows_j = sym.col_rows[j]
        Lj = f.L_blocks[j]
        m = len(rows_j)
        col = np.zeros((m, M, M), dtype=np.complex128)
        for ti, i in enumerate(rows_j):
            acc = np.zeros((M, M), dtype=np.complex128)
            for tk in range(m):
                acc += z_get(i, rows_j[tk]) @ Lj[tk]
            col[ti] = -acc
        ops += gemm * m * m
        Z_cols[j] = col
        accd = np.zeros((M, M), dtype=np.complex128)
        for tk in range(m):
            accd += col[tk].T @ Lj[tk]
        ops += gemm * m
        Zjj = f.D_inv[j] - accd
        Z_diag[j] = 0.5 * (Zjj + Zjj.T)

    f.op_count_selinv = ops

    # Map back to original block indices.
    perm = f.ordering.perm
    diag = np.zeros((n, M, M), dtype=np.complex128)
    off: dict[tuple[int, int], np.ndarray] = {}
    for j in range(n):
        diag[perm[j]] = Z_diag[j]
        for t, i in enumerate(sym.col_rows[j]):
            a, b = perm[i], perm[j]  # block oriented (row a, col b)
            blk = Z_cols[j][t]
            if a < b:
                off[(a, b)] = blk
            else:
                off[(b, a)] = blk.T
    return SelectedInverse(n=n, M=M, z=f.z, diag=diag, off=off)


def flops_and_peak(f: LDLFactor) -> tuple[int, int]:
    """Deterministic counters: numeric-factorization flops and stored blocks."""
    return f.op_count, f.stored_blocks
