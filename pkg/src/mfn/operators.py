"""Self-adjoint, permutation- and rotation-equivariant operator stacks.

An OperatorStack is c block-sparse self-adjoint matrices sharing one pattern
(graph adjacency plus diagonal).  Assembly routines produce the stack from
node/edge features; spectra are standardized by trace-moment normalization.

Assembly is written against the tape primitives so the same code serves both
inference (non-recording tape) and training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UnsupportedError
from .graphs import Graph
from .linalg.pattern import BlockSparseMat, BlockSparsePattern
from .tape import Tape, Var, value_of

__all__ = [
    "OperatorStack",
    "NormStats",
    "trace_moments",
    "laplacian_operator",
    "normalize",
    "assemble_pure",
    "assemble_o3",
    "radial_basis",
    "envelope",
    "graph_pattern",
    "NORM_EPS",
]

NORM_EPS = 1e-6


@dataclass
class OperatorStack:
    """c self-adjoint block matrices on a shared pattern.

    diag has shape (c, n, M, M) and off (c, E, M, M) with blocks oriented
    along the canonical i < j edges of the pattern.
    """

    pattern: BlockSparsePattern
    diag: np.ndarray
    off: np.ndarray
    layer: int = 0

    def __post_init__(self):
        c = self.diag.shape[0]
        n, M, E = self.pattern.n, self.pattern.M, self.pattern.num_edges
        if self.diag.shape != (c, n, M, M):
            raise ShapeError(f"diag must be (c,{n},{M},{M}), got {self.diag.shape}")
        if self.off.shape != (c, E, M, M):
            raise ShapeError(f"off must be (c,{E},{M},{M}), got {self.off.shape}")

    @property
    def channels(self) -> int:
        return self.diag.shape[0]

    def channel(self, c: int) -> BlockSparseMat:
        return BlockSparseMat(pattern=self.pattern, diag=self.diag[c], off=self.off[c])

    def dense(self, c: int) -> np.ndarray:
        return self.channel(c).dense()


@dataclass(frozen=True)
class NormStats:
    """Per-channel spectral mean/variance estimated from traces."""

    mean: np.ndarray
    var: np.ndarray
    mode: str


def graph_pattern(graph, M: int = 1) -> BlockSparsePattern:
    """Adjacency-plus-diagonal block pattern of a (geometric) graph."""
    return BlockSparsePattern(n=graph.n, M=M, edges=tuple(graph.edges))


def trace_moments(stack: OperatorStack) -> tuple[np.ndarray, np.ndarray]:
    """(tr H_c, tr H_c^2) per channel, exact sums in fixed order.

    tr H^2 is the squared Frobenius norm of the stored blocks with every
    off-diagonal block counted twice.
    """
    diag, off = stack.diag, stack.off
    c, n, M, _ = diag.shape
    tr = np.einsum("cimm->c", diag)
    tr2 = np.einsum("cipq,cipq->c", diag, diag)
    if off.size:
        tr2 = tr2 + 2.0 * np.einsum("cepq,cepq->c", off, off)
    return tr, tr2


def laplacian_operator(graph: Graph) -> OperatorStack:
    """Combinatorial Laplacian D - A as a single-channel stack (M = 1)."""
    pattern = graph_pattern(graph, M=1)
    deg = np.asarray(graph.degrees(), dtype=np.float64)
    diag = deg.reshape(1, graph.n, 1, 1).copy()
    off = -np.ones((1, pattern.num_edges, 1, 1))
    return OperatorStack(pattern=pattern, diag=diag, off=off)


# ---------------------------------------------------------------------------
# Spectral normalization
# ---------------------------------------------------------------------------


def _pooled_stats(stacks, mode: str) -> tuple[np.ndarray, np.ndarray]:
    c = stacks[0].channels
    M = stacks[0].pattern.M
    tr = np.zeros(c)
    tr2 = np.zeros(c)
    dim = 0
    for st in stacks:
        t1, t2 = trace_moments(st)
        tr += t1
        tr2 += t2
        dim += st.pattern.n * M
    if mode == "layer":
        # Stats pooled across the channel dimension: every channel's spectrum
        # contributes to one shared mean/variance.
        tr = np.full(c, tr.sum())
        tr2 = np.full(c, tr2.sum())
        dim = dim * c
    elif mode != "batch":
        raise UnsupportedError(f"unknown normalization mode {mode!r}")
    if dim < 2:
        raise ShapeError("normalization needs a total dimension of at least 2")
    mean = tr / dim
    var = tr2 / (dim - 1) - tr**2 / (dim * (dim - 1))
    var = np.maximum(var, 0.0)
    return mean, var


def normalize(stacks, mode: str = "batch", eps: float = NORM_EPS):
    """Shift/scale each channel so its pooled spectrum has mean 0, variance 1.

    `stacks` is one OperatorStack or a list treated as the batch dimension.
    Returns (normalized stack(s), NormStats).  The trailing matrix dimension
    nM replaces the paper-level node count in the trace formulas.
    """
    single = isinstance(stacks, OperatorStack)
    batch = [stacks] if single else list(stacks)
    mean, var = _pooled_stats(batch, mode)
    scale = np.sqrt(var + eps)
    M = batch[0].pattern.M
    eye = np.eye(M)
    out = []
    for st in batch:
        diag = (st.diag - mean[:, None, None, None] * eye) / scale[:, None, None, None]
        off = st.off / scale[:, None, None, None]
        out.append(OperatorStack(pattern=st.pattern, diag=diag, off=off, layer=st.layer))
    stats = NormStats(mean=mean, var=var, mode=mode)
    return (out[0] if single else out), stats


def normalize_op(tape: Tape, pattern: BlockSparsePattern, diag, off,
                 mode: str = "batch", eps: float = NORM_EPS):
    """Tape-tracked single-stack normalization with the trace-moment adjoint."""
    dv, ov = value_of(diag), value_of(off)
    c = dv.shape[0]
    nM = pattern.n * pattern.M
    st = OperatorStack(pattern=pattern, diag=dv, off=ov)
    tr, tr2 = trace_moments(st)
    if mode == "layer":
        tr = np.full(c, tr.sum())
        tr2 = np.full(c, tr2.sum())
        dim = nM * c
    else:
        dim = nM
    if dim < 2:
        raise ShapeError("normalization needs a total dimension of at least 2")
    mean = tr / dim
    var = np.maximum(tr2 / (dim - 1) - tr**2 / (dim * (dim - 1)), 0.0)
    scale = np.sqrt(var + eps)
    eye = np.eye(pattern.M)
    diag_out = (dv - mean[:, None, None, None] * eye) / scale[:, None, None, None]
    off_out = ov / scale[:, None, None, None]

    def vjp(g):
        gdiag, goff = g
        s = scale[:, None, None, None]
        ddiag = gdiag / s
        doff = goff / s
        # d/d(mean): -tr(gdiag)/scale per channel; d/d(scale): -<g, out>/scale.
        g_mean = -np.einsum("cimm->c", gdiag) / scale
        g_scale = -(
            np.einsum("cipq,cipq->c", gdiag, diag_out)
            + (np.einsum("cepq,cepq->c", goff, off_out) if goff.size else 0.0)
        ) / scale
        g_var = g_scale / (2.0 * scale)
        if mode == "layer":
            g_mean = np.full(c, g_mean.sum())
            g_var = np.full(c, g_var.sum())
        # mean = tr/dim, var = tr2/(dim-1) - tr^2/(dim(dim-1)).
        g_tr = g_mean / dim - g_var * 2.0 * tr / (dim * (dim - 1))
        g_tr2 = g_var / (dim - 1)
        ddiag = ddiag + g_tr[:, None, None, None] * eye
        ddiag = ddiag + 2.0 * g_tr2[:, None, None, None] * dv
        if doff.size:
            doff = doff + 4.0 * g_tr2[:, None, None, None] * ov
        return ddiag, doff

    out = tape.op((diag_out, off_out), (diag, off),
                  lambda g: vjp(g))
    return tape.tuple_item(out, 0), tape.tuple_item(out, 1)


# ---------------------------------------------------------------------------
# Radial basis
# ---------------------------------------------------------------------------


def envelope(r: np.ndarray, r_c: float) -> np.ndarray:
    """Quintic polynomial cutoff: 1 at r=0, 0 at r=r_c, C^2-smooth at both."""
    u = np.clip(r / r_c, 0.0, 1.0)
    return 1.0 - 10.0 * u**3 + 15.0 * u**4 - 6.0 * u**5


def radial_basis(r: np.ndarray, r_c: float, num: int = 8) -> np.ndarray:
    """Bessel-like features sin(k pi r / r_c) / r under the cutoff envelope."""
    r = np.asarray(r, dtype=np.float64)
    k = np.arange(1, num + 1)
    safe = np.where(r > 1e-12, r, 1e-12)
    feats = np.sin(np.pi * k[None, :] * r[:, None] / r_c) / safe[:, None]
    return feats * envelope(r, r_c)[:, None]


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


def assemble_pure_vars(tape: Tape, graph: Graph, h, e_edge, params: dict,
                       layer: int = 0):
    """MLP-entry operator for pure graphs (M = 1), on the tape.

    Edge blocks come from MLP_c([h_i + h_j, h_i * h_j, e_ij]); the symmetric
    input construction makes H_ij = H_ji exact.  Diagonal blocks use the same
    MLP with a learned self-embedding in place of the edge features.
    """
    n = graph.n
    hv = value_of(h)
    edges = np.asarray(graph.edges, dtype=np.int64).reshape(-1, 2)
    w1, b1, w2, b2 = params["w1"], params["b1"], params["w2"], params["b2"]
    e_self = params["e_self"]
    we = value_of(e_self).shape[-1]
    if len(graph.edges) and value_of(e_edge).shape[-1] != we:
        raise ShapeError("edge-feature width mismatch")
    if value_of(w1).shape[0] != 2 * hv.shape[1] + we:
        raise ShapeError("assembly MLP input width mismatch")

    def mlp(x):
        hid = tape.gelu(tape.linear(x, w1, b1))
        return tape.linear(hid, w2, b2)

    c = value_of(w2).shape[1]
    if len(graph.edges):
        hi = tape.gather(h, edges[:, 0])
        hj = tape.gather(h, edges[:, 1])
        x_edge = tape.concat([tape.add(hi, hj), tape.mul(hi, hj), e_edge], axis=1)
        off = mlp(x_edge)  # (E, c)
        off = tape.reshape(tape.transpose(off, (1, 0)), (c, len(graph.edges), 1, 1))
    else:
        off = tape.leaf(np.zeros((c, 0, 1, 1)))
    ones = np.ones((n, 1))
    e_diag = tape.reshape(tape.matmul(ones, tape.reshape(e_self, (1, -1))), (n, -1))
    x_diag = tape.concat([tape.add(h, h), tape.mul(h, h), e_diag], axis=1)
    diag = mlp(x_diag)
    diag = tape.reshape(tape.transpose(diag, (1, 0)), (c, n, 1, 1))
    return diag, off


def assemble_pure(h: np.ndarray, e_edge: np.ndarray, params: dict, graph: Graph,
                  layer: int = 0) -> OperatorStack:
    """Plain-array wrapper around assemble_pure_vars."""
    tape = Tape(record=False)
    diag, off = assemble_pure_vars(tape, graph, np.asarray(h, dtype=np.float64),
                                   np.asarray(e_edge, dtype=np.float64), params, layer)
    pattern = graph_pattern(graph, M=1)
    return OperatorStack(pattern=pattern, diag=diag.value, off=off.value, layer=layer)


def assemble_o3_vars(tape: Tape, geo, V, radial_w, ident_w=None, layer: int = 0,
                     num_basis: int = 8):
    """Tensor-product operator for geometric graphs with L = 1 (M = 4).

    Edge blocks are R_c(r_ij) V_i V_j^T; diagonal blocks are V_i V_i^T
    (radial factor 1 at distance 0).  With ident_w set, a scalar-coupled
    identity term g_c(r_ij) V_i0 V_j0 I is added on the edges: it is the
    unique extra O(3)-equivariant bilinear coupling available at L = 1 and
    lets matrix powers transport vector components between non-adjacent
    nodes, which pure rank-1 blocks provably cannot do.
    """
    Vv = value_of(V)
    n, c, M = Vv.shape
    edges = np.asarray(geo.edges, dtype=np.int64).reshape(-1, 2)
    E = len(geo.edges)
    # V_i V_i^T per channel: (n, c, M, M) -> (c, n, M, M)
    Vi_col = tape.reshape(V, (n, c, M, 1))
    Vi_row = tape.reshape(V, (n, c, 1, M))
    diag = tape.transpose(tape.mul(Vi_col, Vi_row), (1, 0, 2, 3))
    if E == 0:
        return diag, tape.leaf(np.zeros((c, 0, M, M)))
    pos = geo.positions
    rvec = pos[edges[:, 1]] - pos[edges[:, 0]]
    r = np.sqrt((rvec**2).sum(axis=1))
    phi = radial_basis(r, geo.cutoff, num=num_basis)  # (E, K) fixed features
    R = tape.matmul(phi, tape.transpose(radial_w, (1, 0)))  # (E, c)
    Vi = tape.gather(V, edges[:, 0])  # (E, c, M)
    Vj = tape.gather(V, edges[:, 1])
    outer = tape.mul(tape.reshape(Vi, (E, c, M, 1)), tape.reshape(Vj, (E, c, 1, M)))
    off = tape.mul(tape.reshape(R, (E, c, 1, 1)), outer)
    if ident_w is not None:
        Gc = tape.matmul(phi, tape.transpose(ident_w, (1, 0)))  # (E, c)
        si = tape.getitem(Vi, (slice(None), slice(None), 0))  # (E, c)
        sj = tape.getitem(Vj, (slice(None), slice(None), 0))
        amp = tape.mul(Gc, tape.mul(si, sj))
        eye = np.eye(M).reshape(1, 1, M, M)
        off = tape.add(off, tape.mul(tape.reshape(amp, (E, c, 1, 1)), eye))
    off = tape.transpose(off, (1, 0, 2, 3))
    return diag, off


def assemble_o3(V: np.ndarray, radial_w: np.ndarray, geo, ident_w=None,
                layer: int = 0) -> OperatorStack:
    """Plain-array wrapper around assemble_o3_vars.

    V is indexed (node, channel, representation) with representation size
    (L+1)^2; only L <= 1 is supported.
    """
    V = np.asarray(V, dtype=np.float64)
    M = V.shape[2]
    if M not in (1, 4):
        raise UnsupportedError("only L <= 1 (block size 1 or 4) is supported")
    tape = Tape(record=False)
    diag, off = assemble_o3_vars(tape, geo, V, np.asarray(radial_w, dtype=np.float64),
                                 None if ident_w is None else np.asarray(ident_w),
                                 layer=layer)
    pattern = graph_pattern(geo, M=M)
    return OperatorStack(pattern=pattern, diag=diag.value, off=off.value, layer=layer)
