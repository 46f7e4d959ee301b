"""Full network forward pass: local layer, operator assembly, normalization,
matrix function, update and readout, for pure-graph and geometric variants.

Geometric node features carry a representation index of size (L+1)^2 with
L <= 1, ordered (scalar, y, z, x); rotations act by block-diag(1, D1(R)).
The readout consumes only invariant components, so graph-level scalars are
E(3) invariant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateGeometryError,
    PreconditionError,
    ShapeError,
    UnsupportedError,
)
from .graphs import GeometricGraph, Graph
from .linalg.pattern import Ordering, order
from .matfunc import DEFAULT_PAIRS, PoleSet, matfn_op
from .operators import (
    assemble_o3_vars,
    assemble_pure_vars,
    graph_pattern,
    normalize_op,
    radial_basis,
)
from .tape import Tape, Var, value_of

__all__ = [
    "LayerConfig",
    "ModelParams",
    "Prediction",
    "wigner_block",
    "sph_l1",
    "gcn_layer",
    "two_body_o3_layer",
    "init_params",
    "forward",
    "forward_vars",
    "save_checkpoint",
    "load_checkpoint",
]

NUM_RADIAL = 8


# ---------------------------------------------------------------------------
# Configuration and parameters
# ---------------------------------------------------------------------------


@dataclass
class LayerConfig:
    """Architecture knobs shared by both graph kinds.

    kind: "pure" or "geometric".  layers is the iteration count T;
    matrix functions run in the first mfn_layers of them.  width is the node
    feature width (pure) or the channel count (geometric, where it equals the
    matrix channel count).  update "dense" requires a dense backend.
    """

    kind: str
    layers: int = 2
    mfn_layers: int = 2
    width: int = 16
    mat_channels: int = 16
    pole_pairs: int = DEFAULT_PAIRS
    update: str = "diag"
    backend: str = "dense_resolvent"
    coupling: str = "tensor"
    readout_hidden: int = 16
    edge_width: int = 8
    edge_hidden: int = 16
    num_node_labels: int = 1
    num_edge_labels: int = 0
    num_species: int = 2
    out_dim: int = 1
    normalize_mode: str = "batch"
    ordering_method: str = "nested_dissection"
    pole_im_init: float = 1.0
    pole_spread: float = 2.0
    y_min: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("pure", "geometric"):
            raise PreconditionError(f"unknown model kind {self.kind!r}")
        if self.update == "dense" and self.backend == "selected":
            raise PreconditionError("dense update requires a dense backend")
        if self.update not in ("diag", "dense", "sparse"):
            raise PreconditionError(f"unknown update {self.update!r}")
        if self.mfn_layers > self.layers:
            raise PreconditionError("mfn_layers cannot exceed layers")

    @property
    def M(self) -> int:
        return 4 if self.kind == "geometric" else 1


class ModelParams:
    """Named trainable arrays in a stable insertion order."""

    def __init__(self):
        self._data: dict[str, np.ndarray] = {}

    def add(self, name: str, array) -> None:
        if name in self._data:
            raise PreconditionError(f"duplicate parameter {name}")
        self._data[name] = np.asarray(array, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._data:
            raise KeyError(name)
        self._data[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name) -> bool:
        return name in self._data

    def names(self) -> list[str]:
        return list(self._data)

    def items(self):
        return self._data.items()

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for k, v in self._data.items():
            out.add(k, v.copy())
        return out

    def num_scalars(self) -> int:
        return sum(v.size for v in self._data.values())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._data.values()]) \
            if self._data else np.zeros(0)

    def from_vector(self, vec: np.ndarray) -> None:
        off = 0
        for k, v in self._data.items():
            self._data[k] = vec[off : off + v.size].reshape(v.shape).copy()
            off += v.size


@dataclass
class Prediction:
    """Graph-level output plus the per-layer readout contributions."""

    value: np.ndarray
    per_layer: list[np.ndarray] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Rotations and spherical components
# ---------------------------------------------------------------------------


def sph_l1(unit: np.ndarray) -> np.ndarray:
    """Real l=0,1 angular features per row: (1, y, z, x) of a unit vector."""
    u = np.asarray(unit, dtype=np.float64)
    out = np.empty(u.shape[:-1] + (4,))
    out[..., 0] = 1.0
    out[..., 1] = u[..., 1]
    out[..., 2] = u[..., 2]
    out[..., 3] = u[..., 0]
    return out


def wigner_block(R: np.ndarray, L: int = 1) -> np.ndarray:
    """Block rotation matrix diag(1, D1(R)) acting on (scalar, y, z, x)."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ShapeError("R must be 3x3")
    if np.abs(R.T @ R - np.eye(3)).max() > 1e-10 or np.linalg.det(R) < 0:
        raise PreconditionError("R must be a proper rotation")
    if L > 1:
        raise UnsupportedError("only L <= 1 is supported")
    if L == 0:
        return np.ones((1, 1))
    axes = [1, 2, 0]  # (x, y, z) -> (y, z, x) ordering
    D1 = R[np.ix_(axes, axes)]
    out = np.zeros((4, 4))
    out[0, 0] = 1.0
    out[1:, 1:] = D1
    return out


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def _directed_edges(graph) -> tuple[np.ndarray, np.ndarray]:
    edges = np.asarray(graph.edges, dtype=np.int64).reshape(-1, 2)
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    return src, dst


def gcn_layer(tape: Tape, graph: Graph, h, w_self, w_nbr, bias):
    """h' = GELU(W_self h_i + sum_j W_nbr h_j / sqrt(d_i d_j) + b)."""
    n = graph.n
    out = tape.linear(h, w_self, bias)
    if len(graph.edges):
        deg = graph.degrees().astype(np.float64)
        src, dst = _directed_edges(graph)
        coeff = (1.0 / np.sqrt(deg[src] * deg[dst]))[:, None]
        msg = tape.mul(tape.gather(h, src), coeff)
        pooled = tape.segment_sum(msg, dst, n)
        out = tape.add(out, tape.matmul(pooled, w_nbr))
    return tape.gelu(out)


def two_body_o3_layer(tape: Tape, geo: GeometricGraph, scalars, rad_w, nbr_w, self_w):
    """Equivariant two-body features V[i, c, (1, y, z, x)].

    V_{i,c,lm} = sum_{j in N(i)} R_c(r_ij) Y_lm(r_hat_ij) (s_j @ nbr_w)_c,
    plus a self term (s_i @ self_w)_c on the scalar component.  Uses
    displacements only, so the output is translation invariant and rotates by
    wigner_block(R).
    """
    n = geo.n
    c = value_of(scalars).shape[1]
    self_part = tape.matmul(scalars, self_w)  # (n, c)
    if len(geo.edges) == 0:
        V0 = tape.reshape(self_part, (n, c, 1))
        return tape.concat([V0, np.zeros((n, c, 3))], axis=2)
    src, dst = _directed_edges(geo)
    rvec = geo.positions[src] - geo.positions[dst]  # direction j -> i viewed from i
    r = np.sqrt((rvec**2).sum(axis=1))
    if np.any(r < 1e-12):
        raise DegenerateGeometryError("zero-length edge")
    Y = sph_l1(rvec / r[:, None])  # (2E, 4)
    phi = radial_basis(r, geo.cutoff, num=NUM_RADIAL)  # (2E, K)
    R = tape.matmul(phi, tape.transpose(rad_w, (1, 0)))  # (2E, c)
    t_nbr = tape.gather(tape.matmul(scalars, nbr_w), src)  # (2E, c)
    amp = tape.mul(R, t_nbr)  # (2E, c)
    msg = tape.mul(tape.reshape(amp, (-1, c, 1)), Y[:, None, :])  # (2E, c, 4)
    V = tape.segment_sum(msg, dst, n)
    self_blk = tape.reshape(self_part, (n, c, 1))
    pad = np.zeros((n, c, 3))
    self_full = tape.concat([self_blk, pad], axis=2)
    return tape.add(V, self_full)


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------


def _glorot(rng, fan_in, fan_out):
    s = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, s, size=(fan_in, fan_out))


def init_params(config: LayerConfig, rng: np.random.Generator) -> ModelParams:
    p = ModelParams()
    w, c = config.width, config.mat_channels
    if config.kind == "pure":
        ew = config.edge_width
        p.add("emb_node", rng.normal(0.0, 0.5, size=(config.num_node_labels, w)))
        n_el = max(config.num_edge_labels, 1)
        p.add("emb_edge", rng.normal(0.0, 0.5, size=(n_el, ew)))
        for t in range(config.layers):
            p.add(f"l{t}_gcn_wself", _glorot(rng, w, w))
            p.add(f"l{t}_gcn_wnbr", _glorot(rng, w, w))
            p.add(f"l{t}_gcn_b", np.zeros(w))
            if t < config.mfn_layers:
                hid = config.readout_hidden
                p.add(f"l{t}_asm_w1", _glorot(rng, 2 * w + ew, hid))
                p.add(f"l{t}_asm_b1", np.zeros(hid))
                p.add(f"l{t}_asm_w2", _glorot(rng, hid, c))
                p.add(f"l{t}_asm_b2", np.zeros(c))
                p.add(f"l{t}_asm_eself", rng.normal(0.0, 0.5, size=ew))
                _add_poles(p, t, config, rng)
                p.add(f"l{t}_mix", _glorot(rng, w, c))
                p.add(f"l{t}_em_w1", _glorot(rng, c, config.edge_hidden))
                p.add(f"l{t}_em_b1", np.zeros(config.edge_hidden))
                p.add(f"l{t}_em_w2", _glorot(rng, config.edge_hidden, ew))
                p.add(f"l{t}_em_b2", np.zeros(ew))
            _add_readout(p, t, config, rng, w)
    else:
        p.add("emb_species", rng.normal(0.0, 0.5, size=(config.num_species, c)))
        for t in range(config.layers):
            p.add(f"l{t}_loc_rad", rng.normal(0.0, 0.5, size=(c, NUM_RADIAL)))
            p.add(f"l{t}_loc_nbr", _glorot(rng, c, c))
            p.add(f"l{t}_loc_self", _glorot(rng, c, c))
            if t < config.mfn_layers:
                p.add(f"l{t}_asm_rad", rng.normal(0.0, 0.5, size=(c, NUM_RADIAL)))
                if config.coupling == "tensor+scalar":
                    p.add(f"l{t}_asm_ident", rng.normal(0.0, 0.5, size=(c, NUM_RADIAL)))
                _add_poles(p, t, config, rng)
                p.add(f"l{t}_mix", _glorot(rng, c, c))
            _add_readout(p, t, config, rng, c)
    return p


def _add_poles(p: ModelParams, t: int, config: LayerConfig, rng) -> None:
    ps = PoleSet.init(config.pole_pairs, rng, spread=config.pole_spread,
                      im=config.pole_im_init, y_min=config.y_min)
    p.add(f"l{t}_pole_a", ps.a)
    p.add(f"l{t}_pole_b", ps.b)
    p.add(f"l{t}_pole_x", ps.x)
    p.add(f"l{t}_pole_yhat", ps.yhat)


def _add_readout(p: ModelParams, t: int, config: LayerConfig, rng, w: int) -> None:
    k = config.out_dim
    if t == 0:
        p.add("l0_ro_w", _glorot(rng, w, k))
        p.add("l0_ro_b", np.zeros(k))
    else:
        hid = config.readout_hidden
        p.add(f"l{t}_ro_w1", _glorot(rng, w, hid))
        p.add(f"l{t}_ro_b1", np.zeros(hid))
        p.add(f"l{t}_ro_w2", _glorot(rng, hid, k))
        p.add(f"l{t}_ro_b2", np.zeros(k))


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _readout(tape: Tape, pooled, P: dict, t: int):
    if t == 0:
        return tape.linear(pooled, P["l0_ro_w"], P["l0_ro_b"])
    hid = tape.gelu(tape.linear(pooled, P[f"l{t}_ro_w1"], P[f"l{t}_ro_b1"]))
    return tape.linear(hid, P[f"l{t}_ro_w2"], P[f"l{t}_ro_b2"])


def _poles_of(P: dict, t: int, config: LayerConfig):
    return (P[f"l{t}_pole_a"], P[f"l{t}_pole_b"],
            P[f"l{t}_pole_x"], P[f"l{t}_pole_yhat"])


def _mix_diag_column(tape: Tape, fdiag, Wmix, n: int, M: int):
    """sum_ct W[c, ct] f(H_ct)_{ii, m0} reshaped to (n, c, M)."""
    col = tape.getitem(fdiag, (slice(None), slice(None), slice(None), 0))  # (ct, n, M)
    ct = value_of(col).shape[0]
    flat = tape.reshape(col, (ct, n * M))
    mixed = tape.matmul(Wmix, flat)  # (c, n*M)
    c = value_of(Wmix).shape[0]
    return tape.transpose(tape.reshape(mixed, (c, n, M)), (1, 0, 2))


def forward_vars(tape: Tape, graph, P: dict, config: LayerConfig):
    """Tape-level forward pass; P maps parameter names to Vars or arrays."""
    if config.kind == "pure":
        return _forward_pure(tape, graph, P, config)
    return _forward_geometric(tape, graph, P, config)


def _forward_pure(tape: Tape, graph: Graph, P: dict, config: LayerConfig):
    n = graph.n
    pattern = graph_pattern(graph, M=1)
    ordering = _ordering_for(config, pattern)
    labels = np.asarray(graph.node_labels, dtype=np.int64)
    h = tape.gather(P["emb_node"], labels)
    if len(graph.edges):
        if config.num_edge_labels and graph.edge_labels is not None:
            e = tape.gather(P["emb_edge"], np.asarray(graph.edge_labels, dtype=np.int64))
        else:
            e = tape.gather(P["emb_edge"], np.zeros(len(graph.edges), dtype=np.int64))
    else:
        e = tape.leaf(np.zeros((0, config.edge_width)))
    total = None
    per_layer = []
    prev_res = None
    for t in range(config.layers):
        h = gcn_layer(tape, graph, h, P[f"l{t}_gcn_wself"], P[f"l{t}_gcn_wnbr"],
                      P[f"l{t}_gcn_b"])
        if t < config.mfn_layers:
            asm = {k: P[f"l{t}_asm_{k}"] for k in ("w1", "b1", "w2", "b2")}
            asm["e_self"] = P[f"l{t}_asm_eself"]
            diag, off = assemble_pure_vars(tape, graph, h, e, asm, layer=t)
            diag, off = normalize_op(tape, pattern, diag, off, mode=config.normalize_mode)
            diag, off, prev_res = _apply_update_blocks(tape, diag, off, prev_res, config)
            a, b, x, yhat = _poles_of(P, t, config)
            fdiag, fedge, ffull, res = matfn_op(
                tape, pattern, diag, off, a, b, x, yhat, config.y_min,
                config.backend, ordering,
                prev_full=prev_res if config.update == "dense" and isinstance(prev_res, Var) else None,
            )
            mixed = _mix_diag_column(tape, fdiag, P[f"l{t}_mix"], n, 1)
            h = tape.add(h, tape.reshape(mixed, (n, config.width)))
            if len(graph.edges):
                eb = tape.reshape(fedge, (config.mat_channels, len(graph.edges)))
                eb = tape.transpose(eb, (1, 0))
                hid = tape.gelu(tape.linear(eb, P[f"l{t}_em_w1"], P[f"l{t}_em_b1"]))
                e = tape.add(e, tape.linear(hid, P[f"l{t}_em_w2"], P[f"l{t}_em_b2"]))
            prev_res = _next_prev(tape, config, res, fdiag, fedge, ffull)
        pooled = tape.reshape(tape.mean(h, axis=0), (1, config.width))
        r_t = _readout(tape, pooled, P, t)
        per_layer.append(r_t)
        total = r_t if total is None else tape.add(total, r_t)
    return tape.reshape(total, (config.out_dim,)), per_layer


def _forward_geometric(tape: Tape, geo: GeometricGraph, P: dict, config: LayerConfig):
    n = geo.n
    c = config.mat_channels
    M = config.M
    pattern = graph_pattern(geo, M=M)
    ordering = _ordering_for(config, pattern)
    species = np.asarray(geo.species, dtype=np.int64)
    if species.max() >= config.num_species:
        raise ShapeError("species id outside embedding table")
    s = tape.gather(P["emb_species"], species)  # (n, c) invariant features
    total = None
    per_layer = []
    prev_res = None
    for t in range(config.layers):
        V = two_body_o3_layer(tape, geo, s, P[f"l{t}_loc_rad"],
                              P[f"l{t}_loc_nbr"], P[f"l{t}_loc_self"])
        h = V
        if t < config.mfn_layers:
            ident = P.get(f"l{t}_asm_ident") if config.coupling == "tensor+scalar" else None
            diag, off = assemble_o3_vars(tape, geo, V, P[f"l{t}_asm_rad"], ident, layer=t)
            diag, off = normalize_op(tape, pattern, diag, off, mode=config.normalize_mode)
            diag, off, prev_res = _apply_update_blocks(tape, diag, off, prev_res, config)
            a, b, x, yhat = _poles_of(P, t, config)
            fdiag, fedge, ffull, res = matfn_op(
                tape, pattern, diag, off, a, b, x, yhat, config.y_min,
                config.backend, ordering,
                prev_full=prev_res if config.update == "dense" and isinstance(prev_res, Var) else None,
            )
            h = tape.add(V, _mix_diag_column(tape, fdiag, P[f"l{t}_mix"], n, M))
            prev_res = _next_prev(tape, config, res, fdiag, fedge, ffull)
        s = tape.getitem(h, (slice(None), slice(None), 0))  # invariant components
        pooled = tape.reshape(tape.mean(s, axis=0), (1, c))
        r_t = _readout(tape, pooled, P, t)
        per_layer.append(r_t)
        total = r_t if total is None else tape.add(total, r_t)
    return tape.reshape(total, (config.out_dim,)), per_layer


def _apply_update_blocks(tape: Tape, diag, off, prev_res, config: LayerConfig):
    """Sparse update: fold the previous layer's in-pattern blocks into H."""
    if config.update == "sparse" and prev_res is not None:
        fdiag_prev, fedge_prev = prev_res
        diag = tape.add(diag, fdiag_prev)
        off = tape.add(off, fedge_prev)
        return diag, off, None
    if config.update == "dense":
        return diag, off, prev_res
    return diag, off, None


def _next_prev(tape: Tape, config: LayerConfig, res, fdiag, fedge, ffull):
    """What the next layer's update consumes from this layer's function."""
    if config.update == "dense":
        return ffull
    if config.update == "sparse":
        return (fdiag, fedge)
    return None


def _ordering_for(config: LayerConfig, pattern) -> Ordering | None:
    if config.backend != "selected":
        return None
    return order(pattern, config.ordering_method)


def forward(graph, params: ModelParams, config: LayerConfig) -> Prediction:
    """Inference-mode forward pass on plain arrays."""
    tape = Tape(record=False)
    pred, per_layer = forward_vars(tape, graph, dict(params.items()), config)
    return Prediction(value=np.asarray(value_of(pred)),
                      per_layer=[np.asarray(value_of(r)).ravel() for r in per_layer])


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + little-endian f64 payload
# ---------------------------------------------------------------------------


def save_checkpoint(path_base, params: ModelParams, config: LayerConfig,
                    extra: dict | None = None) -> None:
    base = Path(path_base)
    manifest = {
        "format": "mfn-checkpoint-v1",
        "config": asdict(config),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        "extra": extra or {},
    }
    base.with_suffix(".json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes()
                       for _, v in params.items())
    base.with_suffix(".bin").write_bytes(payload)


def load_checkpoint(path_base) -> tuple[ModelParams, LayerConfig, dict]:
    base = Path(path_base)
    manifest = json.loads(base.with_suffix(".json").read_text())
    if manifest.get("format") != "mfn-checkpoint-v1":
        raise PreconditionError("unrecognized checkpoint format")
    config = LayerConfig(**manifest["config"])
    raw = base.with_suffix(".bin").read_bytes()
    params = ModelParams()
    off = 0
    for spec in manifest["params"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        params.add(spec["name"], arr.copy())
        off += count * 8
    return params, config, manifest.get("extra", {})
