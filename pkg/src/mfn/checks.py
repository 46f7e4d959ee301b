"""Randomized property suites shared by the CLI `check` command and tests.

Each suite runs on seeded random instances, reports its worst residual
against a fixed tolerance, and never mutates global state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SingularMatrixError
from .graphs import build_radius_graph
from .linalg.pattern import BlockSparsePattern, path_pattern, grid_pattern
from .matfunc import (
    PoleSet,
    eval_resolvent_dense,
    eval_resolvent_selected,
    eval_spectral,
)
from .model import LayerConfig, forward, forward_vars, init_params, wigner_block
from .operators import OperatorStack, normalize
from .linalg.dense import eigh
from .tape import Tape

__all__ = [
    "CheckResult",
    "suite_backends",
    "suite_equivariance",
    "suite_gradients",
    "suite_normalize",
    "SUITES",
]


@dataclass
class CheckResult:
    name: str
    residual: float
    tolerance: float
    details: dict = field(default_factory=dict)
    failure: object = None  # serializable artifact of the worst case

    @property
    def passed(self) -> bool:
        return self.residual <= self.tolerance


def _random_stack(rng, pattern: BlockSparsePattern, channels: int) -> OperatorStack:
    n, M, E = pattern.n, pattern.M, pattern.num_edges
    diag = rng.standard_normal((channels, n, M, M))
    diag = 0.5 * (diag + diag.transpose(0, 1, 3, 2))
    off = rng.standard_normal((channels, E, M, M))
    return OperatorStack(pattern=pattern, diag=diag, off=off)


def _random_pattern(rng, n_max: int = 16, M_max: int = 4) -> BlockSparsePattern:
    n = int(rng.integers(3, n_max + 1))
    M = int(rng.integers(1, M_max + 1))
    edges = []
    for i in range(n - 1):
        edges.append((i, i + 1))  # keep it connected
    for i in range(n):
        for j in range(i + 2, n):
            if rng.random() < 0.25:
                edges.append((i, j))
    return BlockSparsePattern(n=n, M=M, edges=tuple(sorted(set(edges))))


def suite_backends(seed: int = 0, trials: int = 50, tol_dense: float = 1e-10,
                   tol_selected: float = 1e-9, corrupt_pole: bool = False) -> CheckResult:
    """Spectral vs dense-resolvent vs selected agreement on random instances.

    With corrupt_pole the first instance gets a pole placed exactly on an
    eigenvalue with zero imaginary part; the dense solve must then raise
    SingularMatrixError, which the caller sees as the suite failing.
    """
    rng = np.random.default_rng(seed)
    worst_dense = 0.0
    worst_sel = 0.0
    failure = None
    for trial in range(trials):
        pattern = _random_pattern(rng)
        stack = _random_stack(rng, pattern, channels=1)
        poles = PoleSet.init(8, rng, im=float(rng.uniform(0.5, 1.5)))
        if corrupt_pole and trial == 0:
            lam, _ = eigh(stack.dense(0))
            poles = PoleSet.raw(np.array([complex(lam[0], 0.0)]), np.array([1.0 + 0j]))
        r_de = eval_resolvent_dense(stack, poles)  # raises on a corrupted pole
        r_sp = eval_spectral(stack, poles)
        d1 = float(np.abs(r_sp.full - r_de.full).max())
        r_se = eval_resolvent_selected(stack, poles)
        d2 = float(np.abs(r_de.diag - r_se.diag).max())
        if pattern.num_edges:
            d2 = max(d2, float(np.abs(r_de.edge - r_se.edge).max()))
        if d1 > worst_dense:
            worst_dense = d1
            if d1 > tol_dense:
                failure = stack.channel(0)
        worst_sel = max(worst_sel, d2)
    residual = max(worst_dense / tol_dense, worst_sel / tol_selected)
    return CheckResult(
        name="backends",
        residual=residual,
        tolerance=1.0,
        details={"spectral_vs_dense": worst_dense, "dense_vs_selected": worst_sel,
                 "trials": trials},
        failure=failure,
    )


def _random_rotation(rng) -> np.ndarray:
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(Q) < 0:
        Q[:, 0] *= -1.0
    return Q


def _random_geometric(rng, n: int = 6):
    while True:
        pos = rng.uniform(-1.6, 1.6, size=(n, 3))
        try:
            geo = build_radius_graph(pos, rng.integers(0, 2, size=n), 2.6)
        except Exception:
            continue
        if len(geo.edges) >= n - 1:
            return geo


def suite_equivariance(seed: int = 0, n_rotations: int = 20, n_graphs: int = 10,
                       tol: float = 1e-9) -> CheckResult:
    """Matrix-function equivariance under block Wigner rotations, end-to-end
    E(3) invariance of scalar predictions, and permutation invariance."""
    rng = np.random.default_rng(seed)
    worst_fn = 0.0
    worst_e3 = 0.0
    worst_perm = 0.0
    config = LayerConfig(kind="geometric", layers=2, mfn_layers=2, width=4,
                         mat_channels=4, pole_pairs=3, backend="spectral",
                         num_species=2, coupling="tensor+scalar")
    params = init_params(config, rng)
    for _ in range(n_graphs):
        geo = _random_geometric(rng)
        n = geo.n
        pattern = BlockSparsePattern(n=n, M=4, edges=geo.edges)
        stack = _random_stack(rng, pattern, channels=2)
        poles = PoleSet.init(4, rng)
        base = eval_spectral(stack, poles).full
        pred0 = forward(geo, params, config).value
        for _ in range(n_rotations // max(1, n_graphs) + 1):
            R = _random_rotation(rng)
            D = wigner_block(R)
            rho = np.kron(np.eye(n), D)
            rot = OperatorStack(
                pattern=pattern,
                diag=np.einsum("pq,ciqr,sr->cips", D, stack.diag, D),
                off=np.einsum("pq,ciqr,sr->cips", D, stack.off, D),
            )
            fn_rot = eval_spectral(rot, poles).full
            for c in range(2):
                resid = np.abs(fn_rot[c] - rho @ base[c] @ rho.T).max()
                worst_fn = max(worst_fn, float(resid))
            # end-to-end E(3): rotate + translate positions
            pos2 = geo.positions @ R.T + rng.uniform(-3, 3, 3)
            geo2 = build_radius_graph(pos2, geo.species, geo.cutoff)
            pred2 = forward(geo2, params, config).value
            worst_e3 = max(worst_e3, float(np.abs(pred2 - pred0).max()))
        # permutation invariance
        perm = rng.permutation(n)
        inv = np.argsort(perm)
        geo_p = build_radius_graph(geo.positions[perm], tuple(np.asarray(geo.species)[perm]),
                                   geo.cutoff)
        pred_p = forward(geo_p, params, config).value
        worst_perm = max(worst_perm, float(np.abs(pred_p - pred0).max()))
    residual = max(worst_fn / tol, worst_e3 / tol, worst_perm / 1e-10)
    return CheckResult(
        name="equivariance",
        residual=residual,
        tolerance=1.0,
        details={"matrix_function": worst_fn, "e3_prediction": worst_e3,
                 "permutation": worst_perm},
    )


def suite_gradients(seed: int = 0, tol: float = 1e-6, h: float = 1e-5,
                    stride: int = 1) -> CheckResult:
    """Central finite differences against the tape gradients for every
    parameter of a 2-layer geometric model on a 4-node graph."""
    rng = np.random.default_rng(seed)
    geo = _random_geometric(rng, n=4)
    config = LayerConfig(kind="geometric", layers=2, mfn_layers=2, width=4,
                         mat_channels=4, pole_pairs=3, backend="dense_resolvent",
                         num_species=2, coupling="tensor+scalar")
    params = init_params(config, rng)

    tape = Tape()
    pvars = {k: tape.leaf(v) for k, v in params.items()}
    out, _ = forward_vars(tape, geo, pvars, config)
    loss = tape.sum(out)
    grads = tape.gradients(loss, pvars)

    def value():
        return float(forward(geo, params, config).value.sum())

    worst = 0.0
    checked = 0
    worst_coord = None
    for name in params.names():
        arr = params[name]
        g = grads[name].ravel()
        flat = arr.ravel()
        for i in range(0, flat.size, stride):
            orig = flat[i]
            flat[i] = orig + h
            lp = value()
            flat[i] = orig - h
            lm = value()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            rel = abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1.0)
            checked += 1
            if rel > worst:
                worst = rel
                worst_coord = f"{name}[{i}]"
    return CheckResult(
        name="gradients",
        residual=worst / tol,
        tolerance=1.0,
        details={"max_rel_error": worst, "coords_checked": checked,
                 "worst_coord": worst_coord, "total_params": params.num_scalars()},
    )


def suite_normalize(seed: int = 0, trials: int = 20, mean_tol: float = 1e-10,
                    var_tol: float = 2e-6) -> CheckResult:
    """Post-normalization spectra must have mean ~0 and sample variance ~1."""
    rng = np.random.default_rng(seed)
    worst_mean = 0.0
    worst_var = 0.0
    for _ in range(trials):
        pattern = _random_pattern(rng, n_max=10, M_max=2)
        stack = _random_stack(rng, pattern, channels=2)
        normed, _ = normalize(stack, mode="batch")
        nM = pattern.n * pattern.M
        for c in range(2):
            lam, _ = eigh(normed.dense(c))
            worst_mean = max(worst_mean, abs(float(lam.mean())))
            worst_var = max(worst_var, abs(float(lam.var(ddof=1)) - 1.0))
    residual = max(worst_mean / mean_tol, worst_var / var_tol)
    return CheckResult(
        name="normalize",
        residual=residual,
        tolerance=1.0,
        details={"max_abs_mean": worst_mean, "max_var_dev": worst_var},
    )


SUITES = {
    "backends": suite_backends,
    "equivariance": suite_equivariance,
    "gradients": suite_gradients,
    "normalize": suite_normalize,
}
