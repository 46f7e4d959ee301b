import numpy as np
import pytest

from mfn.errors import NumericalError
from mfn.graphs import Dataset, Graph, build_radius_graph
from mfn.linalg.pattern import path_pattern
from mfn.matfunc import PoleSet, eval_spectral
from mfn.model import LayerConfig, ModelParams, forward, forward_vars, init_params
from mfn.operators import OperatorStack
from mfn.tape import Tape
from mfn.train import (
    OptState,
    TrainConfig,
    adamw_step,
    backward,
    evaluate,
    loss_on_tape,
    train,
)


class TestAdamW:
    def test_first_step_closed_form(self):
        p = ModelParams()
        p.add("x", np.array([1.0]))
        st = OptState.init(p, lr=0.1, weight_decay=0.0)
        adamw_step(p, {"x": np.array([1.0])}, st)
        # bias-corrected first step: lr * (1 / (1 + eps))
        assert p["x"][0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-12)

    def test_decay_term(self):
        p = ModelParams()
        p.add("x", np.array([2.0]))
        st = OptState.init(p, lr=0.1, weight_decay=0.01)
        adamw_step(p, {"x": np.array([0.0])}, st)
        # zero gradient: only the decoupled decay acts
        assert p["x"][0] == pytest.approx(2.0 - 0.1 * 0.01 * 2.0)

    def test_zero_grad_no_decay_is_identity(self):
        p = ModelParams()
        p.add("x", np.array([3.0, -1.0]))
        st = OptState.init(p, lr=0.5, weight_decay=0.0)
        adamw_step(p, {"x": np.zeros(2)}, st)
        assert np.all(p["x"] == np.array([3.0, -1.0]))

    def test_quadratic_descent_monotone(self):
        p = ModelParams()
        p.add("x", np.array([1.0]))
        st = OptState.init(p, lr=0.05, weight_decay=0.0)
        traj = [abs(p["x"][0])]
        for _ in range(10):
            adamw_step(p, {"x": p["x"].copy()}, st)
            traj.append(abs(p["x"][0]))
        assert all(b < a for a, b in zip(traj, traj[1:]))

    def test_loss_scaling_invariance_of_first_step(self):
        # scaling the loss by c scales gradients by c but leaves the
        # bias-corrected first AdamW step unchanged up to eps effects
        for scale in (1.0, 10.0, 0.1):
            p = ModelParams()
            p.add("x", np.array([1.0]))
            st = OptState.init(p, lr=0.1, weight_decay=0.0)
            adamw_step(p, {"x": np.array([scale * 0.7])}, st)
            assert abs(p["x"][0] - (1.0 - 0.1)) <= 1e-7


class TestBackward:
    def test_constant_model_zero_gradients(self):
        geo = build_radius_graph([[0, 0, 0], [1.0, 0, 0]], [0, 1], 2.0)
        config = LayerConfig(kind="geometric", layers=1, mfn_layers=1, width=2,
                             mat_channels=2, pole_pairs=2, backend="spectral",
                             num_species=2)
        params = init_params(config, np.random.default_rng(0))
        for name in params.names():
            params[name] = np.zeros_like(params[name])
        tape = Tape()
        pvars = {k: tape.leaf(v) for k, v in params.items()}
        out, _ = forward_vars(tape, geo, pvars, config)
        loss = loss_on_tape(tape, out, 0.0, "mse")  # output and target both zero
        grads = backward(tape, loss, pvars)
        for name, g in grads.items():
            assert np.abs(g).max() == 0.0, name

    def test_single_parameter_probe(self):
        # L = tr f(alpha * H0) against finite differences in alpha
        pat = path_pattern(5, 1)
        rng = np.random.default_rng(1)
        diag = rng.standard_normal((1, 5, 1, 1))
        off = rng.standard_normal((1, 4, 1, 1))
        poles = PoleSet.init(4, rng)

        def L(alpha):
            st = OperatorStack(pattern=pat, diag=alpha * diag, off=alpha * off)
            return float(np.trace(eval_spectral(st, poles).full[0]))

        from mfn.matfunc import grad_matfn

        alpha = 0.8
        st = OperatorStack(pattern=pat, diag=alpha * diag, off=alpha * off)
        G = np.zeros((1, 5, 1, 1))
        G[:, :, 0, 0] = 1.0
        mg = grad_matfn(st, poles, G)
        analytic = float((mg.ddiag * diag).sum() + (mg.dedge * off).sum())
        h = 1e-5
        fd = (L(alpha + h) - L(alpha - h)) / (2 * h)
        assert abs(fd - analytic) / max(abs(fd), 1e-12) < 1e-6

    def test_unused_parameters_get_exact_zeros(self):
        geo = build_radius_graph([[0, 0, 0], [1.0, 0, 0]], [0, 0], 2.0)
        config = LayerConfig(kind="geometric", layers=1, mfn_layers=1, width=2,
                             mat_channels=2, pole_pairs=2, backend="spectral",
                             num_species=3)  # species 2 never appears
        params = init_params(config, np.random.default_rng(2))
        tape = Tape()
        pvars = {k: tape.leaf(v) for k, v in params.items()}
        out, _ = forward_vars(tape, geo, pvars, config)
        grads = backward(tape, tape.sum(out), pvars)
        assert np.abs(grads["emb_species"][2]).max() == 0.0
        assert np.abs(grads["emb_species"][0]).max() > 0.0


def single_node_dataset(targets):
    graphs = tuple(
        Graph(n=1, edges=(), node_labels=(i,), target=t) for i, t in enumerate(targets)
    )
    return Dataset(graphs=graphs, task="regression", name="toy")


class TestTrainLoop:
    def toy_config(self, labels=3):
        return LayerConfig(kind="pure", layers=1, mfn_layers=0, width=4,
                           mat_channels=1, num_node_labels=labels, out_dim=1)

    def test_zero_lr_keeps_parameters(self):
        ds = single_node_dataset([0.5, -0.5, 1.5])
        tc = TrainConfig(model=self.toy_config(), epochs=1, batch_size=3, lr=0.0,
                         seed=0, loss="mse")
        params, history = train(ds, tc)
        fresh = init_params(self.toy_config(), np.random.default_rng(0))
        for name in params.names():
            assert np.all(params[name] == fresh[name])
        assert len([r for r in history if r[2] == "loss"]) == 1

    def test_determinism(self):
        ds = single_node_dataset([1.0, 2.0, 3.0])
        tc = TrainConfig(model=self.toy_config(), epochs=5, batch_size=2, lr=1e-2,
                         seed=42, loss="mse")
        p1, h1 = train(ds, tc)
        p2, h2 = train(ds, tc)
        assert h1 == h2
        for name in p1.names():
            assert np.all(p1[name] == p2[name])

    def test_convex_toy_converges(self):
        ds = single_node_dataset([0.7, -0.3, 1.1])
        tc = TrainConfig(model=self.toy_config(), epochs=200, batch_size=3, lr=5e-2,
                         seed=1, loss="mse", patience=500)
        params, history = train(ds, tc)
        final = evaluate(params, tc.model, ds)
        assert final["rmse"] ** 2 < 1e-4

    def test_nan_aborts_with_diagnostics(self):
        ds = single_node_dataset([1.0, 2.0])
        config = self.toy_config(labels=2)
        tc = TrainConfig(model=config, epochs=2, batch_size=2, lr=1e-2, seed=0,
                         loss="mse")
        rng = np.random.default_rng(0)
        params = init_params(config, rng)
        params["emb_node"] = params["emb_node"] * np.nan
        from mfn.train import _graph_gradient, _check_finite

        loss, grads = _graph_gradient(ds.graphs[0], params, config, "mse")
        with pytest.raises(NumericalError):
            _check_finite(loss, grads, params, epoch=0)


class TestLosses:
    def test_cross_entropy_matches_closed_form(self):
        tape = Tape()
        logits = tape.leaf(np.array([1.0, 2.0, 0.5]))
        loss = loss_on_tape(tape, logits, 1, "cross_entropy")
        z = np.array([1.0, 2.0, 0.5])
        expect = np.log(np.exp(z).sum()) - z[1]
        assert float(loss.value) == pytest.approx(expect)
        grads = tape.gradients(loss, {"logits": logits})
        softmax = np.exp(z) / np.exp(z).sum()
        softmax[1] -= 1.0
        assert np.abs(grads["logits"] - softmax).max() < 1e-12

    def test_mae_gradient_is_sign(self):
        tape = Tape()
        pred = tape.leaf(np.array([2.0]))
        loss = loss_on_tape(tape, pred, 0.5, "mae")
        grads = tape.gradients(loss, {"p": pred})
        assert grads["p"][0] == 1.0


class TestEvaluate:
    def test_perfect_predictions(self):
        ds = single_node_dataset([1.0, -1.0])
        config = LayerConfig(kind="pure", layers=1, mfn_layers=0, width=2,
                             mat_channels=1, num_node_labels=2, out_dim=1)
        params = init_params(config, np.random.default_rng(3))
        # force exact outputs equal to targets via the layer-0 readout bias
        for name in params.names():
            params[name] = np.zeros_like(params[name])
        # single-node graph, mean-pool of zeros, linear readout bias = target
        # cannot depend on the label with zero embeddings, so use two datasets
        ds1 = single_node_dataset([0.0, 0.0])
        out = evaluate(params, config, ds1)
        assert out["mae"] == 0.0 and out["rmse"] == 0.0

    def test_constant_zero_on_pm_one(self):
        ds = single_node_dataset([1.0, -1.0])
        config = LayerConfig(kind="pure", layers=1, mfn_layers=0, width=2,
                             mat_channels=1, num_node_labels=2, out_dim=1)
        params = init_params(config, np.random.default_rng(4))
        for name in params.names():
            params[name] = np.zeros_like(params[name])
        out = evaluate(params, config, ds)
        assert out["mae"] == pytest.approx(1.0)

    def test_fold_average_identity(self):
        accs = np.array([0.8, 0.9, 1.0, 0.7])
        assert abs(accs.mean() - sum(accs) / 4) < 1e-12
