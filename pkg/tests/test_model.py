"""Latent model: encoder, graph ODE field, heads, losses, reversal wiring.

Gradient correctness is checked against central finite differences computed
with plain numpy on the spot; one-step Euler values are checked against a
hand loop using the same update arithmetic.
"""

import numpy as np
import pytest

from godeflow import autodiff as ad
from godeflow.autodiff import Tensor
from godeflow.checkpoint import save_checkpoint
from godeflow.errors import DimensionError, DomainError, ParameterError, SolveError
from godeflow.graphs import build_graph, interference_summary
from godeflow.model import (
    GROUP_NAMES,
    ModelConfig,
    ModelParams,
    Normalization,
    decode_outcome,
    encode_initial,
    euler_solve,
    loss_interference,
    loss_outcome,
    loss_total,
    loss_treatment,
    ode_rhs,
    softmax_cross_entropy,
    solve_trajectory,
)

CONFIG = ModelConfig(latent_dim=8, encoder_hidden=6, head_hidden=5, substeps=2)


def tiny_scene(seed=0):
    """Six nodes (one isolated), three intervals, two static traits."""
    graph = build_graph(6, [(0, 1), (0, 2), (1, 2), (2, 3), (3, 4)])
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(1.0, 9.0, size=6)
    statics = rng.normal(size=(6, 2))
    treatments = (rng.random((4, 6)) < 0.5).astype(np.int64)
    interference = np.stack(
        [interference_summary(graph, treatments[t]) for t in range(4)]
    )
    targets = rng.uniform(0.5, 9.5, size=(4, 6))
    params = ModelParams.initialize(2, CONFIG, seed=seed)
    return graph, x0, statics, treatments, interference, targets, params


def rollout(graph, x0, statics, treatments, params):
    z0 = encode_initial(x0, statics, params)
    return solve_trajectory(z0, treatments.astype(np.float64), graph, params)


def clear_grads(params):
    for tensor in params.named_parameters().values():
        tensor.grad = None


def check_against_central_difference(build_loss, params, names, seed=0,
                                     samples=5, h=1e-5, tol=1e-4):
    """Compare tape gradients with (f(θ+h) − f(θ−h)) / 2h coordinate-wise."""
    clear_grads(params)
    build_loss().backward()
    rng = np.random.default_rng(seed)
    tensors = params.named_parameters()
    for name in names:
        tensor = tensors[name]
        assert tensor.grad is not None, f"no gradient reached {name}"
        count = min(samples, tensor.values.size)
        for idx in rng.choice(tensor.values.size, size=count, replace=False):
            original = tensor.values.flat[idx]
            tensor.values.flat[idx] = original + h
            up = float(build_loss().values)
            tensor.values.flat[idx] = original - h
            down = float(build_loss().values)
            tensor.values.flat[idx] = original
            numeric = (up - down) / (2.0 * h)
            exact = tensor.grad.flat[idx]
            denom = max(abs(numeric), abs(exact), 1e-8)
            assert abs(numeric - exact) / denom < tol, (name, idx, numeric, exact)


def group_names(group):
    params = ModelParams.initialize(2, CONFIG, seed=0)
    return [f"{group}.{n}" for n in params.groups[group]]


def test_initialize_is_deterministic_in_seed():
    a = ModelParams.initialize(2, CONFIG, seed=3)
    b = ModelParams.initialize(2, CONFIG, seed=3)
    c = ModelParams.initialize(2, CONFIG, seed=4)
    for name, tensor in a.named_parameters().items():
        assert np.array_equal(tensor.values, b.named_parameters()[name].values)
    assert not np.array_equal(
        a.groups["encoder"]["W_in"].values, c.groups["encoder"]["W_in"].values
    )


def test_encoder_with_zero_weights_gives_zero_latent():
    params = ModelParams.initialize(2, CONFIG, seed=0)
    for tensor in params.groups["encoder"].values():
        tensor.values[...] = 0.0
    z = encode_initial(np.array([1.0, 2.0]), np.zeros((2, 2)), params)
    assert np.all(z.values == 0.0)
    assert z.shape == (2, CONFIG.latent_dim)


def test_encoder_standardizes_through_normalization():
    norm = Normalization(x_mean=3.0, x_std=2.0, v_mean=np.array([1.0, -1.0]),
                         v_std=np.array([2.0, 4.0]))
    scaled = ModelParams.initialize(2, CONFIG, seed=0, normalization=norm)
    plain = ModelParams.initialize(2, CONFIG, seed=0)
    x = np.array([5.0, 1.0])
    v = np.array([[3.0, 3.0], [-1.0, -5.0]])
    x_std = (x - 3.0) / 2.0
    v_std = (v - np.array([1.0, -1.0])) / np.array([2.0, 4.0])
    np.testing.assert_array_equal(
        encode_initial(x, v, scaled).values, encode_initial(x_std, v_std, plain).values
    )


def test_encoder_dimension_errors():
    params = ModelParams.initialize(2, CONFIG, seed=0)
    with pytest.raises(DimensionError):
        encode_initial(np.zeros((2, 1)), np.zeros((2, 2)), params)
    with pytest.raises(DimensionError):
        encode_initial(np.zeros(2), np.zeros((3, 2)), params)
    with pytest.raises(DimensionError):
        encode_initial(np.zeros(2), np.zeros((2, 5)), params)


def test_decoder_maps_back_to_raw_scale():
    norm = Normalization(x_mean=3.0, x_std=2.0, v_mean=np.zeros(2), v_std=np.ones(2))
    params = ModelParams.initialize(2, CONFIG, seed=0, normalization=norm)
    params.groups["outcome"]["W"].values[...] = 0.0
    params.groups["outcome"]["b"].values[...] = 1.0
    out = decode_outcome(Tensor(np.zeros((3, CONFIG.latent_dim))), params)
    np.testing.assert_array_equal(out.values, np.full((3, 1), 5.0))


def test_ode_rhs_dimension_errors(small_graph):
    params = ModelParams.initialize(2, CONFIG, seed=0)
    z = Tensor(np.zeros((6, CONFIG.latent_dim)))
    with pytest.raises(DimensionError):
        ode_rhs(z, np.zeros(5), small_graph, params)
    with pytest.raises(DimensionError):
        ode_rhs(Tensor(np.zeros((4, CONFIG.latent_dim))), np.zeros(4), small_graph, params)


def test_euler_matches_hand_loop_on_linear_decay():
    def rhs(z, t):
        return ad.scale(z, -1.0)

    for substeps in (10, 20):
        states = euler_solve(rhs, Tensor(np.array([[1.0]])), 1, substeps)
        z = 1.0
        h = 1.0 / substeps
        for _ in range(substeps):
            z = z + h * (-z)
        assert states[-1].values[0, 0] == z


def test_euler_halving_step_halves_global_error():
    """For dz/dt = −z the error against e^{−1} shrinks by ~2 when the step
    halves (first-order method)."""
    def rhs(z, t):
        return ad.scale(z, -1.0)

    exact = float(np.exp(-1.0))
    coarse = euler_solve(rhs, Tensor(np.array([[1.0]])), 1, 10)[-1].values[0, 0]
    fine = euler_solve(rhs, Tensor(np.array([[1.0]])), 1, 20)[-1].values[0, 0]
    ratio = abs(coarse - exact) / abs(fine - exact)
    assert ratio == pytest.approx(2.0440690603904756, rel=1e-9)
    assert 1.8 <= ratio <= 2.2


def test_euler_argument_validation():
    def rhs(z, t):
        return ad.scale(z, -1.0)

    with pytest.raises(ParameterError):
        euler_solve(rhs, Tensor(np.array([[1.0]])), -1, 4)
    with pytest.raises(ParameterError):
        euler_solve(rhs, Tensor(np.array([[1.0]])), 1, 0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_euler_reports_divergence():
    def rhs(z, t):
        return ad.scale(z, 1e308)

    with pytest.raises(SolveError, match="interval 0"):
        euler_solve(rhs, Tensor(np.array([[1.0]])), 1, 2)


def test_solve_trajectory_row_contract(small_graph):
    graph, x0, statics, treatments, _, _, params = tiny_scene()
    z0 = encode_initial(x0, statics, params)
    traj = solve_trajectory(z0, treatments.astype(np.float64), graph, params)
    assert traj.n_steps == 3
    assert len(traj.states) == 4
    stacked = traj.stacked()
    np.testing.assert_array_equal(
        stacked.values, np.concatenate([s.values for s in traj.states], axis=0)
    )
    with pytest.raises(DimensionError):
        solve_trajectory(z0, treatments.astype(np.float64), graph, params, n_intervals=4)
    with pytest.raises(DimensionError):
        solve_trajectory(z0, treatments[:, :5].astype(np.float64), graph, params)


def test_cross_entropy_of_uniform_logits_is_log_two():
    logits = Tensor(np.zeros((7, 2)))
    labels = np.array([0, 1, 0, 1, 1, 0, 1])
    loss = softmax_cross_entropy(logits, labels)
    assert float(loss.values) == pytest.approx(0.6931471805599453, rel=1e-15)


def test_outcome_loss_of_constant_predictor():
    predicted = Tensor(np.full((2, 1), 2.0))
    assert float(loss_outcome(predicted, np.array([1.0, 3.0])).values) == 1.0
    with pytest.raises(DimensionError):
        loss_outcome(predicted, np.array([1.0, 2.0, 3.0]))


def test_loss_total_weighted_sum():
    total = loss_total(Tensor(np.float64(1.0)), Tensor(np.float64(2.0)),
                       Tensor(np.float64(3.0)), 0.5, 0.5)
    assert float(total.values) == 3.5
    only = loss_total(Tensor(np.float64(1.5)), None, None, 0.0, 0.0)
    assert float(only.values) == 1.5
    with pytest.raises(ParameterError):
        loss_total(Tensor(np.float64(1.0)), None, None, 0.5, 0.0)
    with pytest.raises(ParameterError):
        loss_total(Tensor(np.float64(1.0)), None, None, -0.1, 0.0)


def test_loss_input_validation():
    graph, x0, statics, treatments, interference, _, params = tiny_scene()
    traj = rollout(graph, x0, statics, treatments, params)
    with pytest.raises(DomainError):
        loss_treatment(traj, treatments + 0.5, params)
    with pytest.raises(DimensionError):
        loss_treatment(traj, treatments[:3], params)
    with pytest.raises(DomainError):
        loss_interference(traj, treatments, interference + 2.0, params)
    with pytest.raises(DimensionError):
        loss_interference(traj, treatments, interference[:3], params)


def test_outcome_loss_gradients_match_finite_differences():
    graph, x0, statics, treatments, _, targets, params = tiny_scene(seed=1)

    def build():
        traj = rollout(graph, x0, statics, treatments, params)
        return loss_outcome(decode_outcome(traj.stacked(), params), targets)

    names = group_names("encoder") + group_names("ode") + group_names("outcome")
    check_against_central_difference(build, params, names)


def test_treatment_loss_gradients_match_finite_differences():
    """Differentiation of the loss itself, with the reversal held at identity;
    the sign flip the reversal applies on top is pinned separately below."""
    graph, x0, statics, treatments, _, _, params = tiny_scene(seed=2)

    def build():
        traj = rollout(graph, x0, statics, treatments, params)
        return loss_treatment(traj, treatments, params, reversal=False)

    names = group_names("encoder") + group_names("ode") + group_names("treatment")
    check_against_central_difference(build, params, names)
    assert params.groups["outcome"]["W"].grad is None


def test_interference_loss_gradients_match_finite_differences():
    graph, x0, statics, treatments, interference, _, params = tiny_scene(seed=3)

    def build():
        traj = rollout(graph, x0, statics, treatments, params)
        return loss_interference(traj, treatments, interference, params,
                                 reversal=False)

    names = group_names("encoder") + group_names("ode") + group_names("interference")
    check_against_central_difference(build, params, names)


def test_combined_loss_gradients_match_finite_differences():
    graph, x0, statics, treatments, interference, targets, params = tiny_scene(seed=4)

    def build():
        traj = rollout(graph, x0, statics, treatments, params)
        return loss_total(
            loss_outcome(decode_outcome(traj.stacked(), params), targets),
            loss_treatment(traj, treatments, params, reversal=False),
            loss_interference(traj, treatments, interference, params,
                              reversal=False),
            0.5,
            0.5,
        )

    names = [f"{g}.{n}" for g in GROUP_NAMES
             for n in ModelParams.initialize(2, CONFIG, seed=0).groups[g]]
    check_against_central_difference(build, params, names)


def reversal_gradient_pair(loss_builder, params):
    clear_grads(params)
    with_reversal = loss_builder(True)
    with_reversal.backward()
    grads_on = {n: t.grad.copy() for n, t in params.named_parameters().items()
                if t.grad is not None}
    clear_grads(params)
    without = loss_builder(False)
    without.backward()
    grads_off = {n: t.grad.copy() for n, t in params.named_parameters().items()
                 if t.grad is not None}
    assert with_reversal.values == without.values  # identity on the forward pass
    return grads_on, grads_off


def test_reversal_flips_upstream_treatment_gradients_exactly():
    graph, x0, statics, treatments, _, _, params = tiny_scene(seed=5)

    def build(reversal):
        traj = rollout(graph, x0, statics, treatments, params)
        return loss_treatment(traj, treatments, params, reversal=reversal)

    grads_on, grads_off = reversal_gradient_pair(build, params)
    for name in group_names("encoder") + group_names("ode"):
        np.testing.assert_array_equal(grads_on[name], -grads_off[name])
    for name in group_names("treatment"):
        np.testing.assert_array_equal(grads_on[name], grads_off[name])


def test_reversal_flips_upstream_interference_gradients_exactly():
    graph, x0, statics, treatments, interference, _, params = tiny_scene(seed=6)

    def build(reversal):
        traj = rollout(graph, x0, statics, treatments, params)
        return loss_interference(traj, treatments, interference, params,
                                 reversal=reversal)

    grads_on, grads_off = reversal_gradient_pair(build, params)
    for name in group_names("encoder") + group_names("ode"):
        np.testing.assert_array_equal(grads_on[name], -grads_off[name])
    for name in group_names("interference"):
        np.testing.assert_array_equal(grads_on[name], grads_off[name])


def test_predictions_are_permutation_equivariant():
    graph, x0, statics, treatments, _, _, params = tiny_scene(seed=7)
    sigma = np.array([2, 0, 3, 5, 1, 4])
    edges = [(sigma[u], sigma[v]) for u, v in [(0, 1), (0, 2), (1, 2), (2, 3), (3, 4)]]
    relabeled = build_graph(6, edges)
    x0_p = np.empty_like(x0)
    x0_p[sigma] = x0
    statics_p = np.empty_like(statics)
    statics_p[sigma] = statics
    treat_p = np.empty_like(treatments)
    treat_p[:, sigma] = treatments

    def predictions(g, x, v, a):
        traj = rollout(g, x, v, a, params)
        return decode_outcome(traj.stacked(), params).values.reshape(4, 6)

    base = predictions(graph, x0, statics, treatments)
    moved = predictions(relabeled, x0_p, statics_p, treat_p)
    np.testing.assert_allclose(moved[:, sigma], base, rtol=0, atol=1e-12)


def test_predictions_are_local_to_graph_components():
    graph = build_graph(5, [(0, 1), (1, 2), (3, 4)])
    rng = np.random.default_rng(9)
    x0 = rng.uniform(1.0, 9.0, size=5)
    statics = rng.normal(size=(5, 2))
    treatments = (rng.random((4, 5)) < 0.5).astype(np.int64)
    params = ModelParams.initialize(2, CONFIG, seed=9)
    changed = treatments.copy()
    changed[:, 3:] = 1 - changed[:, 3:]

    def predictions(a):
        traj = rollout(graph, x0, statics, a, params)
        return decode_outcome(traj.stacked(), params).values.reshape(4, 5)

    base = predictions(treatments)
    moved = predictions(changed)
    np.testing.assert_array_equal(base[:, :3], moved[:, :3])
    assert not np.array_equal(base[:, 3:], moved[:, 3:])


def test_normalization_from_dataset_guards_zero_variance():
    v = np.column_stack([np.ones(4), np.arange(4.0)])

    class Stub:
        covariates = np.arange(8.0).reshape(2, 4)
        static_covariates = v

    norm = Normalization.from_dataset(Stub())
    assert norm.v_std[0] == 1.0
    assert norm.v_std[1] > 0
    back = Normalization.from_dict(norm.to_dict())
    assert back.x_mean == norm.x_mean and back.x_std == norm.x_std
    np.testing.assert_array_equal(back.v_mean, norm.v_mean)


def test_model_params_save_load_round_trip(tmp_path):
    norm = Normalization(x_mean=1.5, x_std=0.5, v_mean=np.array([0.1, -0.2]),
                         v_std=np.array([1.0, 2.0]))
    params = ModelParams.initialize(2, CONFIG, seed=12, normalization=norm)
    params.save(tmp_path / "model", extra_metadata={"note": "round-trip"})
    back, metadata = ModelParams.load(tmp_path / "model")
    for name, tensor in params.named_parameters().items():
        assert np.array_equal(tensor.values, back.named_parameters()[name].values)
    assert back.config == CONFIG
    assert back.normalization.x_mean == 1.5
    assert metadata["note"] == "round-trip"


def test_model_params_load_rejects_missing_parameter(tmp_path):
    params = ModelParams.initialize(2, CONFIG, seed=0)
    arrays = {n: t.values for n, t in params.named_parameters().items()}
    arrays.pop("outcome.W")
    metadata = {
        "kind": "model",
        "model_config": {"latent_dim": 8, "encoder_hidden": 6,
                         "head_hidden": 5, "substeps": 2},
        "static_dim": 2,
        "normalization": Normalization.identity(2).to_dict(),
    }
    save_checkpoint(tmp_path / "model", arrays, metadata)
    with pytest.raises(DimensionError, match="outcome.W"):
        ModelParams.load(tmp_path / "model")


def test_model_config_validation():
    with pytest.raises(ParameterError):
        ModelConfig(latent_dim=0)
    with pytest.raises(ParameterError):
        ModelConfig(substeps=0)
