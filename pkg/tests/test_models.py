import numpy as np
import pytest

from netsid.errors import ParameterError
from netsid.models import (
    ContinuousModel,
    benchmark_coupling,
    benchmark_model,
    build_model,
    coupling_catalog,
    discretize_continuous,
    fitzhugh_nagumo_model,
    gene_regulation_coupling,
    gene_regulation_model,
    linear_coupling,
    sine_coupling,
    sine_squared_coupling,
)
from netsid.simulate import coupling_term, observe_agent, step_agent
from netsid.topology import DirectedNetwork


def test_benchmark_step_at_origin_is_forced_term():
    model = benchmark_model()
    out = step_agent(model, model.theta_true, x_v=[0.0], u_v=model.input_signal(0),
                     coupling=[0.0], noise=[0.0])
    assert out == pytest.approx([8.0])


def test_zero_map_returns_coupling_only():
    model = benchmark_model()
    theta = np.array([0.0, 0.0, 0.0, 0.0, 1.0, 1.0])
    out = step_agent(model, theta, x_v=[3.7], u_v=[1.0], coupling=[0.25], noise=[0.0])
    assert out == pytest.approx([0.25])


def test_benchmark_step_hand_value():
    model = benchmark_model()
    expected = 0.5 * 1.0 + 25.0 * (1.0 / 2.0) + 8.0 * np.cos(1.2)
    out = step_agent(model, model.theta_true, x_v=[1.0], u_v=model.input_signal(1),
                     coupling=[0.0], noise=[0.0])
    assert out == pytest.approx([expected], rel=1e-12)


def test_benchmark_observation_values():
    model = benchmark_model()
    assert observe_agent(model, model.theta_true, [2.0], None, [0.0]) == pytest.approx([0.2])
    assert observe_agent(model, model.theta_true, [0.0], None, [0.0]) == pytest.approx([0.0])


def test_fhn_observation_is_component_sum():
    model = fitzhugh_nagumo_model()
    out = observe_agent(model, model.theta_true, [1.0, 2.0], None, [0.0])
    assert out == pytest.approx([3.0])


def test_coupling_zero_at_equal_states():
    net = DirectedNetwork(3, frozenset({(1, 2), (2, 3), (3, 1)}))
    states = np.ones((3, 1)) * 2.5
    for name, g in coupling_catalog().items():
        inc = coupling_term(g, net, states, 2)
        assert np.allclose(inc, 0.0), name


def test_sine_coupling_quarter_period():
    net = DirectedNetwork(2, frozenset({(1, 2), (2, 1)}))
    g = sine_coupling(1.0)
    states = np.array([[np.pi / 2], [0.0]])
    inc = coupling_term(g, net, states, 2)
    assert inc == pytest.approx([1.0])  # one predecessor, difference pi/2


def test_sine_squared_strong_coupling_hand_value():
    # two predecessors at difference pi/2 each, J_v = 2: 10/2 * 1 + 10/2 * 1
    net = DirectedNetwork(3, frozenset({(1, 3), (2, 3)}))
    g = sine_squared_coupling(10.0)
    states = np.array([[np.pi / 2], [np.pi / 2], [0.0]])
    inc = coupling_term(g, net, states, 3)
    assert inc == pytest.approx([10.0])


def test_builtin_couplings_vanish_at_zero_and_respect_bounds():
    rng = np.random.default_rng(0)
    for name, g in coupling_catalog().items():
        assert np.allclose(g(np.zeros((1,)), 3), 0.0)
        # sampled Jacobian of the summed increment for J_v edges
        for j_count in (1, 3):
            pts = rng.uniform(-3, 3, size=200)
            h = 1e-6
            deriv = (g(pts + h, j_count) - g(pts - h, j_count)) / (2 * h)
            assert np.max(np.abs(deriv)) * j_count <= g.jacobian_bound + 1e-6, name


def test_zero_drift_discretizes_to_identity():
    cm = ContinuousModel(
        name="still",
        n=1,
        m=0,
        p=1,
        param_names=("s", "w"),
        s_index=0,
        w_index=1,
        init_state=np.zeros(1),
        drift_fixed=lambda x, u: np.zeros_like(x),
        drift_basis=lambda x, u: np.zeros(x.shape[:-1] + (0, 1)),
        observation_fixed=lambda x, u: x,
        observation_basis=lambda x, u: np.zeros(x.shape[:-1] + (0, 1)),
    )
    for dt in (0.01, 0.5, 2.0):
        model = discretize_continuous(cm, dt)
        theta = np.array([1.0, 1.0])
        x = np.array([1.7])
        assert model.transition_mean(theta, x) == pytest.approx(x)


def test_gene_regulation_euler_hand_value():
    model = gene_regulation_model(dt=0.01)
    out = model.transition_mean(model.theta_true, np.array([1.0]))
    assert out == pytest.approx([0.998], abs=1e-12)


def test_euler_consistency_under_step_halving():
    # stepping 4x at dt/4 approaches one step at dt on a smooth drift
    model_c = gene_regulation_model(dt=0.2)
    model_f = gene_regulation_model(dt=0.05)
    theta = model_c.theta_true
    x = np.array([1.0])
    coarse = model_c.transition_mean(theta, x)
    fine = x.copy()
    for _ in range(4):
        fine = model_f.transition_mean(theta, fine)
    exact = np.exp(-0.2 * 0.2) * x
    assert abs(fine[0] - exact[0]) < abs(coarse[0] - exact[0]) + 1e-12
    assert coarse == pytest.approx(exact, abs=0.2 * 0.2**2)


def test_noise_scale_propagates_dt():
    model = gene_regulation_model(dt=0.01)
    assert model.process_var(model.theta_true) == pytest.approx(0.001 * 0.01)
    assert model.measurement_var(model.theta_true) == pytest.approx(0.01)


def test_table_values_of_builtins():
    bench, _ = build_model("benchmark")
    assert np.allclose(bench.theta_true, [0.5, 25.0, 8.0, 0.05, 0.5, 1.0])
    gr, grc = build_model("gene_regulation", 0.01)
    assert np.allclose(gr.theta_true, [-0.2, 1.0, 0.001, 0.01])
    assert np.allclose(gr.init_state, [1.0])
    fhn, _ = build_model("fitzhugh_nagumo", 0.01)
    assert np.allclose(fhn.theta_true, [1.0, -1.0, -1.0, 0.28, 0.5, -0.04, 0.05, 0.1])
    assert np.allclose(fhn.init_state, [0.87609, -3.5091])
    assert fhn.p == 1 and fhn.n == 2  # partial observation


def test_hill_coupling_saturates_and_scales():
    g = gene_regulation_coupling(dt=0.01, strength=0.05)
    small = g(np.array([0.1]), 4)
    assert small == pytest.approx([0.01 * 0.05 * (0.01 / 1.01)], rel=1e-9)
    big = g(np.array([100.0]), 4)
    assert big[0] < 0.01 * 0.05 * 1.0 + 1e-12


def test_unknown_model_name():
    with pytest.raises(ParameterError):
        build_model("nope")


def test_theta_validation():
    model = benchmark_model()
    with pytest.raises(ParameterError):
        model.check_theta(np.array([0.5, 25.0, 8.0, 0.05, 0.0, 1.0]))
    with pytest.raises(ParameterError):
        model.check_theta(np.zeros(3))


def test_linear_coupling_is_difference_scaled():
    g = linear_coupling(1.0)
    out = g(np.array([[2.0], [4.0]]), 2)
    assert np.allclose(out, [[1.0], [2.0]])
