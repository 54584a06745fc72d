import numpy as np
import pytest

from netsid.errors import DegeneracyError, ParameterError
from netsid.models import AgentModel
from netsid.smoother import (
    _systematic_indices,
    backward_smooth,
    contribution_size,
    dump_particles,
    pairwise_weights,
    pf_forward,
    resample,
    select_contribution,
)

from .oracles import kalman_filter, rts_smoother


def scalar_linear_model(phi=0.8, q=0.1, gamma=1.0, r=0.05, x0=1.0):
    def trans_fixed(x, u):
        return np.zeros_like(x)

    def trans_basis(x, u):
        return np.stack([x[..., 0], np.zeros_like(x[..., 0]), np.zeros_like(x[..., 0])],
                        axis=-1)[..., None]

    def obs_fixed(x, u):
        return np.zeros(x.shape[:-1] + (1,))

    def obs_basis(x, u):
        zeros = np.zeros_like(x[..., 0])
        return np.stack([zeros, zeros, zeros], axis=-1)[..., None]

    model = AgentModel(
        name="scalar-linear",
        n=1,
        m=0,
        p=1,
        param_names=("phi", "s", "w"),
        s_index=1,
        w_index=2,
        init_state=np.array([x0]),
        transition_fixed=trans_fixed,
        transition_basis=trans_basis,
        observation_fixed=lambda x, u: gamma * x[..., :1],
        observation_basis=obs_basis,
        theta_true=np.array([phi, q, r]),
    )
    return model


def simulate_scalar(model, T, seed):
    rng = np.random.default_rng(seed)
    phi, q, r = model.theta_true
    x = model.init_state[0]
    xs, ys = [], []
    for _ in range(T):
        x = phi * x + rng.normal(0, np.sqrt(q))
        xs.append(x)
        ys.append(x + rng.normal(0, np.sqrt(r)))
    return np.array(xs), np.array(ys)[:, None]


class TestResample:
    def test_single_heavy_weight_gives_copies(self):
        particles = np.arange(5.0)[:, None]
        weights = np.array([0.0, 0.0, 1.0, 0.0, 0.0])
        out = resample(particles, weights, seed=0)
        assert np.allclose(out, 2.0)

    def test_hand_enumerated_counts_three_one(self):
        # two particles weighted (0.75, 0.25), four systematic picks: the grid
        # spacing forces counts (3, 1) for every offset in [0, 1)
        for offset in (0.0, 0.2, 0.5, 0.9, 0.999):
            idx = _systematic_indices(np.array([0.75, 0.25]), offset, num_draws=4)
            counts = np.bincount(idx, minlength=2)
            assert np.array_equal(counts, [3, 1])

    def test_uniform_weights_stay_uniform_chi2(self):
        m = 8
        particles = np.arange(float(m))[:, None]
        weights = np.full(m, 1.0 / m)
        counts = np.zeros(m)
        n_seeds = 400
        for seed in range(n_seeds):
            out = resample(particles, weights, seed=seed)
            counts += np.bincount(out[:, 0].astype(int), minlength=m)
        expected = n_seeds  # m draws per seed, each slot expects n_seeds total
        chi2 = np.sum((counts - expected) ** 2 / expected)
        # 7 dof: 0.999 quantile is ~24.3
        assert chi2 < 24.3

    def test_marginal_probabilities_match_weights(self):
        particles = np.arange(4.0)[:, None]
        weights = np.array([0.1, 0.2, 0.3, 0.4])
        counts = np.zeros(4)
        n_seeds = 500
        for seed in range(n_seeds):
            out = resample(particles, weights, seed=seed)
            counts += np.bincount(out[:, 0].astype(int), minlength=4)
        frac = counts / (4 * n_seeds)
        assert np.allclose(frac, weights, atol=0.02)

    def test_requires_normalized_weights(self):
        with pytest.raises(ParameterError):
            resample(np.zeros((3, 1)), np.array([0.5, 0.2, 0.2]), seed=0)


class TestForwardFilter:
    def test_near_deterministic_model_collapses_to_truth(self):
        model = scalar_linear_model(phi=0.9, q=1e-10, r=1e-10, x0=1.0)
        T = 10
        truth = model.init_state[0] * 0.9 ** np.arange(1, T + 1)
        ens = pf_forward(model, truth[:, None], None, model.theta_true, 200, seed=0)
        means = (ens.particles[:, :, 0] * ens.filter_weights).sum(axis=1)
        assert np.allclose(means, truth, atol=1e-4)

    def test_constant_likelihood_gives_uniform_weights(self):
        model = scalar_linear_model()
        flat = AgentModel(
            name="flat-obs",
            n=1,
            m=0,
            p=1,
            param_names=model.param_names,
            s_index=1,
            w_index=2,
            init_state=model.init_state,
            transition_fixed=model.transition_fixed,
            transition_basis=model.transition_basis,
            observation_fixed=lambda x, u: np.zeros(x.shape[:-1] + (1,)),
            observation_basis=lambda x, u: np.zeros(x.shape[:-1] + (3, 1)),
            theta_true=model.theta_true,
        )
        y = np.zeros((6, 1))
        ens = pf_forward(flat, y, None, flat.theta_true, 50, seed=1)
        assert np.allclose(ens.filter_weights, 1.0 / 50)

    def test_filter_mean_matches_kalman_oracle(self):
        model = scalar_linear_model(phi=0.8, q=0.1, gamma=1.0, r=0.05)
        T = 25
        _, y = simulate_scalar(model, T, seed=5)
        kf_means, _ = kalman_filter(
            y[:, 0], 0.8, 0.1, 1.0, 0.05, m1=0.8 * 1.0, p1=0.1
        )
        n_rep = 16
        est = np.empty((n_rep, T))
        for rep in range(n_rep):
            ens = pf_forward(model, y, None, model.theta_true, 1000, seed=100 + rep)
            est[rep] = (ens.particles[:, :, 0] * ens.filter_weights).sum(axis=1)
        avg = est.mean(axis=0)
        se = est.std(axis=0, ddof=1) / np.sqrt(n_rep)
        rms_err = np.sqrt(np.mean((avg - kf_means) ** 2))
        rms_se = np.sqrt(np.mean(se**2))
        assert rms_err <= 3 * rms_se

    def test_degeneracy_raises_with_time(self):
        model = scalar_linear_model()
        y = np.array([[0.0], [1e300], [0.0]])
        with pytest.raises(DegeneracyError) as exc:
            pf_forward(model, y, None, model.theta_true, 30, seed=0)
        assert exc.value.t == 2

    def test_requires_two_particles(self):
        model = scalar_linear_model()
        with pytest.raises(ParameterError):
            pf_forward(model, np.zeros((3, 1)), None, model.theta_true, 1, seed=0)


class TestBackwardSmoother:
    def test_final_step_weights_equal_filter_weights(self):
        model = scalar_linear_model()
        _, y = simulate_scalar(model, 12, seed=2)
        ens = pf_forward(model, y, None, model.theta_true, 60, seed=3)
        backward_smooth(ens, model, model.theta_true)
        assert np.array_equal(ens.log_smoothed[-1], ens.log_filter[-1])

    def test_two_particle_hand_case(self):
        model = scalar_linear_model(phi=1.0, q=0.5, r=0.2)
        theta = model.theta_true
        y = np.array([[1.0], [0.5]])
        ens = pf_forward(model, y, None, theta, 2, seed=7)
        backward_smooth(ens, model, theta)

        # straight-line evaluation of the backward formula
        x0 = ens.particles[0, :, 0]
        x1 = ens.particles[1, :, 0]
        wf0 = ens.filter_weights[0]
        wf1 = ens.filter_weights[1]

        def trans(a, b):
            return np.exp(-0.5 * (b - a) ** 2 / 0.5) / np.sqrt(2 * np.pi * 0.5)

        w_sm = np.empty(2)
        for i in range(2):
            acc = 0.0
            for j in range(2):
                denom = sum(wf0[k] * trans(x0[k], x1[j]) for k in range(2))
                acc += wf1[j] * wf0[i] * trans(x0[i], x1[j]) / denom
            w_sm[i] = acc
        w_sm /= w_sm.sum()
        assert np.allclose(ens.smoothed_weights[0], w_sm, atol=1e-12)

    def test_smoothed_mean_matches_rts_oracle(self):
        model = scalar_linear_model(phi=0.8, q=0.1, gamma=1.0, r=0.05)
        T = 20
        _, y = simulate_scalar(model, T, seed=11)
        rts_means, _, _ = rts_smoother(y[:, 0], 0.8, 0.1, 1.0, 0.05, m1=0.8, p1=0.1)
        n_rep = 16
        est = np.empty((n_rep, T))
        for rep in range(n_rep):
            ens = pf_forward(model, y, None, model.theta_true, 1000, seed=300 + rep)
            backward_smooth(ens, model, model.theta_true)
            est[rep] = (ens.particles[:, :, 0] * ens.smoothed_weights).sum(axis=1)
        avg = est.mean(axis=0)
        se = est.std(axis=0, ddof=1) / np.sqrt(n_rep)
        rms_err = np.sqrt(np.mean((avg - rts_means) ** 2))
        rms_se = np.sqrt(np.mean(se**2))
        assert rms_err <= 3 * rms_se

    def test_particle_error_decreases_with_count(self):
        model = scalar_linear_model(phi=0.8, q=0.1, gamma=1.0, r=0.05)
        T = 6
        _, y = simulate_scalar(model, T, seed=13)
        rts_means, _, _ = rts_smoother(y[:, 0], 0.8, 0.1, 1.0, 0.05, m1=0.8, p1=0.1)
        errors = []
        for m in (100, 1000, 10000):
            errs = []
            for rep in range(2):
                ens = pf_forward(model, y, None, model.theta_true, m, seed=900 + rep)
                backward_smooth(ens, model, model.theta_true)
                mean = (ens.particles[:, :, 0] * ens.smoothed_weights).sum(axis=1)
                errs.append(np.sqrt(np.mean((mean - rts_means) ** 2)))
            errors.append(np.mean(errs))
        assert errors[2] < errors[1] < errors[0]

    def test_weight_normalization_everywhere(self):
        model = scalar_linear_model()
        _, y = simulate_scalar(model, 15, seed=17)
        ens = pf_forward(model, y, None, model.theta_true, 80, seed=18)
        backward_smooth(ens, model, model.theta_true)
        assert np.allclose(ens.filter_weights.sum(axis=1), 1.0, rtol=1e-12)
        assert np.allclose(ens.smoothed_weights.sum(axis=1), 1.0, rtol=1e-12)
        for t in range(1, 15):
            w_pair = pairwise_weights(ens, model, model.theta_true, t)
            assert np.all(w_pair >= 0)
            assert w_pair.sum() == pytest.approx(1.0, rel=1e-12)

    def test_determinism_per_seed(self):
        model = scalar_linear_model()
        _, y = simulate_scalar(model, 10, seed=19)
        a = pf_forward(model, y, None, model.theta_true, 64, seed=20)
        b = pf_forward(model, y, None, model.theta_true, 64, seed=20)
        assert np.array_equal(a.particles, b.particles)
        assert np.array_equal(a.log_filter, b.log_filter)

    def test_zero_denominator_names_transition(self):
        model = scalar_linear_model(phi=1.0, q=1e-12, r=1.0)
        ens = pf_forward(model, np.zeros((2, 1)), None,
                         np.array([1.0, 1e-12, 1.0]), 8, seed=4)
        # teleport the second-step particles far away so every kernel underflows
        ens.particles[1] += 1e200
        with pytest.raises(DegeneracyError) as exc:
            backward_smooth(ens, model, np.array([1.0, 1e-12, 1.0]))
        assert exc.value.t == 1 and exc.value.j is not None


class TestPairwiseWeights:
    def test_single_particle_weight_is_one(self):
        model = scalar_linear_model()
        ens = pf_forward(model, np.zeros((3, 1)), None, model.theta_true, 2, seed=1)
        backward_smooth(ens, model, model.theta_true)
        w = pairwise_weights(ens, model, model.theta_true, 1)
        assert w.shape == (2, 2)
        assert w.sum() == pytest.approx(1.0)

    def test_uniform_weights_and_flat_kernel_give_uniform_matrix(self):
        # observation ignores the state and the transition variance is huge,
        # so the kernel is effectively constant across pairs
        model = scalar_linear_model(phi=0.0, q=1e8, r=1.0)
        flat = AgentModel(
            name="flat",
            n=1,
            m=0,
            p=1,
            param_names=model.param_names,
            s_index=1,
            w_index=2,
            init_state=model.init_state,
            transition_fixed=model.transition_fixed,
            transition_basis=model.transition_basis,
            observation_fixed=lambda x, u: np.zeros(x.shape[:-1] + (1,)),
            observation_basis=lambda x, u: np.zeros(x.shape[:-1] + (3, 1)),
            theta_true=model.theta_true,
        )
        m = 16
        ens = pf_forward(flat, np.zeros((4, 1)), None, flat.theta_true, m, seed=2)
        backward_smooth(ens, flat, flat.theta_true)
        w = pairwise_weights(ens, flat, flat.theta_true, 2)
        assert np.allclose(w, 1.0 / m**2, rtol=1e-3)

    def test_two_particle_hand_evaluation(self):
        model = scalar_linear_model(phi=1.0, q=0.5, r=0.2)
        theta = model.theta_true
        ens = pf_forward(model, np.array([[1.0], [0.4]]), None, theta, 2, seed=9)
        backward_smooth(ens, model, theta)
        w = pairwise_weights(ens, model, theta, 1)

        x0 = ens.particles[0, :, 0]
        x1 = ens.particles[1, :, 0]
        wf = ens.filter_weights[0]
        ws1 = ens.smoothed_weights[1]

        def trans(a, b):
            return np.exp(-0.5 * (b - a) ** 2 / 0.5) / np.sqrt(2 * np.pi * 0.5)

        expected = np.empty((2, 2))
        for i in range(2):
            for j in range(2):
                denom = sum(wf[k] * trans(x0[k], x1[j]) for k in range(2))
                expected[i, j] = wf[i] * ws1[j] * trans(x0[i], x1[j]) / denom
        assert np.allclose(w, expected, atol=1e-13)


class TestContribution:
    def test_top_particles_scaled_by_weight(self):
        model = scalar_linear_model()
        ens = pf_forward(model, np.zeros((1, 1)), None, model.theta_true, 4, seed=3)
        ens.log_smoothed = np.log(np.array([[0.4, 0.3, 0.2, 0.1]]))
        out = select_contribution(ens, j_max=2)
        assert out.size == 2
        assert np.array_equal(out.indices[0], [0, 1])
        assert np.allclose(out.scaled[0, 0], ens.particles[0, 0] * 0.4)
        assert np.allclose(out.scaled[0, 1], ens.particles[0, 1] * 0.3)
        assert out.mass[0] == pytest.approx(0.7)

    def test_ties_break_to_lower_index(self):
        model = scalar_linear_model()
        ens = pf_forward(model, np.zeros((1, 1)), None, model.theta_true, 6, seed=4)
        ens.log_smoothed = np.log(np.full((1, 6), 1.0 / 6))
        out = select_contribution(ens, j_max=3)
        assert np.array_equal(out.indices[0], [0, 1])

    def test_selection_matches_sort_oracle(self):
        model = scalar_linear_model()
        rng = np.random.default_rng(8)
        ens = pf_forward(model, np.zeros((5, 1)), None, model.theta_true, 32, seed=5)
        w = rng.dirichlet(np.ones(32), size=5)
        ens.log_smoothed = np.log(w)
        out = select_contribution(ens, j_max=7)
        k = contribution_size(32, 7)
        for t in range(5):
            order = sorted(range(32), key=lambda i: (-w[t, i], i))[:k]
            assert np.array_equal(out.indices[t], order)

    def test_contribution_size_conventions(self):
        assert contribution_size(500, 13) == 39
        assert contribution_size(4, 2) == 2
        assert contribution_size(5, 2) == 3
        assert contribution_size(100, 0) == 100  # no-neighbor convention


def test_particle_dump_format(tmp_path):
    model = scalar_linear_model()
    _, y = simulate_scalar(model, 4, seed=21)
    ens = pf_forward(model, y, None, model.theta_true, 5, seed=22)
    backward_smooth(ens, model, model.theta_true)
    path = tmp_path / "particles.csv"
    dump_particles(ens, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,i,x_1,w_filter,w_smooth"
    assert len(lines) == 1 + 4 * 5
