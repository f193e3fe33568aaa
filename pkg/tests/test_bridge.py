"""Exact scores, conditioned sampling, and the error report."""

import json

import numpy as np
import pytest
from scipy import integrate

import bridgeforge as bf
from bridgeforge.bridge import brownian_exact_score, ou_exact_score


def _ou_pdf(t, x, s, y, theta=1.0, sigma=1.0):
    tau = s - t
    a = np.exp(-theta * tau)
    v = sigma ** 2 * (1.0 - np.exp(-2.0 * theta * tau)) / (2.0 * theta)
    return np.exp(-(y - x * a) ** 2 / (2.0 * v)) / np.sqrt(2.0 * np.pi * v)


def _brownian_pdf(t, x, s, y, sigma=1.0):
    v = sigma ** 2 * (s - t)
    return np.exp(-(y - x) ** 2 / (2.0 * v)) / np.sqrt(2.0 * np.pi * v)


class TestOuExactScore:
    def test_zero_when_endpoint_matches_propagated_mean(self):
        assert ou_exact_score(1.0, 1.0, 0.0, np.zeros(1), 1.0, np.zeros(1))[0] == 0.0

    def test_hand_value(self):
        # exp(-1) / v(1) * (1 - exp(-1)) = 0.850918... * 0.632121... with
        # v(1) = (1 - exp(-2)) / 2 = 0.432332...
        val = ou_exact_score(1.0, 1.0, 0.0, np.array([1.0]), 1.0,
                             np.array([1.0]))[0]
        assert abs(val - 0.5378828) <= 1e-6
        a = np.exp(-1.0)
        v = (1.0 - np.exp(-2.0)) / 2.0
        np.testing.assert_allclose(val, a / v * (1.0 - a), rtol=1e-14)

    def test_no_blowup_at_matching_state_near_horizon(self):
        # x = y = 0: identically zero at every approach rate
        for tau in (1e-1, 1e-3, 1e-6, 1e-9):
            val = ou_exact_score(1.0, 1.0, 1.0 - tau, np.zeros(1), 1.0,
                                 np.zeros(1))
            assert val[0] == 0.0
        # x = y != 0: stays bounded (the numerator vanishes with v)
        for tau in (1e-3, 1e-6, 1e-9):
            val = ou_exact_score(1.0, 1.0, 1.0 - tau, np.ones(1), 1.0,
                                 np.ones(1))
            assert abs(val[0]) <= 1.0 + 1e-9

    def test_componentwise_in_higher_dimension(self):
        x = np.array([0.5, -0.5, 2.0])
        y = np.array([1.0, 0.0, 2.0])
        vals = ou_exact_score(1.0, 1.0, 0.3, x, 1.0, y)
        for i in range(3):
            single = ou_exact_score(1.0, 1.0, 0.3, x[i:i + 1], 1.0, y[i:i + 1])
            assert vals[i] == single[0]

    def test_rejects_time_at_or_past_horizon(self):
        with pytest.raises(ValueError):
            ou_exact_score(1.0, 1.0, 1.0, np.zeros(1), 1.0, np.zeros(1))
        with pytest.raises(ValueError):
            ou_exact_score(1.0, 1.0, 1.5, np.zeros(1), 1.0, np.zeros(1))


class TestBrownianExactScore:
    def test_zero_at_matching_state(self):
        assert brownian_exact_score(1.0, 0.2, np.ones(1), 1.0, np.ones(1))[0] == 0.0

    def test_hand_values(self):
        assert brownian_exact_score(1.0, 0.0, np.zeros(1), 1.0,
                                    np.array([2.0]))[0] == 2.0
        assert brownian_exact_score(2.0, 0.5, np.zeros(1), 1.0,
                                    np.array([1.0]))[0] == 0.5

    def test_rejects_time_at_or_past_horizon(self):
        with pytest.raises(ValueError):
            brownian_exact_score(1.0, 1.0, np.zeros(1), 1.0, np.zeros(1))


class TestChapmanKolmogorovConsistency:
    """Score via one intermediate-time quadrature vs the closed form."""

    @staticmethod
    def _ck_score(pdf, grad_log_pdf, t, x, t1, T, y):
        def weight(x1):
            return pdf(t, x, t1, x1) * pdf(t1, x1, T, y)

        num, _ = integrate.quad(lambda x1: grad_log_pdf(t, x, t1, x1) * weight(x1),
                                -40, 40, limit=200)
        den, _ = integrate.quad(weight, -40, 40, limit=200)
        return num / den

    def test_ou_score(self):
        theta = sigma = 1.0
        T, y = 1.0, 0.7

        def grad_log(t, x, s, x1):
            tau = s - t
            a = np.exp(-theta * tau)
            v = sigma ** 2 * (1.0 - np.exp(-2.0 * theta * tau)) / (2.0 * theta)
            return (x1 - x * a) * a / v

        gen = np.random.default_rng(42)
        for _ in range(20):
            t = gen.uniform(0.0, 0.8)
            x = gen.uniform(-2.0, 2.0)
            t1 = gen.uniform(t + 0.05, 0.95)
            direct = ou_exact_score(theta, sigma, t, np.array([x]), T,
                                    np.array([y]))[0]
            via_ck = self._ck_score(_ou_pdf, grad_log, t, x, t1, T, y)
            assert abs(direct - via_ck) <= 1e-6

    def test_brownian_score(self):
        sigma = 1.0
        T, y = 1.0, -0.4

        def grad_log(t, x, s, x1):
            return (x1 - x) / (sigma ** 2 * (s - t))

        gen = np.random.default_rng(43)
        for _ in range(20):
            t = gen.uniform(0.0, 0.8)
            x = gen.uniform(-2.0, 2.0)
            t1 = gen.uniform(t + 0.05, 0.95)
            direct = brownian_exact_score(sigma, t, np.array([x]), T,
                                          np.array([y]))[0]
            via_ck = self._ck_score(_brownian_pdf, grad_log, t, x, t1, T, y)
            assert abs(direct - via_ck) <= 1e-6


class TestSampleBridge:
    def test_zero_score_reproduces_unconditioned_paths(self):
        model = bf.make_brownian(1.0, 2)
        grid = bf.TimeGrid(0.0, 1.0, 32)

        def zero(t, x):
            return np.zeros_like(x)

        plain = bf.simulate(model, np.zeros(2), grid, 30, seed=1,
                            _force_generic=True)
        bridged = bf.sample_bridge(model, zero, np.zeros(2), grid, 30, seed=1)
        np.testing.assert_array_equal(plain.states, bridged.states)

    def test_brownian_bridge_midpoint_variance(self):
        model = bf.make_brownian(1.0, 1)
        grid = bf.TimeGrid(0.0, 1.0, 100)
        score = bf.ExactBrownianScore(1.0, 1.0, np.zeros(1))
        batch = bf.sample_bridge(model, score, np.zeros(1), grid, 10000, seed=2)
        assert abs(batch.states[:, 50, 0].var() - 0.25) <= 0.025

    def test_ou_bridge_concentrates_at_endpoint(self):
        model = bf.make_ou(1.0, 1.0, 1)
        grid = bf.TimeGrid(0.0, 1.0, 100)
        score = bf.ExactOuScore(1.0, 1.0, 1.0, np.array([1.0]))
        batch = bf.sample_bridge(model, score, np.array([1.0]), grid, 1000,
                                 seed=3)
        err = np.abs(batch.states[:, -2, 0] - 1.0).mean()
        assert err <= 0.15

    def test_start_point_independence(self):
        # one score function serves any start point without retraining
        model = bf.make_brownian(1.0, 2)
        grid = bf.TimeGrid(0.0, 1.0, 50)
        score = bf.ExactBrownianScore(1.0, 1.0, np.array([1.0, -1.0]))
        for x0 in (np.zeros(2), np.array([4.0, 3.0])):
            batch = bf.sample_bridge(model, score, x0, grid, 200, seed=4)
            end_err = np.linalg.norm(batch.states[:, -2, :]
                                     - np.array([1.0, -1.0]), axis=1).mean()
            assert end_err <= 0.3

    def test_pin_mode_sets_exact_endpoint(self):
        model = bf.make_ou(1.0, 1.0, 1)
        grid = bf.TimeGrid(0.0, 1.0, 50)
        score = bf.ExactOuScore(1.0, 1.0, 1.0, np.array([1.0]))
        batch = bf.sample_bridge(model, score, np.array([0.0]), grid, 20,
                                 seed=5, endpoint_handling="pin")
        assert np.all(batch.states[:, -1, 0] == 1.0)

    def test_pin_mode_requires_fixed_endpoint(self):
        model = bf.make_brownian(1.0, 2)
        grid = bf.TimeGrid(0.0, 1.0, 10)
        net = bf.ScoreNetwork(dim=2, seed=6)
        score = bf.NetworkScore(net)  # distribution-trained: no fixed y
        with pytest.raises(ValueError):
            bf.sample_bridge(model, score, np.zeros(2), grid, 5, seed=7,
                             endpoint_handling="pin")

    def test_unknown_handling_rejected(self):
        model = bf.make_brownian(1.0, 1)
        grid = bf.TimeGrid(0.0, 1.0, 10)
        with pytest.raises(ValueError):
            bf.sample_bridge(model, lambda t, x: np.zeros_like(x),
                             np.zeros(1), grid, 5, seed=8,
                             endpoint_handling="clamp")


class TestNetworkScore:
    def test_conditioned_network_needs_endpoint(self):
        net = bf.ScoreNetwork(dim=2, conditioned=True, seed=9)
        with pytest.raises(ValueError):
            bf.NetworkScore(net)
        score = bf.NetworkScore(net, np.ones(2))
        assert score(0.3, np.zeros((4, 2))).shape == (4, 2)

    def test_unconditioned_network_rejects_endpoint(self):
        net = bf.ScoreNetwork(dim=2, seed=10)
        with pytest.raises(ValueError):
            bf.NetworkScore(net, np.ones(2))


class TestScoreErrorReport:
    def _eval_states(self, n=200):
        model = bf.make_ou(1.0, 1.0, 1)
        grid = bf.TimeGrid(0.0, 1.0, 50)
        score = bf.ExactOuScore(1.0, 1.0, 1.0, np.array([1.0]))
        return model, bf.sample_bridge(model, score, np.array([1.0]), grid, n,
                                       seed=11)

    def test_identical_scores_give_zero(self):
        _, ev = self._eval_states()
        exact = bf.ExactOuScore(1.0, 1.0, 1.0, np.array([1.0]))
        rep = bf.score_error_report(exact, exact, ev, t_cutoff=0.95)
        assert np.all(rep.mse == 0.0)
        assert rep.time_averaged_mse == 0.0

    def test_cutoff_excludes_terminal_region(self):
        _, ev = self._eval_states()
        exact = bf.ExactOuScore(1.0, 1.0, 1.0, np.array([1.0]))
        rep = bf.score_error_report(exact, exact, ev, t_cutoff=0.5)
        assert rep.times.max() <= 0.5
        assert rep.times.min() == 0.0

    def test_zero_network_matches_quadrature_oracle(self):
        # against the zero score, the report must equal the mean squared
        # exact score over the bridge law, computable by 1-d quadrature;
        # a fine grid keeps the Euler bias of the evaluation bridges small
        theta = sigma = 1.0
        T, y0, x0 = 1.0, 1.0, 1.0
        model = bf.make_ou(theta, sigma, 1)
        grid = bf.TimeGrid(0.0, T, 200)
        exact = bf.ExactOuScore(theta, sigma, T, np.array([y0]))
        ev = bf.sample_bridge(model, exact, np.array([x0]), grid, 4000,
                              seed=11)

        def zero(t, x):
            return np.zeros_like(x)

        rep = bf.score_error_report(zero, exact, ev, t_cutoff=0.95)

        def bridge_density(t, x):
            return (_ou_pdf(0.0, x0, t, x) * _ou_pdf(t, x, T, y0)
                    / _ou_pdf(0.0, x0, T, y0))

        expected = []
        for t in rep.times:
            if t == 0.0:
                s = ou_exact_score(theta, sigma, 0.0, np.array([x0]), T,
                                   np.array([y0]))[0]
                expected.append(s ** 2)
                continue
            val, _ = integrate.quad(
                lambda x: ou_exact_score(theta, sigma, t, np.array([x]), T,
                                         np.array([y0]))[0] ** 2
                * bridge_density(t, x), -15, 15, limit=200)
            norm, _ = integrate.quad(lambda x: bridge_density(t, x), -15, 15,
                                     limit=200)
            expected.append(val / norm)
        expected = np.array(expected)
        np.testing.assert_allclose(rep.time_averaged_mse, expected.mean(),
                                   rtol=0.05)

    def test_empty_eval_set_rejected(self):
        _, ev = self._eval_states()
        exact = bf.ExactOuScore(1.0, 1.0, 1.0, np.array([1.0]))
        with pytest.raises(ValueError):
            bf.score_error_report(exact, exact, ev, t_cutoff=-1.0)

    def test_csv_and_json_outputs(self, tmp_path):
        _, ev = self._eval_states()
        exact = bf.ExactOuScore(1.0, 1.0, 1.0, np.array([1.0]))
        rep = bf.score_error_report(lambda t, x: np.zeros_like(x), exact, ev,
                                    t_cutoff=0.9)
        csv_path = tmp_path / "mse.csv"
        json_path = tmp_path / "summary.json"
        rep.to_csv(csv_path)
        rep.write_json(json_path)
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "t,mse"
        assert len(lines) == len(rep.times) + 1
        summary = json.loads(json_path.read_text())
        assert set(summary) == {"time_averaged_mse", "n_paths", "t_cutoff"}
        assert summary["n_paths"] == ev.n_paths
