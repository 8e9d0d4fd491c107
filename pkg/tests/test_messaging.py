import mpmath
import numpy as np
import pytest

from coopsync.clock import ClockParams, LinkDelayModel, alternating_schedule, sample_clocks, simulate_link_exchange
from coopsync.clock import simulate_network
from coopsync.errors import NotConverged
from coopsync.gaussian import GaussianNat, equilibrate
from coopsync.messaging import (BP, MF, PARALLEL, SERIAL, bp_factor_to_variable, extract_clock_estimate,
                                mf_factor_to_variable, run_sync)
from coopsync.statmodel import agent_prior, build_link_matrices, build_problem, exact_marginals, to_local
from coopsync.topology import gen_grid_topology, gen_random_topology, topology_from_edges

SIGMA_W = 93e-9
SIGMA_ALPHA_SQ = 1e-8
SIGMA_NU_SQ = 33.64


def _problem(topo, seed, k=10, sigma_w=SIGMA_W):
    rng = np.random.default_rng(seed)
    clocks = sample_clocks(topo, SIGMA_ALPHA_SQ, (-10.0, 10.0), rng)
    ms = simulate_network(topo, clocks, LinkDelayModel(sigma_w=sigma_w), k, k, 0.01, rng)
    return build_problem(topo, ms, sigma_w, SIGMA_ALPHA_SQ, SIGMA_NU_SQ), clocks


def _sync(prob, algorithm=BP, schedule=PARALLEL, **kw):
    kw.setdefault("raise_on_fail", False)
    return run_sync(prob.topology, prob.link_mats, prob.priors, prob.epochs, algorithm, schedule,
                    master_values=prob.master_values, **kw)


def _cov_close(actual, desired, tol):
    """Covariances agree entrywise relative to the marginal standard deviations."""
    sd = np.sqrt(np.diag(desired))
    return np.max(np.abs(actual - desired) / np.outer(sd, sd)) < tol


def _schur_mp(lm, ext):
    """Node-i marginal of link factor times node-j extrinsic, in 50-digit arithmetic."""
    mpmath.mp.dps = 50
    a = mpmath.matrix((lm.a_mat / lm.sigma_w).tolist())
    b = mpmath.matrix((lm.b_mat / lm.sigma_w).tolist())
    pj = mpmath.matrix(ext.precision.tolist()) + b.T * b
    inv = mpmath.inverse(pj)
    p = a.T * a - a.T * b * inv * b.T * a
    h = -(a.T * b * inv * mpmath.matrix(ext.info.tolist()))
    mean = mpmath.lu_solve(p, h)
    return np.array(p.tolist(), dtype=float), np.array(mean.tolist(), dtype=float)[:, 0]


class TestMessageRules:
    @pytest.fixture
    def link(self):
        fwd, rev, _ = alternating_schedule(0.05, 8, 8, 0.01)
        m = simulate_link_exchange(ClockParams(1.00005, 4.0), ClockParams(0.99993, -6.0), 2e-6, fwd, rev, SIGMA_W,
                                   np.random.default_rng(0))
        ei = np.mean(np.concatenate([m.fwd_tx, m.rev_rx]))
        ej = np.mean(np.concatenate([m.fwd_rx, m.rev_tx]))
        return build_link_matrices(m, SIGMA_W, ei, ej), ei, ej

    def test_agent_message_matches_high_precision_schur(self, link):
        lm, _, ej = link
        ext = agent_prior(SIGMA_ALPHA_SQ, SIGMA_NU_SQ, ej)
        msg = bp_factor_to_variable(lm, ext)
        p, mean = _schur_mp(lm, ext)
        np.testing.assert_allclose(msg.precision, p, rtol=1e-6, atol=1e-8 * np.abs(p).max())
        # compared in equilibrated coordinates, where double precision is meaningful
        _, d = equilibrate(p)
        assert np.max(np.abs(d * (msg.mean - mean))) < 1e-10 * np.max(np.abs(d * mean))

    def test_master_message_is_conditional(self, link):
        lm, _, ej = link
        mv = to_local([1.0, 0.0], ej)
        msg = bp_factor_to_variable(lm, master_neighbor=True, master_value=mv)
        np.testing.assert_allclose(msg.precision, lm.aa)
        np.testing.assert_allclose(msg.info, -lm.ab @ mv)
        with pytest.raises(ValueError):
            bp_factor_to_variable(lm, master_neighbor=True)

    def test_mf_message_uses_neighbour_mean(self, link):
        lm, _, _ = link
        mu = np.array([1.0, 0.25])
        msg = mf_factor_to_variable(lm, mu)
        np.testing.assert_allclose(msg.precision, lm.aa)
        np.testing.assert_allclose(msg.info, -lm.ab @ mu)

    def test_extract_estimate_round_trip(self):
        theta = ClockParams(1.00002, -3.5)
        epoch = 2.0
        v = to_local([1.0 / theta.alpha, theta.beta / theta.alpha], epoch)
        est = extract_clock_estimate(GaussianNat.from_moments(v, np.diag([1e-10, 1e-6])), epoch)
        assert est.alpha == pytest.approx(theta.alpha, rel=1e-12)
        assert est.beta == pytest.approx(theta.beta, rel=1e-10)


class TestTrees:
    def test_two_agent_chain_one_sweep(self):
        topo = topology_from_edges(2, [(0, 1)])
        prob, _ = _problem(topo, 1)
        res = _sync(prob, max_iter=1, tol=0.0)
        exact = exact_marginals(prob.posterior())
        for a in (0, 1):
            np.testing.assert_allclose(res.beliefs[a].mean, exact[a].mean, rtol=1e-8)
            assert _cov_close(res.beliefs[a].cov, exact[a].cov, 1e-7)

    @pytest.mark.parametrize("schedule", [PARALLEL, SERIAL])
    def test_master_tree_is_exact(self, schedule):
        edges = [(0, 1), (1, 2), (1, 3), (3, 4), (4, 5), (0, 6)]
        prob, _ = _problem(topology_from_edges(7, edges, (0,)), 2)
        res = _sync(prob, schedule=schedule, max_iter=8, tol=0.0)
        exact = exact_marginals(prob.posterior())
        for a in prob.topology.agents:
            np.testing.assert_allclose(res.beliefs[a].mean, exact[a].mean, rtol=1e-10)
            assert _cov_close(res.beliefs[a].cov, exact[a].cov, 1e-8)

    def test_master_free_tree(self):
        # The common mode is pinned only by the priors, so the posterior is
        # conditioned at about 1e8; rounding the inputs alone moves the exact
        # answer by a few 1e-8, and 1e-6 leaves room for that.
        edges = [(0, 1), (1, 2), (1, 3), (3, 4), (0, 5), (5, 6), (6, 7)]
        prob, _ = _problem(topology_from_edges(8, edges), 3, k=5)
        res = _sync(prob, max_iter=10, tol=0.0)
        exact = exact_marginals(prob.posterior())
        for a in prob.topology.agents:
            scale = np.max(np.abs(exact[a].mean))
            assert np.max(np.abs(res.beliefs[a].mean - exact[a].mean)) / scale < 1e-6
            assert _cov_close(res.beliefs[a].cov, exact[a].cov, 1e-6)


@pytest.fixture(scope="module")
def network():
    topo = gen_random_topology(15, 1000.0, 450.0, (0,), np.random.default_rng(4))
    return _problem(topo, 5)[0]


class TestLoopyGraphs:
    @pytest.mark.parametrize("algorithm", [BP, MF])
    def test_means_reach_map(self, network, algorithm):
        res = _sync(network, algorithm, SERIAL, max_iter=500, tol=1e-9)
        assert res.converged
        exact = exact_marginals(network.posterior())
        for a in network.topology.agents:
            np.testing.assert_allclose(res.beliefs[a].mean, exact[a].mean, rtol=1e-6, atol=1e-5)

    def test_damping_keeps_the_fixed_point(self, network):
        plain = _sync(network, BP, SERIAL, max_iter=500, tol=1e-9)
        damped = _sync(network, BP, SERIAL, max_iter=2000, tol=1e-9, damping=0.5)
        assert damped.converged
        for a in network.topology.agents:
            np.testing.assert_allclose(damped.beliefs[a].mean, plain.beliefs[a].mean, rtol=1e-6, atol=1e-6)

    def test_bp_variances_non_increasing(self, network):
        res = _sync(network, BP, PARALLEL, max_iter=60, tol=0.0)
        for tr in res.traces.values():
            assert np.all(np.diff(tr) <= 1e-12 * max(tr[0], 1.0))

    def test_bp_variances_are_overconfident(self, network):
        # loopy BP covariance never exceeds the exact marginal on these models
        res = _sync(network, BP, PARALLEL, max_iter=200, tol=1e-12)
        exact = exact_marginals(network.posterior())
        for a in network.topology.agents:
            assert np.trace(res.beliefs[a].cov) <= np.trace(exact[a].cov) * (1 + 1e-9)


class TestScheduling:
    def test_serial_activation_follows_hops(self):
        topo = gen_grid_topology(3, 4)
        prob, _ = _problem(topo, 6)
        res = _sync(prob, BP, SERIAL, max_iter=2, tol=0.0)
        hops = topo.hop_distances()
        for node in topo.agents:
            assert res.broadcasts[node] == max(0, 2 - hops[node] + 1)

    def test_parallel_broadcast_count_includes_measurements(self):
        topo = gen_grid_topology(2, 3)
        prob, _ = _problem(topo, 7)
        packets = np.array([topo.degree(k) * 10 for k in range(topo.num_nodes)])
        res = _sync(prob, BP, PARALLEL, max_iter=5, tol=0.0, measurement_packets=packets)
        expected = packets + np.where([topo.is_master(k) for k in range(topo.num_nodes)], 0, 5)
        np.testing.assert_array_equal(res.broadcasts, expected)
        assert res.broadcast_history[-1] == expected.sum()

    def test_not_converged_carries_result(self):
        prob, _ = _problem(gen_grid_topology(3, 3), 8)
        with pytest.raises(NotConverged) as info:
            _sync(prob, BP, PARALLEL, max_iter=2, tol=1e-15, raise_on_fail=True)
        assert info.value.result.iterations_run == 2

    def test_trace_rows(self):
        prob, _ = _problem(gen_grid_topology(2, 2), 9)
        res = _sync(prob, MF, SERIAL, max_iter=3, tol=0.0, trace=True)
        assert len(res.trace_rows) == 3 * 3
        assert len(res.mean_history) == 3

    @pytest.mark.parametrize("kw", [{"algorithm": "gbp"}, {"schedule": "random"}, {"damping": 0.0}])
    def test_bad_arguments(self, kw):
        prob, _ = _problem(gen_grid_topology(2, 2), 10)
        args = {"algorithm": BP, "schedule": PARALLEL, **kw}
        damping = args.pop("damping", 1.0)
        with pytest.raises(ValueError):
            _sync(prob, args["algorithm"], args["schedule"], damping=damping)
