import csv
import math

import numpy as np
import pytest

from coopsync.config import parse_config
from coopsync.experiment import (BCRB_COLUMNS, CONVERGENCE_COLUMNS, NODE_COLUMNS, RESULT_COLUMNS, draw_network, fmt,
                                 hop_levels, measurement_packets, run_experiment, run_rng, simulate_run,
                                 topology_for_run, write_results)
from coopsync.topology import gen_grid_topology, topology_from_edges

SMALL = "n = 10\nradius = 500\nk = 5\nseed = 3\nbaseline_iterations = 20\n"


@pytest.fixture
def cfg():
    return parse_config(SMALL + "runs = 2\nalgorithms = bp, mf, lc\n")


class TestRandomStreams:
    def test_streams_are_reproducible_and_distinct(self):
        a = run_rng(1, 2, 0).random(4)
        np.testing.assert_array_equal(a, run_rng(1, 2, 0).random(4))
        assert not np.array_equal(a, run_rng(1, 2, 1).random(4))
        assert not np.array_equal(a, run_rng(1, 3, 0).random(4))

    def test_fixed_topology_reuses_run_zero(self):
        cfg = parse_config(SMALL + "fixed_topology = true")
        assert topology_for_run(cfg, 3, 0).edges == topology_for_run(cfg, 3, 5).edges
        moving = parse_config(SMALL)
        draws = {topology_for_run(moving, 3, r).edges for r in range(4)}
        assert len(draws) > 1

    def test_draw_network_matches_config(self, cfg):
        net = draw_network(cfg, cfg.seed, 0)
        assert set(net.measurements) == set(net.topology.edges)
        assert all(m.k_ij == 5 and m.k_ji == 5 for m in net.measurements.values())


class TestHelpers:
    def test_measurement_packets(self):
        topo = topology_from_edges(3, [(0, 1), (1, 2)])
        np.testing.assert_array_equal(measurement_packets(topo, 4, 7), [4, 7 + 4, 7])

    def test_hop_levels_fall_back_to_initiator(self):
        topo = gen_grid_topology(2, 2, master_corner=False)
        np.testing.assert_array_equal(hop_levels(topo, initiator=3), [2, 1, 1, 0])

    @pytest.mark.parametrize("value, text", [(True, "1"), (3, "3"), (np.int64(4), "4"), (0.1, "0.1"),
                                             (math.nan, "nan"), (1e-9 / 3, "3.33333333333e-10"), ("ok", "ok")])
    def test_fmt(self, value, text):
        assert fmt(value) == text


class TestRuns:
    def test_adding_algorithms_leaves_others_unchanged(self, cfg):
        alone = simulate_run(cfg, cfg.seed, 1, algorithms=("bp",)).metrics[0]
        together = [m for m in simulate_run(cfg, cfg.seed, 1).metrics if m.algorithm == "bp"][0]
        assert alone.rmse_phase_s == together.rmse_phase_s
        assert alone.phase_errors == together.phase_errors

    def test_message_passing_rows(self, cfg):
        out = simulate_run(cfg, cfg.seed, 0)
        rows = {m.algorithm: m for m in out.metrics}
        assert set(rows) == {"bp", "mf", "lc"}
        assert rows["bp"].status == "ok" and rows["bp"].rmse_phase_s < 1e-6
        assert set(rows["bp"].phase_errors) == set(range(1, 10))

    def test_failed_topology_is_reported(self):
        cfg = parse_config("n = 30\nradius = 1\nruns = 1")
        out = simulate_run(cfg, 0, 0)
        assert out.metrics[0].status == "TopologyGenerationFailed"
        assert math.isnan(out.metrics[0].rmse_phase_s)

    def test_sweep_points_share_networks(self):
        cfg = parse_config(SMALL + "sweep_key = sigma_w\nsweep_values = 1e-8, 1e-7\nruns = 1")
        res = run_experiment(cfg)
        lo, hi = (m.rmse_phase_s for m in res.metrics)
        # common random numbers: the error scales with the noise level
        assert hi / lo == pytest.approx(10.0, rel=0.05)

    def test_workers_do_not_change_results(self, cfg):
        a = run_experiment(cfg, workers=1).metrics
        b = run_experiment(cfg, workers=2).metrics
        assert [(m.algorithm, m.run, m.rmse_phase_s) for m in a] == [(m.algorithm, m.run, m.rmse_phase_s) for m in b]


class TestOutput:
    def test_tables(self, tmp_path):
        cfg = parse_config(SMALL + "name = out\nalgorithms = bp, ats\nbcrb = true\ntrace = true\nruns = 1")
        paths = write_results(run_experiment(cfg), tmp_path)
        names = sorted(p.name for p in paths)
        assert names == ["out_bcrb.csv", "out_convergence.csv", "out_nodes.csv", "out_results.csv",
                         "out_trace_0_0.csv"]
        headers = {p.name: next(csv.reader(p.open())) for p in paths}
        assert tuple(headers["out_results.csv"]) == RESULT_COLUMNS
        assert tuple(headers["out_nodes.csv"]) == NODE_COLUMNS
        assert tuple(headers["out_convergence.csv"]) == CONVERGENCE_COLUMNS
        assert tuple(headers["out_bcrb.csv"]) == BCRB_COLUMNS
        rows = list(csv.DictReader((tmp_path / "out_results.csv").open()))
        assert [r["algorithm"] for r in rows] == ["bp", "ats"]
        nodes = list(csv.DictReader((tmp_path / "out_nodes.csv").open()))
        # ats is scored on every node, bp on the agents
        assert len(nodes) == 9 + 10
