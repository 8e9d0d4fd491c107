import numpy as np
import pytest
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from coopsync.errors import InvalidTopology, TopologyGenerationFailed
from coopsync.topology import gen_grid_topology, gen_random_topology, is_connected, topology_from_edges


def _hops_oracle(topo, sources):
    n = topo.num_nodes
    rows = [i for i, j in topo.edges] + [j for i, j in topo.edges]
    cols = [j for i, j in topo.edges] + [i for i, j in topo.edges]
    adj = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    d = shortest_path(adj, unweighted=True, indices=sorted(sources))
    return d.min(axis=0).astype(int)


class TestTopologyValidation:
    def test_edges_are_sorted_and_deduplicated(self):
        topo = topology_from_edges(4, [(2, 1), (0, 1), (1, 2), (3, 2)], masters=(0,))
        assert topo.edges == ((0, 1), (1, 2), (2, 3))
        assert topo.neighbors[1] == (0, 2)
        assert topo.agents == (1, 2, 3)

    @pytest.mark.parametrize(
        "edges, masters",
        [
            ([(0, 0), (0, 1)], ()),  # self-loop
            ([(0, 5)], ()),  # out of range
            ([(0, 1), (1, 2)], (0, 1)),  # master-master link
            ([(0, 1)], ()),  # node 2 isolated
        ],
    )
    def test_invalid_inputs_raise(self, edges, masters):
        with pytest.raises(InvalidTopology):
            topology_from_edges(3, edges, masters)

    def test_positions_shape_checked(self):
        with pytest.raises(InvalidTopology):
            topology_from_edges(2, [(0, 1)], positions=np.zeros((3, 2)))

    def test_is_connected(self):
        assert is_connected(3, [(0, 1), (1, 2)])
        assert not is_connected(3, [(0, 1)])


class TestGrid:
    @pytest.mark.parametrize("rows, cols", [(2, 2), (3, 5), (4, 4), (1, 6)])
    def test_edge_count_and_hops(self, rows, cols):
        topo = gen_grid_topology(rows, cols)
        assert len(topo.edges) == rows * (cols - 1) + cols * (rows - 1)
        hops = topo.hop_distances()
        manhattan = np.array([r + c for r in range(rows) for c in range(cols)])
        np.testing.assert_array_equal(hops, manhattan)
        assert topo.masters == frozenset({0})

    def test_positions_follow_spacing(self):
        topo = gen_grid_topology(2, 3, spacing=50.0)
        np.testing.assert_allclose(topo.positions[4], [50.0, 50.0])

    def test_master_free_grid(self):
        assert gen_grid_topology(3, 3, master_corner=False).masters == frozenset()


class TestRandomGeometric:
    def test_edges_are_exactly_the_pairs_within_radius(self):
        rng = np.random.default_rng(1)
        topo = gen_random_topology(20, 1000.0, 400.0, (0,), rng)
        pos = topo.positions
        expected = {
            (i, j)
            for i in range(20)
            for j in range(i + 1, 20)
            if np.hypot(*(pos[i] - pos[j])) <= 400.0 and not (i == 0 and j == 0)
        }
        assert set(topo.edges) == expected
        assert is_connected(20, topo.edges)

    def test_no_master_master_links(self):
        rng = np.random.default_rng(2)
        topo = gen_random_topology(15, 100.0, 200.0, (0, 1, 2), rng)
        assert all(not (topo.is_master(i) and topo.is_master(j)) for i, j in topo.edges)

    def test_same_seed_same_network(self):
        a = gen_random_topology(12, 1000.0, 400.0, (0,), np.random.default_rng(7))
        b = gen_random_topology(12, 1000.0, 400.0, (0,), np.random.default_rng(7))
        assert a.edges == b.edges
        np.testing.assert_array_equal(a.positions, b.positions)

    def test_gives_up_after_retries(self):
        with pytest.raises(TopologyGenerationFailed):
            gen_random_topology(30, 1000.0, 1.0, (0,), np.random.default_rng(0), max_retries=3)

    def test_hop_distances_match_shortest_paths(self):
        for seed in range(5):
            topo = gen_random_topology(25, 1000.0, 350.0, (0,), np.random.default_rng(seed))
            np.testing.assert_array_equal(topo.hop_distances(), _hops_oracle(topo, {0}))
            np.testing.assert_array_equal(topo.hop_distances({3, 7}), _hops_oracle(topo, {3, 7}))
