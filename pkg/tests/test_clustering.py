"""Feasibility filtering, affinity, spectral clustering, merging, assignment."""

import itertools

import numpy as np
import pytest

from elsa_sim import clustering, fingerprint as fp
from elsa_sim.clustering import Topology
from elsa_sim.errors import ConfigError, InputError


def gauss_fp(mean, cov, embeddings=None):
    mean = np.asarray(mean, dtype=np.float64)
    if embeddings is None:
        embeddings = np.tile(mean, (4, 1)) + 1.0
    return fp.Fingerprint(mean=mean, cov=np.asarray(cov, dtype=np.float64),
                          ridge=0.0, embeddings=embeddings)


def two_group_population(rng, n_per_group, shift=5.0, sigma=1.0, dim=3):
    """Two behaviorally distinct groups, mean shift in units of sigma."""
    fps = []
    for g, center in enumerate((np.zeros(dim), shift * sigma * np.ones(dim) / np.sqrt(dim))):
        for _ in range(n_per_group):
            fps.append(gauss_fp(center + rng.normal(size=dim) * 0.1 * sigma,
                                sigma ** 2 * np.eye(dim)))
    return fps


def brute_force_best_ncut(aff: np.ndarray) -> frozenset:
    """Minimum normalized cut over all 2-partitions; oracle for small inputs."""
    n = aff.shape[0]
    deg = aff.sum(axis=1)
    best, best_val = None, np.inf
    for size in range(1, n // 2 + 1):
        for subset in itertools.combinations(range(n), size):
            s = set(subset)
            rest = set(range(n)) - s
            cut = sum(aff[i, j] for i in s for j in rest)
            val = cut * (1 / deg[list(s)].sum() + 1 / deg[list(rest)].sum())
            if val < best_val - 1e-12:
                best, best_val = frozenset(s), val
    return best


class TestFeasibleServers:
    def _topo(self, lat):
        return Topology(latency_ms=np.asarray(lat, dtype=float),
                        max_latency_ms=200.0, bandwidth_bytes_per_s=1e6)

    def test_threshold_filtering(self):
        topo = self._topo([[100.0, 300.0]])
        assert clustering.feasible_servers(topo, 0) == {0}

    def test_all_out_of_range(self):
        topo = self._topo([[250.0, 300.0]])
        assert clustering.feasible_servers(topo, 0) == set()

    def test_boundary_inclusive(self):
        topo = self._topo([[200.0, 200.1]])
        assert clustering.feasible_servers(topo, 0) == {0}

    def test_invalid_topology_rejected(self):
        with pytest.raises(ConfigError):
            Topology(latency_ms=np.array([[-1.0]]), max_latency_ms=10.0,
                     bandwidth_bytes_per_s=1e6)
        with pytest.raises(ConfigError):
            Topology(latency_ms=np.ones((2, 2)), max_latency_ms=0.0,
                     bandwidth_bytes_per_s=1e6)


class TestAffinity:
    def test_unit_trust_zero_divergence(self):
        div = fp.DivergenceMatrix(np.zeros((3, 3)))
        aff = clustering.affinity([0, 1, 2], np.ones(3), div, gamma=1.0)
        assert np.array_equal(aff.values, np.ones((3, 3)))

    def test_gamma_doubling_squares_kernel(self):
        rng = np.random.default_rng(0)
        base = np.abs(rng.normal(size=(4, 4)))
        vals = (base + base.T) / 2
        np.fill_diagonal(vals, 0.0)
        div = fp.DivergenceMatrix(vals)
        w = np.array([0.5, 0.8, 0.9, 0.4])
        a1 = clustering.affinity(range(4), w, div, gamma=1.0)
        a2 = clustering.affinity(range(4), w, div, gamma=2.0)
        ww = np.outer(w, w)
        assert np.allclose(a2.values / ww, (a1.values / ww) ** 2, rtol=1e-12)

    def test_planted_blocks_scale(self):
        vals = np.full((4, 4), 10.0)
        vals[:2, :2] = 0.1
        vals[2:, 2:] = 0.1
        np.fill_diagonal(vals, 0.0)
        div = fp.DivergenceMatrix(vals)
        aff = clustering.affinity(range(4), np.ones(4), div, gamma=1.0)
        assert aff.values[0, 1] / aff.values[0, 2] > np.e ** 9

    def test_ids_canonically_sorted(self):
        div = fp.DivergenceMatrix(np.zeros((4, 4)))
        aff = clustering.affinity([3, 0, 2], np.ones(4), div, gamma=1.0)
        assert aff.client_ids == (0, 2, 3)

    def test_diagonal_is_squared_trust(self):
        div = fp.DivergenceMatrix(np.zeros((2, 2)))
        aff = clustering.affinity([0, 1], np.array([0.5, 0.9]), div, gamma=1.0)
        assert np.allclose(np.diag(aff.values), [0.25, 0.81])

    def test_gamma_positive_required(self):
        div = fp.DivergenceMatrix(np.zeros((2, 2)))
        with pytest.raises(ConfigError):
            clustering.affinity([0, 1], np.ones(2), div, gamma=0.0)


class TestSpectralCluster:
    def _block_affinity(self, sizes, within=1.0, across=1e-6):
        n = sum(sizes)
        vals = np.full((n, n), across)
        start = 0
        for s in sizes:
            vals[start:start + s, start:start + s] = within
            start += s
        return clustering.AffinityMatrix(values=vals,
                                         client_ids=tuple(range(n)), gamma=1.0)

    def test_two_planted_blocks_recovered(self):
        aff = self._block_affinity([4, 4])
        got = clustering.spectral_cluster(aff, n_clusters=2, seed=0)
        assert sorted(map(sorted, got)) == [[0, 1, 2, 3], [4, 5, 6, 7]]

    def test_matches_brute_force_ncut(self):
        rng = np.random.default_rng(1)
        for trial in range(5):
            # noisy two-block affinity over 7 clients
            sizes = (3, 4)
            aff_vals = self._block_affinity(sizes, within=1.0, across=0.05).values
            noise = rng.uniform(0.9, 1.1, size=aff_vals.shape)
            aff_vals = aff_vals * (noise + noise.T) / 2
            np.fill_diagonal(aff_vals, 1.0)
            aff = clustering.AffinityMatrix(values=aff_vals,
                                            client_ids=tuple(range(7)), gamma=1.0)
            got = clustering.spectral_cluster(aff, n_clusters=2, seed=trial)
            want = brute_force_best_ncut(aff_vals)
            got_f = {frozenset(c) for c in got}
            assert want in got_f or frozenset(range(7)) - want in got_f

    def test_all_equal_single_cluster(self):
        aff = clustering.AffinityMatrix(values=np.ones((5, 5)),
                                        client_ids=tuple(range(5)), gamma=1.0)
        assert clustering.spectral_cluster(aff, n_clusters=1, seed=0) == \
            [set(range(5))]

    def test_eigengap_finds_single_cluster_for_uniform_affinity(self):
        aff = clustering.AffinityMatrix(values=np.ones((6, 6)),
                                        client_ids=tuple(range(6)), gamma=1.0)
        assert clustering.spectral_cluster(aff, seed=0) == [set(range(6))]

    def test_eigengap_finds_two_blocks(self):
        aff = self._block_affinity([3, 5])
        got = clustering.spectral_cluster(aff, seed=3)
        assert sorted(map(sorted, got)) == [[0, 1, 2], [3, 4, 5, 6, 7]]

    def test_singleton_candidate_set(self):
        aff = clustering.AffinityMatrix(values=np.ones((1, 1)),
                                        client_ids=(7,), gamma=1.0)
        assert clustering.spectral_cluster(aff, seed=0) == [{7}]

    def test_permutation_invariance_via_canonical_ids(self):
        rng = np.random.default_rng(2)
        base = np.abs(rng.normal(size=(6, 6))) + 0.2
        vals = (base + base.T) / 2
        np.fill_diagonal(vals, 1.0)
        div = fp.DivergenceMatrix(np.zeros((6, 6)))
        trust = np.ones(6)
        div.values[:] = -np.log(np.clip(vals, 1e-9, None))
        np.fill_diagonal(div.values, 0.0)
        a1 = clustering.affinity([0, 1, 2, 3, 4, 5], trust, div, gamma=1.0)
        a2 = clustering.affinity([5, 3, 1, 0, 2, 4], trust, div, gamma=1.0)
        c1 = clustering.spectral_cluster(a1, n_clusters=2, seed=11)
        c2 = clustering.spectral_cluster(a2, n_clusters=2, seed=11)
        assert {frozenset(c) for c in c1} == {frozenset(c) for c in c2}

    def test_trust_rescaling_preserves_membership(self):
        # scaling every trust by 2 multiplies the affinity by 4 exactly and
        # leaves the normalized Laplacian bitwise unchanged
        rng = np.random.default_rng(3)
        base = np.abs(rng.normal(size=(6, 6)))
        vals = (base + base.T) / 2
        np.fill_diagonal(vals, 0.0)
        div = fp.DivergenceMatrix(vals)
        w = np.abs(rng.normal(size=6)) + 0.2
        a1 = clustering.affinity(range(6), w, div, gamma=0.7)
        a2 = clustering.affinity(range(6), 2.0 * w, div, gamma=0.7)
        c1 = clustering.spectral_cluster(a1, n_clusters=2, seed=4)
        c2 = clustering.spectral_cluster(a2, n_clusters=2, seed=4)
        assert {frozenset(c) for c in c1} == {frozenset(c) for c in c2}


class TestMergeLowTrust:
    def _fps(self, centers):
        return [gauss_fp(c, np.eye(2)) for c in centers]

    def test_no_merge_when_all_high(self):
        fps = self._fps([[0, 0], [0.1, 0], [5, 5], [5.1, 5]])
        clusters = [{0, 1}, {2, 3}]
        kept, excluded = clustering.merge_low_trust(
            clusters, np.array([0.9, 0.9, 0.8, 0.8]), fps, w_min=0.5)
        assert kept == [{0, 1}, {2, 3}]
        assert excluded == {}

    def test_low_trust_cluster_merges_into_nearest(self):
        fps = self._fps([[0, 0], [0.2, 0], [5, 5], [0.4, 0.1]])
        clusters = [{0, 1}, {2}, {3}]
        trust = np.array([0.9, 0.9, 0.9, 0.1])
        kept, excluded = clustering.merge_low_trust(clusters, trust, fps,
                                                    w_min=0.5)
        assert excluded == {}
        # client 3's centroid is nearest cluster {0, 1}, not {2}
        assert {0, 1, 3} in kept and {2} in kept

    def test_all_low_trust_excluded(self):
        fps = self._fps([[0, 0], [1, 1]])
        kept, excluded = clustering.merge_low_trust(
            [{0}, {1}], np.array([0.1, 0.2]), fps, w_min=0.5)
        assert kept == []
        assert excluded == {0: "low-trust", 1: "low-trust"}


def uniform_population(n, rng=None, spread=0.05):
    rng = rng or np.random.default_rng(0)
    return [gauss_fp(rng.normal(size=2) * spread, np.eye(2)) for _ in range(n)]


class TestAssignClients:
    def test_disjoint_coverage(self):
        fps = uniform_population(4)
        div = fp.divergence_matrix(fps)
        trust = np.ones(4)
        lat = np.array([[50.0, 900.0], [60.0, 900.0],
                        [900.0, 40.0], [900.0, 30.0]])
        topo = Topology(latency_ms=lat, max_latency_ms=200.0,
                        bandwidth_bytes_per_s=1e6)
        out = clustering.assign_clients(topo, fps, trust, div, gamma=1.0,
                                        w_min=0.0, seed=0)
        assert out.clusters == {0: frozenset({0, 1}), 1: frozenset({2, 3})}
        assert out.excluded == {}

    def test_min_latency_rule(self):
        fps = uniform_population(2)
        div = fp.divergence_matrix(fps)
        lat = np.array([[50.0, 40.0], [50.0, 40.0]])
        topo = Topology(latency_ms=lat, max_latency_ms=200.0,
                        bandwidth_bytes_per_s=1e6)
        out = clustering.assign_clients(topo, fps, np.ones(2), div, gamma=1.0,
                                        w_min=0.0, seed=0)
        # both edges feasible; the second has lower latency
        assert out.clusters == {1: frozenset({0, 1})}

    def test_latency_tie_breaks_to_lowest_edge(self):
        fps = uniform_population(2)
        div = fp.divergence_matrix(fps)
        lat = np.array([[40.0, 40.0], [40.0, 40.0]])
        topo = Topology(latency_ms=lat, max_latency_ms=200.0,
                        bandwidth_bytes_per_s=1e6)
        out = clustering.assign_clients(topo, fps, np.ones(2), div, gamma=1.0,
                                        w_min=0.0, seed=0)
        assert set(out.clusters) == {0}

    def test_out_of_range_exclusion(self):
        fps = uniform_population(3)
        div = fp.divergence_matrix(fps)
        lat = np.array([[50.0], [60.0], [500.0]])
        topo = Topology(latency_ms=lat, max_latency_ms=200.0,
                        bandwidth_bytes_per_s=1e6)
        out = clustering.assign_clients(topo, fps, np.ones(3), div, gamma=1.0,
                                        w_min=0.0, seed=0)
        assert out.excluded == {2: "out-of-range"}
        assert out.clusters == {0: frozenset({0, 1})}

    def test_every_client_excluded_is_config_error(self):
        fps = uniform_population(2)
        div = fp.divergence_matrix(fps)
        lat = np.full((2, 1), 900.0)
        topo = Topology(latency_ms=lat, max_latency_ms=200.0,
                        bandwidth_bytes_per_s=1e6)
        with pytest.raises(ConfigError):
            clustering.assign_clients(topo, fps, np.ones(2), div, gamma=1.0,
                                      w_min=0.0, seed=0)

    def test_partition_validity_and_stats(self):
        rng = np.random.default_rng(5)
        fps = uniform_population(8, rng)
        div = fp.divergence_matrix(fps)
        trust = np.linspace(0.4, 0.9, 8)
        lat = rng.uniform(10.0, 400.0, size=(8, 3))
        topo = Topology(latency_ms=lat, max_latency_ms=250.0,
                        bandwidth_bytes_per_s=1e6)
        out = clustering.assign_clients(topo, fps, trust, div, gamma=1.0,
                                        w_min=0.0, seed=1)
        seen = set()
        for k, members in out.clusters.items():
            for n in members:
                assert n not in seen
                seen.add(n)
                assert lat[n, k] <= 250.0
            ids = sorted(members)
            assert out.edge_trust[k] == pytest.approx(trust[ids].mean())
        assert seen | set(out.excluded) == set(range(8))

    def test_lowering_w_min_never_excludes_more(self):
        rng = np.random.default_rng(6)
        fps = uniform_population(10, rng, spread=1.0)
        div = fp.divergence_matrix(fps)
        trust = rng.uniform(0.05, 0.95, size=10)
        lat = rng.uniform(10.0, 300.0, size=(10, 2))
        topo = Topology(latency_ms=lat, max_latency_ms=220.0,
                        bandwidth_bytes_per_s=1e6)
        excluded_sets = []
        for w_min in (0.8, 0.5, 0.2, 0.0):
            try:
                out = clustering.assign_clients(topo, fps, trust, div,
                                                gamma=1.0, w_min=w_min, seed=2)
                excluded_sets.append({n for n, r in out.excluded.items()
                                      if r == "low-trust"})
            except ConfigError:
                excluded_sets.append(set(range(10)))
        for bigger, smaller in zip(excluded_sets, excluded_sets[1:]):
            assert smaller <= bigger


class TestPlantedRecovery:
    def test_two_groups_recovered_across_seeds(self):
        hits = 0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            fps = two_group_population(rng, n_per_group=5, shift=5.0)
            div = fp.divergence_matrix(fps)
            aff = clustering.affinity(range(10), np.ones(10), div, gamma=1.0)
            got = clustering.spectral_cluster(aff, n_clusters=2, seed=seed)
            labels = np.zeros(10, dtype=int)
            for ci, members in enumerate(got):
                for m in members:
                    labels[m] = ci
            truth = np.array([0] * 5 + [1] * 5)
            pairs_right = sum(
                (labels[i] == labels[j]) == (truth[i] == truth[j])
                for i in range(10) for j in range(i + 1, 10))
            if pairs_right / 45 >= 0.9:
                hits += 1
        assert hits >= 9
