"""Gaussian fingerprint, symmetric KL and trust score tests.

The Monte-Carlo KL oracle here is an independent route: log-density ratio
estimated by sampling, with densities computed via explicit inverse and
determinant rather than the Cholesky path under test.
"""

import numpy as np
import pytest

from elsa_sim import fingerprint as fp
from elsa_sim import model
from elsa_sim.errors import ConfigError, InputError, NumericError


def gauss_fp(mean, cov, ridge=0.0, embeddings=None) -> fp.Fingerprint:
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if embeddings is None:
        embeddings = np.tile(mean, (4, 1)) + np.ones((4, mean.size))
    return fp.Fingerprint(mean=mean, cov=cov, ridge=ridge, embeddings=embeddings)


def mc_kl(f_a: fp.Fingerprint, f_b: fp.Fingerprint, n_samples: int,
          seed: int) -> float:
    """Monte-Carlo KL(a || b): mean log-density ratio under samples from a."""
    rng = np.random.default_rng(seed)
    sa, sb = f_a.ridged_cov(), f_b.ridged_cov()
    x = rng.multivariate_normal(f_a.mean, sa, size=n_samples,
                                method="cholesky")
    inv_a, inv_b = np.linalg.inv(sa), np.linalg.inv(sb)
    _, logdet_a = np.linalg.slogdet(sa)
    _, logdet_b = np.linalg.slogdet(sb)
    da = x - f_a.mean
    db = x - f_b.mean
    log_pa = -0.5 * (np.einsum("ij,jk,ik->i", da, inv_a, da) + logdet_a)
    log_pb = -0.5 * (np.einsum("ij,jk,ik->i", db, inv_b, db) + logdet_b)
    return float(np.mean(log_pa - log_pb))


def tiny_state(seed=0):
    cfg = model.ModelConfig(vocab_size=32, seq_len=8, hidden_dim=16, n_blocks=3,
                            n_heads=2, lora_rank=2, split=(1, 1, 1), n_classes=4)
    return model.init_model(cfg, seed)


class TestProbeSet:
    def test_deterministic(self):
        a = fp.build_probe_set(9, 8, 8, 64)
        b = fp.build_probe_set(9, 8, 8, 64)
        assert np.array_equal(a.inputs, b.inputs)

    def test_shape_and_range(self):
        p = fp.build_probe_set(1, 16, 8, 64)
        assert p.inputs.shape == (16, 8)
        assert p.inputs.min() >= 0 and p.inputs.max() < 64

    def test_different_seeds_differ(self):
        a = fp.build_probe_set(1, 16, 8, 64)
        b = fp.build_probe_set(2, 16, 8, 64)
        assert not np.array_equal(a.inputs, b.inputs)

    def test_too_few_probes_rejected(self):
        with pytest.raises(ConfigError):
            fp.build_probe_set(1, 1, 8, 64)


class TestExtractFingerprint:
    def test_identical_models_identical_fingerprints(self):
        st = tiny_state()
        probes = fp.build_probe_set(3, 6, 8, 32)
        f1 = fp.extract_fingerprint(st, probes)
        f2 = fp.extract_fingerprint(st.clone(), probes)
        assert np.array_equal(f1.mean, f2.mean)
        assert np.array_equal(f1.cov, f2.cov)

    def test_mean_is_row_mean(self):
        st = tiny_state()
        probes = fp.build_probe_set(3, 6, 8, 32)
        f = fp.extract_fingerprint(st, probes)
        assert np.abs(f.mean - f.embeddings.mean(axis=0)).max() < 1e-12

    def test_equal_rows_give_ridge_identity(self):
        st = tiny_state()
        same = fp.ProbeSet(inputs=np.tile(np.arange(8, dtype=np.int64), (5, 1)),
                           seed=0)
        f = fp.extract_fingerprint(st, same)
        assert np.abs(f.cov).max() < 1e-12
        assert f.ridge >= 1e-6
        assert np.abs(f.ridged_cov() - f.ridge * np.eye(16)).max() < 1e-12


class TestClosedFormKl:
    def test_self_divergence_zero(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(5, 3))
        f = gauss_fp(rng.normal(size=3), a.T @ a + np.eye(3))
        assert abs(fp.kl_gauss(f, f)) < 1e-9

    def test_unit_variance_mean_shift(self):
        f_a = gauss_fp([0.0], [[1.0]])
        f_b = gauss_fp([1.0], [[1.0]])
        assert fp.kl_gauss(f_a, f_b) == pytest.approx(0.5, abs=1e-12)

    def test_variance_ratio_case(self):
        f_a = gauss_fp([0.0], [[1.0]])
        f_b = gauss_fp([0.0], [[4.0]])
        expected = 0.5 * (0.25 - 1.0 + np.log(4.0))
        assert fp.kl_gauss(f_a, f_b) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.3181, abs=5e-4)

    def test_monte_carlo_agreement_1d(self):
        f_a = gauss_fp([0.0], [[1.0]])
        f_b = gauss_fp([1.0], [[1.0]])
        assert mc_kl(f_a, f_b, 1_000_000, seed=1) == pytest.approx(0.5, abs=1e-2)
        f_c = gauss_fp([0.0], [[4.0]])
        assert mc_kl(f_a, f_c, 1_000_000, seed=2) == pytest.approx(0.3181, abs=1e-2)

    def test_monte_carlo_agreement_random_low_dim(self):
        rng = np.random.default_rng(3)
        for trial in range(5):
            d = int(rng.integers(1, 4))
            qa = rng.normal(size=(d + 2, d)) * 0.7
            qb = rng.normal(size=(d + 2, d)) * 0.7
            f_a = gauss_fp(rng.normal(size=d) * 0.5, qa.T @ qa + 0.5 * np.eye(d))
            f_b = gauss_fp(rng.normal(size=d) * 0.5 + 0.5,
                           qb.T @ qb + 0.5 * np.eye(d))
            closed = fp.sym_kl(f_a, f_b)
            mc = (mc_kl(f_a, f_b, 400_000, seed=10 + trial)
                  + mc_kl(f_b, f_a, 400_000, seed=20 + trial))
            assert closed == pytest.approx(mc, rel=0.05)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(InputError):
            fp.kl_gauss(gauss_fp([0.0], [[1.0]]), gauss_fp([0, 0], np.eye(2)))

    def test_non_pd_covariance_raises_numeric(self):
        bad = gauss_fp([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]])
        good = gauss_fp([0.0, 0.0], np.eye(2))
        with pytest.raises(NumericError):
            fp.kl_gauss(bad, good)

    def test_ridge_keeps_kl_finite(self):
        # near-singular covariances stay finite for every ridge in the ladder
        rng = np.random.default_rng(4)
        v = rng.normal(size=(3, 1))
        rank1 = v @ v.T
        for ridge in (1e-6, 1e-4, 1e-2, 1.0):
            f_a = gauss_fp(np.zeros(3), rank1, ridge=ridge)
            f_b = gauss_fp(np.ones(3), 2 * rank1, ridge=ridge)
            assert np.isfinite(fp.sym_kl(f_a, f_b))


class TestSymKl:
    def test_symmetry_exact(self):
        rng = np.random.default_rng(5)
        qa, qb = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        f_a = gauss_fp(rng.normal(size=2), qa.T @ qa + np.eye(2))
        f_b = gauss_fp(rng.normal(size=2), qb.T @ qb + np.eye(2))
        assert fp.sym_kl(f_a, f_b) == fp.sym_kl(f_b, f_a)

    def test_self_zero(self):
        f = gauss_fp([1.0, 2.0], np.eye(2))
        assert abs(fp.sym_kl(f, f)) < 1e-9

    def test_two_unit_gaussians(self):
        f_a = gauss_fp([0.0], [[1.0]])
        f_b = gauss_fp([1.0], [[1.0]])
        assert fp.sym_kl(f_a, f_b) == pytest.approx(1.0, abs=1e-12)


class TestDivergenceMatrix:
    def _population(self, rng, n, shift=0.0):
        out = []
        for _ in range(n):
            q = rng.normal(size=(6, 3))
            out.append(gauss_fp(rng.normal(size=3) + shift,
                                q.T @ q + np.eye(3)))
        return out

    def test_identical_clients_zero_matrix(self):
        f = gauss_fp([0.0, 1.0], np.eye(2))
        fps = [gauss_fp(f.mean.copy(), f.cov.copy()) for _ in range(4)]
        div = fp.divergence_matrix(fps)
        assert np.abs(div.values).max() < 1e-9

    def test_symmetric_zero_diagonal_nonnegative(self):
        fps = self._population(np.random.default_rng(6), 5)
        div = fp.divergence_matrix(fps)
        assert np.abs(div.values - div.values.T).max() < 1e-9
        assert np.array_equal(np.diag(div.values), np.zeros(5))
        assert (div.values >= 0).all()

    def test_outlier_has_larger_divergences(self):
        near_a = gauss_fp([0.0, 0.0], np.eye(2))
        near_b = gauss_fp([0.05, 0.0], np.eye(2))
        outlier = gauss_fp([6.0, 6.0], np.eye(2))
        div = fp.divergence_matrix([near_a, near_b, outlier])
        assert div.values[0, 2] > div.values[0, 1]
        assert div.values[1, 2] > div.values[0, 1]

    def test_permutation_equivariant(self):
        fps = self._population(np.random.default_rng(7), 5)
        div = fp.divergence_matrix(fps)
        perm = [3, 1, 4, 0, 2]
        div_p = fp.divergence_matrix([fps[i] for i in perm])
        assert np.array_equal(div_p.values, div.values[np.ix_(perm, perm)])

    def test_needs_two(self):
        with pytest.raises(InputError):
            fp.divergence_matrix([gauss_fp([0.0], [[1.0]])])


class TestTrustScores:
    def test_near_one_when_both_terms_vanish(self):
        # huge norms -> inverse confidence ~ 0; identical twins -> divergence 0
        emb = np.full((4, 2), 1e9)
        f = gauss_fp([0.0, 0.0], np.eye(2), embeddings=emb)
        g = gauss_fp([0.0, 0.0], np.eye(2), embeddings=emb.copy())
        div = fp.divergence_matrix([f, g])
        scores = fp.trust_scores([f, g], div, normalized=False)
        assert scores[0] == pytest.approx(1.0, abs=1e-6)

    def test_identical_population_normalized(self):
        emb = np.random.default_rng(8).normal(size=(4, 2)) + 3.0
        fps = [gauss_fp(emb.mean(0), np.eye(2), embeddings=emb.copy())
               for _ in range(5)]
        div = fp.divergence_matrix(fps)
        scores = fp.trust_scores(fps, div, normalized=True)
        # confidence normalizes to 1; zero divergences stay unnormalized at 0
        assert np.abs(scores - np.exp(-1.0)).max() < 1e-9

    def test_dominant_divergence_row_scores_lowest(self):
        emb = np.ones((4, 2))
        fps = [gauss_fp([0.0, 0.0], np.eye(2), embeddings=emb.copy()),
               gauss_fp([0.1, 0.0], np.eye(2), embeddings=emb.copy()),
               gauss_fp([8.0, 8.0], np.eye(2), embeddings=emb.copy())]
        div = fp.divergence_matrix(fps)
        scores = fp.trust_scores(fps, div, normalized=True)
        assert np.argmin(scores) == 2

    def test_monotone_in_each_term(self):
        rng = np.random.default_rng(9)
        base = np.abs(rng.normal(size=(5, 5))) + 0.1
        div_vals = (base + base.T) / 2
        np.fill_diagonal(div_vals, 0.0)
        div = fp.DivergenceMatrix(div_vals)
        embs = [rng.normal(size=(4, 3)) + 2.0 for _ in range(5)]
        fps = [gauss_fp(e.mean(0), np.eye(3), embeddings=e) for e in embs]
        s0 = fp.trust_scores(fps, div, normalized=False)
        # increasing client 0's divergence row strictly lowers its score
        worse = div_vals.copy()
        worse[0, 1:] += 0.5
        worse[1:, 0] += 0.5
        s1 = fp.trust_scores(fps, fp.DivergenceMatrix(worse), normalized=False)
        assert s1[0] < s0[0]
        # shrinking its embedding norms (higher inverse confidence) also lowers it
        fps_shrunk = [gauss_fp(e.mean(0), np.eye(3), embeddings=e * (0.5 if i == 0 else 1.0))
                      for i, e in enumerate(embs)]
        s2 = fp.trust_scores(fps_shrunk, div, normalized=False)
        assert s2[0] < s0[0]

    def test_zero_norm_embedding_rejected(self):
        f = gauss_fp([0.0], [[1.0]], embeddings=np.zeros((3, 1)))
        g = gauss_fp([0.0], [[1.0]], embeddings=np.ones((3, 1)))
        div = fp.divergence_matrix([f, g])
        with pytest.raises(NumericError):
            fp.trust_scores([f, g], div)

    def test_trust_score_single_view(self):
        emb = np.ones((4, 2)) * 2.0
        fps = [gauss_fp([0.0, 0.0], np.eye(2), embeddings=emb.copy()),
               gauss_fp([1.0, 0.0], np.eye(2), embeddings=emb.copy())]
        div = fp.divergence_matrix(fps)
        all_scores = fp.trust_scores(fps, div)
        assert fp.trust_score(1, fps, div) == all_scores[1]


class TestPooledCentroid:
    def test_mean_of_members(self):
        f_a = gauss_fp([0.0, 0.0], np.eye(2), ridge=0.1)
        f_b = gauss_fp([2.0, 0.0], 3 * np.eye(2), ridge=0.3)
        c = fp.pooled_centroid([f_a, f_b])
        assert np.array_equal(c.mean, [1.0, 0.0])
        assert np.abs(c.cov - 2 * np.eye(2)).max() < 1e-12
        assert c.ridge == pytest.approx(0.2)
