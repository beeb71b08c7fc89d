import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robayes.diffmath import ContractError
from robayes.metrics import (
    accuracy,
    auroc,
    ece,
    gaussian_kernel,
    generate_samples,
    hard_predictions,
    mmd,
    model_density_score,
    model_log_density,
    mse,
    nll,
    nll_from_log,
    reliability_diagram,
)
from robayes.models import LinearGaussianVae, Vae


def _two_class(conf, correct):
    """Binary predictive rows with the given top confidence; label matches iff correct."""
    conf = np.asarray(conf, dtype=float)
    probs = np.stack([conf, 1 - conf], axis=1)
    labels = np.where(np.asarray(correct), 0, 1)
    return probs, labels


class TestEce:
    def test_perfect_calibration(self):
        # 4 points at 0.75 with 3 correct, 2 points at 1.0 both correct
        probs, labels = _two_class([0.75] * 4 + [1.0] * 2, [1, 1, 1, 0, 1, 1])
        assert ece(probs, labels) == pytest.approx(0.0, abs=1e-12)

    def test_single_bin_gap(self):
        probs, labels = _two_class([0.9] * 10, [1] * 5 + [0] * 5)
        assert ece(probs, labels) == pytest.approx(0.4, abs=1e-9)

    def test_weighted_bins(self):
        # bin (0.7, 0.8]: one point, conf 0.8, correct -> gap 0.2
        # bin (0.6, 0.7]: three points, conf 2/3, two correct -> gap 0
        p1, l1 = _two_class([0.8], [1])
        p2, l2 = _two_class([2 / 3] * 3, [1, 1, 0])
        probs = np.vstack([p1, p2])
        labels = np.concatenate([l1, l2])
        assert ece(probs, labels) == pytest.approx(0.05, abs=1e-9)

    def test_diagram_contents(self):
        probs, labels = _two_class([0.55, 0.95, 0.95], [1, 0, 1])
        rd = reliability_diagram(probs, labels, 10)
        np.testing.assert_allclose(rd.edges, np.linspace(0, 1, 11))
        assert rd.counts.sum() == 3
        assert rd.counts[5] == 1 and rd.counts[9] == 2
        assert rd.accuracy[9] == 0.5 and rd.confidence[9] == pytest.approx(0.95)
        assert rd.empty.sum() == 8
        assert np.all((rd.accuracy >= 0) & (rd.accuracy <= 1))

    def test_bin_edges_are_right_closed(self):
        probs, labels = _two_class([0.6, 0.6000001], [1, 1])
        rd = reliability_diagram(probs, labels, 10)
        assert rd.counts[5] == 1 and rd.counts[6] == 1

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            ece(np.zeros((0, 3)), np.zeros(0))
        with pytest.raises(ContractError):
            reliability_diagram(np.ones((1, 2)) / 2, [0], 0)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10**6), n=st.integers(1, 60), k=st.integers(2, 6), bins=st.integers(1, 15))
    def test_range_and_permutation(self, seed, n, k, bins):
        rng = np.random.default_rng(seed)
        probs = rng.dirichlet(np.ones(k), size=n)
        labels = rng.integers(0, k, n)
        e = ece(probs, labels, bins)
        assert 0.0 <= e <= 1.0
        perm = rng.permutation(n)
        assert ece(probs[perm], labels[perm], bins) == pytest.approx(e, abs=1e-12)

    def test_csv(self, tmp_path):
        probs, labels = _two_class([0.55, 0.95], [1, 0])
        reliability_diagram(probs, labels).to_csv(tmp_path / "r.csv")
        rows = list(csv.reader(open(tmp_path / "r.csv")))
        assert rows[0] == ["bin_lo", "bin_hi", "count", "accuracy", "confidence"]
        assert len(rows) == 11


class TestArgmax:
    def test_ties_lowest_index(self):
        yhat, conf = hard_predictions([[0.4, 0.4, 0.2]])
        assert yhat[0] == 0 and conf[0] == 0.4

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10**6), c=st.floats(0.01, 100))
    def test_scale_invariant(self, seed, c):
        p = np.random.default_rng(seed).dirichlet(np.ones(5), size=8)
        np.testing.assert_array_equal(hard_predictions(p)[0], hard_predictions(c * p)[0])

    def test_accuracy(self):
        assert accuracy([[0.9, 0.1], [0.2, 0.8]], [0, 0]) == 0.5


class TestRegressionMetrics:
    def test_mse_zero(self):
        y = np.random.default_rng(0).standard_normal((5, 2))
        assert mse(y, y) == 0.0

    def test_mse_norm_convention(self):
        assert mse([3.0, -4.0], [0.0, 0.0]) == pytest.approx(3.5, abs=1e-12)
        assert mse([3.0, -4.0], [0.0, 0.0], squared=True) == pytest.approx(12.5, abs=1e-12)

    def test_mse_euclidean_rows(self):
        assert mse([[3.0, 4.0]], [[0.0, 0.0]]) == pytest.approx(5.0)

    @settings(max_examples=30, deadline=None)
    @given(c=st.floats(0.01, 100), seed=st.integers(0, 10**6))
    def test_mse_homogeneous(self, c, seed):
        rng = np.random.default_rng(seed)
        y, e = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
        assert mse(y + c * e, y) == pytest.approx(c * mse(y + e, y), rel=1e-9)

    def test_mse_shape_mismatch(self):
        with pytest.raises(ContractError):
            mse(np.zeros((3, 2)), np.zeros((3,)))

    def test_nll_values(self):
        assert nll([1.0, 1.0]) == 0.0
        assert nll([math.exp(-1), math.exp(-3)]) == pytest.approx(2.0, abs=1e-12)
        assert nll_from_log([-1.0, -3.0]) == pytest.approx(2.0, abs=1e-12)

    def test_nll_monotone_and_clamped(self):
        assert nll([0.5, 0.5]) < nll([0.5, 0.4])
        assert nll([0.0]) == pytest.approx(-math.log(1e-30))


class TestMmd:
    def test_identical_multisets(self):
        x = np.random.default_rng(0).standard_normal((20, 3))
        assert mmd(x, x[::-1]) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("d", [0.0, 0.3, 1.0, 2.5])
    def test_singletons(self, d):
        expected = 2.0 / math.sqrt(2 * math.pi) * (1.0 - math.exp(-(d**2) / 2))
        assert mmd([[0.0, 0.0]], [[d, 0.0]]) == pytest.approx(expected, abs=1e-9)

    def test_kernel_value(self):
        k = gaussian_kernel([[0.0]], [[1.0]])
        assert k[0, 0] == pytest.approx(math.exp(-0.5) / math.sqrt(2 * math.pi), rel=1e-14)

    def test_symmetric_nonnegative(self):
        rng = np.random.default_rng(1)
        x, y = rng.standard_normal((30, 2)), rng.standard_normal((20, 2)) + 0.5
        assert mmd(x, y) == pytest.approx(mmd(y, x), rel=1e-12)
        assert mmd(x, y) >= 0

    def test_same_vs_separated(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((500, 2)), rng.standard_normal((500, 2))
        c = rng.standard_normal((500, 2)) + 3.0
        assert mmd(a, b) < mmd(a, c)

    def test_empty(self):
        with pytest.raises(ContractError):
            mmd(np.zeros((0, 2)), np.zeros((1, 2)))


class TestAuroc:
    def test_example(self):
        assert auroc([0.9, 0.8], [0.85, 0.1]) == pytest.approx(0.75, abs=1e-12)

    def test_separated_and_identical(self):
        assert auroc([2, 3], [0, 1]) == 1.0
        assert auroc([1, 2, 3], [1, 2, 3]) == 0.5

    def test_ties_count_half(self):
        assert auroc([1.0], [1.0, 0.0]) == 0.75

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_monotone_transform(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal(15), rng.standard_normal(11) - 0.3
        assert auroc(np.exp(3 * a) + 1, np.exp(3 * b) + 1) == pytest.approx(auroc(a, b), abs=1e-12)

    def test_pairwise_definition(self):
        rng = np.random.default_rng(3)
        a, b = rng.integers(0, 5, 30).astype(float), rng.integers(0, 5, 20).astype(float)
        brute = np.mean([(x > y) + 0.5 * (x == y) for x in a for y in b])
        assert auroc(a, b) == pytest.approx(brute, abs=1e-12)

    def test_empty(self):
        with pytest.raises(ContractError):
            auroc([], [1.0])


class TestModelDensity:
    def test_linear_gaussian_oracle(self):
        rng = np.random.default_rng(0)
        vae = Vae(input_dim=3, hidden=(4,), latent_dim=2, variance=0.4, decoder_hidden=())
        dec = rng.standard_normal(vae.n_params)
        (w, b), = vae.decoder.unflatten_array(dec)
        oracle = LinearGaussianVae(w, b, 0.4)
        x = b + rng.standard_normal((4, 3))
        est = model_log_density(vae, dec[None], x, 200_000, np.random.default_rng(1))
        np.testing.assert_allclose(est, oracle.log_marginal(x), atol=0.02)

    def test_single_draw_matches_direct_average(self):
        rng = np.random.default_rng(2)
        vae = Vae(input_dim=4, hidden=(3,), latent_dim=2, variance=0.2)
        dec = rng.standard_normal((1, vae.n_params))
        x = rng.standard_normal((3, 4))
        h = np.random.default_rng(5).standard_normal((50, 2))
        means = vae.decode_array(dec, h)[0]
        dens = np.exp(-0.5 * ((x[:, None] - means[None]) ** 2).sum(-1) / 0.2) / (2 * math.pi * 0.2) ** 2
        direct = dens.mean(1)
        got = model_density_score(vae, dec, x, 50, np.random.default_rng(5))
        np.testing.assert_allclose(got, direct, rtol=1e-10)

    def test_mixture_over_draws(self):
        rng = np.random.default_rng(3)
        vae = Vae(input_dim=4, hidden=(3,), latent_dim=2, variance=0.2)
        decs = rng.standard_normal((3, vae.n_params))
        x = rng.standard_normal((2, 4))
        joint = model_density_score(vae, decs, x, 20, np.random.default_rng(9))
        # the latent draws are shared, so the joint score is the mean of per-draw scores
        per = [model_density_score(vae, d[None], x, 20, np.random.default_rng(9)) for d in decs]
        np.testing.assert_allclose(joint, np.mean(per, axis=0), rtol=1e-10)
        assert np.all(joint >= 0)

    def test_latent_draws_required(self):
        with pytest.raises(ContractError):
            model_log_density(Vae(), np.zeros((1, Vae().n_params)), np.zeros((1, 128)), 0,
                              np.random.default_rng(0))

    def test_generate_samples(self):
        vae = Vae(input_dim=4, hidden=(3,), latent_dim=2, variance=0.2)
        decs = np.random.default_rng(0).standard_normal((2, vae.n_params))
        s = generate_samples(vae, decs, 10, np.random.default_rng(1))
        assert s.shape == (10, 4)
        noisy = generate_samples(vae, decs, 10, np.random.default_rng(1), noise=True)
        assert not np.allclose(s, noisy)
