import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robayes.diffmath import ContractError, Tape
from robayes.models import (
    ENC_VAR_FLOOR,
    DenseNet,
    GaussianLocationModel,
    LinearGaussianVae,
    MlpClassifier,
    MlpRegressor,
    Vae,
    model_from_spec,
    mixture_prob,
    predictive_log_prob,
    predictive_prob,
    vae_reconstruction_terms,
)

from fdcheck import check_gradients

# log N(x | x, v) = -0.5 log(2 pi v)
LOG_PEAK_025 = -0.22579135264472738
LOG_PEAK_001 = 1.3836465597893728


class TestClosedForms:
    def test_peak_constants(self):
        assert LOG_PEAK_025 == pytest.approx(-0.5 * math.log(2 * math.pi * 0.25), rel=1e-15)
        assert LOG_PEAK_001 == pytest.approx(-0.5 * math.log(2 * math.pi * 0.01), rel=1e-15)
        assert LOG_PEAK_025 == pytest.approx(-0.22579, abs=1e-5)
        assert LOG_PEAK_001 == pytest.approx(1.38364, abs=1e-5)

    def test_location_at_mode(self):
        m = GaussianLocationModel(0.25)
        out = m.log_prob_array(np.array([0.4]), np.array([0.4]))
        np.testing.assert_allclose(out, [LOG_PEAK_025], rtol=1e-14)

    def test_location_matches_scipy(self):
        from scipy.stats import norm

        m = GaussianLocationModel(0.25)
        x = np.linspace(-2, 2, 9)
        th = np.array([[0.3], [-1.2]])
        np.testing.assert_allclose(m.log_prob_array(th, x), norm(th, 0.5).logpdf(x), rtol=1e-13)

    def test_regressor_at_mean(self):
        m = MlpRegressor((3, 4, 1), 0.01)
        th = np.random.default_rng(0).standard_normal(m.n_params)
        x = np.random.default_rng(1).standard_normal((5, 3))
        y = m.mean(th, x)[0]
        np.testing.assert_allclose(m.log_prob_array(th, x, y), LOG_PEAK_001, rtol=1e-13)

    def test_regressor_two_dim_target(self):
        m = MlpRegressor((8, 5, 2), 0.01)
        th = np.random.default_rng(0).standard_normal(m.n_params)
        x = np.random.default_rng(1).standard_normal((3, 8))
        y = m.mean(th, x)[0]
        np.testing.assert_allclose(m.log_prob_array(th, x, y), 2 * LOG_PEAK_001, rtol=1e-13)

    def test_classifier_zero_params_uniform(self):
        m = MlpClassifier()
        x = np.random.default_rng(0).standard_normal((6, 16))
        for y in range(8):
            out = m.log_prob_array(np.zeros(m.n_params), x, np.full(6, y))
            np.testing.assert_allclose(out, math.log(1 / 8), rtol=1e-14)


class TestShapesAndErrors:
    def test_wrong_theta_length(self):
        tape = Tape()
        with pytest.raises(ContractError):
            GaussianLocationModel().log_prob(tape.var(np.zeros(2)), [0.0])
        with pytest.raises(ContractError):
            MlpClassifier().log_prob(tape.var(np.zeros(5)), np.zeros((1, 16)), [0])

    def test_batched_shapes(self):
        m = MlpClassifier((4, 3, 3))
        th = np.random.default_rng(0).standard_normal((5, m.n_params))
        x = np.zeros((7, 4))
        assert m.log_prob_array(th, x, np.zeros(7)).shape == (5, 7)
        assert m.log_prob_array(th[0], x, np.zeros(7)).shape == (7,)
        assert m.predict_proba(th, x).shape == (5, 7, 3)

    def test_nonpositive_variance(self):
        with pytest.raises(ContractError):
            GaussianLocationModel(0.0)
        with pytest.raises(ContractError):
            MlpRegressor(variance=-1.0)

    def test_parameter_counts(self):
        assert MlpClassifier().n_params == 16 * 30 + 30 + 30 * 30 + 30 + 30 * 8 + 8
        assert MlpRegressor().n_params == 8 * 50 + 50 + 50 * 50 + 50 + 50 * 2 + 2
        v = Vae()
        assert v.n_encoder == 128 * 10 + 10 + 10 * 10 + 10
        assert v.n_params == 5 * 10 + 10 + 10 * 128 + 128

    def test_model_from_spec(self):
        assert isinstance(model_from_spec({"family": "gaussian-location", "fixed_variance": 0.25}),
                          GaussianLocationModel)
        v = model_from_spec({"family": "vae", "layer_widths": [10], "fixed_variance": 0.01, "latent_dim": 5})
        assert v.variance == 0.01 and v.latent_dim == 5
        with pytest.raises(ContractError):
            model_from_spec({"family": "cnn"})


class TestInvariants:
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.1, 10.0))
    def test_classifier_normalization(self, seed, scale):
        m = MlpClassifier((16, 30, 30, 8))
        rng = np.random.default_rng(seed)
        th = scale * rng.standard_normal((3, m.n_params))
        x = rng.standard_normal((4, 16))
        p = m.predict_proba(th, x)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-9)
        # log_prob agrees with predict_proba
        lp = m.log_prob_array(th, x, np.arange(4))
        np.testing.assert_allclose(np.exp(lp), p[:, np.arange(4), np.arange(4)], rtol=1e-8, atol=1e-300)

    def test_flatten_round_trip(self):
        net = DenseNet((4, 6, 3))
        th = np.random.default_rng(0).standard_normal((2, net.n_params))
        layers = net.unflatten_array(th)
        assert [w.shape for w, _ in layers] == [(2, 4, 6), (2, 6, 3)]
        np.testing.assert_array_equal(net.flatten(layers), th)
        again = net.unflatten_array(net.flatten(layers))
        for (w1, b1), (w2, b2) in zip(layers, again):
            np.testing.assert_array_equal(w1, w2)
            np.testing.assert_array_equal(b1, b2)

    def test_unflatten_tape_matches_array(self):
        net = DenseNet((3, 2))
        th = np.arange(net.n_params, dtype=float)
        tape = Tape()
        for (w, b), (wa, ba) in zip(net.unflatten(tape.var(th)), net.unflatten_array(th)):
            np.testing.assert_array_equal(w.value, wa)
            np.testing.assert_array_equal(b.value, ba)

    def test_forward_matches_numpy(self):
        net = DenseNet((3, 4, 2))
        rng = np.random.default_rng(5)
        th = rng.standard_normal(net.n_params)
        x = rng.standard_normal((6, 3))
        (w1, b1), (w2, b2) = net.unflatten_array(th)
        h = x @ w1 + b1
        h = np.where(h > 0, h, np.expm1(np.minimum(h, 0)))
        tape = Tape()
        np.testing.assert_allclose(net.forward(tape.var(th), x).value, h @ w2 + b2, rtol=1e-13)

    def test_log_prob_gradients(self):
        rng = np.random.default_rng(2)
        reg = MlpRegressor((3, 4, 2), 0.01)
        cls = MlpClassifier((3, 4, 3))
        loc = GaussianLocationModel(0.25)
        from robayes import diffmath as dm

        for i in range(20):
            x = rng.standard_normal((5, 3))
            y = rng.standard_normal((5, 2))
            labels = rng.integers(0, 3, 5)
            check_gradients(lambda t: dm.sum(reg.log_prob(t, x, y)), [0.5 * rng.standard_normal((2, reg.n_params))])
            check_gradients(lambda t: dm.sum(cls.log_prob(t, x, labels)),
                            [rng.standard_normal((2, cls.n_params))])
            xs = rng.standard_normal(4)
            check_gradients(lambda t: dm.sum(loc.log_prob(t, xs)), [rng.standard_normal((3, 1))])


class TestPredictive:
    def test_single_draw(self):
        m = GaussianLocationModel(0.25)
        x = np.array([0.1, 0.9])
        np.testing.assert_allclose(predictive_log_prob(m, np.array([[0.5]]), x),
                                   m.log_prob_array(np.array([0.5]), x), rtol=1e-14)

    def test_mixture_of_two(self):
        assert mixture_prob([0.2, 0.4]) == pytest.approx(0.3, abs=1e-15)

    def test_identical_draws(self):
        m = GaussianLocationModel(0.25)
        x = np.linspace(-1, 2, 5)
        single = predictive_prob(m, np.array([[0.3]]), x)
        np.testing.assert_allclose(predictive_prob(m, np.full((7, 1), 0.3), x), single, rtol=1e-13)

    def test_mixture_equals_mean_of_components(self):
        m = GaussianLocationModel(0.25)
        th = np.array([[0.0], [1.0], [-0.5]])
        x = np.array([0.2, 3.0])
        comp = np.exp(m.log_prob_array(th, x))
        np.testing.assert_allclose(predictive_prob(m, th, x), comp.mean(0), rtol=1e-13)

    def test_empty(self):
        with pytest.raises(ContractError):
            predictive_prob(GaussianLocationModel(), np.zeros((0, 1)), [0.0])
        with pytest.raises(ContractError):
            mixture_prob([])

    @settings(max_examples=50, deadline=None)
    @given(th=st.lists(st.floats(-3, 3), min_size=1, max_size=6), x=st.floats(-3, 3), seed=st.integers(0, 100))
    def test_permutation_and_bounds(self, th, x, seed):
        m = GaussianLocationModel(0.25)
        th = np.array(th)[:, None]
        comp = np.exp(m.log_prob_array(th, [x]))[:, 0]
        p = predictive_prob(m, th, [x])[0]
        perm = np.random.default_rng(seed).permutation(len(th))
        assert predictive_prob(m, th[perm], [x])[0] == pytest.approx(p, rel=1e-12)
        assert comp.min() * (1 - 1e-12) <= p <= comp.max() * (1 + 1e-12)


def _enc_zero_output(vae):
    """Encoder parameters whose output is mean 0 and softplus-variance 1."""
    layers = vae.encoder.unflatten_array(np.zeros(vae.n_encoder))
    w, b = layers[-1]
    b = b.copy()
    # softplus^{-1}(1 - floor), so the floored variance is exactly 1
    b[vae.latent_dim:] = math.log(math.expm1(1.0 - ENC_VAR_FLOOR))
    layers[-1] = (w, b)
    return vae.encoder.flatten(layers)


class TestVae:
    def test_encoder_standard_normal_gives_zero_kl(self):
        vae = Vae()
        tape = Tape()
        x = np.random.default_rng(0).standard_normal((3, 128))
        enc = tape.var(_enc_zero_output(vae))
        dec = tape.var(np.zeros(vae.n_params))
        _, kl = vae_reconstruction_terms(vae, enc, dec, x, np.zeros((3, 5)))
        np.testing.assert_allclose(kl.value, 0.0, atol=1e-14)

    @pytest.mark.parametrize("variance", [0.1, 0.01])
    def test_decoder_equal_to_x(self, variance):
        # a zero decoder with zero latent reproduces x = 0 exactly
        vae = Vae(variance=variance)
        tape = Tape()
        x = np.zeros((2, 128))
        ll, _ = vae_reconstruction_terms(vae, tape.var(_enc_zero_output(vae)), tape.var(np.zeros(vae.n_params)),
                                         x, np.zeros((2, 5)))
        expected = 128 * -0.5 * math.log(2 * math.pi * variance)
        np.testing.assert_allclose(ll.value, expected, rtol=1e-14)
        if variance == 0.01:
            assert expected == pytest.approx(128 * LOG_PEAK_001, rel=1e-15)

    def test_shape_checks(self):
        vae = Vae()
        tape = Tape()
        with pytest.raises(ContractError):
            vae_reconstruction_terms(vae, tape.var(np.zeros(vae.n_encoder)), tape.var(np.zeros(vae.n_params)),
                                     np.zeros((2, 64)), np.zeros((2, 5)))
        with pytest.raises(ContractError):
            vae_reconstruction_terms(vae, tape.var(np.zeros(vae.n_encoder)), tape.var(np.zeros(vae.n_params)),
                                     np.zeros((2, 128)), np.zeros((3, 5)))

    def test_encoder_variance_positive(self):
        vae = Vae()
        tape = Tape()
        th = 5 * np.random.default_rng(0).standard_normal(vae.n_encoder)
        _, var = vae.encode(tape.var(th), np.random.default_rng(1).standard_normal((10, 128)))
        assert np.all(var.value > 0)

    def test_elbo_below_linear_gaussian_marginal(self):
        rng = np.random.default_rng(0)
        D, L = 6, 2
        vae = Vae(input_dim=D, hidden=(4,), latent_dim=L, variance=0.3, decoder_hidden=())
        dec = 0.7 * rng.standard_normal(vae.n_params)
        (w, b), = vae.decoder.unflatten_array(dec)
        oracle = LinearGaussianVae(w, b, 0.3)
        x = oracle.bias + rng.standard_normal((5, D))
        tape = Tape()
        for trial in range(5):
            enc = 0.5 * rng.standard_normal(vae.n_encoder)
            eps = rng.standard_normal((4000, 5, L))
            # average the one-draw terms over many latent draws for the exact ELBO
            lls = []
            kl = None
            for e in eps[:400]:
                ll, kl = vae_reconstruction_terms(vae, tape.var(enc), tape.var(dec), x, e)
                lls.append(ll.value)
            elbo = np.mean(lls, axis=0) - kl.value
            se = np.std(lls, axis=0) / math.sqrt(len(lls))
            assert np.all(elbo <= oracle.log_marginal(x) + 3 * se)

    def test_linear_oracle_matches_monte_carlo(self):
        rng = np.random.default_rng(1)
        D, L = 4, 2
        vae = Vae(input_dim=D, hidden=(3,), latent_dim=L, variance=0.5, decoder_hidden=())
        dec = rng.standard_normal(vae.n_params)
        (w, b), = vae.decoder.unflatten_array(dec)
        oracle = LinearGaussianVae(w, b, 0.5)
        x = rng.standard_normal((3, D))
        h = rng.standard_normal((200_000, L))
        means = vae.decode_array(dec, h)
        logp = -0.5 * D * math.log(2 * math.pi * 0.5) - 0.5 * ((x[None] - means[:, None]) ** 2).sum(-1) / 0.5
        mc = np.log(np.exp(logp).mean(0))
        np.testing.assert_allclose(mc, oracle.log_marginal(x), atol=0.02)
