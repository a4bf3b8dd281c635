import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from stfl.data import PartitionSpec, VerticalSplitSpec, compute_stats, partition, standardize, vertical_split
from stfl.nn import ShapeError, TrainConfig, dense_forward
from stfl.vae import (
    VaeModel,
    VaeSizing,
    encode,
    gaussianity_of_samples,
    kl_to_standard_normal,
    latent_gaussianity,
    load_vae,
    reparameterize,
    save_vae,
    train_vae,
    vae_loss,
)


def zero_model(d):
    model = VaeModel.initialize(VaeSizing(d), np.random.default_rng(0))
    model.set_parameters([np.zeros_like(p) for p in model.parameters()])
    return model


def kl_quadrature(mu, logvar):
    sd = np.exp(0.5 * logvar)
    p = stats.norm(mu, sd)

    def integrand(x):
        return p.pdf(x) * (p.logpdf(x) - stats.norm.logpdf(x))

    val, _ = integrate.quad(integrand, mu - 30 * sd, mu + 30 * sd, epsabs=1e-12, epsrel=1e-12, limit=200)
    return val


@pytest.fixture(scope="module")
def cancer_guest(cancer):
    host, (guest,) = vertical_split(cancer, VerticalSplitSpec.default(cancer.feature_names))
    st_ids, _, _ = partition(cancer.ids, PartitionSpec(seed=0))
    taught = guest.subset(st_ids)
    return standardize(taught, compute_stats(taught))


def test_sizing():
    s = VaeSizing(15)
    assert (s.hidden, s.latent) == (75, 7)
    assert VaeSizing(30).latent == 15
    with pytest.raises(ValueError):
        VaeSizing(1)


def test_zero_encoder_outputs_zero_moments(rng):
    mu, logvar = encode(zero_model(6), rng.normal(size=(4, 6)))
    assert np.all(mu == 0) and np.all(logvar == 0)


def test_encode_is_forward_then_split(rng):
    model = VaeModel.initialize(VaeSizing(8), rng)
    x = rng.normal(size=(5, 8))
    out, _ = dense_forward(model.encoder, x)
    mu, logvar = encode(model, x)
    np.testing.assert_array_equal(mu, out[:, :4])
    np.testing.assert_array_equal(logvar, out[:, 4:])


def test_thirty_feature_slice_has_fifteen_latents(rng):
    mu, _ = encode(VaeModel.initialize(VaeSizing(30), rng), rng.normal(size=(2, 30)))
    assert mu.shape == (2, 15)


def test_reparameterize_trivial_cases(rng):
    mu, e = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    np.testing.assert_array_equal(reparameterize(mu, rng.normal(size=(3, 2)), np.zeros((3, 2))), mu)
    np.testing.assert_array_equal(reparameterize(mu, np.zeros((3, 2)), e), mu + e)
    with pytest.raises(ShapeError):
        reparameterize(mu, mu, np.zeros((2, 2)))


def test_reparameterize_monte_carlo_moments():
    rng = np.random.default_rng(5)
    n = 100_000
    mu = np.array([0.7, -1.5])
    logvar = np.array([np.log(0.25), np.log(4.0)])
    z = reparameterize(np.tile(mu, (n, 1)), np.tile(logvar, (n, 1)), rng.standard_normal((n, 2)))
    var = np.exp(logvar)
    assert np.all(np.abs(z.mean(axis=0) - mu) < 4 * np.sqrt(var / n))
    # standard error of the sample variance for a normal is var * sqrt(2 / (n - 1))
    assert np.all(np.abs(z.var(axis=0, ddof=1) - var) < 4 * var * np.sqrt(2 / (n - 1)))


def test_kl_trivial_values():
    assert kl_to_standard_normal(np.zeros((2, 3)), np.zeros((2, 3))) == 0.0
    assert kl_to_standard_normal(np.ones((1, 1)), np.zeros((1, 1))) == pytest.approx(0.5, abs=1e-15)


def test_kl_matches_quadrature():
    rng = np.random.default_rng(11)
    for _ in range(10):
        mu = rng.normal(size=3)
        logvar = rng.uniform(-2, 2, size=3)
        expected = sum(kl_quadrature(m, lv) for m, lv in zip(mu, logvar))
        assert abs(kl_to_standard_normal(mu[None], logvar[None]) - expected) <= 1e-6


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=10))
def test_kl_is_non_negative(pairs):
    mu = np.array([[p[0] for p in pairs]])
    lv = np.array([[p[1] for p in pairs]])
    assert kl_to_standard_normal(mu, lv) >= 0


def test_perfect_reconstruction_at_origin_has_zero_loss():
    model = zero_model(4)
    res = vae_loss(model, np.zeros((3, 4)), np.zeros((3, 2)))
    assert res.total == 0.0 and res.kl == 0.0 and res.recon == 0.0


def test_loss_is_kl_plus_recon(rng):
    model = VaeModel.initialize(VaeSizing(6), rng)
    res = vae_loss(model, rng.normal(size=(8, 6)), rng.normal(size=(8, 3)))
    assert res.total == res.kl + res.recon


def test_vae_gradients_match_finite_differences():
    rng = np.random.default_rng(21)
    for _ in range(25):
        d = int(rng.integers(2, 6))
        model = VaeModel.initialize(VaeSizing(d), rng)
        x = rng.normal(size=(4, d))
        noise = rng.normal(size=(4, d // 2))
        grads = vae_loss(model, x, noise).gradients
        params = model.parameters()
        h = 1e-5
        for k, p in enumerate(params):
            fd = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                plus = [q.copy() for q in params]
                minus = [q.copy() for q in params]
                plus[k][idx] += h
                minus[k][idx] -= h
                model.set_parameters(plus)
                lp = vae_loss(model, x, noise).total
                model.set_parameters(minus)
                lm = vae_loss(model, x, noise).total
                fd[idx] = (lp - lm) / (2 * h)
            model.set_parameters(params)
            scale = max(np.max(np.abs(fd)), np.max(np.abs(grads[k])), 1e-8)
            assert np.max(np.abs(fd - grads[k])) / scale < 1e-4


def test_cancer_self_taught_set_size(cancer_guest):
    # floor(0.4 * 569) = 227; rounding instead of flooring would give 228
    assert abs(len(cancer_guest) - 228) <= 1
    assert cancer_guest.n_features == 15


def test_training_lowers_loss_and_is_deterministic(cancer_guest):
    cfg = TrainConfig(epochs=100, rng_seed=3)
    a = train_vae(cancer_guest.features, VaeSizing(15), cfg)
    b = train_vae(cancer_guest.features, VaeSizing(15), cfg)
    assert a.training_log[-1].total < a.training_log[0].total
    assert len(a.training_log) == 100
    assert a.fingerprint() == b.fingerprint()


def test_train_rejects_bad_input():
    with pytest.raises(ShapeError):
        train_vae(np.zeros((4, 3)), VaeSizing(4), TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train_vae(np.zeros((0, 4)), VaeSizing(4), TrainConfig(epochs=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises():
    x = np.full((4, 2), 1e200)
    with pytest.raises(FloatingPointError):
        train_vae(x, VaeSizing(2), TrainConfig(epochs=1))


def test_zero_encoder_latents_are_standard_normal():
    rep = latent_gaussianity(zero_model(4), np.zeros((20_000, 4)), seed=1)
    assert np.all(np.abs(rep.mean) < 0.03)
    assert np.all(np.abs(rep.variance - 1) < 0.05)


def test_standard_normal_samples_have_near_zero_statistic():
    z = np.random.default_rng(2).standard_normal((50_000, 5))
    assert gaussianity_of_samples(z).statistic < 1e-3


def test_save_load_round_trip(tmp_path, rng):
    model = VaeModel.initialize(VaeSizing(7), rng)
    fp = save_vae(model, tmp_path / "m.vae")
    loaded = load_vae(tmp_path / "m.vae")
    assert fp == model.fingerprint() == loaded.fingerprint()
    assert loaded.n_z == 3
    x = rng.normal(size=(2, 7))
    np.testing.assert_array_equal(encode(loaded, x)[0], encode(model, x)[0])


def test_load_rejects_corruption(tmp_path, rng):
    path = tmp_path / "m.vae"
    save_vae(VaeModel.initialize(VaeSizing(4), rng), path)
    raw = bytearray(path.read_bytes())
    raw[60] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        load_vae(path)
    path.write_bytes(b"NOTAVAE!" + bytes(raw[8:]))
    with pytest.raises(ValueError):
        load_vae(path)
