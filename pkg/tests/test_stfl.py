import numpy as np
import pytest

from stfl.data import (
    FeatureNoveltyError,
    IdOverlapError,
    PartitionSpec,
    PartyDataset,
    VerticalSplitSpec,
    compute_stats,
    partition,
    standardize,
    vertical_split,
)
from stfl.messages import GRADIENT_MESSAGE_TYPES, STFL_MESSAGE_TYPES, MessageType, ProtocolError, RowBatch
from stfl.nn import DenseLayer, MlpModel, TrainConfig, dense_forward
from stfl.psi import MODP_1536
from stfl.stfl import (
    GuestParty,
    HostParty,
    build_master_model,
    fit_classifier,
    guest_encode_batch,
    guest_selftrain,
    joint_train,
    predict,
    stfl_setup,
)
from stfl.vae import VaeModel, VaeSizing, encode, train_vae


def make_parties(cancer, seed=0, n_guests=1, vae_epochs=20, psi_mode="naive", latent_mode="mean"):
    host_all, guests_all = vertical_split(cancer, VerticalSplitSpec.default(cancer.feature_names, n_guests))
    st, tr, te = partition(cancer.ids, PartitionSpec(seed=seed))
    host = standardize(host_all.subset(tr + te), compute_stats(host_all.subset(tr)))
    guests = []
    for k, g in enumerate(guests_all, 1):
        stats = compute_stats(g.subset(st))
        guest = GuestParty(k, standardize(g.subset(tr + te), stats), standardize(g.subset(st), stats),
                           latent_mode=latent_mode, psi_mode=psi_mode, psi_group=MODP_1536, seed=seed)
        guest_selftrain(guest, TrainConfig(epochs=vae_epochs, rng_seed=seed))
        guests.append(guest)
    return HostParty(host, psi_mode=psi_mode, psi_group=MODP_1536, seed=seed), guests, tr, te


def test_cancer_master_width(cancer):
    host, guests, _, _ = make_parties(cancer, vae_epochs=1)
    host.connect(guests)
    setup = stfl_setup(host)
    assert setup.input_width == 15 + 7 == 22
    assert host.model.layers[0].weights.shape == (110, 22)
    assert len(setup.aligned_ids) == len(guests[0].data)


def test_width_with_three_guests(cancer):
    host, guests, _, _ = make_parties(cancer, n_guests=3, vae_epochs=1)
    host.connect(guests)
    setup = stfl_setup(host)
    assert setup.input_width == 15 + sum(g.data.n_features // 2 for g in guests)


def test_guest_without_novel_features_aborts(cancer):
    host, guests, _, _ = make_parties(cancer, vae_epochs=1)
    g = guests[0]
    dup = PartyDataset(g.data.ids, host.data.rows(g.data.ids)[:, :4], host.data.feature_names[:4])
    clone = GuestParty(1, dup, vae=VaeModel.initialize(VaeSizing(4), np.random.default_rng(0)), psi_mode="naive")
    host.connect([clone])
    with pytest.raises(FeatureNoveltyError):
        stfl_setup(host)


def test_disjoint_ids_abort(cancer):
    host, guests, _, _ = make_parties(cancer, vae_epochs=1, psi_mode="blinded")
    g = guests[0]
    renamed = PartyDataset([f"other-{i}" for i in g.data.ids], g.data.features, g.data.feature_names)
    stranger = GuestParty(1, renamed, vae=g.vae, psi_mode="blinded", psi_group=MODP_1536)
    host.connect([stranger])
    with pytest.raises(IdOverlapError):
        stfl_setup(host)


def test_selftrain_delegates_and_freezes(cancer):
    _, guests, _, _ = make_parties(cancer, seed=4, vae_epochs=5)
    g = guests[0]
    direct = train_vae(g.self_taught.features, VaeSizing(15), TrainConfig(epochs=5, rng_seed=4))
    assert g.fingerprint() == direct.fingerprint() == g.frozen_fingerprint
    assert g.fingerprint() == g.fingerprint()
    assert abs(len(g.self_taught) - 228) <= 1


def test_selftrain_needs_rows(cancer):
    g = GuestParty(1, PartyDataset(["a"], np.zeros((1, 2)), ["x", "y"]))
    with pytest.raises(ValueError):
        guest_selftrain(g, TrainConfig(epochs=1))


def test_encode_batch_is_mu_and_repeatable(cancer):
    _, guests, tr, _ = make_parties(cancer, vae_epochs=2)
    g = guests[0]
    ids = tr[:9]
    a = guest_encode_batch(g, ids)
    np.testing.assert_array_equal(a, guest_encode_batch(g, ids))
    np.testing.assert_array_equal(a, encode(g.vae, g.data.rows(ids))[0])
    assert a.shape == (9, 7)
    with pytest.raises(ProtocolError):
        g.encode_batch(["missing"])


def test_sample_mode_draws_fresh_latents(cancer):
    _, guests, tr, _ = make_parties(cancer, vae_epochs=2, latent_mode="sample")
    g = guests[0]
    assert not np.array_equal(g.encode_batch(tr[:5]), g.encode_batch(tr[:5]))


def test_joint_training_keeps_guests_frozen_and_learns(cancer):
    host, guests, tr, te = make_parties(cancer, vae_epochs=20)
    before = [g.fingerprint() for g in guests]
    host.connect(guests, record=True)
    stfl_setup(host)
    res = joint_train(host, tr, TrainConfig(epochs=100), guests)
    assert [g.fingerprint() for g in guests] == before
    assert res.history[-1].loss < res.history[0].loss
    assert len(res.history) == 100


def test_wire_carries_only_latents(cancer):
    host, guests, tr, te = make_parties(cancer, vae_epochs=5)
    g = guests[0]
    host.connect(guests, record=True)
    stfl_setup(host)
    joint_train(host, tr, TrainConfig(epochs=2), guests)
    predict(host, te, share=True)
    records = host.links[0].channel.records
    seen = {m.type for _, m in records}
    assert seen <= STFL_MESSAGE_TYPES
    assert not seen & GRADIENT_MESSAGE_TYPES
    for direction, msg in records:
        if isinstance(msg.payload, RowBatch):
            m = msg.payload.matrix
            if direction == "received":
                assert msg.type is MessageType.LATENT_BATCH
                assert m.shape[1] == g.latent_width
                np.testing.assert_array_equal(m, g.encode_batch(msg.payload.ids))
                rows = g.data.row_indices(msg.payload.ids)
                for col in m.T:
                    for raw in g.data.features[rows].T:
                        assert not np.allclose(col, raw)
            else:
                assert msg.type is MessageType.PREDICTIONS


def test_guest_refuses_ids_outside_intersection(cancer):
    host, guests, tr, _ = make_parties(cancer, vae_epochs=1)
    host.connect(guests)
    stfl_setup(host)
    guests[0].intersection = tr[:3]
    with pytest.raises(ProtocolError):
        host.gather(tr[:5])
    with pytest.raises(ValueError):
        joint_train(host, ["never-seen"], TrainConfig(epochs=1))


def test_identity_encoder_reduces_to_centralized(cancer):
    host_all, (guest_all,) = vertical_split(cancer, VerticalSplitSpec.default(cancer.feature_names))
    _, tr, te = partition(cancer.ids, PartitionSpec(seed=2))
    host = standardize(host_all.subset(tr + te), compute_stats(host_all.subset(tr)))
    gdata = standardize(guest_all.subset(tr + te), compute_stats(guest_all.subset(tr)))
    d = gdata.n_features
    enc = MlpModel([DenseLayer(np.vstack([np.eye(d), np.zeros((d, d))]), np.zeros(2 * d))])
    dec = MlpModel([DenseLayer(np.eye(d), np.zeros(d))])
    guest = GuestParty(1, gdata, vae=VaeModel(enc, dec, d), psi_mode="naive")
    hp = HostParty(host, psi_mode="naive", seed=2)
    hp.connect([guest])
    stfl_setup(hp)
    cfg = TrainConfig(epochs=30, rng_seed=2)
    joint_train(hp, tr, cfg, [guest])

    x = np.hstack([host.rows(tr), gdata.rows(tr)])
    central = build_master_model(x.shape[1], 2)
    fit_classifier(central, lambda idx: x[idx], host.labels[host.row_indices(tr)], cfg)
    for a, b in zip(hp.model.parameters(), central.parameters()):
        assert np.max(np.abs(a - b)) <= 1e-10
    xt = np.hstack([host.rows(te), gdata.rows(te)])
    assert np.max(np.abs(predict(hp, te) - dense_forward(central, xt)[0])) <= 1e-10


def test_zero_output_layer_predicts_half(cancer):
    host, guests, tr, te = make_parties(cancer, vae_epochs=1)
    host.connect(guests)
    stfl_setup(host)
    last = host.model.layers[-1]
    last.weights[:] = 0
    last.bias[:] = 0
    assert np.all(predict(host, te) == 0.5)


def test_predict_is_forward_on_concatenation(cancer):
    host, guests, tr, te = make_parties(cancer, vae_epochs=2)
    host.connect(guests)
    stfl_setup(host)
    joint_train(host, tr, TrainConfig(epochs=3), guests)
    x = np.hstack([host.data.rows(te), guests[0].encode_batch(te)])
    np.testing.assert_array_equal(predict(host, te), dense_forward(host.model, x)[0])


def test_runs_are_bit_identical_and_tcp_matches(cancer):
    fps = []
    for transport in ("in-process", "in-process", "tcp"):
        host, guests, tr, te = make_parties(cancer, seed=1, vae_epochs=3, n_guests=2)
        host.connect(guests, transport)
        try:
            stfl_setup(host)
            joint_train(host, tr, TrainConfig(epochs=3, rng_seed=1), guests)
            fps.append(host.model.fingerprint())
        finally:
            host.close()
    assert fps[0] == fps[1] == fps[2]


def test_setup_requires_guests(cancer):
    host, _, _, _ = make_parties(cancer, vae_epochs=1)
    with pytest.raises(ValueError):
        stfl_setup(host)
    with pytest.raises(RuntimeError):
        joint_train(host, [], TrainConfig(epochs=1))
