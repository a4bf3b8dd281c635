import numpy as np
import pytest
from hypothesis import given, strategies as st

from stfl.paillier import (
    HeadroomError,
    KeyMismatchError,
    PaillierPrivateKey,
    RandomSource,
    add_cipher,
    add_plain,
    decode_fixed,
    decrypt_matrix,
    dump_private_key,
    dump_public_key,
    encode_fixed,
    encrypt_matrix,
    keygen,
    load_private_key,
    load_public_key,
    mul_plain,
)

ULP = 2.0 ** -40


def test_keygen_produces_requested_size(keypair512):
    pub, priv = keypair512
    assert pub.bits == 512
    assert priv.p * priv.q == pub.n
    assert pub.g == pub.n + 1


def test_keygen_rejects_unsupported_size():
    with pytest.raises(ValueError):
        keygen(256)


def test_keygen_is_deterministic_for_a_seed():
    a, _ = keygen(512, RandomSource("same"))
    b, _ = keygen(512, RandomSource("same"))
    c, _ = keygen(512, RandomSource("other"))
    assert a.n == b.n != c.n


def test_small_integers_round_trip(keypair512):
    pub, priv = keypair512
    rng = RandomSource(1)
    for m in range(101):
        assert priv.decrypt(pub.encrypt(m, rng)) == m


def test_encryption_is_randomized(keypair512):
    pub, priv = keypair512
    rng = RandomSource(2)
    a, b = pub.encrypt(5, rng), pub.encrypt(5, rng)
    assert a.value != b.value
    assert priv.decrypt(a) == priv.decrypt(b) == 5


def test_residues_near_modulus_round_trip(keypair512):
    pub, priv = keypair512
    rng = RandomSource(3)
    for m in (pub.n - 1, pub.n - 2, pub.n // 2, pub.n // 2 + 1):
        assert priv.raw_decrypt(pub.raw_encrypt(m, rng)) == m
    # n - 1 is the residue of -1 in the signed view
    assert priv.decrypt(pub.encrypt(-1, rng)) == -1


def test_crt_and_textbook_decryption_agree(keypair512):
    pub, priv = keypair512
    rng = RandomSource(4)
    for _ in range(20):
        m = rng.randbelow(pub.n)
        c = pub.raw_encrypt(m, rng)
        assert priv.raw_decrypt(c) == priv.raw_decrypt_textbook(c) == m


def test_homomorphic_addition_and_identity_scalar(keypair512):
    pub, priv = keypair512
    rng = RandomSource(5)
    assert priv.decrypt(add_cipher(pub.encrypt(3, rng), pub.encrypt(4, rng))) == 7
    c = pub.encrypt(-12.375, rng)
    assert priv.decrypt(mul_plain(c, 1)) == -12.375


def test_fixed_point_product(keypair512):
    pub, priv = keypair512
    out = priv.decrypt(mul_plain(pub.encrypt(1.5, RandomSource(6)), 2.0))
    assert abs(out - 3.0) <= 2 * ULP


def test_operator_sugar(keypair512):
    pub, priv = keypair512
    rng = RandomSource(7)
    a, b = pub.encrypt(2.5, rng), pub.encrypt(-1.25, rng)
    assert abs(priv.decrypt(a + b) - 1.25) <= 2 * ULP
    assert abs(priv.decrypt(a - b) - 3.75) <= 2 * ULP
    assert abs(priv.decrypt(a * 4) - 10.0) <= 2 * ULP
    assert abs(priv.decrypt(a + 0.5) - 3.0) <= 2 * ULP


def test_integer_ciphertext_rejects_real_addend(keypair512):
    pub, _ = keypair512
    with pytest.raises(ValueError):
        add_plain(pub.encrypt(3, RandomSource(8)), 0.5)


def test_key_mismatch_is_detected(keypair512):
    pub, priv = keypair512
    other, other_priv = keygen(512, RandomSource("mismatch"))
    with pytest.raises(KeyMismatchError):
        add_cipher(pub.encrypt(1, RandomSource(9)), other.encrypt(1, RandomSource(9)))
    with pytest.raises(KeyMismatchError):
        decrypt_matrix(other_priv, encrypt_matrix(pub, np.zeros((1, 1)), RandomSource(9)))


@pytest.mark.parametrize("key", ["keypair512", "keypair1024"])
def test_thousand_random_values_round_trip_and_combine(key, request):
    pub, priv = request.getfixturevalue(key)
    gen = np.random.default_rng(10)
    rng = RandomSource(10)
    xs = gen.uniform(-1000, 1000, size=1000)
    ys = gen.uniform(-1000, 1000, size=1000)
    ks = gen.uniform(-10, 10, size=1000)
    for x, y, k in zip(xs, ys, ks):
        cx = pub.encrypt(float(x), rng)
        assert abs(priv.decrypt(cx) - x) <= ULP
        assert abs(priv.decrypt(add_cipher(cx, pub.encrypt(float(y), rng))) - (x + y)) <= 2 * ULP
        # product error: rounding of x and k, each scaled by the other operand
        prod = priv.decrypt(mul_plain(cx, float(k)))
        assert abs(prod - x * k) <= (abs(k) + abs(x) + 1) * ULP


def test_headroom_for_one_product_and_1024_additions(keypair512):
    pub, priv = keypair512
    rng = RandomSource(11)
    x = float(2 ** 20 - 1)
    acc = mul_plain(pub.encrypt(x, rng), x)
    term = acc
    for _ in range(2 ** 10):
        acc = add_cipher(acc, term)
    assert priv.decrypt(acc) == pytest.approx(1025 * x * x, rel=1e-12)


def test_headroom_overflow_is_refused(keypair512):
    pub, _ = keypair512
    c = pub.encrypt(1.0, RandomSource(12))
    with pytest.raises(HeadroomError):
        for _ in range(20):
            c = mul_plain(c, 1000.0)


def test_encode_decode_fixed():
    assert encode_fixed(1.5, 40) == 3 << 39
    assert decode_fixed(3 << 39, 40) == 1.5
    assert decode_fixed(encode_fixed(-7, 0), 0) == -7
    big = (1 << 300) + 1
    assert decode_fixed(big, 280) == pytest.approx(2.0 ** 20, rel=1e-15)


def test_matrix_round_trip_and_zero(keypair512):
    pub, priv = keypair512
    rng = RandomSource(13)
    m = np.random.default_rng(13).uniform(-50, 50, size=(4, 3))
    assert np.max(np.abs(decrypt_matrix(priv, encrypt_matrix(pub, m, rng)) - m)) <= ULP
    z = np.zeros((2, 2))
    np.testing.assert_array_equal(decrypt_matrix(priv, encrypt_matrix(pub, z, rng)), z)


def test_matrix_value_cap(keypair512):
    pub, _ = keypair512
    with pytest.raises(HeadroomError):
        encrypt_matrix(pub, np.array([[2.0 ** 21]]), RandomSource(14))


def test_encrypted_matrix_products_match_plain(keypair512):
    pub, priv = keypair512
    gen = np.random.default_rng(15)
    a = gen.normal(size=(3, 4))
    w = gen.normal(size=(4, 2))
    v = gen.normal(size=(5, 3))
    enc = encrypt_matrix(pub, a, RandomSource(15))
    np.testing.assert_allclose(decrypt_matrix(priv, enc.matmul_plain(w)), a @ w, atol=1e-9)
    np.testing.assert_allclose(decrypt_matrix(priv, enc.rmatmul_plain(v)), v @ a, atol=1e-9)


def test_encrypted_matrix_add_and_negate(keypair512):
    pub, priv = keypair512
    gen = np.random.default_rng(16)
    a, b, c = gen.normal(size=(2, 3)), gen.normal(size=(2, 3)), gen.normal(size=(2, 3))
    rng = RandomSource(16)
    ea, eb = encrypt_matrix(pub, a, rng), encrypt_matrix(pub, b, rng)
    np.testing.assert_allclose(decrypt_matrix(priv, ea.add(eb)), a + b, atol=1e-11)
    np.testing.assert_allclose(decrypt_matrix(priv, ea.add_plain(c)), a + c, atol=1e-11)
    np.testing.assert_allclose(decrypt_matrix(priv, ea.negate()), -a, atol=1e-11)
    # mixed scales: a product (scale 80) plus a fresh encryption (scale 40)
    prod = ea.matmul_plain(np.eye(3))
    np.testing.assert_allclose(decrypt_matrix(priv, prod.add(eb)), a + b, atol=1e-11)


def test_key_text_round_trip(keypair512):
    pub, priv = keypair512
    text = dump_public_key(pub)
    assert text.startswith("stfl-paillier-public v1")
    assert load_public_key(text) == pub
    restored = load_private_key(dump_private_key(priv))
    assert restored.public == pub and (restored.p, restored.q) == (priv.p, priv.q)
    with pytest.raises(ValueError):
        load_public_key(text.replace("v1", "v9"))


def test_private_key_rejects_wrong_factors(keypair512):
    pub, priv = keypair512
    with pytest.raises(ValueError):
        PaillierPrivateKey(pub, priv.p, priv.q + 2)


def test_random_source_is_reproducible():
    a, b = RandomSource("x"), RandomSource("x")
    assert [a.randbelow(1000) for _ in range(5)] == [b.randbelow(1000) for _ in range(5)]
    u = RandomSource(1).uniform(-1, 1, (3, 2))
    assert u.shape == (3, 2) and np.all(np.abs(u) <= 1)


@given(st.floats(-1e6, 1e6, allow_nan=False), st.floats(-1e6, 1e6, allow_nan=False))
def test_addition_property(keypair512, x, y):
    pub, priv = keypair512
    rng = RandomSource(17)
    assert abs(priv.decrypt(pub.encrypt(x, rng) + pub.encrypt(y, rng)) - (x + y)) <= 2 * ULP

