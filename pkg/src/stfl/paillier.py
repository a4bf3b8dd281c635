"""Paillier cryptosystem (g = n + 1) with fixed-point encoding of reals.

Plaintexts are integers mod ``n``; negative values live in the upper half of
the ring. Reals are scaled by ``2**scale`` and every ciphertext carries its
scale, so a plaintext multiply by a real adds ``frac_bits`` to the scale and
additions align scales first.

Each ciphertext also carries a public upper bound on the magnitude of its
plaintext integer. Operations that could push that bound past ``n / 3`` raise
:class:`HeadroomError` instead of silently wrapping.
"""

from __future__ import annotations

import hashlib
import math
import secrets
import time
from fractions import Fraction
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Tuple, Union

import gmpy2
import numpy as np

DEFAULT_FRAC_BITS = 40
DEFAULT_VALUE_CAP = 2 ** 20
MILLER_RABIN_ROUNDS = 40
KEY_SIZES = (512, 1024, 2048)

Number = Union[int, float]


class KeyMismatchError(ValueError):
    """Ciphertexts under different keys were combined."""


class HeadroomError(OverflowError):
    """A value or operation would exceed the fixed-point headroom."""


class RandomSource:
    """Seedable byte source.

    Without a seed it defers to :mod:`secrets`. With a seed it runs SHA-256 in
    counter mode over the seed, which keeps tests and experiments reproducible.
    """

    def __init__(self, seed: Union[None, int, bytes, str] = None):
        if seed is None:
            self._key = None
        else:
            if isinstance(seed, int):
                seed = seed.to_bytes((seed.bit_length() + 8) // 8, "big", signed=True)
            elif isinstance(seed, str):
                seed = seed.encode()
            self._key = hashlib.sha256(b"stfl-drbg" + seed).digest()
        self._counter = 0

    def randbytes(self, k: int) -> bytes:
        if self._key is None:
            return secrets.token_bytes(k)
        out = bytearray()
        while len(out) < k:
            out += hashlib.sha256(self._key + self._counter.to_bytes(8, "big")).digest()
            self._counter += 1
        return bytes(out[:k])

    def randbits(self, k: int) -> int:
        raw = int.from_bytes(self.randbytes((k + 7) // 8), "big")
        return raw >> ((8 - k % 8) % 8)

    def randbelow(self, upper: int) -> int:
        if upper <= 0:
            raise ValueError("upper must be positive")
        k = upper.bit_length()
        while True:
            r = self.randbits(k)
            if r < upper:
                return r

    def uniform(self, low: float, high: float, shape: Tuple[int, ...]) -> np.ndarray:
        """Floats from a numpy generator seeded off this stream."""
        gen = np.random.default_rng(int.from_bytes(self.randbytes(16), "big"))
        return gen.uniform(low, high, size=shape)


def _random_prime(bits: int, rng: RandomSource, deadline: float) -> int:
    while True:
        if time.monotonic() > deadline:
            raise TimeoutError(f"could not find a {bits}-bit prime in time")
        cand = rng.randbits(bits) | (0b11 << (bits - 2)) | 1
        if gmpy2.is_prime(cand, MILLER_RABIN_ROUNDS):
            return int(cand)


@dataclass(frozen=True)
class PaillierPublicKey:
    n: int

    @cached_property
    def g(self) -> int:
        return self.n + 1

    @cached_property
    def n_sq(self) -> int:
        return self.n * self.n

    @cached_property
    def max_int(self) -> int:
        return self.n // 3

    @cached_property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.n.to_bytes((self.n.bit_length() + 7) // 8, "big")).hexdigest()[:16]

    @property
    def bits(self) -> int:
        return self.n.bit_length()

    @property
    def ciphertext_bytes(self) -> int:
        return (self.n_sq.bit_length() + 7) // 8

    def raw_encrypt(self, m: int, rng: Optional[RandomSource] = None) -> int:
        """Encrypt an integer in ``[0, n)``; returns the bare ciphertext integer."""
        if not 0 <= m < self.n:
            raise ValueError("raw plaintext must lie in [0, n)")
        rng = rng or RandomSource()
        while True:
            r = rng.randbelow(self.n)
            if r > 0 and math.gcd(r, self.n) == 1:
                break
        n_sq = gmpy2.mpz(self.n_sq)
        # g^m = 1 + n*m mod n^2 when g = n + 1
        return int((1 + self.n * m) % n_sq * gmpy2.powmod(r, self.n, n_sq) % n_sq)

    def encrypt(self, value: Number, rng: Optional[RandomSource] = None,
                frac_bits: int = DEFAULT_FRAC_BITS) -> "Ciphertext":
        """Encrypt an int exactly (scale 0) or a float at ``frac_bits``."""
        scale = 0 if isinstance(value, (int, np.integer)) else frac_bits
        enc = encode_fixed(value, scale)
        bound = max(abs(enc), DEFAULT_VALUE_CAP << scale)
        self._check(bound)
        return Ciphertext(self.raw_encrypt(enc % self.n, rng), self, scale, bound)

    def _check(self, bound: int) -> None:
        if bound >= self.max_int:
            raise HeadroomError(
                f"plaintext bound 2^{bound.bit_length()} exceeds headroom n/3 "
                f"(2^{self.max_int.bit_length()})"
            )


@dataclass(frozen=True)
class PaillierPrivateKey:
    public: PaillierPublicKey
    p: int
    q: int

    def __post_init__(self) -> None:
        if self.p * self.q != self.public.n:
            raise ValueError("p * q does not match the public modulus")

    @cached_property
    def lam(self) -> int:
        return math.lcm(self.p - 1, self.q - 1)

    @cached_property
    def mu(self) -> int:
        return int(gmpy2.invert(self.lam, self.public.n))

    @cached_property
    def _crt(self):
        p, q = gmpy2.mpz(self.p), gmpy2.mpz(self.q)
        g = gmpy2.mpz(self.public.g)
        hp = gmpy2.invert((gmpy2.powmod(g, p - 1, p * p) - 1) // p, p)
        hq = gmpy2.invert((gmpy2.powmod(g, q - 1, q * q) - 1) // q, q)
        return p, q, p * p, q * q, hp, hq, gmpy2.invert(p, q)

    def raw_decrypt_textbook(self, c: int) -> int:
        """L(c^lambda mod n^2) * mu mod n."""
        n = self.public.n
        u = gmpy2.powmod(c, self.lam, self.public.n_sq)
        return int((u - 1) // n * self.mu % n)

    def raw_decrypt(self, c: int) -> int:
        # CRT split over p^2 and q^2; equal to raw_decrypt_textbook
        p, q, p2, q2, hp, hq, p_inv = self._crt
        mp = (gmpy2.powmod(c % p2, p - 1, p2) - 1) // p * hp % p
        mq = (gmpy2.powmod(c % q2, q - 1, q2) - 1) // q * hq % q
        return int(mp + (mq - mp) * p_inv % q * p)

    def decrypt(self, c: "Ciphertext") -> Number:
        if c.key.n != self.public.n:
            raise KeyMismatchError("ciphertext was produced under another key")
        m = self.raw_decrypt(c.value)
        if m > self.public.n // 2:
            m -= self.public.n
        if c.scale == 0:
            return m
        return decode_fixed(m, c.scale)


def keygen(bits: int = 1024, rng: Optional[RandomSource] = None,
           timeout: float = 120.0) -> Tuple[PaillierPublicKey, PaillierPrivateKey]:
    if bits not in KEY_SIZES:
        raise ValueError(f"key size must be one of {KEY_SIZES}")
    rng = rng or RandomSource()
    deadline = time.monotonic() + timeout
    half = bits // 2
    while True:
        p = _random_prime(half, rng, deadline)
        q = _random_prime(bits - half, rng, deadline)
        n = p * q
        if p != q and n.bit_length() == bits and math.gcd(n, (p - 1) * (q - 1)) == 1:
            break
    pub = PaillierPublicKey(n)
    return pub, PaillierPrivateKey(pub, p, q)


def encode_fixed(value: Number, scale: int) -> int:
    if isinstance(value, (int, np.integer)):
        return int(value) << scale
    v = float(value)
    if not math.isfinite(v):
        raise ValueError("cannot encode a non-finite value")
    return int(round(math.ldexp(v, scale)))


def decode_fixed(m: int, scale: int) -> float:
    if abs(m).bit_length() < 1000:
        return math.ldexp(float(m), -scale)
    return float(Fraction(m, 1 << scale))


@dataclass(frozen=True)
class Ciphertext:
    value: int
    key: PaillierPublicKey
    scale: int
    bound: int

    @property
    def key_fingerprint(self) -> str:
        return self.key.fingerprint

    def _same_key(self, other: "Ciphertext") -> None:
        if other.key.n != self.key.n:
            raise KeyMismatchError("ciphertexts are under different keys")

    def rescale(self, scale: int) -> "Ciphertext":
        if scale < self.scale:
            raise ValueError("cannot drop fractional bits from a ciphertext")
        if scale == self.scale:
            return self
        shift = scale - self.scale
        bound = self.bound << shift
        self.key._check(bound)
        v = gmpy2.powmod(self.value, 1 << shift, self.key.n_sq)
        return Ciphertext(int(v), self.key, scale, bound)

    def __add__(self, other: Union["Ciphertext", Number]) -> "Ciphertext":
        if isinstance(other, Ciphertext):
            return add_cipher(self, other)
        return add_plain(self, other)

    __radd__ = __add__

    def __mul__(self, k: Number) -> "Ciphertext":
        return mul_plain(self, k)

    __rmul__ = __mul__

    def __neg__(self) -> "Ciphertext":
        return mul_plain(self, -1)

    def __sub__(self, other: Union["Ciphertext", Number]) -> "Ciphertext":
        return self + (-other)


def add_cipher(c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    c1._same_key(c2)
    scale = max(c1.scale, c2.scale)
    a, b = c1.rescale(scale), c2.rescale(scale)
    bound = a.bound + b.bound
    c1.key._check(bound)
    return Ciphertext(a.value * b.value % c1.key.n_sq, c1.key, scale, bound)


def add_plain(c: Ciphertext, k: Number) -> Ciphertext:
    """Add a plaintext encoded at the ciphertext's own scale."""
    if isinstance(k, (float, np.floating)) and c.scale == 0:
        raise ValueError("adding a real to an integer-scale ciphertext; rescale first")
    enc = encode_fixed(k, 0) << c.scale if isinstance(k, (int, np.integer)) else encode_fixed(k, c.scale)
    bound = c.bound + abs(enc)
    c.key._check(bound)
    n = c.key.n
    return Ciphertext(c.value * (1 + n * (enc % n)) % c.key.n_sq, c.key, c.scale, bound)


def mul_plain(c: Ciphertext, k: Number, frac_bits: int = DEFAULT_FRAC_BITS) -> Ciphertext:
    """Multiply by a plaintext; ints keep the scale, reals add ``frac_bits``."""
    scale = 0 if isinstance(k, (int, np.integer)) else frac_bits
    enc = encode_fixed(k, scale)
    bound = c.bound * abs(enc)
    c.key._check(bound)
    return Ciphertext(int(gmpy2.powmod(c.value, enc, c.key.n_sq)), c.key, c.scale + scale, bound)


# -- matrices -----------------------------------------------------------------

@dataclass
class EncryptedMatrix:
    """Elementwise-encrypted 2-D array sharing one scale and one magnitude bound."""

    values: np.ndarray  # object array of ints
    key: PaillierPublicKey
    scale: int
    bound: int

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    def cell(self, i: int, j: int) -> Ciphertext:
        return Ciphertext(int(self.values[i, j]), self.key, self.scale, self.bound)

    def _same_key(self, other: "EncryptedMatrix") -> None:
        if other.key.n != self.key.n:
            raise KeyMismatchError("encrypted matrices are under different keys")

    def rescale(self, scale: int) -> "EncryptedMatrix":
        if scale == self.scale:
            return self
        if scale < self.scale:
            raise ValueError("cannot drop fractional bits")
        shift = scale - self.scale
        bound = self.bound << shift
        self.key._check(bound)
        n_sq = gmpy2.mpz(self.key.n_sq)
        f = 1 << shift
        vals = _map_obj(lambda v: gmpy2.powmod(v, f, n_sq), self.values)
        return EncryptedMatrix(vals, self.key, scale, bound)

    def add(self, other: "EncryptedMatrix") -> "EncryptedMatrix":
        self._same_key(other)
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        scale = max(self.scale, other.scale)
        a, b = self.rescale(scale), other.rescale(scale)
        bound = a.bound + b.bound
        self.key._check(bound)
        n_sq = gmpy2.mpz(self.key.n_sq)
        vals = np.empty(self.shape, dtype=object)
        for idx in np.ndindex(self.shape):
            vals[idx] = a.values[idx] * b.values[idx] % n_sq
        return EncryptedMatrix(vals, self.key, scale, bound)

    def add_plain(self, plain: np.ndarray) -> "EncryptedMatrix":
        plain = np.asarray(plain, dtype=np.float64)
        if plain.shape != self.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {plain.shape}")
        n = self.key.n
        n_sq = gmpy2.mpz(self.key.n_sq)
        enc = [encode_fixed(x, self.scale) for x in plain.ravel()]
        bound = self.bound + max((abs(e) for e in enc), default=0)
        self.key._check(bound)
        vals = np.empty(self.shape, dtype=object)
        for flat, idx in enumerate(np.ndindex(self.shape)):
            vals[idx] = self.values[idx] * (1 + n * (enc[flat] % n)) % n_sq
        return EncryptedMatrix(vals, self.key, self.scale, bound)

    def negate(self) -> "EncryptedMatrix":
        n_sq = gmpy2.mpz(self.key.n_sq)
        return EncryptedMatrix(_map_obj(lambda v: gmpy2.invert(v, n_sq), self.values),
                               self.key, self.scale, self.bound)

    def matmul_plain(self, plain: np.ndarray, frac_bits: int = DEFAULT_FRAC_BITS) -> "EncryptedMatrix":
        """``self @ plain`` with ``plain`` of shape (cols, k)."""
        plain = np.asarray(plain, dtype=np.float64)
        if plain.ndim != 2 or plain.shape[0] != self.shape[1]:
            raise ValueError(f"cannot multiply {self.shape} by {plain.shape}")
        enc = _encode_array(plain, frac_bits)
        col_norm = max((sum(abs(enc[j][o]) for j in range(plain.shape[0])) for o in range(plain.shape[1])), default=0)
        bound = self.bound * col_norm
        self.key._check(bound)
        n_sq = gmpy2.mpz(self.key.n_sq)
        rows, inner = self.shape
        out = np.empty((rows, plain.shape[1]), dtype=object)
        for i in range(rows):
            row = self.values[i]
            for o in range(plain.shape[1]):
                out[i, o] = _prod_pow([row[j] for j in range(inner)], [enc[j][o] for j in range(inner)], n_sq)
        return EncryptedMatrix(out, self.key, self.scale + frac_bits, bound)

    def rmatmul_plain(self, plain: np.ndarray, frac_bits: int = DEFAULT_FRAC_BITS) -> "EncryptedMatrix":
        """``plain @ self`` with ``plain`` of shape (k, rows)."""
        plain = np.asarray(plain, dtype=np.float64)
        if plain.ndim != 2 or plain.shape[1] != self.shape[0]:
            raise ValueError(f"cannot multiply {plain.shape} by {self.shape}")
        enc = _encode_array(plain, frac_bits)
        row_norm = max((sum(abs(v) for v in r) for r in enc), default=0)
        bound = self.bound * row_norm
        self.key._check(bound)
        n_sq = gmpy2.mpz(self.key.n_sq)
        rows, cols = self.shape
        out = np.empty((plain.shape[0], cols), dtype=object)
        for o in range(plain.shape[0]):
            for j in range(cols):
                out[o, j] = _prod_pow([self.values[i, j] for i in range(rows)], enc[o], n_sq)
        return EncryptedMatrix(out, self.key, self.scale + frac_bits, bound)

    def to_ints(self) -> np.ndarray:
        return _map_obj(int, self.values)


def _map_obj(fn, arr: np.ndarray) -> np.ndarray:
    out = np.empty(arr.shape, dtype=object)
    for idx in np.ndindex(arr.shape):
        out[idx] = fn(arr[idx])
    return out


def _encode_array(plain: np.ndarray, frac_bits: int):
    return [[encode_fixed(x, frac_bits) for x in row] for row in plain]


def _prod_pow(bases: Sequence, exps: Sequence[int], n_sq) -> "gmpy2.mpz":
    acc = gmpy2.mpz(1)
    for b, e in zip(bases, exps):
        if e == 0:
            continue
        acc = acc * gmpy2.powmod(b, e, n_sq) % n_sq
    return acc


def encrypt_matrix(key: PaillierPublicKey, matrix: np.ndarray, rng: Optional[RandomSource] = None,
                   frac_bits: int = DEFAULT_FRAC_BITS, value_cap: int = DEFAULT_VALUE_CAP) -> EncryptedMatrix:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError("encrypt_matrix expects a 2-D array")
    if np.any(np.abs(matrix) > value_cap):
        raise HeadroomError(f"matrix entries exceed the value cap {value_cap}")
    rng = rng or RandomSource()
    bound = value_cap << frac_bits
    key._check(bound)
    vals = np.empty(matrix.shape, dtype=object)
    for idx in np.ndindex(matrix.shape):
        vals[idx] = gmpy2.mpz(key.raw_encrypt(encode_fixed(matrix[idx], frac_bits) % key.n, rng))
    return EncryptedMatrix(vals, key, frac_bits, bound)


def decrypt_matrix(key: PaillierPrivateKey, enc: EncryptedMatrix) -> np.ndarray:
    if enc.key.n != key.public.n:
        raise KeyMismatchError("matrix was encrypted under another key")
    n = key.public.n
    half = n // 2
    out = np.empty(enc.shape, dtype=np.float64)
    for idx in np.ndindex(enc.shape):
        m = key.raw_decrypt(enc.values[idx])
        if m > half:
            m -= n
        out[idx] = decode_fixed(m, enc.scale)
    return out


# -- key serialization ----------------------------------------------------------

_PUBLIC_HEADER = "stfl-paillier-public v1"
_PRIVATE_HEADER = "stfl-paillier-private v1"


def dump_public_key(key: PaillierPublicKey) -> str:
    return f"{_PUBLIC_HEADER}\nn={key.n:x}\n"


def dump_private_key(key: PaillierPrivateKey) -> str:
    return f"{_PRIVATE_HEADER}\nn={key.public.n:x}\np={key.p:x}\nq={key.q:x}\n"


def _parse(text: str, header: str) -> dict:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines or lines[0] != header:
        raise ValueError(f"expected header {header!r}")
    fields = {}
    for ln in lines[1:]:
        name, _, value = ln.partition("=")
        fields[name] = int(value, 16)
    return fields


def load_public_key(text: str) -> PaillierPublicKey:
    return PaillierPublicKey(_parse(text, _PUBLIC_HEADER)["n"])


def load_private_key(text: str) -> PaillierPrivateKey:
    f = _parse(text, _PRIVATE_HEADER)
    return PaillierPrivateKey(PaillierPublicKey(f["n"]), f["p"], f["q"])
