"""Additively homomorphic encryption for the cross-party gradient terms.

Classic scheme with the ``g = n + 1`` shortcut: a plaintext mantissa m
encrypts to ``(1 + m*n) * r^n mod n^2``, the private exponent is
``lambda = phi(n)`` and ``mu = phi(n)^-1 mod n``.  Real numbers ride on
a two-band signed fixed-point encoding: positive mantissas stay below
n/3, negative ones (stored as ``n - v``) stay above 2n/3, so the bands
cannot collide and additive overflow lands in the detectable middle.

Supported homomorphic ops: ciphertext + ciphertext, and plaintext *
ciphertext (which multiplies the encoding scales).  ``gmpy2`` is used
for the big-integer exponentiations when available; the pure-Python
fallback computes the same values.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass
from typing import Sequence

import numpy as np

try:
    import gmpy2

    def _powmod(base: int, exp: int, mod: int) -> int:
        return int(gmpy2.powmod(base, exp, mod))

    def _invert(a: int, mod: int) -> int:
        return int(gmpy2.invert(a, mod))
except ImportError:  # pragma: no cover - exercised only without gmpy2
    def _powmod(base: int, exp: int, mod: int) -> int:
        return pow(base, exp, mod)

    def _invert(a: int, mod: int) -> int:
        return pow(a, -1, mod)

DEFAULT_SCALE = 2 ** 40
MILLER_RABIN_ROUNDS = 64


def miller_rabin(n: int, rng: random.Random,
                 rounds: int = MILLER_RABIN_ROUNDS) -> bool:
    """Probabilistic primality test with ``rounds`` random witnesses."""
    if n < 2:
        return False
    for small in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if n % small == 0:
            return n == small
    d = n - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = _powmod(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def random_prime(bits: int, rng: random.Random) -> int:
    """Random prime with the top bit set so products keep their size."""
    while True:
        candidate = rng.getrandbits(bits) | (1 << (bits - 1)) | 1
        if miller_rabin(candidate, rng):
            return candidate


@dataclass(frozen=True)
class PublicKey:
    n: int
    g: int
    key_id: str

    @property
    def n_squared(self) -> int:
        return self.n * self.n

    @property
    def max_mantissa(self) -> int:
        """Largest encodable magnitude: the positive band is [0, n/3)."""
        return self.n // 3


@dataclass(frozen=True)
class SecretKey:
    lam: int
    mu: int
    public: PublicKey


@dataclass(frozen=True)
class KeyPair:
    public: PublicKey
    secret: SecretKey
    bits: int


KEY_SIZES = (512, 1024, 2048)


def keygen(bits: int, rng: random.Random) -> KeyPair:
    """Generate a key pair with an n of ``bits`` (within one bit).

    512-bit keys are adequate for tests; experiments use 1024.  The rng
    is the only entropy source, so keygen is reproducible.
    """
    if bits not in KEY_SIZES:
        raise ValueError(f"key size must be one of {KEY_SIZES}")
    half = bits // 2
    while True:
        p = random_prime(half, rng)
        q = random_prime(half, rng)
        if p == q:
            continue
        n = p * q
        phi = (p - 1) * (q - 1)
        if n.bit_length() not in (bits - 1, bits):
            continue
        if math.gcd(n, phi) != 1:
            continue
        key_id = hashlib.sha256(n.to_bytes((n.bit_length() + 7) // 8,
                                           "big")).hexdigest()[:16]
        public = PublicKey(n=n, g=n + 1, key_id=key_id)
        secret = SecretKey(lam=phi, mu=_invert(phi, n), public=public)
        return KeyPair(public=public, secret=secret, bits=bits)


@dataclass(frozen=True)
class FixedPoint:
    """Signed fixed-point plaintext: mantissa in [0, n), power-of-two scale."""

    mantissa: int
    scale: int


def encode(value: float, n: int, scale: int = DEFAULT_SCALE) -> FixedPoint:
    """Encode a real number; magnitudes at or above n/(3*scale) overflow."""
    if not math.isfinite(value):
        raise ValueError("cannot encode a non-finite value")
    if scale <= 0 or scale & (scale - 1):
        raise ValueError("scale must be a positive power of two")
    m = round(value * scale)
    if abs(m) >= n // 3:
        raise OverflowError(f"value {value!r} does not fit the encoding band")
    return FixedPoint(mantissa=m % n, scale=scale)


def decode(fp: FixedPoint, n: int) -> float:
    """Decode a mantissa from the positive or negative band."""
    m = fp.mantissa
    if not 0 <= m < n:
        raise ValueError("mantissa outside [0, n)")
    if m < n // 3:
        return m / fp.scale
    if m > 2 * n // 3:
        return (m - n) / fp.scale
    raise ValueError("mantissa in the overflow band; cannot decode")


def encrypt_mantissa(pk: PublicKey, mantissa: int, rng: random.Random) -> int:
    """Raw encryption of an integer mantissa in [0, n)."""
    if not 0 <= mantissa < pk.n:
        raise ValueError("mantissa outside [0, n)")
    n2 = pk.n_squared
    while True:
        r = rng.randrange(1, pk.n)
        if math.gcd(r, pk.n) == 1:
            break
    return (1 + mantissa * pk.n) % n2 * _powmod(r, pk.n, n2) % n2


def decrypt_mantissa(sk: SecretKey, ciphertext: int) -> int:
    """Invert encryption: L(c^lambda mod n^2) * mu mod n, L(u) = (u-1)/n."""
    n = sk.public.n
    n2 = sk.public.n_squared
    if not 0 < ciphertext < n2:
        raise ValueError("ciphertext outside (0, n^2)")
    u = _powmod(ciphertext, sk.lam, n2)
    return (u - 1) // n * sk.mu % n


def _mul_mantissa(pk: PublicKey, ciphertext: int, k: int) -> int:
    """c^k mod n^2; negative-band k goes through the inverse shortcut."""
    n2 = pk.n_squared
    if k > pk.n // 2:
        return _powmod(_invert(ciphertext, n2), pk.n - k, n2)
    return _powmod(ciphertext, k, n2)


@dataclass(frozen=True)
class CipherVector:
    """A vector of ciphertexts sharing one key and one encoding scale."""

    ciphertexts: tuple[int, ...]
    scale: int
    key_id: str

    def __len__(self) -> int:
        return len(self.ciphertexts)


def encrypt_vector(pk: PublicKey, values, rng: random.Random,
                   scale: int = DEFAULT_SCALE) -> CipherVector:
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    cts = tuple(encrypt_mantissa(pk, encode(float(v), pk.n, scale).mantissa,
                                 rng)
                for v in values)
    return CipherVector(cts, scale, pk.key_id)


def decrypt_vector(sk: SecretKey, cv: CipherVector) -> np.ndarray:
    if cv.key_id != sk.public.key_id:
        raise ValueError("ciphertext does not belong to this key")
    n = sk.public.n
    return np.array([decode(FixedPoint(decrypt_mantissa(sk, c), cv.scale), n)
                     for c in cv.ciphertexts])


def add_cipher(pk: PublicKey, a: CipherVector, b: CipherVector) -> CipherVector:
    """Elementwise homomorphic addition; scales and keys must match."""
    if a.key_id != b.key_id or a.key_id != pk.key_id:
        raise ValueError("cannot add ciphertexts under different keys")
    if a.scale != b.scale:
        raise ValueError(f"scale mismatch: {a.scale} != {b.scale}")
    if len(a) != len(b):
        raise ValueError("length mismatch")
    n2 = pk.n_squared
    cts = tuple(x * y % n2 for x, y in zip(a.ciphertexts, b.ciphertexts))
    return CipherVector(cts, a.scale, a.key_id)


def mul_plain(pk: PublicKey, cv: CipherVector, values,
              scale: int = DEFAULT_SCALE) -> CipherVector:
    """Elementwise plaintext * ciphertext; result scale is the product."""
    if cv.key_id != pk.key_id:
        raise ValueError("ciphertext does not belong to this key")
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    if values.shape != (len(cv),):
        raise ValueError("plaintext length does not match ciphertext vector")
    cts = tuple(_mul_mantissa(pk, c, encode(float(v), pk.n, scale).mantissa)
                for c, v in zip(cv.ciphertexts, values))
    return CipherVector(cts, cv.scale * scale, cv.key_id)


def negate_cipher(pk: PublicKey, cv: CipherVector) -> CipherVector:
    """Homomorphic negation: multiply by -1 at unit scale."""
    if cv.key_id != pk.key_id:
        raise ValueError("ciphertext does not belong to this key")
    n2 = pk.n_squared
    cts = tuple(_invert(c, n2) for c in cv.ciphertexts)
    return CipherVector(cts, cv.scale, cv.key_id)


def cipher_to_bytes(ciphertext: int) -> bytes:
    """Big-endian bytes, minimal length (length prefixes live in framing)."""
    return ciphertext.to_bytes((ciphertext.bit_length() + 7) // 8 or 1, "big")


def cipher_from_bytes(raw: bytes) -> int:
    return int.from_bytes(raw, "big")


def dual_scalar_product(pk: PublicKey, scalar_cipher: int, scalar_scale: int,
                        plain_row: Sequence[float],
                        scale: int = DEFAULT_SCALE) -> CipherVector:
    """One encrypted scalar times a plaintext row vector.

    Used for the cross gradient terms, where a per-sample encrypted
    log-density difference multiplies that sample's plaintext
    log-density gradient.
    """
    base = CipherVector((int(scalar_cipher),) * len(plain_row), scalar_scale,
                        pk.key_id)
    return mul_plain(pk, base, np.asarray(plain_row, dtype=np.float64), scale)
