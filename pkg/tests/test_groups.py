"""Group arithmetic, hashing domains, and exponent sampling."""

import hashlib
import math
import random

import pytest

from custodia import groups
from custodia.errors import DivisionByZero, NotInvertible
from custodia.groups import GroupParams

from conftest import FIX256, TOY


class TestParams:
    def test_toy_fixture_is_valid(self):
        TOY.validate()
        assert TOY.p == 2 * TOY.q + 1
        assert pow(5, 2, 23) == 2 != 1
        assert pow(5, 11, 23) == 22 != 1

    def test_frozen_256_bit_fixture_is_valid(self):
        FIX256.validate()
        assert FIX256.p.bit_length() == 256

    def test_generation_is_deterministic_and_valid(self):
        params = groups.generate_params(256, random.Random(0))
        params.validate()
        again = groups.generate_params(256, random.Random(0))
        assert (params.p, params.q, params.g) == (again.p, again.q, again.g)

    def test_small_generation_lands_on_a_known_safe_prime(self):
        # all 8-bit safe primes
        for seed in range(6):
            params = groups.generate_params(8, random.Random(seed))
            assert params.p in (167, 179, 227)
            params.validate()

    def test_validate_rejects_bad_params(self):
        with pytest.raises(ValueError):
            GroupParams(p=25, q=12, g=5).validate()
        with pytest.raises(ValueError):
            GroupParams(p=23, q=11, g=22).validate()  # order 2, not a generator

    def test_encode_decode_roundtrip(self):
        assert FIX256.element_size == 32
        for x in (0, 1, FIX256.p - 1):
            assert FIX256.decode(FIX256.encode(x)) == x
        with pytest.raises(ValueError):
            FIX256.decode(b"\x00")

    def test_params_file_roundtrip(self, tmp_path):
        path = tmp_path / "params.txt"
        groups.save_params(FIX256, path)
        loaded = groups.load_params(path)
        assert (loaded.p, loaded.q, loaded.g) == (FIX256.p, FIX256.q, FIX256.g)


class TestKeyPairs:
    def test_toy_keypair_values(self):
        # private 3 -> public 10, inverse 15; private 7 -> public 17
        assert pow(TOY.g, 3, TOY.p) == 10
        assert groups.exponent_inverse(3, TOY) == 15
        assert (3 * 15) % 22 == 1
        assert pow(TOY.g, 7, TOY.p) == 17

    def test_noninvertible_private_is_never_sampled(self):
        rng = random.Random(1)
        for _ in range(300):
            private = groups.sample_invertible_exponent(TOY, rng)
            assert math.gcd(private, 22) == 1  # e.g. 11 must never appear

    def test_generated_keypairs_hold_invariants(self):
        rng = random.Random(2)
        for _ in range(20):
            keypair = groups.generate_keypair(FIX256, rng)
            assert keypair.public not in (0, 1)
            assert pow(FIX256.g, (keypair.private * keypair.private_inv) % (FIX256.p - 1),
                       FIX256.p) == FIX256.g


class TestExponentInverse:
    def test_toy_values(self):
        assert groups.exponent_inverse(3, TOY) == 15
        assert groups.exponent_inverse(1, TOY) == 1

    def test_noninvertible_raises(self):
        with pytest.raises(NotInvertible):
            groups.exponent_inverse(4, TOY)

    def test_exponent_roundtrip_property(self):
        rng = random.Random(3)
        for _ in range(100):
            a = groups.sample_invertible_exponent(FIX256, rng)
            a_inv = groups.exponent_inverse(a, FIX256)
            x = rng.randrange(2, FIX256.p - 1)
            base = pow(FIX256.g, x, FIX256.p)
            assert pow(base, (a * a_inv) % (FIX256.p - 1), FIX256.p) == base


class TestFieldDiv:
    def test_toy_values(self):
        assert groups.field_div(18, 19, TOY) == 7
        assert groups.field_div(0, 5, TOY) == 0

    def test_self_division_is_one(self):
        rng = random.Random(4)
        for _ in range(50):
            x = rng.randrange(1, FIX256.p)
            assert groups.field_div(x, x, FIX256) == 1

    def test_zero_divisor_raises(self):
        with pytest.raises(DivisionByZero):
            groups.field_div(7, 0, TOY)
        with pytest.raises(DivisionByZero):
            groups.field_div(7, TOY.p, TOY)

    def test_mul_div_roundtrip_property(self):
        rng = random.Random(5)
        for _ in range(100):
            a = rng.randrange(0, FIX256.p)
            b = rng.randrange(1, FIX256.p)
            assert groups.field_div((a * b) % FIX256.p, b, FIX256) == a


class TestHashing:
    def test_determinism(self):
        assert groups.hash_to_field(FIX256, b"x") == groups.hash_to_field(FIX256, b"x")
        assert groups.hash_to_key(b"x") == groups.hash_to_key(b"x")

    def test_field_hash_range(self):
        rng = random.Random(6)
        for _ in range(10_000):
            data = rng.randbytes(8)
            value = groups.hash_to_field(TOY, data)
            assert 1 <= value <= TOY.p - 1
        for _ in range(1000):
            value = groups.hash_to_exponent(TOY, rng.randbytes(8))
            assert 0 <= value < TOY.p - 1

    def test_key_hash_frozen_vector(self):
        # recorded from a direct SHA-512 run over the documented domain prefix
        expected = ("4a5ff395f91fb471a7fac177068ef135c78f94d7b982d0d49e4bcc8c7e67c490"
                    "e18019ec35a660c022e39ada4cbf0dd99842c6cd069c7ac7bd14d6477dbbeb4e")
        assert groups.hash_to_key(b"abc").hex() == expected
        assert len(groups.hash_to_key(b"abc")) == 64

    def test_key_field_and_parity(self):
        key = groups.hash_to_key(b"abc")
        value = int.from_bytes(key, "big") % TOY.p
        assert groups.key_field(TOY, key) == value
        assert groups.key_parity(TOY, key) == value % 2

    def test_domains_are_separated(self):
        data = b"same input"
        outputs = {
            groups.hash_to_field(FIX256, data),
            groups.hash_to_exponent(FIX256, data),
            groups.key_field(FIX256, groups.hash_to_key(data)),
        }
        assert len(outputs) == 3


class TestSampling:
    def test_noninvertible_sampler(self):
        rng = random.Random(7)
        seen = set()
        for _ in range(1000):
            e = groups.sample_noninvertible_exponent(TOY, rng)
            assert 2 <= e <= TOY.p - 2
            assert math.gcd(e, 22) != 1
            seen.add(e)
        # the sampler must cover both even exponents and the subgroup order
        assert any(e % 2 == 0 for e in seen)
        assert TOY.q in seen

    def test_invertible_sampler_range(self):
        rng = random.Random(8)
        for _ in range(200):
            e = groups.sample_invertible_exponent(FIX256, rng)
            assert 2 <= e <= FIX256.p - 2
            assert math.gcd(e, FIX256.p - 1) == 1
