import numpy as np
import pytest

from kopa import adapter as ad
from kopa.errors import FormatError


class TestAdapt:
    def test_identity_projection(self, rng):
        adp = ad.PrefixAdapter(W=np.eye(4), b=np.zeros(4))
        vecs = rng.normal(size=(3, 4))
        out = ad.adapt(adp, vecs[0], vecs[1], vecs[2])
        assert np.allclose(out.tokens, vecs)
        assert out.tokens.shape == (3, 4)

    def test_zero_weight_constant_offset(self, rng):
        c = rng.normal(size=5)
        adp = ad.PrefixAdapter(W=np.zeros((3, 5)), b=c)
        out = ad.adapt(adp, np.ones(3), np.zeros(3), -np.ones(3))
        assert np.allclose(out.tokens, np.stack([c, c, c]))

    def test_matches_naive_triple_loop(self, rng):
        d_in, d_model = 7, 5
        adp = ad.init_adapter(d_in, d_model, rng)
        vecs = rng.normal(size=(3, d_in))
        out = ad.adapt(adp, vecs[0], vecs[1], vecs[2])
        # oracle: naive triple loop
        for i in range(3):
            for j in range(d_model):
                acc = adp.b[j]
                for k in range(d_in):
                    acc += vecs[i][k] * adp.W[k][j]
                assert out.tokens[i, j] == pytest.approx(acc, abs=1e-10)

    def test_affine_map_property(self, rng):
        d = 6
        adp = ad.init_adapter(d, d, rng)
        x, y = rng.normal(size=d), rng.normal(size=d)
        a = 2.5

        def f(v):
            return ad.adapt(adp, v, v, v).tokens[0]

        lhs = f(a * x + y)
        rhs = a * f(x) + f(y) - a * adp.b
        assert np.allclose(lhs, rhs, atol=1e-10)

    def test_width_mismatch_rejected(self, rng):
        adp = ad.init_adapter(4, 8, rng)
        with pytest.raises(ValueError, match="width"):
            ad.adapt(adp, np.zeros(5), np.zeros(4), np.zeros(4))

    def test_prefix_always_three_tokens(self, rng):
        with pytest.raises(ValueError, match="3"):
            ad.VirtualTokenPrefix(tokens=rng.normal(size=(2, 4)))

    def test_bad_position_rejected(self, rng):
        with pytest.raises(ValueError, match="position"):
            ad.VirtualTokenPrefix(tokens=rng.normal(size=(3, 4)), position="middle")


class TestPersistence:
    def test_round_trip(self, tmp_path, rng):
        adp = ad.init_adapter(6, 10, rng)
        # f32-representable values so the round trip is exact
        adp.W = adp.W.astype(np.float32).astype(np.float64)
        adp.b = rng.normal(size=10).astype(np.float32).astype(np.float64)
        path = tmp_path / "a.kpa"
        ad.save_adapter(adp, path)
        loaded = ad.load_adapter(path)
        assert np.array_equal(loaded.W, adp.W)
        assert np.array_equal(loaded.b, adp.b)

    def test_truncated_rejected(self, tmp_path, rng):
        adp = ad.init_adapter(3, 4, rng)
        path = tmp_path / "a.kpa"
        ad.save_adapter(adp, path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError):
            ad.load_adapter(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "a.kpa"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            ad.load_adapter(path)
