import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nett.grid import (
    GridFormatError,
    Image,
    Sinogram,
    disc_mask,
    inner_product,
    norm2,
    pixel_centers,
    read_grid,
    relative_error,
    write_grid,
    write_pgm,
)
from nett.rng import SeededRng, derive_seed

# Frozen from an independent scalar SplitMix64 written with Python ints.
SPLITMIX_1234567 = [
    6457827717110365317,
    3203168211198807973,
    9817491932198370423,
    4593380528125082431,
    16408922859458223821,
    7804594928223864054,
    10895525637215051397,
    5078158048327840177,
    8075865375900838704,
    15101793978218222876,
]


def _scalar_splitmix(seed, n):
    mask = (1 << 64) - 1
    state = seed & mask
    out = []
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out


class TestRng:
    def test_pinned_sequence(self):
        assert SeededRng(1234567).next_uint64(10).tolist() == SPLITMIX_1234567

    def test_matches_scalar_reference(self):
        for seed in (0, 1, 2**63 + 5):
            assert SeededRng(seed).next_uint64(25).tolist() == _scalar_splitmix(seed, 25)

    def test_chunking_does_not_change_stream(self):
        a = SeededRng(9)
        b = SeededRng(9)
        chunks = np.concatenate([a.next_uint64(3), a.next_uint64(1), a.next_uint64(6)])
        assert chunks.tolist() == b.next_uint64(10).tolist()

    def test_uniform_range_and_determinism(self):
        u = SeededRng(3).uniform(1000, -2.0, 5.0)
        assert u.min() >= -2.0 and u.max() < 5.0
        assert np.array_equal(u, SeededRng(3).uniform(1000, -2.0, 5.0))

    def test_normal_moments(self):
        z = SeededRng(11).normal(200_000)
        assert abs(z.mean()) < 0.01
        assert abs(z.std() - 1) < 0.01

    def test_permutation_and_unit_vector(self):
        rng = SeededRng(5)
        p = rng.permutation(50)
        assert sorted(p.tolist()) == list(range(50))
        v = rng.unit_vector((4, 6))
        assert v.shape == (4, 6)
        assert abs(np.linalg.norm(v) - 1) < 1e-14

    def test_derived_seeds_differ(self):
        seeds = {derive_seed(7, k) for k in range(100)}
        assert len(seeds) == 100
        assert derive_seed(7, 3) == derive_seed(7, 3)


class TestInnerProduct:
    def test_hand_value(self):
        assert inner_product([1.0, 2.0], [3.0, 4.0]) == 11.0

    def test_zero(self):
        b = SeededRng(0).normal(7)
        assert inner_product(np.zeros(7), b) == 0.0

    def test_norm_identity(self):
        rng = SeededRng(1)
        for _ in range(100):
            a = rng.normal(13)
            assert inner_product(a, a) == pytest.approx(norm2(a) ** 2, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            inner_product(np.zeros(3), np.zeros(4))

    @given(arrays(np.float64, 8, elements=st.floats(-1e3, 1e3)),
           arrays(np.float64, 8, elements=st.floats(-1e3, 1e3)))
    def test_symmetric(self, a, b):
        assert inner_product(a, b) == inner_product(b, a)


class TestRelativeError:
    def test_identity(self):
        x = np.array([1.0, -2.0])
        assert relative_error(x, x) == 0.0

    def test_zero_estimate(self):
        assert relative_error([3.0, 4.0], [0.0, 0.0]) == 1.0

    def test_hand_value(self):
        assert relative_error([3.0, 4.0], [3.0, 0.0]) == pytest.approx(0.8, abs=1e-15)

    def test_zero_reference_rejected(self):
        with pytest.raises(ValueError):
            relative_error([0.0, 0.0], [1.0, 0.0])

    @settings(max_examples=50)
    @given(arrays(np.float64, 6, elements=st.floats(-10, 10)), st.floats(0.1, 10))
    def test_scale_invariant(self, z, scale):
        x = np.arange(1.0, 7.0)
        assert relative_error(scale * x, scale * z) == pytest.approx(relative_error(x, z), rel=1e-9)


class TestContainers:
    def test_image_read_only_and_finite(self):
        img = Image(np.ones((3, 4)))
        assert (img.height, img.width) == (3, 4)
        with pytest.raises(ValueError):
            img.values[0, 0] = 2.0
        with pytest.raises(ValueError):
            Image(np.array([[np.nan]]))

    def test_sinogram_shape(self):
        s = Sinogram(np.zeros((15, 32)))
        assert (s.n_sensors, s.n_samples) == (15, 32)

    def test_pixel_centers_symmetric(self):
        X, Y = pixel_centers(4)
        assert np.allclose(X[0], [-0.75, -0.25, 0.25, 0.75])
        assert np.array_equal(Y, X.T)
        m = disc_mask(4)
        assert m.sum() == 12 and not m[0, 0]


class TestFiles:
    def test_round_trip(self, tmp_path):
        rng = SeededRng(2)
        img = Image(rng.normal((5, 7)))
        sino = Sinogram(rng.normal((3, 9)))
        write_grid(tmp_path / "a.nett", img)
        write_grid(tmp_path / "b.nett", sino)
        a, b = read_grid(tmp_path / "a.nett"), read_grid(tmp_path / "b.nett")
        assert isinstance(a, Image) and isinstance(b, Sinogram)
        assert np.array_equal(a.values, img.values)
        assert np.array_equal(b.values, sino.values)

    def test_header_layout(self, tmp_path):
        write_grid(tmp_path / "a.nett", Image(np.zeros((2, 3))))
        data = (tmp_path / "a.nett").read_bytes()
        assert data[:4] == b"NETT"
        assert np.frombuffer(data[4:20], "<u4").tolist() == [1, 0, 2, 3]
        assert len(data) == 20 + 6 * 8

    def test_corrupt_files(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"XXXX" + bytes(16))
        with pytest.raises(GridFormatError):
            read_grid(tmp_path / "bad")
        write_grid(tmp_path / "a.nett", Image(np.zeros((2, 3))))
        data = (tmp_path / "a.nett").read_bytes()
        (tmp_path / "short").write_bytes(data[:-8])
        with pytest.raises(GridFormatError):
            read_grid(tmp_path / "short")

    def test_pgm(self, tmp_path):
        v = np.array([[0.0, 1.0], [2.0, 3.0]])
        write_pgm(tmp_path / "p.pgm", v)
        data = (tmp_path / "p.pgm").read_bytes()
        assert data.startswith(b"P5\n2 2\n255\n")
        assert list(data[-4:]) == [170, 255, 0, 85]
