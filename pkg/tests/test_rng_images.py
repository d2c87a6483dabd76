"""Core data model: streams, images, PSNR, and the two file formats."""

import numpy as np
import pytest

from esure import (
    FormatError,
    Image,
    NoiseSpec,
    RngStream,
    gaussian_field,
    psnr,
    read_pgm,
    read_tensor,
    write_pgm,
    write_tensor,
)


class TestRngStream:
    def test_identical_paths_emit_identical_sequences(self):
        a = RngStream(42, "noise", 3)
        b = RngStream(42, "noise", 3)
        np.testing.assert_array_equal(a.standard_normal(100), b.standard_normal(100))

    def test_different_purposes_differ(self):
        a = RngStream(42, "noise", 3).standard_normal(100)
        b = RngStream(42, "probe", 3).standard_normal(100)
        assert np.abs(a - b).max() > 1e-3

    def test_child_extends_path(self):
        direct = RngStream(7, "a", 1, "b").standard_normal(10)
        chained = RngStream(7, "a").child(1, "b").standard_normal(10)
        np.testing.assert_array_equal(direct, chained)

    def test_invalid_seed_and_path(self):
        with pytest.raises(ValueError):
            RngStream(-1)
        with pytest.raises(ValueError):
            RngStream(0, -3)
        with pytest.raises(TypeError):
            RngStream(0, 1.5)


class TestGaussianField:
    def test_zero_sigma_is_exactly_zero(self):
        field = gaussian_field(RngStream(0, "n"), (8, 8, 1), 0.0)
        assert np.all(field.data == 0.0)

    def test_sample_statistics(self):
        # N = 4096: |mean| <= 4 sigma / sqrt(N), variance within 10% of sigma^2
        field = gaussian_field(RngStream(123, "stats"), (64, 64, 1), 0.1)
        assert abs(field.data.mean()) <= 4 * 0.1 / 64
        assert 0.009 <= field.data.var() <= 0.011

    def test_bit_identical_given_same_stream_state(self):
        f1 = gaussian_field(RngStream(5, "x"), (16, 16, 2), 0.3)
        f2 = gaussian_field(RngStream(5, "x"), (16, 16, 2), 0.3)
        np.testing.assert_array_equal(f1.data, f2.data)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            gaussian_field(RngStream(0), (4, 4, 1), -0.1)


class TestImage:
    def test_dimensions_and_count(self):
        img = Image(np.zeros((4, 6, 2)))
        assert (img.height, img.width, img.channels) == (4, 6, 2)
        assert img.n == 48

    def test_rejects_nonfinite(self):
        bad = np.zeros((2, 2, 1))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            Image(bad)

    def test_rejects_bad_rank(self):
        with pytest.raises(ValueError):
            Image(np.zeros((2, 2, 2, 2)))

    def test_two_d_promoted_to_single_channel(self):
        img = Image(np.ones((3, 5)))
        assert img.shape == (3, 5, 1)


class TestNoiseSpec:
    def test_validation(self):
        NoiseSpec(sigma=0.1, seed=3, role="pair_member")
        with pytest.raises(ValueError):
            NoiseSpec(sigma=-0.1, seed=3)
        with pytest.raises(ValueError):
            NoiseSpec(sigma=0.1, seed=3, role="bogus")


class TestPsnr:
    def test_identity_hits_cap(self):
        x = Image(np.full((4, 4, 1), 0.3))
        assert psnr(x, x, 1.0) == 120.0

    def test_known_values(self):
        ref = np.zeros((10, 10, 1))
        est = np.full((10, 10, 1), 0.1)  # MSE 0.01
        assert psnr(ref, est, 1.0) == pytest.approx(20.0, abs=1e-12)
        est2 = np.full((10, 10, 1), 0.01)  # MSE 1e-4
        assert psnr(ref, est2, 1.0) == pytest.approx(40.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2, 1)), np.zeros((3, 3, 1)))

    def test_monotone_in_mse(self):
        ref = np.zeros((8, 8, 1))
        values = [psnr(ref, np.full((8, 8, 1), level)) for level in (0.01, 0.05, 0.1, 0.4)]
        assert all(a > b for a, b in zip(values, values[1:]))


class TestPgm(object):
    def test_quantization_fixed_point_roundtrip(self, tmp_path):
        img = Image(np.full((5, 7, 1), 128.0 / 255.0))
        write_pgm(img, tmp_path / "c.pgm")
        back = read_pgm(tmp_path / "c.pgm")
        np.testing.assert_array_equal(back.data, img.data)

    def test_round_half_up(self, tmp_path):
        # 0.5 * 255 = 127.5 must store byte 128
        write_pgm(Image(np.full((1, 1, 1), 0.5)), tmp_path / "h.pgm")
        raw = (tmp_path / "h.pgm").read_bytes()
        assert raw.endswith(b"\n" + bytes([128]))

    def test_roundtrip_after_quantization(self, tmp_path):
        rng = np.random.default_rng(0)
        img = Image(rng.uniform(0, 1, (9, 11, 1)))
        write_pgm(img, tmp_path / "r.pgm")
        back = read_pgm(tmp_path / "r.pgm")
        quantized = np.floor(np.clip(img.data, 0, 1) * 255 + 0.5) / 255.0
        np.testing.assert_array_equal(back.data, quantized)
        # second trip is exact: quantization is idempotent
        write_pgm(back, tmp_path / "r2.pgm")
        np.testing.assert_array_equal(read_pgm(tmp_path / "r2.pgm").data, back.data)

    def test_header_with_comment(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# a comment\n2 1\n255\n" + bytes([0, 255]))
        img = read_pgm(p)
        np.testing.assert_allclose(img.data[:, :, 0], [[0.0, 1.0]])

    def test_malformed_inputs(self, tmp_path):
        cases = {
            "magic.pgm": b"P6\n1 1\n255\n\x00",
            "maxval.pgm": b"P5\n1 1\n65535\n\x00\x00",
            "short.pgm": b"P5\n4 4\n255\n\x00\x00",
            "dims.pgm": b"P5\n0 3\n255\n",
        }
        for name, blob in cases.items():
            p = tmp_path / name
            p.write_bytes(blob)
            with pytest.raises(FormatError):
                read_pgm(p)

    def test_multichannel_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_pgm(Image(np.zeros((2, 2, 3))), tmp_path / "x.pgm")


class TestTensorContainer:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        # container stores f32; start from f32-representable data
        img = Image(rng.standard_normal((6, 5, 2)).astype(np.float32).astype(np.float64))
        write_tensor(tmp_path / "t.esdn", img)
        back = read_tensor(tmp_path / "t.esdn")
        np.testing.assert_array_equal(back.data, img.data)

    def test_header_fields(self, tmp_path):
        write_tensor(tmp_path / "t.esdn", Image(np.zeros((2, 3, 4))))
        raw = (tmp_path / "t.esdn").read_bytes()
        assert raw[:4] == b"ESDN"
        assert len(raw) == 4 + 2 + 12 + 2 * 3 * 4 * 4

    def test_malformed(self, tmp_path):
        good = (tmp_path / "g.esdn")
        write_tensor(good, Image(np.zeros((2, 2, 1))))
        raw = good.read_bytes()
        cases = [
            b"XXXX" + raw[4:],          # bad magic
            raw[:4] + b"\x63\x00" + raw[6:],  # bad version
            raw[:-3],                   # truncated payload
        ]
        for blob in cases:
            p = tmp_path / "bad.esdn"
            p.write_bytes(blob)
            with pytest.raises(FormatError):
                read_tensor(p)
