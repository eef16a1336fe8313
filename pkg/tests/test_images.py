"""PPM/PNG round trips, quantization rules, and bilinear resize."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pyrastyle import images
from pyrastyle.errors import DataError, ParseError
from pyrastyle.images import Image, load, resize_bilinear, save


class TestPpm:
    def test_load_scales_bytes_exactly(self, tmp_path):
        path = tmp_path / "two.ppm"
        path.write_bytes(b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255]))
        img = load(path)
        assert img.pixels.tolist() == [[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "gray.pgm"
        path.write_bytes(b"P5\n2 1\n255\n\x00\x01")
        with pytest.raises(ParseError, match="unsupported magic"):
            load(path)

    def test_truncated_payload_reports_offset(self, tmp_path):
        path = tmp_path / "cut.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(ParseError, match="byte offset"):
            load(path)

    def test_maxval_must_be_255(self, tmp_path):
        path = tmp_path / "wide.ppm"
        path.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
        with pytest.raises(ParseError, match="maxval"):
            load(path)

    def test_header_comments_allowed(self, tmp_path):
        path = tmp_path / "comment.ppm"
        path.write_bytes(b"P6\n# made by hand\n1 1\n255\n\x10\x20\x30")
        img = load(path)
        np.testing.assert_allclose(img.pixels[0, 0], np.array([16, 32, 48]) / 255.0)

    def test_quantization_rules(self, tmp_path):
        img = Image(np.array([[[1.0, 0.5, 1.7]]]))
        path = tmp_path / "q.ppm"
        save(img, path)
        payload = path.read_bytes().split(b"255\n", 1)[1]
        assert list(payload) == [255, 128, 255]  # 0.5*255 = 127.5 rounds half-up

    def test_save_deterministic(self, tmp_path, rng):
        img = Image(rng.random((5, 4, 3)))
        a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
        save(img, a)
        save(img, b)
        assert a.read_bytes() == b.read_bytes()

    def test_roundtrip_error_bounded_by_quantization(self, tmp_path, rng):
        img = Image(rng.random((6, 7, 3)))
        path = tmp_path / "r.ppm"
        save(img, path)
        back = load(path)
        assert np.max(np.abs(back.pixels - img.pixels)) <= 1.0 / 255.0 + 1e-12

    def test_load_save_load_identity_on_bytes(self, tmp_path, rng):
        first = tmp_path / "one.ppm"
        save(Image(rng.random((4, 4, 3))), first)
        second = tmp_path / "two.ppm"
        save(load(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="does not exist"):
            load(tmp_path / "nope.ppm")


class TestPng:
    def test_roundtrip(self, tmp_path, rng):
        img = Image(rng.random((5, 6, 3)))
        path = tmp_path / "r.png"
        save(img, path)
        back = load(path)
        quantized = np.floor(np.clip(img.pixels, 0, 1) * 255 + 0.5)
        np.testing.assert_array_equal(back.pixels * 255.0, quantized)

    def test_filtered_scanlines_decode(self, tmp_path):
        # craft a PNG using sub/up/average/paeth filters on known rows
        import struct
        import zlib

        rows = np.arange(4 * 4 * 3, dtype=np.uint8).reshape(4, 12)
        body = bytearray()
        previous = np.zeros(12, dtype=int)
        for y, filt in enumerate([1, 2, 3, 4]):
            body.append(filt)
            row = rows[y].astype(int)
            encoded = np.zeros(12, dtype=int)
            for i in range(12):
                left = row[i - 3] if i >= 3 else 0
                up = previous[i]
                up_left = previous[i - 3] if i >= 3 else 0
                if filt == 1:
                    pred = left
                elif filt == 2:
                    pred = up
                elif filt == 3:
                    pred = (left + up) // 2
                else:
                    p = left + up - up_left
                    pa, pb, pc = abs(p - left), abs(p - up), abs(p - up_left)
                    pred = left if pa <= pb and pa <= pc else (up if pb <= pc else up_left)
                encoded[i] = (row[i] - pred) & 0xFF
            body.extend(encoded.astype(np.uint8).tobytes())
            previous = row

        def chunk(tag, payload):
            return (
                struct.pack(">I", len(payload))
                + tag
                + payload
                + struct.pack(">I", zlib.crc32(tag + payload))
            )

        blob = (
            b"\x89PNG\r\n\x1a\n"
            + chunk(b"IHDR", struct.pack(">2I5B", 4, 4, 8, 2, 0, 0, 0))
            + chunk(b"IDAT", zlib.compress(bytes(body)))
            + chunk(b"IEND", b"")
        )
        path = tmp_path / "filtered.png"
        path.write_bytes(blob)
        img = load(path)
        np.testing.assert_array_equal(
            (img.pixels * 255).astype(np.uint8).reshape(4, 12), rows
        )


class TestResize:
    def test_constant_stays_constant(self):
        img = Image(np.full((3, 3, 3), 0.42))
        out = resize_bilinear(img, 7, 5)
        assert out.height == 7 and out.width == 5
        np.testing.assert_allclose(out.pixels, 0.42, rtol=1e-12)

    def test_checkerboard_center(self):
        board = np.zeros((2, 2, 3))
        board[0, 1] = board[1, 0] = 1.0
        out = resize_bilinear(Image(board), 3, 3)
        np.testing.assert_allclose(out.pixels[1, 1], 0.5, rtol=1e-12)

    def test_same_size_is_identity(self, rng):
        img = Image(rng.random((5, 8, 3)))
        out = resize_bilinear(img, 5, 8)
        np.testing.assert_array_equal(out.pixels, img.pixels)

    @given(st.integers(1, 9), st.integers(1, 9))
    @settings(max_examples=30, deadline=None)
    def test_bounds_preserved(self, new_h, new_w):
        r = np.random.default_rng(new_h * 100 + new_w)
        img = Image(r.random((4, 6, 3)))
        out = resize_bilinear(img, new_h, new_w)
        assert out.pixels.min() >= img.pixels.min() - 1e-12
        assert out.pixels.max() <= img.pixels.max() + 1e-12

    def test_rejects_zero_size(self):
        with pytest.raises(DataError):
            resize_bilinear(Image(np.zeros((2, 2, 3))), 0, 3)
