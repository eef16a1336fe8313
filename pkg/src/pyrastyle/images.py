"""Image loading, saving, and resizing.

Pixels live as H x W x 3 float64 arrays in [0,1], RGB row-major. Binary PPM
(P6, maxval 255) is the bit-exact interchange format; PNG (8-bit RGB/RGBA,
non-interlaced) is supported behind the same contract via zlib so no codec
dependency enters the correctness core.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class Image:
    """H x W x 3 float pixels in [0,1]."""

    def __init__(self, pixels):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise DataError(f"pixels must be HxWx3, got shape {pixels.shape}")
        self.pixels = pixels

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def __repr__(self):
        return f"Image({self.height}x{self.width})"


def load(path) -> Image:
    """Load a PPM (P6) or PNG file into [0,1] pixels (byte / 255 exactly)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image file does not exist: {path}")
    raw = path.read_bytes()
    if raw[:8] == _PNG_SIGNATURE:
        return _decode_png(raw, path)
    return _decode_ppm(raw, path)


def save(img: Image, path) -> None:
    """Write a binary PPM; out-of-range values clamp, bytes round half-up."""
    path = Path(path)
    data = _quantize(img.pixels)
    if path.suffix.lower() == ".png":
        path.write_bytes(encode_png(data))
        return
    try:
        with open(path, "wb") as fh:
            fh.write(encode_ppm(data))
    except OSError as exc:
        raise OSError(f"cannot write image to {path}: {exc}") from exc


def _quantize(pixels):
    clamped = np.clip(pixels, 0.0, 1.0)
    return np.floor(clamped * 255.0 + 0.5).astype(np.uint8)


def encode_ppm(data: np.ndarray) -> bytes:
    h, w = data.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + data.tobytes()


def _decode_ppm(raw: bytes, path) -> Image:
    if raw[:2] != b"P6":
        magic = raw[:2].decode("ascii", errors="replace")
        raise ParseError(f"unsupported magic {magic!r}, expected 'P6'", path, 0)

    # header: three ASCII fields separated by whitespace, '#' comments allowed
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated header", path, start)
        field = raw[start:pos]
        if not field.isdigit():
            raise ParseError(f"non-numeric header field {field!r}", path, start)
        fields.append(int(field))
    if pos >= len(raw):
        raise ParseError("missing pixel payload", path, pos)
    pos += 1  # single whitespace byte after maxval

    width, height, maxval = fields
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}, expected 255", path, pos)
    expected = width * height * 3
    payload = raw[pos : pos + expected]
    if len(payload) < expected:
        raise ParseError(
            f"truncated payload: expected {expected} bytes, got {len(payload)}",
            path,
            pos + len(payload),
        )
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return Image(data.astype(np.float64) / 255.0)


def encode_png(data: np.ndarray) -> bytes:
    """8-bit RGB PNG, filter 0 scanlines."""
    h, w = data.shape[:2]
    body = bytearray()
    for row in data:
        body.append(0)
        body.extend(row.tobytes())
    out = bytearray(_PNG_SIGNATURE)
    out += _png_chunk(b"IHDR", struct.pack(">2I5B", w, h, 8, 2, 0, 0, 0))
    out += _png_chunk(b"IDAT", zlib.compress(bytes(body)))
    out += _png_chunk(b"IEND", b"")
    return bytes(out)


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(tag + payload)
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def _decode_png(raw: bytes, path) -> Image:
    pos = 8
    width = height = None
    color_type = None
    idat = bytearray()
    while pos + 8 <= len(raw):
        (length,) = struct.unpack(">I", raw[pos : pos + 4])
        tag = raw[pos + 4 : pos + 8]
        payload = raw[pos + 8 : pos + 8 + length]
        if len(payload) < length:
            raise ParseError("truncated chunk", path, pos)
        if tag == b"IHDR":
            width, height, depth, color_type, _, _, interlace = struct.unpack(
                ">2I5B", payload
            )
            if depth != 8:
                raise ParseError(f"unsupported bit depth {depth}", path, pos)
            if color_type not in (0, 2, 6):
                raise ParseError(f"unsupported color type {color_type}", path, pos)
            if interlace != 0:
                raise ParseError("interlaced PNG not supported", path, pos)
        elif tag == b"IDAT":
            idat.extend(payload)
        elif tag == b"IEND":
            break
        pos += 12 + length
    if width is None:
        raise ParseError("missing IHDR", path, 8)
    try:
        decompressed = zlib.decompress(bytes(idat))
    except zlib.error as exc:
        raise ParseError(f"corrupt IDAT stream: {exc}", path, pos) from exc

    channels = {0: 1, 2: 3, 6: 4}[color_type]
    stride = width * channels
    if len(decompressed) != (stride + 1) * height:
        raise ParseError("scanline payload size mismatch", path, pos)
    out = np.zeros((height, stride), dtype=np.uint8)
    previous = np.zeros(stride, dtype=np.uint8)
    for y in range(height):
        offset = y * (stride + 1)
        filter_type = decompressed[offset]
        line = np.frombuffer(
            decompressed[offset + 1 : offset + 1 + stride], dtype=np.uint8
        ).copy()
        out[y] = _unfilter_scanline(filter_type, line, previous, channels, path)
        previous = out[y]
    data = out.reshape(height, width, channels)
    if channels == 1:
        data = np.repeat(data, 3, axis=2)
    elif channels == 4:
        data = data[:, :, :3]
    return Image(data.astype(np.float64) / 255.0)


def _unfilter_scanline(filter_type, line, previous, bpp, path):
    if filter_type == 0:
        return line
    if filter_type == 2:
        return (line.astype(np.int32) + previous).astype(np.uint8)
    # Sub, Average, and Paeth need the running left neighbour
    out = np.zeros_like(line)
    for i in range(len(line)):
        left = int(out[i - bpp]) if i >= bpp else 0
        up = int(previous[i])
        up_left = int(previous[i - bpp]) if i >= bpp else 0
        x = int(line[i])
        if filter_type == 1:
            value = x + left
        elif filter_type == 3:
            value = x + (left + up) // 2
        elif filter_type == 4:
            p = left + up - up_left
            pa, pb, pc = abs(p - left), abs(p - up), abs(p - up_left)
            if pa <= pb and pa <= pc:
                value = x + left
            elif pb <= pc:
                value = x + up
            else:
                value = x + up_left
        else:
            raise ParseError(f"unknown scanline filter {filter_type}", path)
        out[i] = value & 0xFF
    return out


def resize_bilinear(img: Image, new_h: int, new_w: int) -> Image:
    """Corner-aligned bilinear resize; same-size resize is exactly identity."""
    if new_h < 1 or new_w < 1:
        raise DataError(f"target size must be >= 1, got {new_h}x{new_w}")
    src = img.pixels
    h, w = src.shape[:2]
    rows = np.linspace(0.0, h - 1.0, new_h) if new_h > 1 else np.zeros(1)
    cols = np.linspace(0.0, w - 1.0, new_w) if new_w > 1 else np.zeros(1)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[:, None, None]
    fc = (cols - c0)[None, :, None]
    top = src[r0][:, c0] * (1 - fc) + src[r0][:, c1] * fc
    bottom = src[r1][:, c0] * (1 - fc) + src[r1][:, c1] * fc
    return Image(top * (1 - fr) + bottom * fr)
