"""Minimal image readers and writers: binary PPM/PGM and 8-bit RGB PNG."""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAX_PIXELS = 1 << 28


class ImageFormatError(ValueError):
    pass


class UnsupportedImage(ImageFormatError):
    pass


class CorruptImage(ImageFormatError):
    pass


class ImageTooLarge(ImageFormatError):
    pass


def _netpbm_header(data: bytes, fields: int):
    """Parse ``fields`` whitespace-separated tokens after the magic (comments allowed)."""
    tokens, pos = [], 2
    while len(tokens) < fields:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise CorruptImage("truncated header")
        tok = data[start:pos]
        if not tok.isdigit():
            raise CorruptImage(f"non-numeric header field {tok[:16]!r}")
        tokens.append(int(tok))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise CorruptImage("missing whitespace after header")
    return tokens, pos + 1


def _decode_ppm(data: bytes) -> np.ndarray:
    (w, h, maxval), pos = _netpbm_header(data, 3)
    if w < 1 or h < 1:
        raise CorruptImage(f"invalid dimensions {w}x{h}")
    if w * h > MAX_PIXELS:
        raise ImageTooLarge(f"{w}x{h} exceeds the {MAX_PIXELS}-pixel limit")
    if maxval != 255:
        raise UnsupportedImage(f"only 8-bit PPM (maxval 255) supported, got maxval {maxval}")
    need = w * h * 3
    if len(data) - pos < need:
        raise CorruptImage(f"pixel data truncated: {len(data) - pos} of {need} bytes")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3).copy()


PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _unfilter(raw: bytes, h: int, stride: int, bpp: int) -> np.ndarray:
    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    pos = 0
    for y in range(h):
        ftype = raw[pos]
        line = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=pos + 1).astype(np.int32)
        pos += stride + 1
        if ftype == 0:
            cur = line
        elif ftype == 1:
            cur = line.copy()
            for x in range(bpp, stride):
                cur[x] = (cur[x] + cur[x - bpp]) & 0xFF
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype == 3:
            cur = line.copy()
            for x in range(stride):
                left = cur[x - bpp] if x >= bpp else 0
                cur[x] = (cur[x] + ((left + prev[x]) >> 1)) & 0xFF
        elif ftype == 4:
            cur = line.copy()
            for x in range(stride):
                a = cur[x - bpp] if x >= bpp else 0
                b = prev[x]
                c = prev[x - bpp] if x >= bpp else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                pred = a if pa <= pb and pa <= pc else (b if pb <= pc else c)
                cur[x] = (cur[x] + pred) & 0xFF
        else:
            raise CorruptImage(f"unknown PNG filter type {ftype} on row {y}")
        out[y] = cur
        prev = cur
    return out


def _decode_png(data: bytes) -> np.ndarray:
    pos = len(PNG_SIG)
    header = None
    idat = []
    while True:
        if pos + 8 > len(data):
            raise CorruptImage("PNG stream ended before IEND")
        length, ctype = struct.unpack(">I4s", data[pos:pos + 8])
        body = data[pos + 8:pos + 8 + length]
        crc = data[pos + 8 + length:pos + 12 + length]
        if len(body) != length or len(crc) != 4:
            raise CorruptImage(f"truncated PNG chunk {ctype!r}")
        if zlib.crc32(ctype + body) != struct.unpack(">I", crc)[0]:
            raise CorruptImage(f"CRC mismatch in PNG chunk {ctype!r}")
        pos += 12 + length
        if ctype == b"IHDR":
            header = struct.unpack(">IIBBBBB", body)
        elif ctype == b"IDAT":
            idat.append(body)
        elif ctype == b"IEND":
            break
    if header is None:
        raise CorruptImage("PNG has no IHDR chunk")
    w, h, depth, color, _, _, interlace = header
    if w < 1 or h < 1:
        raise CorruptImage(f"invalid dimensions {w}x{h}")
    if w * h > MAX_PIXELS:
        raise ImageTooLarge(f"{w}x{h} exceeds the {MAX_PIXELS}-pixel limit")
    if depth != 8 or color != 2:
        raise UnsupportedImage(f"only 8-bit RGB PNG supported (got depth {depth}, color type {color})")
    if interlace:
        raise UnsupportedImage("interlaced PNG not supported")
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise CorruptImage(f"bad PNG image data: {exc}") from exc
    if len(raw) < h * (w * 3 + 1):
        raise CorruptImage("PNG image data truncated")
    return _unfilter(raw, h, w * 3, 3).reshape(h, w, 3)


def decode_image(path) -> np.ndarray:
    """Read a binary PPM (P6) or 8-bit RGB PNG as an H x W x 3 uint8 array."""
    data = Path(path).read_bytes()
    if data[:2] == b"P6":
        return _decode_ppm(data)
    if data[:8] == PNG_SIG:
        return _decode_png(data)
    if data[:1] == b"P" and data[1:2] in b"12345":
        raise UnsupportedImage(f"{path}: netpbm type {data[:2].decode()} not supported (need P6)")
    raise UnsupportedImage(f"{path}: unrecognised image format")


def write_ppm(path, image) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("write_ppm expects an H x W x 3 uint8 array")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(image).tobytes())


def write_pgm(path, plane) -> None:
    plane = np.asarray(plane)
    if plane.dtype != np.uint8 or plane.ndim != 2:
        raise ValueError("write_pgm expects an H x W uint8 array")
    h, w = plane.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(plane).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise UnsupportedImage(f"{path}: not a binary PGM")
    (w, h, maxval), pos = _netpbm_header(data, 3)
    if maxval != 255:
        raise UnsupportedImage(f"only 8-bit PGM supported, got maxval {maxval}")
    if len(data) - pos < w * h:
        raise CorruptImage("pixel data truncated")
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()
