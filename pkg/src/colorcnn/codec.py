"""Indexed-color PNG encoding, bitrate metering and a JPEG reference codec."""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .classic import IndexedImage
from .errors import CapacityError, CodecError, CodecUnavailableError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass(frozen=True)
class EncodedBlob:
    data: bytes
    width: int
    height: int
    format: str  # "png-indexed" | "png-rgb" | "jpeg"

    def __post_init__(self):
        if not self.data:
            raise CodecError("encoded blob is empty")

    def __len__(self) -> int:
        return len(self.data)


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(payload, zlib.crc32(tag)) & 0xFFFFFFFF))


def bit_depth_for(n_colors: int) -> int:
    """Smallest legal indexed bit depth that addresses ``n_colors`` entries."""
    for depth in (1, 2, 4, 8):
        if n_colors <= 1 << depth:
            return depth
    raise CapacityError(f"{n_colors} palette entries exceed the 256 allowed in indexed PNG")


def _pack_rows(index_map: np.ndarray, depth: int) -> np.ndarray:
    """Pack each row of indices MSB-first into bytes, padding the row end."""
    h, w = index_map.shape
    per_byte = 8 // depth
    padded_w = -(-w // per_byte) * per_byte
    idx = np.zeros((h, padded_w), dtype=np.uint8)
    idx[:, :w] = index_map
    groups = idx.reshape(h, -1, per_byte).astype(np.uint16)
    shifts = np.arange(per_byte - 1, -1, -1, dtype=np.uint16) * depth
    return (groups << shifts).sum(-1).astype(np.uint8)


def _filter_rows(packed: np.ndarray) -> bytes:
    """Per row, keep whichever of filter 0 (None) and 1 (Sub) scores lower.

    The score is the usual minimum-sum-of-absolute-differences heuristic
    with bytes read as signed.  Indexed images have one byte per pixel
    step for the Sub predictor regardless of bit depth.
    """
    out = bytearray()
    for row in packed:
        sub = row.copy()
        sub[1:] = row[1:] - row[:-1]
        cost_none = np.abs(row.astype(np.int8).astype(np.int32)).sum()
        cost_sub = np.abs(sub.astype(np.int8).astype(np.int32)).sum()
        if cost_sub < cost_none:
            out.append(1)
            out += sub.tobytes()
        else:
            out.append(0)
            out += row.tobytes()
    return bytes(out)


def palette_to_uint8(palette: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(palette, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def encode_indexed_png(ix: IndexedImage, level: int = 9) -> EncodedBlob:
    """Encode as a color-type-3 PNG after dropping unused palette entries.

    Palette colors are stored with 8 bits per channel.
    """
    compact = ix.compact()
    n = len(compact.palette)
    if n > 256:
        raise CapacityError(f"{n} palette entries exceed the 256 allowed in indexed PNG")
    h, w = compact.shape
    if h == 0 or w == 0:
        raise CodecError("cannot encode an empty image")
    depth = bit_depth_for(n)
    ihdr = struct.pack(">IIBBBBB", w, h, depth, 3, 0, 0, 0)
    plte = palette_to_uint8(compact.palette).tobytes()
    idat = zlib.compress(_filter_rows(_pack_rows(compact.index_map, depth)), level)
    data = (PNG_SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"PLTE", plte)
            + _chunk(b"IDAT", idat) + _chunk(b"IEND", b""))
    return EncodedBlob(data, w, h, "png-indexed")


def read_chunks(data: bytes) -> list[tuple[bytes, bytes]]:
    """Split a PNG stream into ``(tag, payload)`` pairs, checking CRCs."""
    if not data.startswith(PNG_SIGNATURE):
        raise CodecError("not a PNG stream")
    pos, chunks = len(PNG_SIGNATURE), []
    while pos < len(data):
        if pos + 8 > len(data):
            raise CodecError("truncated PNG chunk header")
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        tag = data[pos + 4:pos + 8]
        payload = data[pos + 8:pos + 8 + length]
        crc_bytes = data[pos + 8 + length:pos + 12 + length]
        if len(payload) != length or len(crc_bytes) != 4:
            raise CodecError(f"truncated PNG chunk {tag!r}")
        if struct.unpack(">I", crc_bytes)[0] != zlib.crc32(payload, zlib.crc32(tag)) & 0xFFFFFFFF:
            raise CodecError(f"CRC mismatch in PNG chunk {tag!r}")
        chunks.append((tag, payload))
        pos += 12 + length
        if tag == b"IEND":
            break
    return chunks


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(raw: bytes, height: int, stride: int, bpp: int) -> np.ndarray:
    rows = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    pos = 0
    for y in range(height):
        ftype = raw[pos]
        line = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=pos + 1).copy()
        pos += stride + 1
        if ftype == 1:
            for i in range(bpp, stride):
                line[i] = (int(line[i]) + int(line[i - bpp])) & 0xFF
        elif ftype == 2:
            line = line + prev
        elif ftype == 3:
            for i in range(stride):
                left = int(line[i - bpp]) if i >= bpp else 0
                line[i] = (int(line[i]) + ((left + int(prev[i])) >> 1)) & 0xFF
        elif ftype == 4:
            for i in range(stride):
                left = int(line[i - bpp]) if i >= bpp else 0
                upleft = int(prev[i - bpp]) if i >= bpp else 0
                line[i] = (int(line[i]) + _paeth(left, int(prev[i]), upleft)) & 0xFF
        elif ftype != 0:
            raise CodecError(f"unknown PNG filter type {ftype}")
        rows[y] = line
        prev = line
    return rows


def decode_indexed_png(data: bytes | EncodedBlob) -> IndexedImage:
    """Decode a non-interlaced color-type-3 PNG back to an :class:`IndexedImage`."""
    if isinstance(data, EncodedBlob):
        data = data.data
    chunks = read_chunks(data)
    header = dict(chunks)
    if b"IHDR" not in header or b"PLTE" not in header:
        raise CodecError("PNG lacks IHDR or PLTE")
    w, h, depth, ctype, _, _, interlace = struct.unpack(">IIBBBBB", header[b"IHDR"])
    if ctype != 3 or interlace != 0:
        raise CodecError("only non-interlaced indexed PNGs are supported")
    palette = np.frombuffer(header[b"PLTE"], dtype=np.uint8).reshape(-1, 3)
    raw = zlib.decompress(b"".join(p for t, p in chunks if t == b"IDAT"))
    per_byte = 8 // depth
    stride = -(-w // per_byte)
    rows = _unfilter(raw, h, stride, 1)
    shifts = np.arange(per_byte - 1, -1, -1) * depth
    idx = ((rows[:, :, None] >> shifts) & ((1 << depth) - 1)).reshape(h, -1)[:, :w]
    return IndexedImage(idx.astype(np.int64), palette.astype(np.float64) / 255.0, len(palette))


def bits_per_pixel(blob: EncodedBlob) -> float:
    area = blob.width * blob.height
    if area <= 0:
        raise ValueError("bits per pixel undefined for a zero-area image")
    return 8.0 * len(blob.data) / area


def _pil():
    try:
        from PIL import Image, features
    except ImportError as exc:  # pragma: no cover - Pillow is a hard dependency
        raise CodecUnavailableError("JPEG/RGB encoding needs Pillow: pip install Pillow") from exc
    return Image, features


def encode_rgb_png(image: np.ndarray) -> EncodedBlob:
    """Lossless truecolor PNG, used to meter pass-through images."""
    Image, _ = _pil()
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="PNG", optimize=True)
    return EncodedBlob(buf.getvalue(), arr.shape[1], arr.shape[0], "png-rgb")


def jpeg_reference(image: np.ndarray, quality: int) -> EncodedBlob:
    """Encode with the system JPEG codec through Pillow (4:2:0, baseline)."""
    if not 1 <= int(quality) <= 100:
        raise ValueError(f"JPEG quality {quality} outside 1..100")
    Image, features = _pil()
    if not features.check("jpg"):
        raise CodecUnavailableError("Pillow was built without libjpeg; reinstall Pillow "
                                    "from a wheel that bundles JPEG support")
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="JPEG", quality=int(quality))
    return EncodedBlob(buf.getvalue(), arr.shape[1], arr.shape[0], "jpeg")


def decode_image(blob: EncodedBlob) -> np.ndarray:
    """Decode any blob to a uint8 ``(H, W, 3)`` array."""
    if blob.format == "png-indexed":
        ix = decode_indexed_png(blob)
        return palette_to_uint8(ix.palette)[ix.index_map]
    Image, _ = _pil()
    with Image.open(io.BytesIO(blob.data)) as im:
        return np.asarray(im.convert("RGB"))
