"""``OLP1`` patch archive.

Little-endian layout::

    b"OLP1"  u16 version  u32 record_count
    per record:
        u16 byte length + UTF-8 area id
        i32 acquisition date as days since 1970-01-01
        3 x 64*64 f32 channel planes (channel-major, rows then columns)
        512-byte validity bitmask, row-major, most significant bit first
"""

import datetime as dt
import struct

import numpy as np

from .frames import CHANNELS, PATCH_SIZE, SatellitePatch

MAGIC = b"OLP1"
VERSION = 1
EPOCH = dt.date(1970, 1, 1)
_N_PIX = PATCH_SIZE * PATCH_SIZE
_PLANES_BYTES = 4 * _N_PIX * len(CHANNELS)
_MASK_BYTES = _N_PIX // 8


class ArchiveError(ValueError):
    pass


def encode_patches(patches):
    out = [MAGIC, struct.pack("<HI", VERSION, len(patches))]
    for p in patches:
        area = p.area.encode("utf-8")
        out.append(struct.pack("<H", len(area)) + area)
        out.append(struct.pack("<i", (p.date - EPOCH).days))
        planes = np.ascontiguousarray(np.moveaxis(p.pixels, -1, 0), dtype="<f4")
        out.append(planes.tobytes())
        out.append(np.packbits(p.valid_mask.reshape(-1)).tobytes())
    return b"".join(out)


def decode_patches(buf):
    buf = bytes(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise ArchiveError(f"truncated archive: {what} needs {n} bytes at offset {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise ArchiveError("bad magic: not an OLP1 archive")
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise ArchiveError(f"unsupported OLP1 version {version}")
    patches = []
    for i in range(count):
        (n,) = struct.unpack("<H", take(2, f"record {i} area length"))
        area = take(n, f"record {i} area id").decode("utf-8")
        (days,) = struct.unpack("<i", take(4, f"record {i} date"))
        planes = np.frombuffer(take(_PLANES_BYTES, f"record {i} channel planes"), dtype="<f4")
        pixels = np.moveaxis(planes.reshape(len(CHANNELS), PATCH_SIZE, PATCH_SIZE), 0, -1)
        bits = np.frombuffer(take(_MASK_BYTES, f"record {i} validity mask"), dtype=np.uint8)
        mask = np.unpackbits(bits).reshape(PATCH_SIZE, PATCH_SIZE).astype(bool)
        patches.append(
            SatellitePatch(area, EPOCH + dt.timedelta(days=days), pixels.astype(np.float32), mask)
        )
    if pos != len(buf):
        raise ArchiveError(f"{len(buf) - pos} trailing bytes at offset {pos}")
    return patches


def write_patch_archive(patches, path):
    with open(path, "wb") as fh:
        fh.write(encode_patches(patches))


def read_patch_archive(path):
    with open(path, "rb") as fh:
        return decode_patches(fh.read())
