"""Binary parameter files (``TXC1``) and CSV training histories.

Layout, all little-endian::

    b"TXC1"  u16 version  u32 n_records
    per record:
        u16 layer_index
        u8 len + ASCII layer kind tag
        u8 len + ASCII array name ("kernel", "bias", "state:mean", ...)
        u8 ndim, ndim x u32 extents
        prod(extents) x f64 values
"""

import csv
import io
import struct

import numpy as np

MAGIC = b"TXC1"
VERSION = 1


class FormatError(ValueError):
    pass


def _arrays(model):
    for i, layer in enumerate(model.layers):
        for name, arr in layer.params.items():
            yield i, layer.kind, name, arr
        for name, arr in layer.state.items():
            yield i, layer.kind, f"state:{name}", arr


def _short_str(s):
    raw = s.encode("ascii")
    return struct.pack("<B", len(raw)) + raw


def dumps_weights(model):
    records = list(_arrays(model))
    out = [MAGIC, struct.pack("<HI", VERSION, len(records))]
    for i, kind, name, arr in records:
        out.append(struct.pack("<H", i))
        out.append(_short_str(kind))
        out.append(_short_str(name))
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: needed {n} bytes for {what} at offset {self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def short_str(self, what):
        (n,) = self.unpack("<B", what)
        return self.take(n, what).decode("ascii")


def parse_weights(buf):
    """Parse a TXC1 blob into a list of ``(layer_index, kind, name, array)``."""
    r = _Reader(memoryview(buf).tobytes())
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic: not a TXC1 parameter file")
    version, count = r.unpack("<HI", "header")
    if version != VERSION:
        raise FormatError(f"unsupported TXC1 version {version}")
    records = []
    for _ in range(count):
        (index,) = r.unpack("<H", "layer index")
        kind = r.short_str("kind tag")
        name = r.short_str("array name")
        (ndim,) = r.unpack("<B", "ndim")
        shape = r.unpack(f"<{ndim}I", "shape")
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * n, f"{kind}.{name} data"), dtype="<f8")
        records.append((index, kind, name, data.reshape(shape).copy()))
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after last record")
    return records, r.pos


def loads_weights(model, buf):
    """Load a TXC1 blob into an already-built ``model`` with matching architecture."""
    records, _ = parse_weights(buf)
    expected = [(i, k, n, a.shape) for i, k, n, a in _arrays(model)]
    got = [(i, k, n, a.shape) for i, k, n, a in records]
    if expected != got:
        raise FormatError("parameter records do not match the model architecture")
    for i, kind, name, arr in records:
        layer = model.layers[i]
        if name.startswith("state:"):
            layer.state[name[6:]] = arr.astype(model.dtype)
        else:
            layer.params[name][...] = arr
    return model


def save_weights(model, path):
    with open(path, "wb") as fh:
        fh.write(dumps_weights(model))


def load_weights(model, path):
    with open(path, "rb") as fh:
        return loads_weights(model, fh.read())


def history_csv(history):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "train_loss", "val_loss"])
    for epoch, tr, va in history.rows():
        writer.writerow([epoch, repr(float(tr)), repr(float(va))])
    return buf.getvalue()


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        fh.write(history_csv(history))
