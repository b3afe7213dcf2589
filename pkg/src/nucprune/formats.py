"""Bit-exact persistence: weight files, PGM label maps, PFM float maps and
the results CSV.

Weight file layout (all integers little-endian)::

    b"PRNW"  u32 version=1  u32 n_tensors
    per tensor:
        u16 name_len, name (utf-8), u8 ndim, u32 * ndim dims, u8 has_mask,
        f32 * n data (row-major),
        [ceil(n / 8) bytes of mask bits, LSB first, 1 = keep]   if has_mask
"""
from __future__ import annotations

import csv
import math
import re
import struct
from pathlib import Path

import numpy as np

from .autonet import Network
from .metrics import MetricsReport

MAGIC = b"PRNW"
VERSION = 1
MAX_NDIM = 32
CSV_HEADER = ["run_id", "branch", "method", "cr", "sparsity", "dice", "mse", "aji", "pq", "speedup"]


class FormatError(ValueError):
    pass


class BadMagic(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class Truncated(FormatError):
    pass


class MaskMismatch(FormatError):
    """Mask and weights disagree: a masked-out weight is nonzero."""


class LabelOverflow(FormatError):
    pass


# ---------------------------------------------------------------- weights

def encode_network(net: Network) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(net.params))]
    for name, arr in net.params.items():
        raw = name.encode("utf-8")
        mask = net.masks.get(name)
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(struct.pack("<B", mask is not None))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        if mask is not None:
            out.append(np.packbits(mask.ravel(), bitorder="little").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise Truncated(f"need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_tensors(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Parse a weight file into (params, masks)."""
    if buf[:4] != MAGIC:
        raise BadMagic("not a PRNW weight file")
    r = _Reader(buf)
    r.take(4)
    version, count = r.unpack("<II")
    if version != VERSION:
        raise UnsupportedVersion(f"weight file version {version}, expected {VERSION}")
    params, masks = {}, {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor name is not valid UTF-8 at offset {r.pos}") from exc
        if name in params:
            raise FormatError(f"duplicate tensor {name!r}")
        (ndim,) = r.unpack("<B")
        if ndim > MAX_NDIM:
            raise FormatError(f"tensor {name!r} claims {ndim} dimensions (limit {MAX_NDIM})")
        dims = r.unpack(f"<{ndim}I")
        (has_mask,) = r.unpack("<B")
        if has_mask not in (0, 1):
            raise FormatError(f"has_mask flag must be 0 or 1, got {has_mask}")
        n = math.prod(dims)
        raw = r.take(4 * n)
        try:
            data = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
        except ValueError as exc:  # e.g. a zero dim next to dims numpy cannot represent
            raise FormatError(f"tensor {name!r} has unusable shape {dims}") from exc
        params[name] = data
        if has_mask:
            bits = np.frombuffer(r.take((n + 7) // 8), dtype=np.uint8)
            mask = np.unpackbits(bits, bitorder="little")[:n].astype(bool).reshape(dims)
            if np.any(data[~mask] != 0):
                raise MaskMismatch(f"tensor {name!r} has nonzero weights at masked positions")
            masks[name] = mask
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after the last tensor")
    return params, masks


def save_network(path, net: Network) -> None:
    Path(path).write_bytes(encode_network(net))


def load_network(path, template: Network) -> Network:
    """Load weights and masks into a copy of ``template``.

    The file must hold exactly the template's tensors with matching shapes.
    """
    params, masks = decode_tensors(Path(path).read_bytes())
    if set(params) != set(template.params):
        missing = sorted(set(template.params) - set(params))
        extra = sorted(set(params) - set(template.params))
        raise FormatError(f"tensor names differ from the architecture (missing {missing}, extra {extra})")
    for name, arr in params.items():
        if arr.shape != template.params[name].shape:
            raise FormatError(f"tensor {name!r} has shape {arr.shape}, "
                              f"expected {template.params[name].shape}")
    net = template.copy()
    net.params = {name: params[name].copy() for name in template.params}
    net.masks = masks
    return net


# ---------------------------------------------------------------- PGM / PFM

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens (PNM comments allowed).

    Returns the tokens and the offset just past the single whitespace byte
    that ends the header.
    """
    pos, toks = 0, []
    for _ in range(count):
        m = _TOKEN.match(buf, pos)
        if not m:
            raise FormatError("truncated header")
        toks.append(m.group(1))
        pos = m.end()
    if pos >= len(buf) or buf[pos:pos + 1] not in b" \t\r\n":
        raise FormatError("header must end with a single whitespace byte")
    return toks, pos + 1


def _uint(tok: bytes, what: str) -> int:
    if not tok.isdigit():
        raise FormatError(f"{what} must be a decimal integer, got {tok[:20]!r}")
    return int(tok)


def save_labelmap(path, labels: np.ndarray) -> None:
    """Binary 16-bit PGM (``P5``, maxval 65535, big-endian samples)."""
    lm = np.asarray(labels)
    if lm.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {lm.shape}")
    if lm.size and (lm.min() < 0 or lm.max() > 65535):
        raise LabelOverflow(f"labels must lie in [0, 65535], got range [{lm.min()}, {lm.max()}]")
    h, w = lm.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + lm.astype(">u2").tobytes())


def load_labelmap(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _header_tokens(buf, 4)
    if magic != b"P5":
        raise BadMagic(f"expected binary PGM 'P5', got {magic[:8]!r}")
    w, h, maxval = _uint(w, "width"), _uint(h, "height"), _uint(maxval, "maxval")
    if not 0 < maxval <= 65535:
        raise FormatError(f"maxval {maxval} outside 1..65535")
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    if len(buf) - pos != n:
        raise Truncated(f"expected {n} sample bytes for {w}x{h}, found {len(buf) - pos}")
    lm = np.frombuffer(buf, dtype=dtype, offset=pos).reshape(h, w)
    if lm.size and lm.max() > maxval:
        raise FormatError(f"sample {lm.max()} exceeds maxval {maxval}")
    return lm.astype(np.int32)


def save_floatmap(path, fmap: np.ndarray) -> None:
    """Greyscale PFM (``Pf``), little-endian, rows stored bottom to top."""
    a = np.asarray(fmap)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"float map must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("float map contains non-finite values")
    h, w = a.shape
    body = np.ascontiguousarray(a[::-1], dtype="<f4").tobytes()
    Path(path).write_bytes(f"Pf\n{w} {h}\n-1.0\n".encode() + body)


def load_floatmap(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, scale), pos = _header_tokens(buf, 4)
    if magic == b"PF":
        raise FormatError("colour PFM ('PF') is not supported; expected greyscale 'Pf'")
    if magic != b"Pf":
        raise BadMagic(f"expected PFM 'Pf', got {magic[:8]!r}")
    w, h = _uint(w, "width"), _uint(h, "height")
    try:
        s = float(scale)
    except ValueError as exc:
        raise FormatError(f"bad PFM scale {scale[:20]!r}") from exc
    if s == 0 or not math.isfinite(s):
        raise FormatError(f"PFM scale must be finite and nonzero, got {s}")
    n = 4 * w * h
    if len(buf) - pos != n:
        raise Truncated(f"expected {n} data bytes for {w}x{h}, found {len(buf) - pos}")
    dtype = "<f4" if s < 0 else ">f4"
    a = np.frombuffer(buf, dtype=dtype, offset=pos).reshape(h, w)[::-1]
    return a.astype(np.float32)


# ---------------------------------------------------------------- CSV

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def write_results_csv(path, reports: list[MetricsReport]) -> None:
    rows = sorted(reports, key=lambda r: (r.branch, r.method, r.cr))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_HEADER)
        for r in rows:
            wr.writerow([_fmt(getattr(r, col)) for col in CSV_HEADER])


def read_results_csv(path) -> list[MetricsReport]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != CSV_HEADER:
            raise FormatError(f"unexpected results header {header}")
        out = []
        for row in rd:
            vals = dict(zip(CSV_HEADER, row))
            floats = {k: (float(vals[k]) if vals[k] != "" else None)
                      for k in ("sparsity", "dice", "mse", "aji", "pq", "speedup")}
            out.append(MetricsReport(run_id=vals["run_id"], branch=vals["branch"],
                                     method=vals["method"], cr=int(vals["cr"]), **floats))
    return out
