"""Flat binary container framing shared by the checkpoint and episode files.

Layout: magic bytes, u32 version, then a sequence of records. All integers
are little-endian u32, all floating payloads little-endian float64.
"""

import struct

import numpy as np


class ContainerFormatError(ValueError):
    pass


class BadMagicError(ContainerFormatError):
    pass


class BadVersionError(ContainerFormatError):
    pass


class TruncatedContainerError(ContainerFormatError):
    pass


def write_header(fh, magic, version):
    fh.write(magic)
    fh.write(struct.pack("<I", version))


def read_header(fh, magic, expected_version):
    got = fh.read(len(magic))
    if got != magic:
        raise BadMagicError(f"bad magic: expected {magic!r}, got {got!r}")
    raw = fh.read(4)
    if len(raw) != 4:
        raise TruncatedContainerError("file truncated inside the header")
    (version,) = struct.unpack("<I", raw)
    if version != expected_version:
        raise BadVersionError(f"unsupported format version {version}, expected {expected_version}")
    return version


def write_u32(fh, value):
    fh.write(struct.pack("<I", int(value)))


def read_u32(fh, context):
    raw = fh.read(4)
    if len(raw) != 4:
        raise TruncatedContainerError(f"file truncated while reading {context}")
    return struct.unpack("<I", raw)[0]


def write_string(fh, text):
    payload = text.encode("utf-8")
    write_u32(fh, len(payload))
    fh.write(payload)


def read_string(fh, context):
    n = read_u32(fh, f"{context} length")
    raw = fh.read(n)
    if len(raw) != n:
        raise TruncatedContainerError(f"file truncated while reading {context}")
    return raw.decode("utf-8")


def write_f64_block(fh, values):
    fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_f64_block(fh, count, context):
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise TruncatedContainerError(f"file truncated while reading {context}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)
