"""SVOL volume container: the on-disk format for images, labels, and fields.

Layout: magic ``SVOL``, version u32 (=1), kind u8, channels u32, extents
u32 x 3 (D, H, W), then channels*D*H*W float32 little-endian scalars in
C order with channel slowest. Labels are stored as reals holding integers.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SVOL"
VERSION = 1

KIND_IMAGE = 0
KIND_LABELS = 1
KIND_DISPLACEMENT = 2
KIND_VELOCITY = 3
KIND_NAMES = {
    KIND_IMAGE: "image",
    KIND_LABELS: "labels",
    KIND_DISPLACEMENT: "displacement",
    KIND_VELOCITY: "velocity",
}


class SvolError(ValueError):
    """Malformed SVOL content (as opposed to an I/O failure)."""


def write_svol(path, data: np.ndarray, kind: int):
    if kind not in KIND_NAMES:
        raise SvolError(f"unknown SVOL kind {kind}")
    data = np.asarray(data)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4:
        raise SvolError(f"SVOL payload must be (C, D, H, W), got {data.shape}")
    c, d, h, w = data.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<B", kind))
        f.write(struct.pack("<I", c))
        f.write(struct.pack("<3I", d, h, w))
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_svol(path):
    """Read a volume back as (array (C,D,H,W) float32, kind)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 25:
        raise SvolError(f"file too short to hold an SVOL header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise SvolError(f"bad SVOL magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise SvolError(f"unsupported SVOL version {version}")
    (kind,) = struct.unpack_from("<B", blob, 8)
    if kind not in KIND_NAMES:
        raise SvolError(f"unknown SVOL kind {kind}")
    (c,) = struct.unpack_from("<I", blob, 9)
    d, h, w = struct.unpack_from("<3I", blob, 13)
    expected = 25 + 4 * c * d * h * w
    if len(blob) != expected:
        raise SvolError(
            f"payload length mismatch: header implies {expected} bytes, "
            f"file has {len(blob)}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=25).reshape(c, d, h, w)
    return data.copy(), kind


def read_labels(path) -> np.ndarray:
    data, kind = read_svol(path)
    if kind != KIND_LABELS:
        raise SvolError(f"expected a labels volume, found kind {KIND_NAMES[kind]!r}")
    return np.rint(data[0]).astype(np.int64)


def read_field(path):
    data, kind = read_svol(path)
    if kind not in (KIND_DISPLACEMENT, KIND_VELOCITY):
        raise SvolError(f"expected a field volume, found kind {KIND_NAMES[kind]!r}")
    if data.shape[0] != 3:
        raise SvolError(f"field volumes need 3 channels, found {data.shape[0]}")
    return data, kind
