"""Binary feature-file format shared with external exporters.

Little-endian layout:

    magic "E2FV" (4 bytes)
    format version  u32 = 1
    dtype code      u8  (1 = float32)
    has_labels      u8
    reserved        u16 = 0
    num_samples     u64
    raw_dim         u64
    features        num_samples * raw_dim float32, row-major
    labels          num_samples i64, present iff has_labels = 1

Labels use -1 for unlabeled rows in mixed files.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"E2FV"
VERSION = 1
DTYPE_FLOAT32 = 1
HEADER = struct.Struct("<4sIBBHQQ")


class FeatureFileError(Exception):
    """Raised on any malformed feature file; message names the defect."""


def write_feature_file(path, features: np.ndarray, labels=None) -> None:
    features = np.ascontiguousarray(features, dtype=np.float32)
    if features.ndim != 2:
        raise ValueError(f"features must be 2-D, got ndim={features.ndim}")
    if not np.all(np.isfinite(features)):
        raise ValueError("features contain non-finite entries")
    n, d = features.shape
    has_labels = labels is not None
    if has_labels:
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ValueError(f"labels shape {labels.shape} does not match {n} rows")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, int(has_labels), 0, n, d))
        fh.write(features.tobytes())
        if has_labels:
            fh.write(labels.tobytes())


def read_feature_file(path):
    """Read an E2FV file, returning (features float32 [n x d], labels or None)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER.size:
        raise FeatureFileError(
            f"truncated header: expected at least {HEADER.size} bytes, got {len(blob)}"
        )
    magic, version, dtype_code, has_labels, reserved, n, d = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FeatureFileError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FeatureFileError(f"unsupported format version {version}, expected {VERSION}")
    if dtype_code != DTYPE_FLOAT32:
        raise FeatureFileError(f"unsupported dtype code {dtype_code}")
    if has_labels not in (0, 1):
        raise FeatureFileError(f"invalid has_labels flag {has_labels}")
    feat_bytes = n * d * 4
    label_bytes = n * 8 if has_labels else 0
    expected = HEADER.size + feat_bytes + label_bytes
    if len(blob) < expected:
        raise FeatureFileError(
            f"truncated payload: expected {expected} bytes, got {len(blob)}"
        )
    features = np.frombuffer(
        blob, dtype="<f4", count=n * d, offset=HEADER.size
    ).reshape(n, d).copy()
    if not np.all(np.isfinite(features)):
        raise FeatureFileError("NaN or Inf entries in feature payload")
    labels = None
    if has_labels:
        labels = np.frombuffer(
            blob, dtype="<i8", count=n, offset=HEADER.size + feat_bytes
        ).copy()
    return features, labels
