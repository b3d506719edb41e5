"""Feature dump files.

Binary layout (little endian)::

    b"FDAF" | u32 version=1 | u32 d | u32 N | u32 num_classes
    | N*d float32 (row = sample) | N uint32 labels

The CSV alternative has a ``label,f0,...,f{d-1}`` header and one sample per row.
Features are stored as float32, so a set written once round-trips bit-exactly
from then on.
"""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .dataset import LabeledFeatureSet

MAGIC = b"FDAF"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class DumpFormatError(ValueError):
    """Malformed dump; ``offset`` is the byte (or line) where parsing failed."""

    def __init__(self, message: str, offset: int, unit: str = "byte offset"):
        self.offset = offset
        super().__init__(f"{message} (at {unit} {offset})")


def encode_dump(fs: LabeledFeatureSet) -> bytes:
    d, n = fs.features.shape
    labels = fs.labels
    if labels.size and labels.max() >= 2**32:
        raise ValueError("labels must fit in u32")
    num_classes = int(labels.max()) + 1 if labels.size else 0
    head = _HEADER.pack(MAGIC, VERSION, d, n, num_classes)
    body = np.ascontiguousarray(fs.features.T, dtype="<f4").tobytes()
    return head + body + labels.astype("<u4").tobytes()


def decode_dump(data: bytes, name: str = "") -> LabeledFeatureSet:
    if len(data) < _HEADER.size:
        raise DumpFormatError(f"truncated header: need {_HEADER.size} bytes, have {len(data)}", len(data))
    magic, version, d, n, num_classes = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DumpFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise DumpFormatError(f"unsupported version {version}", 4)
    feat_end = _HEADER.size + 4 * d * n
    if len(data) < feat_end:
        raise DumpFormatError(f"truncated feature block: expected {4 * d * n} bytes", len(data))
    lab_end = feat_end + 4 * n
    if len(data) < lab_end:
        raise DumpFormatError(f"truncated label block: expected {4 * n} bytes", len(data))
    if len(data) > lab_end:
        raise DumpFormatError(f"{len(data) - lab_end} trailing bytes", lab_end)
    feats = np.frombuffer(data, dtype="<f4", count=d * n, offset=_HEADER.size).reshape(n, d)
    labels = np.frombuffer(data, dtype="<u4", count=n, offset=feat_end).astype(np.int64)
    if n and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise DumpFormatError(f"label {labels[bad]} >= num_classes {num_classes}", feat_end + 4 * bad)
    if not np.all(np.isfinite(feats)):
        bad = int(np.argmax(~np.isfinite(feats).ravel()))
        raise DumpFormatError("non-finite feature value", _HEADER.size + 4 * bad)
    return LabeledFeatureSet(feats.T.astype(np.float64), labels, name)


def write_dump(path, fs: LabeledFeatureSet) -> None:
    path = Path(path)
    if path.suffix == ".csv":
        write_csv(path, fs)
    else:
        path.write_bytes(encode_dump(fs))


def read_dump(path) -> LabeledFeatureSet:
    path = Path(path)
    if path.suffix == ".csv":
        return read_csv(path)
    return decode_dump(path.read_bytes(), name=path.stem)


def write_csv(path, fs: LabeledFeatureSet) -> None:
    feats = fs.features.T.astype(np.float32)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(fs.d)])
        for lab, row in zip(fs.labels, feats):
            w.writerow([int(lab)] + [repr(float(v)) for v in row])


def read_csv(path) -> LabeledFeatureSet:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["label"]:
        raise DumpFormatError("missing 'label,f0,...' header", 1, "line")
    d = len(rows[0]) - 1
    if rows[0][1:] != [f"f{i}" for i in range(d)]:
        raise DumpFormatError("header columns must be f0..f{d-1}", 1, "line")
    labels, feats = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != d + 1:
            raise DumpFormatError(f"expected {d + 1} fields, got {len(row)}", lineno, "line")
        try:
            labels.append(int(row[0]))
            feats.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise DumpFormatError(str(exc), lineno, "line") from None
    if not labels:
        raise DumpFormatError("no samples", 2, "line")
    x = np.asarray(feats, dtype=np.float32).astype(np.float64).T
    return LabeledFeatureSet(x, np.asarray(labels), path.stem)
