"""Per-patch feature files: one fixed-size record per patch."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

FEAT_MAGIC = b"CAMIDFEA"
FEAT_VERSION = 1


class FeatureFormatError(ValueError):
    pass


@dataclass
class FeatureSet:
    features: np.ndarray  # n x dim float32
    labels: np.ndarray  # n int, index into classes
    image_index: np.ndarray  # n int, index into images
    rows: np.ndarray  # grid row of the patch
    cols: np.ndarray  # grid column of the patch
    images: list[str]
    classes: list[str]

    def __len__(self):
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _record_dtype(dim):
    return np.dtype([("image", "<u4"), ("row", "<u2"), ("col", "<u2"), ("label", "<i4"), ("x", "<f4", (dim,))])


def write_features(fs: FeatureSet, path) -> None:
    """Header (JSON: dim, count, classes, image ids) then packed little-endian records."""
    rec = np.zeros(len(fs), dtype=_record_dtype(fs.dim))
    rec["image"], rec["row"], rec["col"] = fs.image_index, fs.rows, fs.cols
    rec["label"], rec["x"] = fs.labels, fs.features
    header = json.dumps({"dim": fs.dim, "count": len(fs), "classes": fs.classes, "images": fs.images},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(FEAT_MAGIC + struct.pack("<II", FEAT_VERSION, len(header)) + header + rec.tobytes())


def read_features(path) -> FeatureSet:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:len(FEAT_MAGIC)] != FEAT_MAGIC or len(raw) < len(FEAT_MAGIC) + 8:
        raise FeatureFormatError(f"{path}: not a feature file")
    version, hlen = struct.unpack_from("<II", raw, len(FEAT_MAGIC))
    if version != FEAT_VERSION:
        raise FeatureFormatError(f"{path}: feature file version {version}, expected {FEAT_VERSION}")
    start = len(FEAT_MAGIC) + 8
    try:
        header = json.loads(raw[start:start + hlen])
    except ValueError as exc:
        raise FeatureFormatError(f"{path}: corrupt header") from exc
    dt = _record_dtype(header["dim"])
    body = raw[start + hlen:]
    if len(body) != dt.itemsize * header["count"]:
        raise FeatureFormatError(f"{path}: expected {header['count']} records, file holds {len(body) / dt.itemsize:g}")
    rec = np.frombuffer(body, dtype=dt)
    return FeatureSet(rec["x"].astype(np.float32), rec["label"].astype(np.int64), rec["image"].astype(np.int64),
                      rec["row"].astype(np.int64), rec["col"].astype(np.int64), header["images"], header["classes"])
