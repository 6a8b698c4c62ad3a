"""One-versus-one battery of linear SVMs trained on CNN features."""
from __future__ import annotations

import itertools
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_C_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0)
TOL = 1e-3
MAX_ITER = 50_000


@dataclass
class BinarySvm:
    weights: np.ndarray  # float32
    bias: float  # float32-representable
    pair: tuple[int, int]
    objective: float = float("nan")

    def decision(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float32) @ self.weights + np.float32(self.bias)


@dataclass
class SvmBattery:
    classifiers: list[BinarySvm]
    C: float
    classes: list[str]
    dim: int = 128
    selection: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def __len__(self):
        return len(self.classifiers)


def hinge_objective(w, b, x, y, C) -> float:
    margins = 1.0 - y * (x @ w + b)
    return 0.5 * float(w @ w) + C * float(np.maximum(margins, 0.0).sum())


def train_binary_svm(features, labels, C: float, pair: tuple[int, int] = (0, 1),
                     tol: float = TOL, max_iter: int = MAX_ITER) -> BinarySvm:
    """Linear SVM on +/-1 labels, minimising ``0.5*|w|^2 + C*sum(hinge)``.

    Sequential minimal optimisation on the dual with second-order working
    set selection; the bias is unregularised.  Stops when the maximal KKT
    violation drops below ``tol`` or after ``max_iter`` pair updates.
    Deterministic: the same data always gives the same classifier.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if C <= 0:
        raise ValueError("C must be positive")
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("features must be an n x d array with one label per row")
    if not set(np.unique(y)) <= {-1.0, 1.0}:
        raise ValueError("labels must be +1 or -1")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ValueError("both classes (+1 and -1) must be present")
    n, d = x.shape
    alpha = np.zeros(n)
    w = np.zeros(d)
    grad = -np.ones(n)  # gradient of the dual objective: y * (x @ w) - 1
    sq = np.einsum("ij,ij->i", x, x)
    pos = y > 0
    it = 0
    while it < max_iter:
        it += 1
        up = np.where(pos, alpha < C, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < C)
        f = -y * grad
        fu = np.where(up, f, -np.inf)
        i = int(np.argmax(fu))
        m = fu[i]
        if m - np.min(np.where(low, f, np.inf)) < tol:
            break
        ki = x @ x[i]
        curv = np.maximum(sq[i] + sq - 2.0 * ki, 1e-12)
        gain = np.where(low & (f < m), -((m - f) ** 2) / curv, np.inf)
        j = int(np.argmin(gain))
        step = (m - f[j]) / curv[j]
        step = min(step, C - alpha[i] if pos[i] else alpha[i], alpha[j] if pos[j] else C - alpha[j])
        alpha[i] += y[i] * step
        alpha[j] -= y[j] * step
        w += step * (x[i] - x[j])
        grad += y * (step * (ki - x @ x[j]))
    else:
        log.warning("SVM pair %s C=%g stopped at %d iterations before reaching tolerance", pair, C, max_iter)
    f = -y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        b = float(f[free].mean())
    else:
        up = np.where(pos, alpha < C, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < C)
        b = 0.5 * (f[up].max() + f[low].min())
    w32 = w.astype(np.float32)
    bias = float(np.float32(b))
    obj = hinge_objective(w32.astype(np.float64), bias, x, y, C)
    log.debug("svm pair %s C=%g iterations %d objective %.6g", pair, C, it, obj)
    return BinarySvm(w32, bias, tuple(pair), obj)


def train_ovo_battery(features, labels, C: float, classes) -> SvmBattery:
    """One classifier per unordered class pair (a < b), class a as +1."""
    x = np.asarray(features)
    y = np.asarray(labels)
    n_cls = len(classes)
    if n_cls < 2:
        raise ValueError("need at least two classes")
    for c in range(n_cls):
        if not np.any(y == c):
            raise ValueError(f"class {classes[c]!r} (index {c}) has no training samples")
    clfs = []
    for a, b in itertools.combinations(range(n_cls), 2):
        sel = (y == a) | (y == b)
        yy = np.where(y[sel] == a, 1.0, -1.0)
        clfs.append(train_binary_svm(x[sel], yy, C, pair=(a, b)))
    return SvmBattery(clfs, float(C), list(classes), dim=x.shape[1])


def vote_counts(battery: SvmBattery, features) -> np.ndarray:
    """Per-sample OvO vote counts (n x N); decision >= 0 votes for the pair's first class."""
    x = np.asarray(features, dtype=np.float32)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.shape[1] != battery.dim:
        raise ValueError(f"feature dimension {x.shape[1]} != battery dimension {battery.dim}")
    votes = np.zeros((len(x), battery.num_classes), dtype=np.int64)
    if battery.classifiers:
        w = np.stack([c.weights for c in battery.classifiers], axis=1)
        bias = np.array([c.bias for c in battery.classifiers], dtype=np.float32)
        dec = x @ w + bias
        for k, clf in enumerate(battery.classifiers):
            a, b = clf.pair
            win = dec[:, k] >= 0
            votes[:, a] += win
            votes[:, b] += ~win
    return votes[0] if single else votes


def argmax_lowest(counts) -> np.ndarray:
    """Row-wise argmax; ties resolve to the smallest index (numpy's convention)."""
    return np.argmax(counts, axis=-1)


def predict_ovo(battery: SvmBattery, features):
    """Labels and vote-count vectors for one feature vector or a batch."""
    votes = vote_counts(battery, features)
    return argmax_lowest(votes), votes


def accuracy(battery: SvmBattery, features, labels) -> float:
    pred, _ = predict_ovo(battery, features)
    return float(np.mean(pred == np.asarray(labels)))


def select_C(train_x, train_y, val_x, val_y, classes,
             grid=DEFAULT_C_GRID) -> tuple[SvmBattery, list[tuple[float, float]]]:
    """Train a battery per C and keep the one with best validation accuracy.

    Ties go to the smallest C.  Returns the chosen battery and the
    ``(C, accuracy)`` log.
    """
    grid = [float(c) for c in grid]
    if not grid:
        raise ValueError("empty C grid")
    if any(c <= 0 for c in grid):
        raise ValueError("C values must be positive")
    results = []
    best = None
    for C in grid:
        battery = train_ovo_battery(train_x, train_y, C, classes)
        acc = accuracy(battery, val_x, val_y)
        results.append((C, acc))
        log.info("C=%g validation accuracy %.4f", C, acc)
        if best is None or acc > best[0] or (acc == best[0] and C < best[1].C):
            best = (acc, battery)
    battery = best[1]
    battery.selection = {"grid": grid, "accuracy": [a for _, a in results]}
    return battery, results


def choose_C(grid, accuracies) -> float:
    """Argmax of ``accuracies`` with ties going to the smallest C."""
    if not len(grid):
        raise ValueError("empty C grid")
    return min(zip(grid, accuracies), key=lambda ca: (-ca[1], ca[0]))[0]


# ---------------------------------------------------------------- serialisation

SVM_MAGIC = b"CAMIDSVM"
SVM_VERSION = 1


class BatteryFormatError(ValueError):
    pass


def save_battery(battery: SvmBattery, path) -> None:
    payload = b"".join(
        np.ascontiguousarray(c.weights, dtype="<f4").tobytes() + struct.pack("<f", c.bias)
        for c in battery.classifiers)
    header = {
        "classes": battery.classes,
        "num_classes": battery.num_classes,
        "C": battery.C,
        "dim": battery.dim,
        "pairs": [list(c.pair) for c in battery.classifiers],
        "selection": battery.selection,
        "crc32": zlib.crc32(payload),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(SVM_MAGIC + struct.pack("<II", SVM_VERSION, len(hbytes)) + hbytes + payload)


def load_battery(path) -> SvmBattery:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:len(SVM_MAGIC)] != SVM_MAGIC or len(raw) < len(SVM_MAGIC) + 8:
        raise BatteryFormatError(f"{path}: not an SVM battery file")
    version, hlen = struct.unpack_from("<II", raw, len(SVM_MAGIC))
    if version != SVM_VERSION:
        raise BatteryFormatError(f"{path}: battery version {version}, expected {SVM_VERSION}")
    start = len(SVM_MAGIC) + 8
    try:
        header = json.loads(raw[start:start + hlen])
    except ValueError as exc:
        raise BatteryFormatError(f"{path}: corrupt header") from exc
    dim = header["dim"]
    rec = dim * 4 + 4
    payload = raw[start + hlen:]
    if len(payload) != rec * len(header["pairs"]):
        raise BatteryFormatError(f"{path}: truncated payload ({len(payload)} bytes)")
    if zlib.crc32(payload) != header["crc32"]:
        raise BatteryFormatError(f"{path}: payload checksum mismatch")
    clfs = []
    for k, pair in enumerate(header["pairs"]):
        off = k * rec
        w = np.frombuffer(payload, dtype="<f4", count=dim, offset=off).astype(np.float32)
        (b,) = struct.unpack_from("<f", payload, off + dim * 4)
        clfs.append(BinarySvm(w, b, tuple(pair)))
    return SvmBattery(clfs, header["C"], header["classes"], dim, header.get("selection", {}))
