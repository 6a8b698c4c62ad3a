"""Dataset manifests, scene/instance-disjoint splits, voting attribution and evaluation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cnn, svm
from .imageio import decode_image
from .patches import PATCH, extract_patches, grid_blocks, patch_quality

REJECT = -1


@dataclass(frozen=True)
class ImageRecord:
    path: str
    model: str
    instance: str
    scene: str


@dataclass
class Manifest:
    records: list[ImageRecord]
    labels: list[str] | None = None
    root: Path | None = None

    def __post_init__(self):
        if self.labels is None:
            self.labels = sorted({r.model for r in self.records})
        known = set(self.labels)
        seen = set()
        for r in self.records:
            if r.model not in known:
                raise ValueError(f"record {r.path}: model {r.model!r} not in label table")
            if r.path in seen:
                raise ValueError(f"duplicate image path {r.path}")
            seen.add(r.path)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def label_index(self, model: str) -> int:
        return self.labels.index(model)

    def resolve(self, record: ImageRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() or self.root is None else Path(self.root) / p

    def subset(self, records) -> "Manifest":
        return Manifest(list(records), list(self.labels), self.root)

    def write(self, path) -> None:
        path = Path(path)
        root = Path(self.root) if self.root is not None else path.parent
        with open(path, "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(["path", "model", "instance", "scene"])
            for r in self.records:
                p = Path(r.path)
                if not p.is_absolute():
                    p = _relative(root / p, path.parent)
                wr.writerow([p.as_posix(), r.model, r.instance, r.scene])

    @classmethod
    def read(cls, path, labels: list[str] | None = None) -> "Manifest":
        path = Path(path)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        if not rows or [c.strip() for c in rows[0]] != ["path", "model", "instance", "scene"]:
            raise ValueError(f"{path}: manifest header must be path,model,instance,scene")
        records = []
        for n, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{n}: expected 4 fields, got {len(row)}")
            records.append(ImageRecord(*(c.strip() for c in row)))
        return cls(records, labels, root=path.parent)


def _relative(target: Path, base: Path) -> Path:
    import os
    return Path(os.path.relpath(target, base))


@dataclass
class SplitSpec:
    eval_scenes: int
    val_scenes: int
    seed: int = 0


@dataclass
class Split:
    train: Manifest
    val: Manifest
    eval: Manifest
    eval_scenes: list[str]
    val_scenes: list[str]
    held_out: dict[str, str]  # model -> held-out instance


def split_dataset(manifest: Manifest, spec: SplitSpec) -> Split:
    """Scene- and instance-disjoint train / validation / evaluation split.

    Evaluation holds the images of ``eval_scenes`` held-out scenes shot by a
    single held-out instance of each model.  Validation takes the images of
    ``val_scenes`` further scenes from the remaining instances, and training
    the rest of the remaining instances' images.  Held-out instances never
    contribute to training or validation.
    """
    instances: dict[str, set[str]] = {}
    for r in manifest:
        instances.setdefault(r.model, set()).add(r.instance)
    for model in manifest.labels:
        if len(instances.get(model, ())) < 2:
            raise ValueError(f"model {model!r} has fewer than two instances; cannot hold one out")
    scenes = sorted({r.scene for r in manifest})
    if len(scenes) <= spec.eval_scenes + spec.val_scenes:
        raise ValueError(f"{len(scenes)} scenes cannot cover {spec.eval_scenes} evaluation + "
                         f"{spec.val_scenes} validation scenes plus training")
    if spec.eval_scenes < 1 or spec.val_scenes < 1:
        raise ValueError("need at least one evaluation and one validation scene")
    rng = np.random.default_rng(spec.seed)
    order = [scenes[i] for i in rng.permutation(len(scenes))]
    eval_sc = sorted(order[:spec.eval_scenes])
    val_sc = sorted(order[spec.eval_scenes:spec.eval_scenes + spec.val_scenes])
    held = {}
    for model in manifest.labels:
        insts = sorted(instances[model])
        held[model] = insts[int(rng.integers(len(insts)))]
    ev, va, tr = [], [], []
    eval_set, val_set = set(eval_sc), set(val_sc)
    for r in manifest:
        heldout = held[r.model] == r.instance
        if r.scene in eval_set:
            if heldout:
                ev.append(r)
        elif heldout:
            continue
        elif r.scene in val_set:
            va.append(r)
        else:
            tr.append(r)
    return Split(manifest.subset(tr), manifest.subset(va), manifest.subset(ev), eval_sc, val_sc, held)


def check_disjoint(split: Split) -> bool:
    """No scene and no (model, instance) of the evaluation set appears in training or validation."""
    fit = split.train.records + split.val.records
    ev = split.eval.records
    scenes = {r.scene for r in fit} & {r.scene for r in ev}
    units = {(r.model, r.instance) for r in fit} & {(r.model, r.instance) for r in ev}
    return not scenes and not units


# ---------------------------------------------------------------- patch data

def collect_patches(manifest: Manifest, k: int):
    """Top-``k`` patches of every image with labels and provenance.

    Returns ``(patches, labels, info)`` where ``info`` rows are
    ``(image index, grid row, grid col)``.
    """
    pats, labels, info = [], [], []
    for idx, rec in enumerate(manifest):
        ps = extract_patches(decode_image(manifest.resolve(rec)), k, source=rec.path)
        lab = manifest.label_index(rec.model)
        for p in ps:
            pats.append(p.pixels)
            labels.append(lab)
            info.append((idx, p.row, p.col))
    if not pats:
        return np.empty((0, PATCH, PATCH, 3), np.uint8), np.empty(0, np.int64), np.empty((0, 3), np.int64)
    return np.stack(pats), np.asarray(labels, dtype=np.int64), np.asarray(info, dtype=np.int64)


# ---------------------------------------------------------------- attribution

@dataclass
class ImagePrediction:
    """Per-patch predictions of one image, in patch-quality order."""

    patch_labels: np.ndarray
    patch_votes: np.ndarray  # n_patches x N OvO vote counts
    positions: list[tuple[int, int]] = field(default_factory=list)
    true_label: int | None = None
    path: str = ""

    def vote(self, k: int | None = None):
        """Majority label over the first ``k`` patches, or None if there are none."""
        labels = self.patch_labels[:k]
        votes = self.patch_votes[:k]
        if len(labels) == 0:
            return None, np.zeros(self.patch_votes.shape[1], dtype=np.int64)
        return majority_vote(labels, votes, self.patch_votes.shape[1])


def majority_vote(patch_labels, patch_votes, num_classes: int):
    """Modal patch label; ties by summed OvO votes, then by smaller label.

    Returns ``(label, tally)`` with ``tally`` the summed OvO vote counts.
    """
    counts = np.bincount(np.asarray(patch_labels), minlength=num_classes)
    tally = np.asarray(patch_votes).sum(axis=0)
    tied = np.flatnonzero(counts == counts.max())
    if len(tied) > 1:
        tied = tied[tally[tied] == tally[tied].max()]
    return int(tied[0]), tally


def predict_patches(image, model: cnn.CnnModel, battery: svm.SvmBattery, k: int, true_label=None,
                    path: str = "") -> ImagePrediction:
    ps = extract_patches(image, k, source=path)
    if ps.empty:
        return ImagePrediction(np.empty(0, np.int64), np.empty((0, battery.num_classes), np.int64),
                               [], true_label, path)
    feats = cnn.extract_features(model, ps.stack())
    labels, votes = svm.predict_ovo(battery, feats)
    return ImagePrediction(labels, votes, [(p.row, p.col) for p in ps], true_label, path)


@dataclass
class Attribution:
    label: int | None  # None when no patch qualified
    patch_labels: np.ndarray
    tally: np.ndarray
    shortfall: int = 0

    @property
    def classified(self) -> bool:
        return self.label is not None


def classify_image(image, model: cnn.CnnModel, battery: svm.SvmBattery, k: int = 32) -> Attribution:
    """Attribute an image by majority vote over its ``k`` best patches."""
    image = np.asarray(image)
    if k < 1:
        raise ValueError("k must be >= 1")
    if image.ndim != 3 or image.shape[0] < PATCH or image.shape[1] < PATCH:
        raise ValueError(f"image must be at least {PATCH}x{PATCH} RGB, got {image.shape}")
    pred = predict_patches(image, model, battery, k)
    label, tally = pred.vote()
    return Attribution(label, pred.patch_labels, tally, max(0, k - len(pred.patch_labels)))


def predict_manifest(manifest: Manifest, model, battery, k: int) -> list[ImagePrediction]:
    """Per-patch predictions for every image, computed once for reuse across K."""
    preds = []
    for rec in manifest:
        img = decode_image(manifest.resolve(rec))
        preds.append(predict_patches(img, model, battery, k, manifest.label_index(rec.model), rec.path))
    return preds


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # N x N, rows = true class
    rejects: np.ndarray  # per true class, images with no usable patch
    classes: list[str]
    exclude_rejects: bool = False

    @property
    def total(self) -> int:
        return int(self.counts.sum() + self.rejects.sum())

    @property
    def accuracy(self) -> float:
        denom = self.counts.sum() if self.exclude_rejects else self.total
        return float(np.trace(self.counts) / denom) if denom else float("nan")

    def percentages(self) -> np.ndarray:
        rows = (self.counts.sum(axis=1) + (0 if self.exclude_rejects else self.rejects))[:, None]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, 100.0 * self.counts / np.maximum(rows, 1), 0.0)

    def write(self, counts_path, percent_path=None) -> None:
        with open(counts_path, "w") as f:
            f.write("true\\pred," + ",".join(self.classes) + ",reject\n")
            for name, row, rej in zip(self.classes, self.counts, self.rejects):
                f.write(name + "," + ",".join(str(int(v)) for v in row) + f",{int(rej)}\n")
        if percent_path is not None:
            pct = self.percentages()
            with open(percent_path, "w") as f:
                f.write("true\\pred," + ",".join(self.classes) + "\n")
                for name, row in zip(self.classes, pct):
                    f.write(name + "," + ",".join(f"{v:.2f}" for v in row) + "\n")


def confusion(preds: list[ImagePrediction], classes: list[str], k: int | None = None,
              exclude_rejects: bool = False) -> ConfusionMatrix:
    n = len(classes)
    counts = np.zeros((n, n), dtype=np.int64)
    rejects = np.zeros(n, dtype=np.int64)
    for p in preds:
        label, _ = p.vote(k)
        if label is None:
            rejects[p.true_label] += 1
        else:
            counts[p.true_label, label] += 1
    return ConfusionMatrix(counts, rejects, list(classes), exclude_rejects)


def evaluate(manifest: Manifest, model, battery, k: int = 32, exclude_rejects: bool = False) -> ConfusionMatrix:
    if len(manifest) == 0:
        raise ValueError("evaluation set is empty")
    preds = predict_manifest(manifest, model, battery, k)
    return confusion(preds, battery.classes, k, exclude_rejects)


def accuracy_vs_patches(manifest: Manifest, model, battery, k_list, exclude_rejects: bool = False):
    """Image accuracy for each K, voting over prefixes of one quality ranking.

    Returns ``(curve, preds)``: ``curve`` is a list of ``(K, accuracy)`` and
    ``preds`` the cached per-patch predictions every point was computed from.
    """
    k_list = [int(k) for k in k_list]
    if not k_list:
        raise ValueError("empty K list")
    if any(k < 1 for k in k_list) or k_list != sorted(k_list):
        raise ValueError("K list must be positive and ascending")
    preds = predict_manifest(manifest, model, battery, k_list[-1])
    curve = [(k, confusion(preds, battery.classes, k, exclude_rejects).accuracy) for k in k_list]
    return curve, preds


def write_curve(curve, path) -> None:
    with open(path, "w") as f:
        f.write("K,accuracy\n")
        for k, acc in curve:
            f.write(f"{k},{acc!r}\n")


# ---------------------------------------------------------------- localisation

def localization_map(image, model, battery, block: int = PATCH) -> np.ndarray:
    """Label of every non-overlapping block (``REJECT`` for saturated blocks).

    Blocks larger than a patch are represented by their central 64x64 crop.
    """
    image = np.asarray(image)
    if block < PATCH:
        raise ValueError(f"block size must be >= {PATCH}")
    if image.shape[0] < block or image.shape[1] < block:
        raise ValueError(f"image {image.shape[:2]} smaller than block size {block}")
    blocks = grid_blocks(image, block)
    off = (block - PATCH) // 2
    crops = blocks[:, :, off:off + PATCH, off:off + PATCH]
    rows, cols = crops.shape[:2]
    grid = np.full((rows, cols), REJECT, dtype=np.int64)
    keep = [(r, c) for r in range(rows) for c in range(cols) if patch_quality(crops[r, c])[0]]
    if keep:
        feats = cnn.extract_features(model, np.stack([crops[r, c] for r, c in keep]))
        labels, _ = svm.predict_ovo(battery, feats)
        for (r, c), lab in zip(keep, labels):
            grid[r, c] = lab
    return grid


def write_label_map(grid, classes, pgm_path, legend_path) -> None:
    from .imageio import write_pgm
    plane = np.where(grid == REJECT, 255, grid).astype(np.uint8)
    write_pgm(pgm_path, plane)
    with open(legend_path, "w") as f:
        f.write("value,label\n")
        for i, name in enumerate(classes):
            f.write(f"{i},{name}\n")
        f.write("255,reject\n")
