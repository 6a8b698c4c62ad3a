"""The patch CNN: architecture, training loop, model selection and checkpoints."""
from __future__ import annotations

import io
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import core
from .patches import PATCH, compute_mean_patch, preprocess

log = logging.getLogger(__name__)

FEATURE_LAYER = "relu1"
FEATURE_DIM = 128


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | maxpool | relu | ip | softmax
    filters: int = 0
    kernel: int = 0
    stride: int = 1
    outputs: int = 0

    def __post_init__(self):
        if self.kind not in ("conv", "maxpool", "relu", "ip", "softmax"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "maxpool") and (self.kernel < 1 or self.stride < 1):
            raise ValueError(f"{self.name}: kernel and stride must be >= 1")
        if self.kind == "conv" and self.filters < 1:
            raise ValueError(f"{self.name}: filter count must be >= 1")
        if self.kind == "ip" and self.outputs < 1:
            raise ValueError(f"{self.name}: output count must be >= 1")


def architecture(num_classes: int, widths=(32, 48, 64, 128), hidden: int = FEATURE_DIM) -> list[LayerSpec]:
    """Layer list of the network; ``widths``/``hidden`` shrink it for toy checks."""
    c1, c2, c3, c4 = widths
    return [
        LayerSpec("conv1", "conv", filters=c1, kernel=4, stride=1),
        LayerSpec("pool1", "maxpool", kernel=2, stride=2),
        LayerSpec("conv2", "conv", filters=c2, kernel=5, stride=1),
        LayerSpec("pool2", "maxpool", kernel=2, stride=2),
        LayerSpec("conv3", "conv", filters=c3, kernel=5, stride=1),
        LayerSpec("pool3", "maxpool", kernel=2, stride=2),
        LayerSpec("conv4", "conv", filters=c4, kernel=5, stride=1),
        LayerSpec("ip1", "ip", outputs=hidden),
        LayerSpec("relu1", "relu"),
        LayerSpec("ip2", "ip", outputs=num_classes),
        LayerSpec("softmax", "softmax"),
    ]


@dataclass
class CnnModel:
    layers: list[LayerSpec]
    params: dict[str, np.ndarray]
    classes: list[str]
    mean_patch: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]


def shape_chain(layers: list[LayerSpec], input_shape=(PATCH, PATCH, 3)) -> list[tuple[int, ...]]:
    """Output shape after every layer for one input of ``input_shape``."""
    shapes = []
    shape = tuple(input_shape)
    for layer in layers:
        if layer.kind == "conv":
            h, w, _ = shape
            shape = (core.conv_output_size(h, layer.kernel, layer.stride),
                     core.conv_output_size(w, layer.kernel, layer.stride), layer.filters)
            if min(shape[:2]) < 1:
                raise core.ShapeError(f"{layer.name}: input {h}x{w} smaller than kernel {layer.kernel}")
        elif layer.kind == "maxpool":
            h, w, c = shape
            shape = (core.pool_output_size(h, layer.kernel, layer.stride),
                     core.pool_output_size(w, layer.kernel, layer.stride), c)
        elif layer.kind == "ip":
            shape = (layer.outputs,)
        shapes.append(shape)
    return shapes


def _param_shapes(layers, input_shape):
    shapes = {}
    shape = tuple(input_shape)
    for layer, out in zip(layers, shape_chain(layers, input_shape)):
        if layer.kind == "conv":
            shapes[layer.name] = ((layer.filters, layer.kernel, layer.kernel, shape[-1]), (layer.filters,))
        elif layer.kind == "ip":
            shapes[layer.name] = ((layer.outputs, int(np.prod(shape))), (layer.outputs,))
        shape = out
    return shapes


def build_network(num_classes: int, seed: int = 0, classes: list[str] | None = None,
                  widths=(32, 48, 64, 128), hidden: int = FEATURE_DIM,
                  dtype=np.float32) -> CnnModel:
    """Fresh network with Glorot-uniform weights and zero biases."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if classes is None:
        classes = [str(i) for i in range(num_classes)]
    if len(classes) != num_classes:
        raise ValueError(f"class table has {len(classes)} entries, expected {num_classes}")
    layers = architecture(num_classes, widths, hidden)
    rng = np.random.default_rng(seed)
    params = {}
    for name, (wshape, bshape) in _param_shapes(layers, (PATCH, PATCH, 3)).items():
        if len(wshape) == 4:
            receptive = wshape[1] * wshape[2]
            fan_in, fan_out = receptive * wshape[3], receptive * wshape[0]
        else:
            fan_out, fan_in = wshape
        limit = np.sqrt(6.0 / (fan_in + fan_out))  # variance 2 / (fan_in + fan_out)
        params[f"{name}.w"] = rng.uniform(-limit, limit, size=wshape).astype(dtype)
        params[f"{name}.b"] = np.zeros(bshape, dtype=dtype)
    return CnnModel(layers, params, list(classes), meta={"seed": seed})


# ---------------------------------------------------------------- forward / backward

def _run(model: CnnModel, x, stop_at=None, keep=False):
    caches = []
    for layer in model.layers:
        if layer.kind == "softmax":
            break
        inp = x
        if layer.kind == "conv":
            x, cols = core.conv2d_forward(x, model.params[layer.name + ".w"], model.params[layer.name + ".b"],
                                          layer.stride, return_cols=True)
            cache = (inp, cols if keep else None)
        elif layer.kind == "maxpool":
            x, cache = core.maxpool_forward(x, layer.kernel, layer.stride)
            cache = (cache, inp.shape)
        elif layer.kind == "relu":
            x = core.relu(x)
            cache = inp
        else:
            flat = inp.reshape(inp.shape[0], -1)
            x = core.inner_product_forward(flat, model.params[layer.name + ".w"], model.params[layer.name + ".b"])
            cache = (flat, inp.shape)
        if keep:
            caches.append((layer, cache))
        if layer.name == stop_at:
            break
    return x, caches


def _backward(model: CnnModel, caches, grad):
    grads = {}
    for layer, cache in reversed(caches):
        if layer.kind == "conv":
            inp, cols = cache
            grad, gw, gb = core.conv2d_backward(inp, model.params[layer.name + ".w"], layer.stride, grad,
                                                cols=cols, input_grad=layer is not caches[0][0])
            grads[layer.name + ".w"], grads[layer.name + ".b"] = gw, gb
        elif layer.kind == "maxpool":
            argmax, shape = cache
            grad = core.maxpool_backward(argmax, grad, shape)
        elif layer.kind == "relu":
            grad = core.relu_backward(cache, grad)
        else:
            flat, shape = cache
            grad, gw, gb = core.inner_product_backward(flat, model.params[layer.name + ".w"], grad)
            grads[layer.name + ".w"], grads[layer.name + ".b"] = gw, gb
            grad = grad.reshape(shape)
    return grads


def loss_and_grads(model: CnnModel, x, labels):
    """Mean cross-entropy over the batch and gradients for every parameter."""
    logits, caches = _run(model, x, keep=True)
    loss, _, dlogits = core.softmax_cross_entropy(logits, labels)
    return loss, _backward(model, caches, dlogits.astype(logits.dtype, copy=False))


def forward(model: CnnModel, batch, stop_at: str | None = None, chunk: int = 256) -> np.ndarray:
    """Run preprocessed patches through the network.

    With ``stop_at="relu1"`` the result is one 128-long feature vector per
    patch; with no ``stop_at`` it is the class probabilities.
    """
    if stop_at is not None and stop_at not in model.layer_names():
        raise KeyError(f"unknown layer {stop_at!r}; known: {model.layer_names()}")
    batch = np.asarray(batch)
    single = batch.ndim == 3
    if single:
        batch = batch[None]
    outs = []
    for start in range(0, batch.shape[0], chunk):
        out, _ = _run(model, batch[start:start + chunk], stop_at=stop_at)
        if stop_at in (None, "softmax"):
            out = core.softmax(out)
        outs.append(out)
    out = np.concatenate(outs) if outs else np.empty((0,))
    return out[0] if single else out


def extract_features(model: CnnModel, patches) -> np.ndarray:
    """relu1 features for raw 8-bit patches, using the model's mean patch."""
    x = preprocess(patches, model.mean_patch)
    return forward(model, x, stop_at=FEATURE_LAYER)


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 7.5e-3
    learning_rate: float = 0.015
    halving_period: int = 10
    max_epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.halving_period < 1:
            raise ValueError("batch size, epochs and halving period must be >= 1")
        if not (self.learning_rate > 0 and 0 <= self.momentum < 1 and self.weight_decay >= 0):
            raise ValueError("learning rate must be positive, momentum in [0,1), decay >= 0")


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Step schedule: the rate halves every ``halving_period`` epochs (0-indexed)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.learning_rate * 0.5 ** (epoch // config.halving_period)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_accuracy: float


class TrainingError(RuntimeError):
    pass


def evaluate_loss(model: CnnModel, x, labels, chunk: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over preprocessed patches, in fixed order."""
    total, correct = 0.0, 0
    for start in range(0, len(x), chunk):
        logits, _ = _run(model, x[start:start + chunk])
        lab = labels[start:start + chunk]
        loss, probs, _ = core.softmax_cross_entropy(logits.astype(np.float64), lab)
        total += loss * len(lab)
        correct += int((probs.argmax(axis=1) == lab).sum())
    return total / len(x), correct / len(x)


def train(model: CnnModel, train_patches, train_labels, val_patches, val_labels,
          config: TrainConfig | None = None, progress=None):
    """SGD training; returns the epoch snapshot with the lowest validation loss.

    Patches are raw 8-bit 64x64x3 arrays.  If the model has no mean patch yet,
    it is computed from the training patches.  ``progress`` is called with
    each :class:`EpochLog` as it completes.
    """
    config = config or TrainConfig()
    train_labels = np.asarray(train_labels, dtype=np.int64)
    val_labels = np.asarray(val_labels, dtype=np.int64)
    if len(train_patches) == 0 or len(val_patches) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if len(train_patches) != len(train_labels) or len(val_patches) != len(val_labels):
        raise ValueError("patch and label counts differ")
    for labels in (train_labels, val_labels):
        if labels.min() < 0 or labels.max() >= model.num_classes:
            raise ValueError(f"labels must lie in [0, {model.num_classes})")
    if model.mean_patch is None:
        model.mean_patch = compute_mean_patch(train_patches)
    xt = preprocess(train_patches, model.mean_patch)
    xv = preprocess(val_patches, model.mean_patch)

    rng = np.random.default_rng(config.seed)
    state = core.SgdState(config.learning_rate, config.momentum, config.weight_decay)
    history: list[EpochLog] = []
    best = None
    for epoch in range(config.max_epochs):
        state.learning_rate = learning_rate(config, epoch)
        order = rng.permutation(len(xt))
        losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            loss, grads = loss_and_grads(model, xt[idx], train_labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch + 1}, batch {b + 1}")
            core.sgd_step(model.params, grads, state)
            losses.append(loss * len(idx))
        val_loss, val_acc = evaluate_loss(model, xv, val_labels)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch + 1}")
        entry = EpochLog(epoch + 1, state.learning_rate, float(np.sum(losses) / len(xt)), val_loss, val_acc)
        history.append(entry)
        log.info("epoch %d lr %.6g train %.4f val %.4f acc %.3f", entry.epoch, entry.lr,
                 entry.train_loss, entry.val_loss, entry.val_accuracy)
        if progress is not None:
            progress(entry)
        if best is None or val_loss < best[0]:
            best = (val_loss, entry, {k: v.copy() for k, v in model.params.items()})

    _, entry, params = best
    selected = CnnModel(model.layers, params, list(model.classes), model.mean_patch.copy(),
                        dict(model.meta, epoch=entry.epoch, val_loss=entry.val_loss,
                             val_accuracy=entry.val_accuracy, seed=config.seed,
                             config=asdict(config)))
    return selected, history


def select_epoch(history: list[EpochLog]) -> int:
    """1-indexed epoch with the smallest validation loss (earliest on ties)."""
    return min(history, key=lambda e: (e.val_loss, e.epoch)).epoch


def write_log(history: list[EpochLog], path) -> None:
    with open(path, "w") as f:
        f.write("epoch,lr,train_loss,val_loss\n")
        for e in history:
            f.write(f"{e.epoch},{e.lr!r},{e.train_loss!r},{e.val_loss!r}\n")


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"CAMIDCNN"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class MalformedCheckpoint(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


def _blobs(model):
    yield "mean_patch", model.mean_patch
    for name, p in model.params.items():
        yield name, p


def save_checkpoint(model: CnnModel, path) -> None:
    """Versioned JSON header followed by little-endian float32 blobs."""
    if model.mean_patch is None:
        raise ValueError("model has no mean patch; train it or set one before saving")
    payload = io.BytesIO()
    table = []
    for name, arr in _blobs(model):
        payload.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        table.append([name, list(arr.shape)])
    payload = payload.getvalue()
    header = {
        "layers": [asdict(layer) for layer in model.layers],
        "classes": model.classes,
        "meta": model.meta,
        "blobs": table,
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hbytes)) + hbytes + payload)


def load_checkpoint(path) -> CnnModel:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(CKPT_MAGIC) + 8:
        if CKPT_MAGIC.startswith(raw[: len(CKPT_MAGIC)]) and raw:
            raise TruncatedCheckpoint(f"{path}: truncated before header")
        raise MalformedCheckpoint(f"{path}: not a CNN checkpoint (bad magic)")
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise MalformedCheckpoint(f"{path}: not a CNN checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    start = len(CKPT_MAGIC) + 8
    if len(raw) < start + hlen:
        raise TruncatedCheckpoint(f"{path}: truncated inside header")
    try:
        header = json.loads(raw[start:start + hlen])
        layers = [LayerSpec(**d) for d in header["layers"]]
        table = header["blobs"]
        expected = int(header["payload_bytes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedCheckpoint(f"{path}: corrupt header ({exc})") from exc
    payload = raw[start + hlen:]
    if len(payload) < expected:
        raise TruncatedCheckpoint(f"{path}: payload has {len(payload)} of {expected} bytes")
    if len(payload) > expected or zlib.crc32(payload) != header.get("crc32"):
        raise MalformedCheckpoint(f"{path}: payload checksum mismatch")
    arrays = {}
    offset = 0
    for name, shape in table:
        n = int(np.prod(shape)) * 4
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=offset).astype(np.float32).reshape(shape)
        offset += n
    mean = arrays.pop("mean_patch")
    model = CnnModel(layers, arrays, header["classes"], mean, header["meta"])
    expected_shapes = _param_shapes(layers, (PATCH, PATCH, 3))
    for name, (ws, bs) in expected_shapes.items():
        if arrays.get(name + ".w", np.empty(0)).shape != ws or arrays.get(name + ".b", np.empty(0)).shape != bs:
            raise MalformedCheckpoint(f"{path}: parameter shapes of {name} inconsistent with layer specs")
    return model
