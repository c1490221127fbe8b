"""Small convolutional classifier over pooled filter-response channels.

Plain numpy implementation: valid 3x3 convolutions, 2x2 max-pooling with
zero padding on odd maps, ReLU, a final fully-connected layer, softmax
cross-entropy, and minibatch SGD with momentum.  Gradients are exact
analytic backprop (verified against finite differences in the tests).

Weights live on the float32 grid at every externally visible point (init,
after training, after load) so the float32 model file round-trips without
changing a single prediction.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, TrainingDivergedError

PAPER_WIDTHS = (60, 150, 300, 600)


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 60
    weight_decay: float = 0.0


@dataclass(frozen=True)
class CnnConfig:
    """Layer stack plus training hyperparameters.

    ``layers`` entries are dicts:
      {"type": "conv", "out_channels": c, "kernel": k, "stride": 1}
      {"type": "maxpool", "kernel": k, "stride": k}
      {"type": "fc", "out": units}
    ReLU follows every conv and every fc except the last layer.
    """

    input_size: tuple
    layers: tuple
    n_classes: int
    activation: str = "relu"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augmentation: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(self.input_size))
        object.__setattr__(self, "layers", tuple(dict(l) for l in self.layers))
        if isinstance(self.optimizer, dict):
            object.__setattr__(self, "optimizer", OptimizerConfig(**self.optimizer))
        chain_shapes(self)  # validate eagerly


def chain_shapes(config: CnnConfig) -> list:
    """Shapes after each layer, from (C, H, W) input to the class vector."""
    p_h, p_w, channels = config.input_size
    shape: tuple = (channels, p_h, p_w)
    shapes = [shape]
    for i, layer in enumerate(config.layers):
        kind = layer["type"]
        if kind == "conv":
            if len(shape) != 3:
                raise DimensionMismatchError(f"layer {i}: conv after flatten")
            c, h, w = shape
            kern = layer["kernel"]
            if layer.get("stride", 1) != 1:
                raise DimensionMismatchError(f"layer {i}: conv stride must be 1")
            if h < kern or w < kern:
                raise DimensionMismatchError(
                    f"layer {i}: {kern}x{kern} conv does not fit {h}x{w} map"
                )
            shape = (layer["out_channels"], h - kern + 1, w - kern + 1)
        elif kind == "maxpool":
            if len(shape) != 3:
                raise DimensionMismatchError(f"layer {i}: pool after flatten")
            c, h, w = shape
            kern = layer["kernel"]
            if layer.get("stride", kern) != kern:
                raise DimensionMismatchError(f"layer {i}: pool stride must equal kernel")
            shape = (c, -(-h // kern), -(-w // kern))
        elif kind == "fc":
            shape = (layer["out"],)
        else:
            raise DimensionMismatchError(f"layer {i}: unknown layer type {kind!r}")
        shapes.append(shape)
    if shapes[-1] != (config.n_classes,):
        raise DimensionMismatchError(
            f"final layer produces {shapes[-1]}, expected ({config.n_classes},)"
        )
    return shapes


def scaled_architecture(
    input_hw: int,
    n_filters: int,
    n_classes: int,
    widths: tuple | None = None,
    optimizer: OptimizerConfig | None = None,
    augmentation: int = 0,
    seed: int = 0,
) -> CnnConfig:
    """Shrink-then-widen conv/pool stack sized to the input map.

    Alternates 3x3 convs and 2x2 pools until the map reaches 3x3, closes
    with a 3x3 conv to 1x1, and ends in a fully-connected class layer.
    """
    if widths is None:
        widths = PAPER_WIDTHS if input_hw == 31 else tuple(min(32 * 2**i, 512) for i in range(8))
    layers = []
    m = input_hw
    i = 0
    while m > 3:
        layers.append({"type": "conv", "out_channels": widths[i], "kernel": 3, "stride": 1})
        m -= 2
        i += 1
        if m > 3:
            layers.append({"type": "maxpool", "kernel": 2, "stride": 2})
            m = -(-m // 2)
    if m == 3:
        layers.append({"type": "conv", "out_channels": widths[i], "kernel": 3, "stride": 1})
    layers.append({"type": "fc", "out": n_classes})
    return CnnConfig(
        input_size=(input_hw, input_hw, n_filters),
        layers=tuple(layers),
        n_classes=n_classes,
        optimizer=optimizer or OptimizerConfig(),
        augmentation=augmentation,
        seed=seed,
    )


def paper_architecture(
    n_filters: int,
    n_classes: int,
    optimizer: OptimizerConfig | None = None,
    augmentation: int = 0,
    seed: int = 0,
) -> CnnConfig:
    """The reference stack for 31x31 pooled maps: 60/150/300/600 convs."""
    return scaled_architecture(
        31, n_filters, n_classes, widths=PAPER_WIDTHS,
        optimizer=optimizer, augmentation=augmentation, seed=seed,
    )


@dataclass
class CnnModel:
    config: CnnConfig
    weights: list  # per layer: {"w": ..., "b": ...} for conv/fc, {} otherwise


def _f32_grid(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32).astype(np.float64)


def init_model(config: CnnConfig) -> CnnModel:
    """He-initialized model, deterministic per config.seed."""
    rng = np.random.default_rng(config.seed)
    shapes = chain_shapes(config)
    weights = []
    for layer, shape_in in zip(config.layers, shapes):
        if layer["type"] == "conv":
            c_in = shape_in[0]
            kern = layer["kernel"]
            fan_in = c_in * kern * kern
            w = rng.standard_normal((layer["out_channels"], c_in, kern, kern))
            weights.append(
                {"w": _f32_grid(w * math.sqrt(2.0 / fan_in)),
                 "b": np.zeros(layer["out_channels"])}
            )
        elif layer["type"] == "fc":
            fan_in = int(np.prod(shape_in))
            w = rng.standard_normal((layer["out"], fan_in))
            weights.append(
                {"w": _f32_grid(w * math.sqrt(2.0 / fan_in)), "b": np.zeros(layer["out"])}
            )
        else:
            weights.append({})
    return CnnModel(config=config, weights=weights)


def _conv_forward(x, w, b):
    out_c, in_c, kh, kw = w.shape
    oh = x.shape[2] - kh + 1
    ow = x.shape[3] - kw + 1
    out = np.broadcast_to(b[None, :, None, None], (x.shape[0], out_c, oh, ow)).copy()
    for i in range(kh):
        for j in range(kw):
            out += np.einsum("bchw,oc->bohw", x[:, :, i : i + oh, j : j + ow], w[:, :, i, j])
    return out


def _conv_backward(dout, x, w):
    out_c, in_c, kh, kw = w.shape
    oh, ow = dout.shape[2], dout.shape[3]
    dw = np.empty_like(w)
    dx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            patch = x[:, :, i : i + oh, j : j + ow]
            dw[:, :, i, j] = np.einsum("bohw,bchw->oc", dout, patch)
            dx[:, :, i : i + oh, j : j + ow] += np.einsum("bohw,oc->bchw", dout, w[:, :, i, j])
    return dx, dw, dout.sum(axis=(0, 2, 3))


def _pool_forward(x, kern):
    b, c, h, w = x.shape
    oh, ow = -(-h // kern), -(-w // kern)
    padded = np.zeros((b, c, oh * kern, ow * kern), dtype=x.dtype)
    padded[:, :, :h, :w] = x
    windows = padded.reshape(b, c, oh, kern, ow, kern).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(b, c, oh, ow, kern * kern)
    idx = np.argmax(windows, axis=-1)  # ties: first in row-major window order
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape, kern)


def _pool_backward(dout, cache):
    idx, x_shape, kern = cache
    b, c, h, w = x_shape
    oh, ow = dout.shape[2], dout.shape[3]
    slots = np.zeros((b, c, oh, ow, kern * kern), dtype=dout.dtype)
    np.put_along_axis(slots, idx[..., None], dout[..., None], axis=-1)
    padded = slots.reshape(b, c, oh, ow, kern, kern).transpose(0, 1, 2, 4, 3, 5)
    padded = padded.reshape(b, c, oh * kern, ow * kern)
    return padded[:, :, :h, :w]


def _forward(model: CnnModel, x: np.ndarray):
    """Forward pass; returns logits and the caches backprop needs."""
    caches = []
    n_layers = len(model.config.layers)
    for i, (layer, params) in enumerate(zip(model.config.layers, model.weights)):
        kind = layer["type"]
        if kind == "conv":
            pre = _conv_forward(x, params["w"], params["b"])
            mask = pre > 0
            caches.append(("conv", x, mask))
            x = pre * mask  # ReLU
        elif kind == "maxpool":
            x, cache = _pool_forward(x, layer["kernel"])
            caches.append(("pool", cache))
        else:  # fc
            flat = x.reshape(x.shape[0], -1)
            pre = flat @ params["w"].T + params["b"]
            last = i == n_layers - 1
            mask = None if last else pre > 0
            caches.append(("fc", flat, x.shape, mask))
            x = pre if last else pre * mask
    return x, caches


def _backward(model: CnnModel, caches, dlogits):
    grads: list = [None] * len(model.weights)
    dx = dlogits
    for i in range(len(model.config.layers) - 1, -1, -1):
        cache = caches[i]
        if cache[0] == "conv":
            _, x_in, mask = cache
            dx = dx * mask
            dx, dw, db = _conv_backward(dx, x_in, model.weights[i]["w"])
            grads[i] = {"w": dw, "b": db}
        elif cache[0] == "pool":
            dx = _pool_backward(dx, cache[1])
        else:
            _, flat, x_shape, mask = cache
            if mask is not None:
                dx = dx * mask
            grads[i] = {"w": dx.T @ flat, "b": dx.sum(axis=0)}
            dx = (dx @ model.weights[i]["w"]).reshape(x_shape)
    return grads


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grads(model: CnnModel, x: np.ndarray, y: np.ndarray):
    """Mean softmax cross-entropy and exact weight gradients on one batch."""
    logits, caches = _forward(model, x)
    probs = _softmax(logits)
    n = len(y)
    loss = -np.mean(np.log(np.maximum(probs[np.arange(n), y], 1e-300)))
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    return loss, _backward(model, caches, dlogits / n), logits


def translate_batch(x: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Shift each example by (dy, dx) pixels with zero fill; shape-preserving."""
    out = np.zeros_like(x)
    h, w = x.shape[2], x.shape[3]
    for n, (dy, dx) in enumerate(shifts):
        ys, yd = (0, dy) if dy >= 0 else (-dy, 0)
        xs, xd = (0, dx) if dx >= 0 else (-dx, 0)
        out[n, :, yd : h - ys + yd, xd : w - xs + xd] = x[n, :, ys : h - yd, xs : w - xd]
    return out


def train(
    model: CnnModel,
    inputs: np.ndarray,
    labels: np.ndarray,
    val_inputs: np.ndarray | None = None,
    val_labels: np.ndarray | None = None,
):
    """Minibatch SGD with momentum; returns (trained model, history).

    The input model is left untouched.  Augmentation translates each
    example by a random offset in [-augmentation, +augmentation]^2 with
    zero fill.  Fully deterministic for a fixed config seed.
    """
    cfg = model.config
    opt = cfg.optimizer
    labels = np.asarray(labels, dtype=np.int64)
    if len(inputs) == 0:
        raise ValueError("training set is empty")
    if labels.min() < 0 or labels.max() >= cfg.n_classes:
        raise ValueError("labels out of range for configured class count")
    model = CnnModel(config=cfg, weights=copy.deepcopy(model.weights))
    velocity = [
        {k: np.zeros_like(v) for k, v in params.items()} for params in model.weights
    ]
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    history = []
    for epoch in range(opt.epochs):
        order = rng.permutation(len(inputs))
        losses = []
        correct = 0
        for start in range(0, len(order), opt.batch_size):
            idx = order[start : start + opt.batch_size]
            xb = inputs[idx]
            if cfg.augmentation > 0:
                shifts = rng.integers(-cfg.augmentation, cfg.augmentation, size=(len(idx), 2), endpoint=True)
                xb = translate_batch(xb, shifts)
            loss, grads, logits = loss_and_grads(model, xb, labels[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} at epoch {epoch}")
            losses.append(loss)
            correct += int((logits.argmax(axis=1) == labels[idx]).sum())
            for params, vel, grad in zip(model.weights, velocity, grads):
                if not params:
                    continue
                for key in params:
                    g = grad[key]
                    if opt.weight_decay:
                        g = g + opt.weight_decay * params[key]
                    vel[key] = opt.momentum * vel[key] - opt.learning_rate * g
                    params[key] += vel[key]
        row = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "train_acc": correct / len(inputs),
            "val_acc": None,
        }
        if val_inputs is not None and len(val_inputs):
            val_logits, _ = _forward(model, val_inputs)
            row["val_acc"] = float((val_logits.argmax(axis=1) == val_labels).mean())
        history.append(row)
    for params in model.weights:
        for key in params:
            params[key] = _f32_grid(params[key])
    return model, history


def predict(model: CnnModel, stack) -> tuple:
    """Class decision and softmax scores for one response stack.

    Accepts a ResponseStack (its pooled maps) or a raw (C, H, W) array.
    The decision is the highest-scoring class, lowest index on ties.
    """
    x = stack.pooled if hasattr(stack, "pooled") else np.asarray(stack, dtype=np.float64)
    p_h, p_w, channels = model.config.input_size
    if x.shape != (channels, p_h, p_w):
        raise DimensionMismatchError(
            f"input shape {x.shape} does not match configured {(channels, p_h, p_w)}"
        )
    logits, _ = _forward(model, x[None])
    probs = _softmax(logits)[0]
    return int(np.argmax(probs)), probs


def config_to_dict(config: CnnConfig) -> dict:
    doc = asdict(config)
    doc["input_size"] = list(config.input_size)
    doc["layers"] = [dict(l) for l in config.layers]
    return doc


def config_from_dict(doc: dict) -> CnnConfig:
    doc = dict(doc)
    doc["optimizer"] = OptimizerConfig(**doc["optimizer"])
    doc["input_size"] = tuple(doc["input_size"])
    doc["layers"] = tuple(doc["layers"])
    return CnnConfig(**doc)


MODEL_MAGIC = b"EVSFCNN1"


def save_model(model: CnnModel, path) -> None:
    """JSON config header + little-endian float32 weight blob."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = []
    blobs = []
    for i, params in enumerate(model.weights):
        for key in sorted(params):
            arrays.append({"layer": i, "name": key, "shape": list(params[key].shape)})
            blobs.append(params[key].astype("<f4").tobytes())
    header = json.dumps(
        {"format": "evsfa-cnn-v1", "config": config_to_dict(model.config), "arrays": arrays},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_model(path) -> CnnModel:
    raw = Path(path).read_bytes()
    if raw[:8] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    config = config_from_dict(header["config"])
    model = init_model(config)
    offset = 16 + hlen
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        n_bytes = int(np.prod(shape)) * 4
        arr = np.frombuffer(raw[offset : offset + n_bytes], dtype="<f4").reshape(shape)
        model.weights[spec["layer"]][spec["name"]] = arr.astype(np.float64)
        offset += n_bytes
    return model
