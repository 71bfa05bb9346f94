"""Small 1-D convolutional regression network written directly in numpy.

Sequence tensors are laid out (batch, channels, length).  Parameters are
stored as float32; forward and backward passes compute in float64.

The raw head has four outputs (r, nbar, cos 2theta, sin 2theta); softplus is
applied to the first two inside :func:`forward`, and :func:`decode_head`
reduces the four numbers to a :class:`StateParams`.

.qnn layout (little-endian)::

    magic b"QNNM", u32 version (1), f64 norm_mean, f64 norm_scale,
    u32 input_len, u32 layer_count,
    per layer: u8 tag, u32 hyperparameters (tag-specific count),
               f32 weight blob, f32 bias blob (parametric layers only),
    u32 CRC32 of everything before it
"""

from __future__ import annotations

import csv
import io
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from edgeqst.gaussian import StateParams

log = logging.getLogger(__name__)

MAGIC = b"QNNM"
VERSION = 1


class ModelFormatError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


# ---------------------------------------------------------------- layers


@dataclass
class Conv1D:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    weight: np.ndarray | None = None  # (out_ch, in_ch, kernel)
    bias: np.ndarray | None = None  # (out_ch,)

    tag = 1

    def out_shape(self, shape):
        c, length = shape
        if c != self.in_ch:
            raise ValueError(f"Conv1D expects {self.in_ch} channels, got {c}")
        if length < self.kernel:
            raise ValueError(f"Conv1D kernel {self.kernel} longer than input {length}")
        return (self.out_ch, (length - self.kernel) // self.stride + 1)

    def n_params(self):
        return self.out_ch * self.in_ch * self.kernel + self.out_ch

    def _cols(self, x):
        # (B, C, L) -> (B * L_out, C * k)
        win = sliding_window_view(x, self.kernel, axis=2)[:, :, :: self.stride, :]
        b, c, lout, k = win.shape
        return win.transpose(0, 2, 1, 3).reshape(b * lout, c * k), lout

    def forward(self, x):
        cols, lout = self._cols(x)
        w = self.weight.reshape(self.out_ch, -1).astype(np.float64)
        y = cols @ w.T + self.bias.astype(np.float64)
        y = y.reshape(x.shape[0], lout, self.out_ch).transpose(0, 2, 1)
        return y, (x.shape, cols)

    def backward(self, gy, cache):
        xshape, cols = cache
        b, _, lout = gy.shape
        g2 = gy.transpose(0, 2, 1).reshape(b * lout, self.out_ch)
        gw = (g2.T @ cols).reshape(self.weight.shape)
        gb = g2.sum(axis=0)
        w = self.weight.reshape(self.out_ch, -1).astype(np.float64)
        gcols = (g2 @ w).reshape(b, lout, self.in_ch, self.kernel)
        gx = np.zeros(xshape)
        end = self.stride * (lout - 1) + 1
        for j in range(self.kernel):
            gx[:, :, j : j + end : self.stride] += gcols[:, :, :, j].transpose(0, 2, 1)
        return gx, [gw, gb]

    def params(self):
        return [self.weight, self.bias]

    def hyper(self):
        return (self.in_ch, self.out_ch, self.kernel, self.stride)


@dataclass
class Dense:
    n_in: int
    n_out: int
    weight: np.ndarray | None = None  # (n_out, n_in)
    bias: np.ndarray | None = None

    tag = 2

    def out_shape(self, shape):
        if shape != (self.n_in,):
            raise ValueError(f"Dense expects ({self.n_in},), got {shape}")
        return (self.n_out,)

    def n_params(self):
        return self.n_out * self.n_in + self.n_out

    def forward(self, x):
        y = x @ self.weight.T.astype(np.float64) + self.bias.astype(np.float64)
        return y, x

    def backward(self, gy, x):
        gw = gy.T @ x
        gb = gy.sum(axis=0)
        return gy @ self.weight.astype(np.float64), [gw, gb]

    def params(self):
        return [self.weight, self.bias]

    def hyper(self):
        return (self.n_in, self.n_out)


@dataclass
class ReLU:
    tag = 3

    def out_shape(self, shape):
        return shape

    def n_params(self):
        return 0

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, gy, mask):
        return gy * mask, []

    def params(self):
        return []

    def hyper(self):
        return ()


@dataclass
class Flatten:
    tag = 4

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def n_params(self):
        return 0

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, gy, shape):
        return gy.reshape(shape), []

    def params(self):
        return []

    def hyper(self):
        return ()


_LAYER_TYPES = {cls.tag: cls for cls in (Conv1D, Dense, ReLU, Flatten)}
_N_HYPER = {1: 4, 2: 2, 3: 0, 4: 0}


# ---------------------------------------------------------------- model


@dataclass
class Model:
    layers: list
    input_len: int
    norm_mean: float = 0.0
    norm_scale: float = 1.0

    def shapes(self) -> list[tuple]:
        """Activation shapes (excluding batch) after the input and every layer."""
        shape = (1, self.input_len)
        out = [shape]
        for layer in self.layers:
            shape = layer.out_shape(shape)
            out.append(shape)
        return out

    def n_params(self) -> int:
        return sum(layer.n_params() for layer in self.layers)

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def copy(self) -> "Model":
        return model_from_bytes(model_to_bytes(self))

    def checksum(self) -> int:
        return zlib.crc32(b"".join(np.ascontiguousarray(p, "<f4").tobytes() for p in self.parameters()))


ARCHS = {
    # (in_ch, out_ch, kernel, stride) per conv block, then dense hidden width
    "qst-cnn-v1": dict(input_len=2048, convs=[(1, 8, 16, 4), (8, 16, 8, 4), (16, 32, 8, 4)], hidden=128),
    # tiny model for gradient and exhaustive quantization checks
    "tiny": dict(input_len=32, convs=[(1, 2, 4, 2)], hidden=6),
}


def build_layers(input_len: int, convs, hidden: int, n_out: int = 4) -> list:
    layers: list = []
    for cin, cout, k, s in convs:
        layers += [Conv1D(cin, cout, k, s), ReLU()]
    layers.append(Flatten())
    m = Model(layers, input_len)
    flat = m.shapes()[-1][0]
    layers += [Dense(flat, hidden), ReLU(), Dense(hidden, n_out)]
    return layers


def init_layers(layers, rng: np.random.Generator, dtype=np.float32) -> None:
    """He-uniform weights, zero biases, drawn in layer order."""
    for layer in layers:
        if isinstance(layer, Conv1D):
            fan_in = layer.in_ch * layer.kernel
            shape = (layer.out_ch, layer.in_ch, layer.kernel)
        elif isinstance(layer, Dense):
            fan_in = layer.n_in
            shape = (layer.n_out, layer.n_in)
        else:
            continue
        lim = math.sqrt(6.0 / fan_in)
        layer.weight = rng.uniform(-lim, lim, size=shape).astype(dtype)
        layer.bias = np.zeros(shape[0], dtype=dtype)


def model_init(arch_id: str = "qst-cnn-v1", seed: int = 0) -> Model:
    if arch_id not in ARCHS:
        raise ValueError(f"unknown arch_id {arch_id!r}; known: {sorted(ARCHS)}")
    a = ARCHS[arch_id]
    layers = build_layers(a["input_len"], a["convs"], a["hidden"])
    init_layers(layers, np.random.default_rng(seed))
    model = Model(layers, a["input_len"])
    model.shapes()
    log.info("initialized %s: %d parameters", arch_id, model.n_params())
    return model


# ---------------------------------------------------------------- forward


def normalize_input(seq, model: Model) -> np.ndarray:
    """(x - mean) / scale, shaped (batch, 1, length) in float64."""
    x = np.asarray(seq)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != model.input_len:
        raise ValueError(f"sequence length {x.shape[-1]} != model input {model.input_len}")
    return ((x.astype(np.float64) - model.norm_mean) / model.norm_scale)[:, None, :]


def softplus(z):
    return np.logaddexp(0.0, z)


def forward_raw(model: Model, x: np.ndarray, keep: bool = False):
    """Linear head output for normalized input x of shape (B, 1, L)."""
    if x.ndim != 3 or x.shape[1:] != (1, model.input_len):
        raise ValueError(f"input shape {x.shape} != (B, 1, {model.input_len})")
    caches = []
    h = x
    for layer in model.layers:
        h, c = layer.forward(h)
        if keep:
            caches.append(c)
    return (h, caches) if keep else h


def apply_head(z: np.ndarray) -> np.ndarray:
    out = z.copy()
    out[:, :2] = softplus(z[:, :2])
    return out


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    """(B, 4) head: softplus(r), softplus(nbar), cos 2theta, sin 2theta estimates."""
    out = apply_head(forward_raw(model, x))
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite network output")
    return out


def decode_head(raw) -> StateParams:
    r, nbar, c, s = (float(v) for v in raw)
    theta = 0.5 * math.atan2(s, c)
    if theta < 0:
        theta += math.pi
    return StateParams(max(r, 0.0), theta, max(nbar, 0.0))


def predict(model: Model, seqs, batch: int = 256) -> list[StateParams]:
    seqs = np.asarray(seqs)
    if seqs.ndim == 1:
        seqs = seqs[None, :]
    out = []
    for i in range(0, len(seqs), batch):
        head = forward(model, normalize_input(seqs[i : i + batch], model))
        out.extend(decode_head(h) for h in head)
    return out


# ---------------------------------------------------------------- training


def label_targets(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 3)
    r, theta, nbar = labels.T
    return np.stack([r, nbar, np.cos(2 * theta), np.sin(2 * theta)], axis=1)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    w_r: float = 1.0
    w_n: float = 1.0
    w_theta: float = 1.0
    val_fraction: float = 0.1
    arch_id: str = "qst-cnn-v1"

    def __post_init__(self):
        for name in ("epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr < 0 or min(self.w_r, self.w_n, self.w_theta) < 0:
            raise ValueError("learning rate and loss weights must be nonnegative")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.w_r, self.w_n, self.w_theta, self.w_theta])


def loss(pred, targets, weights) -> float:
    """Mean over the batch of the weighted squared error on the 4-output head."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    return float(np.mean(((pred - targets) ** 2) @ np.asarray(weights, dtype=np.float64)))


def loss_and_grads(model: Model, x: np.ndarray, targets: np.ndarray, weights) -> tuple[float, list]:
    z, caches = forward_raw(model, x, keep=True)
    pred = apply_head(z)
    w = np.asarray(weights, dtype=np.float64)
    diff = pred - targets
    value = float(np.mean((diff**2) @ w))
    g = 2.0 * diff * w / x.shape[0]
    # d softplus / dz = sigmoid(z)
    g[:, :2] *= 0.5 * (1.0 + np.tanh(0.5 * z[:, :2]))
    grads: list = []
    for layer, cache in zip(reversed(model.layers), reversed(caches)):
        g, pg = layer.backward(g, cache)
        grads = pg + grads
    return value, grads


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros(cls, model: Model) -> "AdamState":
        ps = model.parameters()
        return cls([np.zeros(p.shape) for p in ps], [np.zeros(p.shape) for p in ps])


def train_step(model: Model, x: np.ndarray, targets: np.ndarray, config: TrainConfig,
               state: AdamState) -> tuple[Model, AdamState, float]:
    """One Adam update in place; returns (model, state, loss before the update)."""
    value, grads = loss_and_grads(model, x, targets, config.weights)
    if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
        raise NonFiniteLossError(f"non-finite loss/gradient at step {state.step}: loss={value}")
    if config.lr == 0:
        return model, state, value
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(model.parameters(), grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        upd = config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
        p[...] = (p.astype(np.float64) - upd).astype(p.dtype)
    return model, state, value


def evaluate_loss(model: Model, x: np.ndarray, targets: np.ndarray, weights, batch: int = 512) -> float:
    total = 0.0
    for i in range(0, len(x), batch):
        pred = forward(model, x[i : i + batch])
        total += loss(pred, targets[i : i + batch], weights) * len(pred)
    return total / len(x)


@dataclass
class TrainResult:
    model: Model
    log: list = field(default_factory=list)  # (epoch, train_loss, val_loss)
    best_epoch: int = 0

    def log_csv(self) -> str:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e, tl, vl in self.log:
            w.writerow([e, repr(float(tl)), repr(float(vl))])
        return buf.getvalue()


def train(dataset, config: TrainConfig = TrainConfig(), progress=None) -> TrainResult:
    """Fit a fresh model; the last ``val_fraction`` of the dataset is held out
    and the best-validation epoch is returned.  Epoch 0 in the log is the
    untrained model."""
    values = np.asarray(dataset.values)
    labels = np.asarray(dataset.labels)
    n = len(values)
    n_val = int(round(n * config.val_fraction))
    if n - n_val < 1:
        raise ValueError("training split is empty")
    tr_x, tr_y = values[: n - n_val], labels[: n - n_val]
    va_x, va_y = (values[n - n_val :], labels[n - n_val :]) if n_val else (tr_x, tr_y)

    model = model_init(config.arch_id, config.seed)
    if values.shape[1] != model.input_len:
        raise ValueError(f"dataset seq_len {values.shape[1]} != model input {model.input_len}")
    model.norm_mean = float(np.mean(tr_x, dtype=np.float64))
    model.norm_scale = float(np.std(tr_x, dtype=np.float64)) or 1.0

    x_tr = normalize_input(tr_x, model)
    t_tr = label_targets(tr_y)
    x_va = normalize_input(va_x, model)
    t_va = label_targets(va_y)

    rng = np.random.default_rng(config.seed + 1)
    state = AdamState.zeros(model)
    val0 = evaluate_loss(model, x_va, t_va, config.weights)
    result = TrainResult(model.copy(), [(0, evaluate_loss(model, x_tr, t_tr, config.weights), val0)], 0)
    best = val0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(x_tr))
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            _, state, value = train_step(model, x_tr[idx], t_tr[idx], config, state)
            total += value * len(idx)
        tl = total / len(order)
        vl = evaluate_loss(model, x_va, t_va, config.weights)
        result.log.append((epoch, tl, vl))
        log.info("epoch %d train_loss=%.6f val_loss=%.6f", epoch, tl, vl)
        if progress:
            progress(epoch, tl, vl)
        if vl < best:
            best = vl
            result.model = model.copy()
            result.best_epoch = epoch
    return result


# ---------------------------------------------------------------- serialization


def model_to_bytes(model: Model) -> bytes:
    parts = [
        MAGIC,
        struct.pack("<IddI", VERSION, model.norm_mean, model.norm_scale, model.input_len),
        struct.pack("<I", len(model.layers)),
    ]
    for layer in model.layers:
        parts.append(struct.pack("<B", layer.tag))
        parts.append(struct.pack(f"<{len(layer.hyper())}I", *layer.hyper()))
        for p in layer.params():
            parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes, error=ModelFormatError):
        self.buf = buf
        self.pos = 0
        self.error = error

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise self.error(f"truncated file at offset {self.pos} (need {n} more bytes)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype: str, shape) -> np.ndarray:
        dt = np.dtype(dtype)
        n = int(np.prod(shape))
        return np.frombuffer(self.take(n * dt.itemsize), dtype=dt).reshape(shape).copy()


def check_crc(buf: bytes, error=ModelFormatError) -> bytes:
    if len(buf) < 8:
        raise error("truncated file")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise error(f"CRC mismatch: stored {crc:#010x}, computed {zlib.crc32(body):#010x}")
    return body


def model_from_bytes(buf: bytes) -> Model:
    if buf[:4] != MAGIC:
        raise ModelFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    body = check_crc(buf)
    rd = _Reader(body)
    rd.take(4)
    (version,) = rd.unpack("<I")
    if version != VERSION:
        raise ModelFormatError(f"unsupported version {version}")
    mean, scale, input_len, n_layers = rd.unpack("<ddII")
    layers = []
    for _ in range(n_layers):
        (tag,) = rd.unpack("<B")
        if tag not in _LAYER_TYPES:
            raise ModelFormatError(f"unknown layer tag {tag}")
        hyper = rd.unpack(f"<{_N_HYPER[tag]}I")
        layer = _LAYER_TYPES[tag](*hyper)
        if isinstance(layer, Conv1D):
            layer.weight = rd.array("<f4", (layer.out_ch, layer.in_ch, layer.kernel)).astype(np.float32)
            layer.bias = rd.array("<f4", (layer.out_ch,)).astype(np.float32)
        elif isinstance(layer, Dense):
            layer.weight = rd.array("<f4", (layer.n_out, layer.n_in)).astype(np.float32)
            layer.bias = rd.array("<f4", (layer.n_out,)).astype(np.float32)
        layers.append(layer)
    if rd.pos != len(body):
        raise ModelFormatError(f"{len(body) - rd.pos} unexpected trailing bytes")
    model = Model(layers, input_len, mean, scale)
    try:
        shapes = model.shapes()
    except ValueError as exc:
        raise ModelFormatError(f"inconsistent shape table: {exc}") from None
    if shapes[-1] != (4,):
        raise ModelFormatError(f"model head has shape {shapes[-1]}, expected (4,)")
    return model


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> Model:
    return model_from_bytes(Path(path).read_bytes())
