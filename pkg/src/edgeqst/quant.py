"""Post-training INT8 quantization and a deterministic integer interpreter.

Scheme: per-tensor symmetric weights (zero_point 0), per-tensor affine
activations, i32 biases at scale s_w * s_x, and a fixed-point requantization
multiplier per layer.  ReLU is fused into the preceding conv/dense layer by
clamping the requantized codes at the output zero point.

Rounding is round-half-away-from-zero everywhere.  Requantization is exact
integer arithmetic::

    requantize(acc) = saturate_i8(rha(acc * M / 2**(31 + s)) + zero_point)

where rha is round-half-away-from-zero of the exact rational value, computed as
``sign(p) * ((|p| + 2**(k-1)) >> k)`` with ``p = acc * M`` in int64 and
``k = 31 + s``.  M lies in [2**30, 2**31); s may be negative (ratio >= 1).

.qnq layout (little-endian)::

    magic b"QNNQ", u32 version (1), f64 norm_mean, f64 norm_scale, u32 input_len,
    f32 input scale, i32 input zero_point, u32 layer_count,
    per layer: u8 tag, u32 hyperparameters,
      conv/dense only: u8 relu, f32 weight scale, i32 weight zero_point,
                       f32 out scale, i32 out zero_point, i32 M, i8 s,
                       i8 weight blob, i32 bias blob
    u32 CRC32 of everything before it
"""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from edgeqst.gaussian import StateParams
from edgeqst.nn import (
    Conv1D,
    Dense,
    Flatten,
    Model,
    ReLU,
    _Reader,
    apply_head,
    check_crc,
    decode_head,
    normalize_input,
)

log = logging.getLogger(__name__)

MAGIC = b"QNNQ"
VERSION = 1
I32_MIN, I32_MAX = -(2**31), 2**31 - 1
# beyond this shift the float64 emulation in fake_quant_forward is no longer
# guaranteed to round exactly like the integer path
FAKE_QUANT_MAX_SHIFT = 13


class QModelFormatError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


# ---------------------------------------------------------------- tensor quantization


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")


def round_half_away(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    a = np.abs(v)
    f = np.floor(a)
    f = f + (a - f >= 0.5)
    return np.copysign(f, v)


def _f32(x: float) -> float:
    return float(np.float32(x))


def affine_params(lo: float, hi: float) -> QuantParams:
    """Affine INT8 parameters for the range [lo, hi], widened to contain 0."""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    scale = _f32((hi - lo) / 255.0)
    if scale == 0:
        return QuantParams(1.0, -128)
    zp = int(round_half_away(-lo / scale)) - 128
    return QuantParams(scale, min(max(zp, -128), 127))


def symmetric_params(values: np.ndarray) -> QuantParams:
    amax = float(np.max(np.abs(values))) if np.size(values) else 0.0
    scale = _f32(amax / 127.0)
    return QuantParams(scale if scale > 0 else 1.0, 0)


def quantize_with(values, qp: QuantParams) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64) / qp.scale
    return np.clip(round_half_away(v) + qp.zero_point, -128, 127).astype(np.int8)


def dequantize(codes, qp: QuantParams) -> np.ndarray:
    return (np.asarray(codes, dtype=np.float64) - qp.zero_point) * qp.scale


def quantize_tensor(values, mode: str = "symmetric") -> tuple[np.ndarray, QuantParams]:
    """INT8 codes and parameters for ``values``; mode is "symmetric" or "affine"."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot quantize non-finite values")
    if mode == "symmetric":
        qp = symmetric_params(values)
    elif mode == "affine":
        qp = affine_params(values.min() if values.size else 0.0, values.max() if values.size else 0.0)
    else:
        raise ValueError(f"unknown quantization mode {mode!r}")
    return quantize_with(values, qp), qp


def quantize_multiplier(ratio: float) -> tuple[int, int]:
    """(M, s) with M in [2**30, 2**31) and M * 2**(-31 - s) ~= ratio."""
    if not ratio > 0 or not math.isfinite(ratio):
        raise ValueError(f"multiplier ratio must be positive and finite, got {ratio}")
    mant, exp = math.frexp(ratio)  # ratio = mant * 2**exp, mant in [0.5, 1)
    m = int(round_half_away(mant * 2.0**31))
    if m == 2**31:
        m //= 2
        exp += 1
    return m, -exp


def multiplier_value(m: int, s: int) -> float:
    return math.ldexp(m, -31 - s)


def requantize(acc, m: int, s: int, zero_point: int, lo: int = -128) -> np.ndarray:
    """Integer rescale of i32 accumulators to i8 codes (see module docstring)."""
    k = 31 + s
    if not 1 <= k <= 62:
        raise ValueError(f"shift {s} out of supported range")
    p = np.asarray(acc, dtype=np.int64) * np.int64(m)
    mag = (np.abs(p) + (np.int64(1) << np.int64(k - 1))) >> np.int64(k)
    q = np.where(p < 0, -mag, mag) + zero_point
    return np.clip(q, lo, 127).astype(np.int8)


# ---------------------------------------------------------------- calibration


@dataclass
class CalibStats:
    """Observed range of every activation tensor: index 0 is the normalized
    input, index i + 1 the output of layer i."""

    mins: list
    maxs: list
    count: int
    pct_lo: list | None = None
    pct_hi: list | None = None

    def merge(self, other: "CalibStats") -> "CalibStats":
        if len(self.mins) != len(other.mins):
            raise ValueError("cannot merge stats for different graphs")
        return CalibStats(
            [min(a, b) for a, b in zip(self.mins, other.mins)],
            [max(a, b) for a, b in zip(self.maxs, other.maxs)],
            self.count + other.count,
        )

    def range(self, i: int, method: str = "minmax") -> tuple[float, float]:
        if method == "minmax":
            return self.mins[i], self.maxs[i]
        if method == "percentile":
            if self.pct_lo is None:
                raise CalibrationError("stats were collected without percentiles")
            return self.pct_lo[i], self.pct_hi[i]
        raise ValueError(f"unknown calibration method {method!r}")

    def to_json(self) -> str:
        return json.dumps(
            {"count": self.count, "mins": self.mins, "maxs": self.maxs,
             "pct_lo": self.pct_lo, "pct_hi": self.pct_hi},
            indent=1,
        ) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CalibStats":
        d = json.loads(text)
        return cls(d["mins"], d["maxs"], d["count"], d.get("pct_lo"), d.get("pct_hi"))


def _activations(model: Model, x: np.ndarray) -> list[np.ndarray]:
    outs = [x]
    h = x
    for layer in model.layers:
        h, _ = layer.forward(h)
        outs.append(h)
    return outs


def collect_calibration_stats(model: Model, seqs, batch: int = 250,
                              percentile: float | None = None) -> CalibStats:
    """Min/max of every activation tensor over the calibration sequences.

    With ``percentile`` (e.g. 99.99) the symmetric percentile range is also
    recorded; that needs all activations in memory at once per tensor.
    """
    seqs = np.asarray(seqs)
    if seqs.ndim == 1:
        seqs = seqs[None, :]
    if len(seqs) == 0:
        raise CalibrationError("calibration set is empty")
    stats = None
    keep: list[list[np.ndarray]] = []
    for i in range(0, len(seqs), batch):
        acts = _activations(model, normalize_input(seqs[i : i + batch], model))
        part = CalibStats([float(a.min()) for a in acts], [float(a.max()) for a in acts], len(acts[0]))
        stats = part if stats is None else stats.merge(part)
        if percentile is not None:
            if not keep:
                keep = [[] for _ in acts]
            for k, a in zip(keep, acts):
                k.append(a.ravel())
    if percentile is not None:
        stats.pct_lo = [float(np.percentile(np.concatenate(k), 100.0 - percentile)) for k in keep]
        stats.pct_hi = [float(np.percentile(np.concatenate(k), percentile)) for k in keep]
    return stats


# ---------------------------------------------------------------- quantized model


@dataclass
class QLayer:
    """A conv or dense layer in integer form, optionally with fused ReLU."""

    kind: type  # Conv1D or Dense
    hyper: tuple
    relu: bool
    w_codes: np.ndarray  # int8
    w_qp: QuantParams
    bias: np.ndarray  # int32
    out_qp: QuantParams
    m: int
    s: int

    @property
    def lo(self) -> int:
        return self.out_qp.zero_point if self.relu else -128


@dataclass
class QuantizedModel:
    ops: list  # QLayer or Flatten
    input_len: int
    norm_mean: float
    norm_scale: float
    input_qp: QuantParams

    @property
    def output_qp(self) -> QuantParams:
        return [op for op in self.ops if isinstance(op, QLayer)][-1].out_qp


def quantize_model(model: Model, stats: CalibStats, method: str = "minmax") -> QuantizedModel:
    n_tensors = len(model.layers) + 1
    if len(stats.mins) != n_tensors or len(stats.maxs) != n_tensors:
        raise CalibrationError(
            f"stats cover {len(stats.mins)} tensors, model has {n_tensors}"
        )
    input_qp = affine_params(*stats.range(0, method))
    x_qp = input_qp
    ops: list = []
    layers = model.layers
    i = 0
    while i < len(layers):
        layer = layers[i]
        if isinstance(layer, Flatten):
            ops.append(Flatten())
            i += 1
            continue
        if not isinstance(layer, (Conv1D, Dense)):
            raise NotImplementedError(f"standalone {type(layer).__name__} is not supported")
        relu = i + 1 < len(layers) and isinstance(layers[i + 1], ReLU)
        out_index = i + 2 if relu else i + 1
        out_qp = affine_params(*stats.range(out_index, method))
        w_codes, w_qp = quantize_tensor(layer.weight, "symmetric")
        acc_scale = w_qp.scale * x_qp.scale
        bias = np.clip(round_half_away(layer.bias.astype(np.float64) / acc_scale), I32_MIN, I32_MAX)
        m, s = quantize_multiplier(acc_scale / out_qp.scale)
        if s > FAKE_QUANT_MAX_SHIFT:
            log.warning("layer %d: requantization shift %d exceeds fake-quant exactness bound", i, s)
        ops.append(QLayer(type(layer), layer.hyper(), relu, w_codes, w_qp,
                          bias.astype(np.int32), out_qp, m, s))
        x_qp = out_qp
        i = out_index
    return QuantizedModel(ops, model.input_len, model.norm_mean, model.norm_scale, input_qp)


# ---------------------------------------------------------------- integer inference


def quantize_input(qm: QuantizedModel, seqs) -> np.ndarray:
    """Normalize in float64 and quantize; returns (B, 1, L) int8 codes."""
    x = np.asarray(seqs)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != qm.input_len:
        raise ValueError(f"sequence length {x.shape[-1]} != model input {qm.input_len}")
    x = (x.astype(np.float64) - qm.norm_mean) / qm.norm_scale
    return quantize_with(x, qm.input_qp)[:, None, :]


def _check_acc(acc: np.ndarray) -> np.ndarray:
    if acc.size and (acc.min() < I32_MIN or acc.max() > I32_MAX):
        raise OverflowError("accumulator exceeds int32")
    return acc


def qforward_codes(qm: QuantizedModel, codes: np.ndarray) -> list[np.ndarray]:
    """Run the integer graph on input codes (B, 1, L); returns the int8 output
    codes of every conv/dense layer (flatten does not produce a new tensor)."""
    h = np.asarray(codes, dtype=np.int8)
    zp = qm.input_qp.zero_point
    outs = []
    for op in qm.ops:
        if isinstance(op, Flatten):
            h = h.reshape(h.shape[0], -1)
            continue
        g = h.astype(np.int64) - zp
        w = op.w_codes.astype(np.int64)
        if op.kind is Conv1D:
            _, out_ch, k, stride = op.hyper
            win = sliding_window_view(g, k, axis=2)[:, :, ::stride, :]
            b, c, lout, _ = win.shape
            cols = win.transpose(0, 2, 1, 3).reshape(b * lout, c * k)
            acc = cols @ w.reshape(out_ch, -1).T + op.bias.astype(np.int64)
            acc = acc.reshape(b, lout, out_ch).transpose(0, 2, 1)
        else:
            acc = g @ w.T + op.bias.astype(np.int64)
        h = requantize(_check_acc(acc), op.m, op.s, op.out_qp.zero_point, op.lo)
        zp = op.out_qp.zero_point
        outs.append(h)
    return outs


def qforward_head(qm: QuantizedModel, seqs) -> np.ndarray:
    """Dequantized 4-output head (after softplus), shape (B, 4)."""
    codes = qforward_codes(qm, quantize_input(qm, seqs))[-1]
    return apply_head(dequantize(codes, qm.output_qp))


def qforward(qm: QuantizedModel, seq) -> StateParams:
    return decode_head(qforward_head(qm, seq)[0])


def qpredict(qm: QuantizedModel, seqs, batch: int = 256) -> list[StateParams]:
    seqs = np.asarray(seqs)
    if seqs.ndim == 1:
        seqs = seqs[None, :]
    out = []
    for i in range(0, len(seqs), batch):
        out.extend(decode_head(h) for h in qforward_head(qm, seqs[i : i + batch]))
    return out


# ---------------------------------------------------------------- fake quantization


def fake_quant_codes(model: Model, stats: CalibStats, codes: np.ndarray,
                     method: str = "minmax") -> list[np.ndarray]:
    """Float64 emulation of the quantized graph on input codes.

    Tensors are carried as float64 values on their quantization grid
    ((code - zero_point), i.e. dequantized values in units of the scale), the
    layer sums run tap by tap in floating point, and rescaling multiplies by
    the float value of the fixed-point multiplier before rounding half away
    from zero.  Returns the int8 codes after every conv/dense layer.
    """
    plan = quantize_model(model, stats, method)
    g = np.asarray(codes, dtype=np.float64) - plan.input_qp.zero_point
    outs = []
    for op in plan.ops:
        if isinstance(op, Flatten):
            g = g.reshape(g.shape[0], -1)
            continue
        w = op.w_codes.astype(np.float64)
        if op.kind is Conv1D:
            _, out_ch, k, stride = op.hyper
            lout = (g.shape[2] - k) // stride + 1
            y = np.zeros((g.shape[0], out_ch, lout))
            for j in range(k):
                taps = g[:, :, j : j + stride * (lout - 1) + 1 : stride]
                y += np.einsum("oc,bcl->bol", w[:, :, j], taps)
            y += op.bias.astype(np.float64)[None, :, None]
        else:
            y = np.einsum("bi,oi->bo", g, w) + op.bias.astype(np.float64)
        v = y * multiplier_value(op.m, op.s)
        q = np.clip(round_half_away(v) + op.out_qp.zero_point, op.lo, 127)
        outs.append(q.astype(np.int8))
        g = q - op.out_qp.zero_point
    return outs


def fake_quant_forward(model: Model, stats: CalibStats, seq, method: str = "minmax") -> StateParams:
    plan = quantize_model(model, stats, method)
    codes = fake_quant_codes(model, stats, quantize_input(plan, seq), method)[-1]
    return decode_head(apply_head(dequantize(codes, plan.output_qp))[0])


# ---------------------------------------------------------------- serialization


def qmodel_to_bytes(qm: QuantizedModel) -> bytes:
    parts = [
        MAGIC,
        struct.pack("<IddIfiI", VERSION, qm.norm_mean, qm.norm_scale, qm.input_len,
                    qm.input_qp.scale, qm.input_qp.zero_point, len(qm.ops)),
    ]
    for op in qm.ops:
        if isinstance(op, Flatten):
            parts.append(struct.pack("<B", Flatten.tag))
            continue
        parts.append(struct.pack("<B", op.kind.tag))
        parts.append(struct.pack(f"<{len(op.hyper)}I", *op.hyper))
        parts.append(struct.pack("<Bfifiib", int(op.relu), op.w_qp.scale, op.w_qp.zero_point,
                                 op.out_qp.scale, op.out_qp.zero_point, op.m, op.s))
        parts.append(np.ascontiguousarray(op.w_codes, dtype="i1").tobytes())
        parts.append(np.ascontiguousarray(op.bias, dtype="<i4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def qmodel_from_bytes(buf: bytes) -> QuantizedModel:
    if buf[:4] != MAGIC:
        raise QModelFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    body = check_crc(buf, QModelFormatError)
    rd = _Reader(body, QModelFormatError)
    rd.take(4)
    (version,) = rd.unpack("<I")
    if version != VERSION:
        raise QModelFormatError(f"unsupported version {version}")
    mean, scale, input_len, in_scale, in_zp, n_ops = rd.unpack("<ddIfiI")
    ops: list = []
    for _ in range(n_ops):
        (tag,) = rd.unpack("<B")
        if tag == Flatten.tag:
            ops.append(Flatten())
            continue
        if tag == Conv1D.tag:
            kind, hyper = Conv1D, rd.unpack("<4I")
            wshape = (hyper[1], hyper[0], hyper[2])
        elif tag == Dense.tag:
            kind, hyper = Dense, rd.unpack("<2I")
            wshape = (hyper[1], hyper[0])
        else:
            raise QModelFormatError(f"unknown layer tag {tag}")
        relu, ws, wzp, os_, ozp, m, s = rd.unpack("<Bfifiib")
        w = rd.array("i1", wshape)
        b = rd.array("<i4", (wshape[0],))
        try:
            ops.append(QLayer(kind, hyper, bool(relu), w.astype(np.int8), QuantParams(ws, wzp),
                              b.astype(np.int32), QuantParams(os_, ozp), m, s))
        except ValueError as exc:
            raise QModelFormatError(str(exc)) from None
    if rd.pos != len(body):
        raise QModelFormatError(f"{len(body) - rd.pos} unexpected trailing bytes")
    return QuantizedModel(ops, input_len, mean, scale, QuantParams(in_scale, in_zp))


def save_qmodel(qm: QuantizedModel, path) -> None:
    Path(path).write_bytes(qmodel_to_bytes(qm))


def load_qmodel(path) -> QuantizedModel:
    return qmodel_from_bytes(Path(path).read_bytes())
