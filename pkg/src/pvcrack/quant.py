"""Post-training quantization: range calibration, int8 and fp16 conversion,
and a host-side integer inference simulator.

Weights are per-tensor symmetric int8 (zero point 0), activations
asymmetric int8 over calibrated zero-inclusive ranges, biases int32 at
input_scale * weight_scale. Requantization back to int8 uses a fixed-point
multiplier in [2^30, 2^31) with a right shift, rounding half away from
zero; accumulators saturate at int32 bounds. The simulator executes that
arithmetic exactly and serves as the bit-exactness oracle for the engine.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import arch
from . import nn

INT8_MIN, INT8_MAX = -128, 127
INT32_MIN, INT32_MAX = -(2 ** 31), 2 ** 31 - 1

# A calibrated [0, 0] span widens to this so the scale stays positive.
DEGENERATE_RANGE_SPAN = 1e-5
DEFAULT_CALIBRATION_SAMPLES = 100

# Preprocessed inputs are u8 pixels scaled by 1/255, so the input tensor
# uses a fixed grid that represents every pixel value exactly; it is a
# format constant rather than a stored table entry.
INPUT_SCALE = 1.0 / 255.0
INPUT_ZERO_POINT = -128


class QuantError(Exception):
    """Quantization cannot proceed (bad ranges, unrepresentable multiplier)."""


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise QuantError(f"scale must be positive and finite, got {self.scale}")


@dataclass(frozen=True)
class ActivationRanges:
    """Observed per-tensor activation extrema, widened to include zero."""

    mins: np.ndarray
    maxs: np.ndarray
    count: int


@dataclass
class QLayer:
    spec: arch.LayerSpec
    out_qp: QuantParams
    weight: np.ndarray | None = None        # int8
    bias: np.ndarray | None = None          # int32
    weight_scale: float = 0.0
    requant: tuple | None = None            # (multiplier, right_shift)
    branches: list | None = None            # list of list[QLayer]


@dataclass
class QModel:
    spec: arch.ModelSpec
    input_qp: QuantParams
    layers: list


@dataclass
class HModel:
    """Half-precision weight storage; inference dequantizes to fp32."""

    spec: arch.ModelSpec
    halves: list                            # float16 arrays, canonical order
    overflow_count: int


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_multiplier(real: float) -> tuple[int, int]:
    """Represent real in (0, 1) as multiplier * 2^(-31 - shift)."""
    if not 0 < real < 1:
        raise QuantError(f"requantization multiplier {real} outside (0, 1)")
    shift = 0
    while real < 0.5:
        real *= 2
        shift += 1
        if shift > 62:
            raise QuantError("requantization multiplier too small to represent")
    mult = int(round_half_away(np.float64(real * (1 << 31))))
    if mult == 1 << 31:
        if shift == 0:
            mult = (1 << 31) - 1
        else:
            mult >>= 1
            shift -= 1
    return mult, shift


def activation_qparams(lo: float, hi: float) -> QuantParams:
    """Asymmetric int8 params over a zero-inclusive range.

    The scale is rounded to float32 up front: that is the width it is
    stored at, and quantizing against the stored value keeps the simulator
    and the serialized engine bit-identical.
    """
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    if hi == lo:
        hi = lo + DEGENERATE_RANGE_SPAN
    scale = float(np.float32((hi - lo) / 255.0))
    zp = int(round_half_away(np.float64(INT8_MIN - lo / scale)))
    return QuantParams(scale, int(np.clip(zp, INT8_MIN, INT8_MAX)))


def quantize_weights(w: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-tensor symmetric: scale = max|w| / 127, zero point 0."""
    max_abs = float(np.max(np.abs(w))) if w.size else 0.0
    scale = max_abs / 127.0 if max_abs > 0 else 1.0
    q = np.clip(round_half_away(w / scale), INT8_MIN, INT8_MAX)
    return q.astype(np.int8), scale


def quantize_bias(b: np.ndarray, input_scale: float, weight_scale: float) -> np.ndarray:
    q = round_half_away(b.astype(np.float64) / (input_scale * weight_scale))
    return np.clip(q, INT32_MIN, INT32_MAX).astype(np.int32)


def quantize_tensor(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    q = round_half_away(x.astype(np.float64) / qp.scale) + qp.zero_point
    return np.clip(q, INT8_MIN, INT8_MAX).astype(np.int8)


def dequantize_tensor(q: np.ndarray, qp: QuantParams) -> np.ndarray:
    return (q.astype(np.float32) - np.float32(qp.zero_point)) * np.float32(qp.scale)


def _site_count(spec: arch.ModelSpec) -> int:
    n = 1
    for layer in spec.layers:
        if layer.op == arch.INCEPTION:
            n += sum(len(branch) for branch in layer.branches) + 1
        else:
            n += 1
    return n


def calibrate(model: arch.Model, calib: list) -> ActivationRanges:
    """Record per-tensor min/max over float forward passes, zero-widened."""
    if not calib:
        raise QuantError("calibration set is empty")
    mins = maxs = None
    for t in calib:
        _, sites = model.forward_collect(t)
        lo = np.array([float(s.min()) for s in sites])
        hi = np.array([float(s.max()) for s in sites])
        if mins is None:
            mins, maxs = lo, hi
        else:
            mins = np.minimum(mins, lo)
            maxs = np.maximum(maxs, hi)
    return ActivationRanges(np.minimum(mins, 0.0), np.maximum(maxs, 0.0), len(calib))


def quantize_int8(model: arch.Model, ranges: ActivationRanges) -> QModel:
    """Full int8 affine quantization with integer requantization params."""
    spec = model.spec
    expected = _site_count(spec)
    if len(ranges.mins) != expected:
        raise QuantError(
            f"ranges cover {len(ranges.mins)} tensors, model has {expected}")

    site = _Cursor(ranges)
    site.skip()     # the input tensor sits on the fixed pixel grid
    input_qp = QuantParams(INPUT_SCALE, INPUT_ZERO_POINT)
    qlayers, _ = _quantize_sequence(
        list(zip(spec.layers, model.layers)), input_qp, site, final_qp=None)
    return QModel(spec, input_qp, qlayers)


class _Cursor:
    def __init__(self, ranges: ActivationRanges):
        self.ranges = ranges
        self.next = 0

    def take_qparams(self) -> QuantParams:
        qp = activation_qparams(self.ranges.mins[self.next], self.ranges.maxs[self.next])
        self.next += 1
        return qp

    def skip(self) -> None:
        self.next += 1

    def peek_qparams(self, offset: int = 0) -> QuantParams:
        i = self.next + offset
        return activation_qparams(self.ranges.mins[i], self.ranges.maxs[i])


def _quantize_sequence(pairs, in_qp: QuantParams, site: _Cursor, final_qp):
    """Quantize a layer sequence. If final_qp is set, the sequence's last
    tensor is forced onto it (inception branches land on the concat grid).

    A convolution or dense layer immediately followed by ReLU requantizes
    straight into the post-ReLU range; the ReLU then runs on the shared
    grid as max(q, zero_point), which is exact.
    """
    qlayers = []
    cur = in_qp
    for i, (lspec, runtime) in enumerate(pairs):
        last = i == len(pairs) - 1
        if lspec.op in (arch.CONV, arch.DENSE):
            followed_by_relu = not last and pairs[i + 1][0].op == arch.RELU
            if last and final_qp is not None:
                out_qp = final_qp
                site.skip()
            elif followed_by_relu:
                relu_is_last = i + 1 == len(pairs) - 1
                if relu_is_last and final_qp is not None:
                    out_qp = final_qp
                else:
                    out_qp = site.peek_qparams(1)   # the ReLU output range
                site.skip()
            else:
                out_qp = site.take_qparams()
            qw, ws = quantize_weights(runtime.w)
            qb = quantize_bias(runtime.b, cur.scale, ws)
            real_mult = cur.scale * ws / out_qp.scale
            if not 0 < real_mult < 1:
                raise QuantError(
                    f"activation range for {lspec.op} output is degenerate after "
                    f"widening (requant multiplier {real_mult:.4g}); calibrate "
                    "with representative inputs")
            qlayers.append(QLayer(lspec, out_qp, qw, qb, ws,
                                  quantize_multiplier(real_mult)))
        elif lspec.op == arch.INCEPTION:
            n_branch_sites = sum(len(b) for b in lspec.branches)
            concat_qp = site.peek_qparams(n_branch_sites)
            branches = []
            for bspec, bruntime in zip(lspec.branches, runtime.branches):
                bq, _ = _quantize_sequence(
                    list(zip(bspec, bruntime)), cur, site, final_qp=concat_qp)
                branches.append(bq)
            site.skip()     # the concat site itself
            qlayers.append(QLayer(lspec, concat_qp, branches=branches))
            out_qp = concat_qp
        else:
            # ReLU / MaxPool / GAP / Flatten run on their input's grid.
            out_qp = final_qp if (last and final_qp is not None) else cur
            site.skip()
            qlayers.append(QLayer(lspec, out_qp))
        cur = out_qp
    return qlayers, cur


def quantize_fp16(model: arch.Model) -> HModel:
    """Round parameters to half precision; overflow saturates to +-65504."""
    fp16_max = np.float16(65504)
    halves = []
    overflow = 0
    for p in model.param_tensors():
        with np.errstate(over="ignore"):
            h = p.astype(np.float16)
        bad = ~np.isfinite(h) & np.isfinite(p)
        if np.any(bad):
            overflow += int(bad.sum())
            h = np.where(bad, np.sign(p).astype(np.float16) * fp16_max, h)
        halves.append(h)
    return HModel(model.spec, halves, overflow)


def dequantize_fp16(hm: HModel) -> arch.Model:
    model = arch.Model(hm.spec, dtype=np.float32)
    for p, h in zip(model.param_tensors(), hm.halves):
        p[:] = h.astype(np.float32)
    return model


def saturate_i32(acc: np.ndarray) -> np.ndarray:
    return np.clip(acc, INT32_MIN, INT32_MAX)


def requantize(acc: np.ndarray, multiplier: int, shift: int, zero_point: int) -> np.ndarray:
    """int32 accumulator -> int8 via fixed-point multiply, half-away rounding."""
    acc = acc.astype(np.int64)
    total = 31 + shift
    half = np.int64(1) << np.int64(total - 1)
    mag = np.abs(acc) * np.int64(multiplier)
    q = ((mag + half) >> np.int64(total)) * np.sign(acc)
    return np.clip(q + zero_point, INT8_MIN, INT8_MAX).astype(np.int8)


def _div_round_half_away(num: np.ndarray, denom: int) -> np.ndarray:
    mag = np.abs(num)
    return ((mag + denom // 2) // denom) * np.sign(num)


def _sim_conv(q: np.ndarray, ql: QLayer, in_qp: QuantParams) -> np.ndarray:
    s, p = ql.spec.stride, ql.spec.padding
    kh = kw = ql.spec.kernel
    xp = np.pad(q, ((p, p), (p, p), (0, 0)), constant_values=in_qp.zero_point) if p else q
    x64 = xp.astype(np.int64) - in_qp.zero_point
    win = sliding_window_view(x64, (kh, kw), axis=(0, 1))[::s, ::s]
    acc = np.einsum("hwckl,klco->hwo", win, ql.weight.astype(np.int64))
    acc = saturate_i32(acc + ql.bias.astype(np.int64))
    return requantize(acc, *ql.requant, ql.out_qp.zero_point)


def _sim_dense(q: np.ndarray, ql: QLayer, in_qp: QuantParams) -> np.ndarray:
    x64 = q.astype(np.int64) - in_qp.zero_point
    acc = saturate_i32(x64 @ ql.weight.astype(np.int64) + ql.bias.astype(np.int64))
    return requantize(acc, *ql.requant, ql.out_qp.zero_point)


def _sim_maxpool(q: np.ndarray, ql: QLayer) -> np.ndarray:
    s, p, k = ql.spec.stride, ql.spec.padding, ql.spec.kernel
    xp = np.pad(q, ((p, p), (p, p), (0, 0)), constant_values=INT8_MIN) if p else q
    win = sliding_window_view(xp, (k, k), axis=(0, 1))[::s, ::s]
    return win.reshape(*win.shape[:3], k * k).max(axis=-1)


def _sim_gap(q: np.ndarray) -> np.ndarray:
    h, w, _ = q.shape
    total = q.astype(np.int64).sum(axis=(0, 1))
    return _div_round_half_away(total, h * w).astype(np.int8)


def _sim_sequence(q, qlayers, in_qp, acts):
    cur = in_qp
    for ql in qlayers:
        op = ql.spec.op
        if op == arch.CONV:
            q = _sim_conv(q, ql, cur)
        elif op == arch.DENSE:
            q = _sim_dense(q, ql, cur)
        elif op == arch.RELU:
            q = np.maximum(q, np.int8(cur.zero_point))
        elif op == arch.MAXPOOL:
            q = _sim_maxpool(q, ql)
        elif op == arch.GAP:
            q = _sim_gap(q)
        elif op == arch.FLATTEN:
            q = q.reshape(-1)
        elif op == arch.INCEPTION:
            outs = []
            for branch in ql.branches:
                bq, _ = _sim_sequence(q, branch, cur, acts)
                outs.append(bq)
            q = np.concatenate(outs, axis=-1)
        acts.append(q)
        cur = ql.out_qp
    return q, cur


def simulate_quant_infer(qm: QModel, x: np.ndarray):
    """Integer-exact inference on a preprocessed float input.

    Returns (dequantized logits, per-tensor int8 activations including the
    quantized input).
    """
    q = quantize_tensor(x, qm.input_qp)
    acts = [q]
    q, out_qp = _sim_sequence(q, qm.layers, qm.input_qp, acts)
    return dequantize_tensor(q, out_qp), acts


@dataclass(frozen=True)
class QuantErrorReport:
    accuracy_float: float
    accuracy_int8: float
    accuracy_delta: float
    agreement_rate: float
    max_logit_dev: float
    sample_count: int


def quant_error_stats(model: arch.Model, qm: QModel, samples: list) -> QuantErrorReport:
    """Float-vs-int8 accuracy delta, argmax agreement, max logit deviation."""
    if not samples:
        raise QuantError("samples list is empty")
    hits_f = hits_q = agree = 0
    max_dev = 0.0
    for x, label in samples:
        logits_f = model.forward(x)
        logits_q, _ = simulate_quant_infer(qm, x)
        pf, pq = int(np.argmax(logits_f)), int(np.argmax(logits_q))
        hits_f += pf == label
        hits_q += pq == label
        agree += pf == pq
        max_dev = max(max_dev, float(np.max(np.abs(logits_f - logits_q))))
    n = len(samples)
    return QuantErrorReport(hits_f / n, hits_q / n, hits_q / n - hits_f / n,
                            agree / n, max_dev, n)


def write_quant_report(path, report: QuantErrorReport, blob_sizes: dict | None = None) -> None:
    lines = [
        f"accuracy_float={report.accuracy_float:.6f}",
        f"accuracy_int8={report.accuracy_int8:.6f}",
        f"accuracy_delta={report.accuracy_delta:.6f}",
        f"agreement_rate={report.agreement_rate:.6f}",
        f"max_logit_dev={report.max_logit_dev:.6g}",
        f"sample_count={report.sample_count}",
    ]
    for scheme, size in (blob_sizes or {}).items():
        lines.append(f"blob_bytes_{scheme}={size}")
    Path(path).write_text("\n".join(lines) + "\n", "utf-8")
