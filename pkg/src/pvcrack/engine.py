"""Model blob serialization and an arena-planned integer inference engine.

Blob layout (all little-endian):

* header: magic ``PVTM``, version u16, scheme u8 (0 fp32, 1 fp16, 2 int8),
  class_count u8, input_side u16, input_channels u16, layer_count u16,
  reserved u16, payload_length u32, crc32 u32 over the payload.
* layer table: per layer opcode u8 (1 conv, 2 relu, 3 maxpool, 4 global
  avg pool, 5 dense, 6 flatten, 7 inception concat), kernel u8, stride u8,
  padding u8, in_ch u16, out_ch u16, branch descriptors for opcode 7
  (branch count u8, then per branch a sublayer count u8 followed by nested
  records), weight offset u32, bias offset u32, activation scale f32,
  activation zero_point i8, requant multiplier i32, requant shift u8.
* tensor data: 16-byte-aligned raw parameter bytes; offsets are relative
  to the data section, which itself starts 16-byte-aligned in the file.

Layer records carry the quantization grid of the layer's *output* tensor.
The input tensor sits on the fixed pixel grid (scale 1/255, zero point
-128), so the engine can quantize raw u8 images without a stored entry.

Integer execution matches the host-side simulator bit for bit: int8
operands, int32-saturated accumulators, fixed-point requantization with
round-half-away-from-zero. Convolutions here run through float64 matmuls,
which is exact for these magnitudes (every intermediate is an integer far
below 2^53) and keeps the engine BLAS-fast.
"""

from __future__ import annotations

import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import arch
from . import dataset
from . import quant

MAGIC = b"PVTM"
VERSION = 1
SCHEME_FP32, SCHEME_FP16, SCHEME_INT8 = 0, 1, 2
SCHEME_NAMES = {SCHEME_FP32: "fp32", SCHEME_FP16: "fp16", SCHEME_INT8: "int8"}
ALIGNMENT = 16

INPUT_SCALE = 1.0 / 255.0
INPUT_ZERO_POINT = -128

_HEADER = struct.Struct("<4sHBBHHHHII")
_REC_HEAD = struct.Struct("<BBBBHH")
_REC_TAIL = struct.Struct("<IIfbiB")
_U8 = struct.Struct("<B")
_REC_FIXED = _REC_HEAD.size + _REC_TAIL.size

_OP_CODES = {
    arch.CONV: 1, arch.RELU: 2, arch.MAXPOOL: 3, arch.GAP: 4,
    arch.DENSE: 5, arch.FLATTEN: 6, arch.INCEPTION: 7,
}
_CODE_OPS = {v: k for k, v in _OP_CODES.items()}

# (weight bytes, bias bytes) per parameter element.
_ELEM_BYTES = {SCHEME_FP32: (4, 4), SCHEME_FP16: (2, 2), SCHEME_INT8: (1, 4)}
_WEIGHT_DTYPE = {SCHEME_FP32: "<f4", SCHEME_FP16: "<f2", SCHEME_INT8: "i1"}
_BIAS_DTYPE = {SCHEME_FP32: "<f4", SCHEME_FP16: "<f2", SCHEME_INT8: "<i4"}

_I32_MIN, _I32_MAX = -(2 ** 31), 2 ** 31 - 1


class BlobError(Exception):
    """Base class for serialization and parsing failures."""


class BadMagicError(BlobError):
    pass


class BadVersionError(BlobError):
    pass


class ChecksumError(BlobError):
    pass


class BoundsError(BlobError):
    pass


class FormatError(BlobError):
    pass


@dataclass
class _Record:
    op: str
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    in_ch: int = 0
    out_ch: int = 0
    weight_off: int = 0
    bias_off: int = 0
    act_scale: float = 0.0
    act_zp: int = 0
    requant_mult: int = 0
    requant_shift: int = 0
    branches: list | None = None
    weight: np.ndarray | None = None    # storage dtype of the scheme
    bias: np.ndarray | None = None


@dataclass(frozen=True)
class ArenaPlan:
    arena_bytes: int
    placements: tuple       # (offset, nbytes) per tensor id
    alignment: int = ALIGNMENT


@dataclass(frozen=True)
class LatencyStats:
    runs: int
    mean_ms: float
    p50_ms: float
    p95_ms: float
    min_ms: float
    max_ms: float

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if not self.min_ms <= self.p50_ms <= self.p95_ms <= self.max_ms:
            raise ValueError("latency quantiles out of order")


@dataclass(frozen=True)
class BenchmarkReport:
    stats: LatencyStats
    blob_bytes: int
    arena_bytes: int
    compute_only: bool = True   # image acquisition is out of scope


def _align(n: int) -> int:
    return (n + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def _check_u8(value: int, what: str) -> int:
    if not 0 <= value <= 255:
        raise arch.SpecError(f"{what} {value} does not fit u8 in the blob format")
    return value


def _check_u16(value: int, what: str) -> int:
    if not 0 <= value <= 65535:
        raise arch.SpecError(f"{what} {value} does not fit u16 in the blob format")
    return value


def _record_size(lspec: arch.LayerSpec) -> int:
    size = _REC_FIXED
    if lspec.op == arch.INCEPTION:
        size += 1
        for branch in lspec.branches:
            size += 1 + _REC_FIXED * len(branch)
    return size


def _iter_param_specs(layers):
    for lspec in layers:
        if lspec.op == arch.INCEPTION:
            for branch in lspec.branches:
                yield from _iter_param_specs(branch)
        elif lspec.op in (arch.CONV, arch.DENSE):
            yield lspec


def _param_shapes(lspec: arch.LayerSpec):
    if lspec.op == arch.CONV:
        return (lspec.kernel, lspec.kernel, lspec.in_ch, lspec.out_ch), (lspec.out_ch,)
    return (lspec.in_ch, lspec.out_ch), (lspec.out_ch,)


def _plan_data(spec: arch.ModelSpec, scheme: int):
    """Assign 16-byte-aligned (weight, bias) offsets in canonical order."""
    w_bytes, b_bytes = _ELEM_BYTES[scheme]
    offsets = []
    cursor = 0
    for lspec in _iter_param_specs(spec.layers):
        w_shape, b_shape = _param_shapes(lspec)
        w_off = cursor
        cursor = _align(w_off + int(np.prod(w_shape)) * w_bytes)
        b_off = cursor
        cursor = _align(b_off + int(np.prod(b_shape)) * b_bytes)
        offsets.append((w_off, b_off))
    data_len = cursor
    return offsets, data_len


def blob_size(spec: arch.ModelSpec, scheme: int) -> int:
    """Exact byte length serialize() will produce for this spec and scheme."""
    table_len = sum(_record_size(l) for l in spec.layers)
    pad = -(_HEADER.size + table_len) % ALIGNMENT
    _, data_len = _plan_data(spec, scheme)
    return _HEADER.size + table_len + pad + data_len


def _records_from_qmodel(qm: quant.QModel) -> list:
    def build(ql: quant.QLayer) -> _Record:
        l = ql.spec
        rec = _Record(
            l.op, l.kernel, l.stride, l.padding, l.in_ch, l.out_ch,
            act_scale=ql.out_qp.scale, act_zp=ql.out_qp.zero_point,
            requant_mult=ql.requant[0] if ql.requant else 0,
            requant_shift=ql.requant[1] if ql.requant else 0,
        )
        if ql.branches is not None:
            rec.branches = [[build(s) for s in branch] for branch in ql.branches]
        if ql.weight is not None:
            rec.weight = ql.weight.astype("i1")
            rec.bias = ql.bias.astype("<i4")
        return rec

    return [build(ql) for ql in qm.layers]


def _records_from_float(spec: arch.ModelSpec, params: list, dtype: str) -> list:
    it = iter(params)

    def build(lspec: arch.LayerSpec) -> _Record:
        rec = _Record(lspec.op, lspec.kernel, lspec.stride, lspec.padding,
                      lspec.in_ch, lspec.out_ch)
        if lspec.op == arch.INCEPTION:
            rec.branches = [[build(s) for s in branch] for branch in lspec.branches]
        elif lspec.op in (arch.CONV, arch.DENSE):
            rec.weight = next(it).astype(dtype)
            rec.bias = next(it).astype(dtype)
        return rec

    return [build(l) for l in spec.layers]


def _iter_param_records(records):
    for rec in records:
        if rec.op == arch.INCEPTION:
            for branch in rec.branches:
                yield from _iter_param_records(branch)
        elif rec.op in (arch.CONV, arch.DENSE):
            yield rec


def _write_record(out: bytearray, rec: _Record) -> None:
    _check_u8(rec.kernel, "kernel")
    _check_u8(rec.stride, "stride")
    _check_u8(rec.padding, "padding")
    _check_u16(rec.in_ch, "in_ch")
    _check_u16(rec.out_ch, "out_ch")
    out += _REC_HEAD.pack(_OP_CODES[rec.op], rec.kernel, rec.stride,
                          rec.padding, rec.in_ch, rec.out_ch)
    if rec.op == arch.INCEPTION:
        out += _U8.pack(len(rec.branches))
        for branch in rec.branches:
            out += _U8.pack(len(branch))
            for sub in branch:
                _write_record(out, sub)
    out += _REC_TAIL.pack(rec.weight_off, rec.bias_off, rec.act_scale,
                          rec.act_zp, rec.requant_mult, rec.requant_shift)


def _serialize_records(spec: arch.ModelSpec, scheme: int, records: list) -> bytes:
    arch.propagate_shapes(spec)
    _check_u8(spec.num_classes, "class_count")
    _check_u16(spec.input_side, "input_side")
    _check_u16(spec.input_channels, "input_channels")
    _check_u16(len(records), "layer_count")

    offsets, data_len = _plan_data(spec, scheme)
    data = bytearray(data_len)
    for (w_off, b_off), rec in zip(offsets, _iter_param_records(records)):
        rec.weight_off, rec.bias_off = w_off, b_off
        w_raw, b_raw = rec.weight.tobytes(), rec.bias.tobytes()
        data[w_off:w_off + len(w_raw)] = w_raw
        data[b_off:b_off + len(b_raw)] = b_raw

    table = bytearray()
    for rec in records:
        _write_record(table, rec)
    pad = -(_HEADER.size + len(table)) % ALIGNMENT
    payload = bytes(table) + b"\x00" * pad + bytes(data)
    header = _HEADER.pack(MAGIC, VERSION, scheme, spec.num_classes,
                          spec.input_side, spec.input_channels,
                          len(records), 0, len(payload), zlib.crc32(payload))
    return header + payload


def serialize(model) -> bytes:
    """Serialize a QModel (int8), HModel (fp16), or float Model (fp32)."""
    if isinstance(model, quant.QModel):
        return _serialize_records(model.spec, SCHEME_INT8, _records_from_qmodel(model))
    if isinstance(model, quant.HModel):
        records = _records_from_float(model.spec, model.halves, "<f2")
        return _serialize_records(model.spec, SCHEME_FP16, records)
    if isinstance(model, arch.Model):
        records = _records_from_float(model.spec, model.param_tensors(), "<f4")
        return _serialize_records(model.spec, SCHEME_FP32, records)
    raise TypeError(f"cannot serialize {type(model).__name__}")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def unpack(self, st: struct.Struct):
        if self.pos + st.size > len(self.buf):
            raise BoundsError(
                f"record read past payload end (offset {self.pos}, need {st.size})")
        values = st.unpack_from(self.buf, self.pos)
        self.pos += st.size
        return values

    def skip(self, n: int) -> None:
        if self.pos + n > len(self.buf):
            raise BoundsError("padding runs past payload end")
        self.pos += n


def _read_record(rd: _Reader, allow_branches: bool) -> _Record:
    opcode, kernel, stride, padding, in_ch, out_ch = rd.unpack(_REC_HEAD)
    if opcode not in _CODE_OPS:
        raise FormatError(f"unknown opcode {opcode}")
    op = _CODE_OPS[opcode]
    branches = None
    if op == arch.INCEPTION:
        if not allow_branches:
            raise FormatError("nested inception record")
        (n_branches,) = rd.unpack(_U8)
        if not 1 <= n_branches <= 16:
            raise FormatError(f"implausible branch count {n_branches}")
        branches = []
        for _ in range(n_branches):
            (n_sub,) = rd.unpack(_U8)
            if not 1 <= n_sub <= 32:
                raise FormatError(f"implausible sublayer count {n_sub}")
            branches.append([_read_record(rd, False) for _ in range(n_sub)])
    w_off, b_off, act_scale, act_zp, mult, shift = rd.unpack(_REC_TAIL)
    return _Record(op, kernel, stride, padding, in_ch, out_ch, w_off, b_off,
                   act_scale, act_zp, mult, shift, branches)


def _record_to_layerspec(rec: _Record) -> arch.LayerSpec:
    if rec.op in (arch.CONV, arch.MAXPOOL):
        if rec.kernel < 1 or rec.stride < 1:
            raise FormatError(f"{rec.op} kernel/stride must be >= 1")
    if rec.op in (arch.CONV, arch.DENSE):
        if rec.in_ch < 1 or rec.out_ch < 1:
            raise FormatError(f"{rec.op} channel counts must be >= 1")
    if rec.stride < 1:
        raise FormatError("stride must be >= 1")
    branches = ()
    if rec.op == arch.INCEPTION:
        branches = tuple(tuple(_record_to_layerspec(s) for s in branch)
                         for branch in rec.branches)
    return arch.LayerSpec(rec.op, rec.kernel, rec.stride, rec.padding,
                          rec.in_ch, rec.out_ch, branches)


@dataclass
class _Step:
    op: str
    inputs: list
    out: int
    rec: _Record | None


class EngineInstance:
    """A parsed blob: model tables, execution steps, and one owned arena."""

    def __init__(self, scheme, spec, records, blob_bytes):
        self.scheme = scheme
        self.spec = spec
        self.records = records
        self.blob_bytes = blob_bytes
        self.steps, self.shapes, self.tensor_qp = _build_steps(spec, records)
        self.plan = _plan_arena(self.steps, self.shapes,
                                1 if scheme == SCHEME_INT8 else 4)
        self.arena = None
        self.views = None
        self._float_model = None
        if scheme == SCHEME_INT8:
            self._bind_arena()

    def _bind_arena(self):
        self.arena = np.zeros(self.plan.arena_bytes, dtype=np.uint8)
        self.views = []
        for tid, shape in enumerate(self.shapes):
            off, nbytes = self.plan.placements[tid]
            view = self.arena[off:off + nbytes].view(np.int8).reshape(shape)
            self.views.append(view)

    def float_model(self) -> arch.Model:
        """Reconstruct a float model from fp32/fp16 parameter tables."""
        if self.scheme == SCHEME_INT8:
            raise FormatError("int8 blobs do not carry float parameters")
        if self._float_model is None:
            model = arch.Model(self.spec, dtype=np.float32)
            params = model.param_tensors()
            tensors = []
            for rec in _iter_param_records(self.records):
                tensors += [rec.weight, rec.bias]
            for p, t in zip(params, tensors):
                p[:] = t.astype(np.float32)
            self._float_model = model
        return self._float_model

    def infer(self, image: np.ndarray):
        """Classify one 2-D u8 image; returns (class_index, float logits)."""
        image = np.asarray(image)
        if image.ndim != 2:
            raise ValueError(f"expected a 2-D image, got shape {image.shape}")
        x = dataset.preprocess(image, self.spec.input_side)
        if self.scheme != SCHEME_INT8:
            logits = self.float_model().forward(x)
            return int(np.argmax(logits)), logits
        self._run_int8(self._quantize_input(x))
        out = self.views[self.steps[-1].out]
        qp = self.tensor_qp[self.steps[-1].out]
        logits = (out.astype(np.float32) - np.float32(qp[1])) * np.float32(qp[0])
        return int(np.argmax(logits)), logits

    def _quantize_input(self, x: np.ndarray) -> np.ndarray:
        v = x.astype(np.float64) / INPUT_SCALE
        q = np.floor(np.abs(v) + 0.5) * np.sign(v) + INPUT_ZERO_POINT
        return np.clip(q, -128, 127).astype(np.int8)

    @staticmethod
    def _requant(acc64: np.ndarray, mult: int, shift: int, zp: int) -> np.ndarray:
        total = np.int64(31 + shift)
        half = np.int64(1) << (total - 1)
        neg = acc64 < 0
        mag = np.where(neg, -acc64, acc64) * np.int64(mult)
        q = (mag + half) >> total
        q = np.where(neg, -q, q) + zp
        return np.clip(q, -128, 127).astype(np.int8)

    def _run_int8(self, q_input: np.ndarray) -> None:
        self.views[0][...] = q_input
        for step in self.steps:
            getattr(self, "_op_" + step.op)(step)

    def _conv_like_input(self, step):
        x = self.views[step.inputs[0]]
        in_zp = self.tensor_qp[step.inputs[0]][1]
        return x.astype(np.float64) - in_zp

    def _op_conv(self, step):
        rec = step.rec
        xf = self._conv_like_input(step)
        p, s, k = rec.padding, rec.stride, rec.kernel
        if p:
            xf = np.pad(xf, ((p, p), (p, p), (0, 0)))
        oh, ow, oc = self.shapes[step.out]
        acc = np.zeros((oh * ow, oc), dtype=np.float64)
        wf = rec.weight.astype(np.float64)
        for ky in range(k):
            for kx in range(k):
                patch = xf[ky:ky + s * (oh - 1) + 1:s, kx:kx + s * (ow - 1) + 1:s, :]
                acc += patch.reshape(-1, rec.in_ch) @ wf[ky, kx]
        acc += rec.bias.astype(np.float64)
        acc64 = np.clip(acc, _I32_MIN, _I32_MAX).astype(np.int64)
        q = self._requant(acc64, rec.requant_mult, rec.requant_shift, rec.act_zp)
        self.views[step.out][...] = q.reshape(oh, ow, oc)

    def _op_dense(self, step):
        rec = step.rec
        xf = self._conv_like_input(step)
        acc = xf @ rec.weight.astype(np.float64) + rec.bias.astype(np.float64)
        acc64 = np.clip(acc, _I32_MIN, _I32_MAX).astype(np.int64)
        self.views[step.out][...] = self._requant(
            acc64, rec.requant_mult, rec.requant_shift, rec.act_zp)

    def _op_relu(self, step):
        x = self.views[step.inputs[0]]
        zp = np.int8(self.tensor_qp[step.inputs[0]][1])
        self.views[step.out][...] = np.where(x < zp, zp, x)

    def _op_maxpool(self, step):
        rec = step.rec
        x = self.views[step.inputs[0]]
        p, s, k = rec.padding, rec.stride, rec.kernel
        xp = np.pad(x, ((p, p), (p, p), (0, 0)), constant_values=-128) if p else x
        out = self.views[step.out]
        oh, ow, _ = out.shape
        out[...] = -128
        for ky in range(k):
            for kx in range(k):
                patch = xp[ky:ky + s * (oh - 1) + 1:s, kx:kx + s * (ow - 1) + 1:s, :]
                np.maximum(out, patch, out=out)

    def _op_gap(self, step):
        x = self.views[step.inputs[0]]
        h, w, _ = x.shape
        n = h * w
        total = x.astype(np.int64).sum(axis=(0, 1))
        mag = np.abs(total)
        q = (2 * mag + n) // (2 * n) * np.sign(total)
        self.views[step.out][...] = q.astype(np.int8)

    def _op_flatten(self, step):
        self.views[step.out][...] = self.views[step.inputs[0]].reshape(-1)

    def _op_concat(self, step):
        out = self.views[step.out]
        offset = 0
        for tid in step.inputs:
            c = self.shapes[tid][2]
            out[..., offset:offset + c] = self.views[tid]
            offset += c


def _build_steps(spec: arch.ModelSpec, records: list):
    shapes = [(spec.input_side, spec.input_side, spec.input_channels)]
    tensor_qp = [(INPUT_SCALE, INPUT_ZERO_POINT)]
    steps = []

    def emit(rec: _Record, in_tid: int) -> int:
        lspec = _record_to_layerspec(rec)
        try:
            out_shape = arch._propagate_layer(lspec, shapes[in_tid], "engine")
        except arch.SpecError as exc:
            raise FormatError(str(exc)) from None
        shapes.append(out_shape)
        tensor_qp.append((rec.act_scale, rec.act_zp))
        out_tid = len(shapes) - 1
        steps.append(_Step(lspec.op, [in_tid], out_tid, rec))
        return out_tid

    cur = 0
    for rec in records:
        if rec.op == arch.INCEPTION:
            branch_out = []
            for branch in rec.branches:
                tid = cur
                for sub in branch:
                    tid = emit(sub, tid)
                branch_out.append(tid)
            spatial = {shapes[t][:2] for t in branch_out}
            if len(spatial) != 1:
                raise FormatError("inception branch spatial extents differ")
            h, w = shapes[branch_out[0]][:2]
            total_ch = sum(shapes[t][2] for t in branch_out)
            if total_ch != rec.out_ch:
                raise FormatError("inception out_ch does not match branch sum")
            shapes.append((h, w, total_ch))
            tensor_qp.append((rec.act_scale, rec.act_zp))
            out_tid = len(shapes) - 1
            steps.append(_Step("concat", branch_out, out_tid, rec))
            cur = out_tid
        else:
            cur = emit(rec, cur)
    return steps, shapes, tensor_qp


def _plan_arena(steps, shapes, elem_bytes: int) -> ArenaPlan:
    """Greedy first-fit placement over tensor live ranges."""
    n = len(shapes)
    birth = [0] * n
    death = [0] * n
    for si, step in enumerate(steps, start=1):
        birth[step.out] = si
        for t in step.inputs:
            death[t] = max(death[t], si)
    death[steps[-1].out] = len(steps) + 1  # output is read after the run

    sizes = [int(np.prod(shape)) * elem_bytes for shape in shapes]
    placements: list = [None] * n
    for t in range(n):
        blocked = sorted(
            (placements[u][0], placements[u][1])
            for u in range(t)
            if birth[u] <= death[t] and birth[t] <= death[u]
        )
        offset = 0
        for u_off, u_len in blocked:
            if offset + sizes[t] <= u_off:
                break
            offset = max(offset, _align(u_off + u_len))
        placements[t] = (offset, sizes[t])
    arena_bytes = max(off + size for off, size in placements)
    return ArenaPlan(arena_bytes, tuple(placements))


def parse(blob: bytes) -> EngineInstance:
    """Validate and load a blob; safe on arbitrary bytes."""
    blob = bytes(blob)
    if len(blob) < _HEADER.size:
        raise BoundsError(f"blob shorter than header ({len(blob)} bytes)")
    (magic, version, scheme, class_count, input_side, input_channels,
     layer_count, _reserved, payload_len, crc) = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version}")
    if scheme not in SCHEME_NAMES:
        raise FormatError(f"unknown scheme {scheme}")
    payload = blob[_HEADER.size:]
    if len(payload) != payload_len:
        raise BoundsError(f"payload is {len(payload)} bytes, header says {payload_len}")
    if zlib.crc32(payload) != crc:
        raise ChecksumError("payload crc32 mismatch")

    rd = _Reader(payload)
    records = [_read_record(rd, allow_branches=True) for _ in range(layer_count)]
    rd.skip(-(_HEADER.size + rd.pos) % ALIGNMENT)
    data = payload[rd.pos:]

    layers = tuple(_record_to_layerspec(rec) for rec in records)
    try:
        spec = arch.ModelSpec(input_side, input_channels, layers, class_count)
        arch.propagate_shapes(spec)
    except arch.SpecError as exc:
        raise FormatError(f"inconsistent model shape: {exc}") from None

    w_dtype, b_dtype = _WEIGHT_DTYPE[scheme], _BIAS_DTYPE[scheme]
    w_bytes, b_bytes = _ELEM_BYTES[scheme]
    for rec, lspec in zip(_iter_param_records(records),
                          _iter_param_specs(spec.layers)):
        w_shape, b_shape = _param_shapes(lspec)
        for off, shape, elem in ((rec.weight_off, w_shape, w_bytes),
                                 (rec.bias_off, b_shape, b_bytes)):
            if off % ALIGNMENT:
                raise FormatError(f"tensor offset {off} not {ALIGNMENT}-byte aligned")
            if off + int(np.prod(shape)) * elem > len(data):
                raise BoundsError(f"tensor at {off} runs past data section")
        rec.weight = np.frombuffer(
            data, w_dtype, count=int(np.prod(w_shape)), offset=rec.weight_off
        ).reshape(w_shape).copy()
        rec.bias = np.frombuffer(
            data, b_dtype, count=int(np.prod(b_shape)), offset=rec.bias_off
        ).reshape(b_shape).copy()

    if scheme == SCHEME_INT8:
        _validate_quant_tables(records)
    return EngineInstance(scheme, spec, records, len(blob))


def _validate_quant_tables(records, parent_qp=None):
    for rec in records:
        if not (np.isfinite(rec.act_scale) and rec.act_scale > 0):
            raise FormatError(f"activation scale {rec.act_scale} must be positive")
        if rec.op in (arch.CONV, arch.DENSE):
            if not 2 ** 30 <= rec.requant_mult <= 2 ** 31 - 1:
                raise FormatError(
                    f"requant multiplier {rec.requant_mult} outside [2^30, 2^31)")
            if not 0 <= rec.requant_shift <= 62:
                raise FormatError(f"requant shift {rec.requant_shift} out of range")
        if rec.op == arch.INCEPTION:
            for branch in rec.branches:
                _validate_quant_tables(branch)
                last = branch[-1]
                if (last.act_scale, last.act_zp) != (rec.act_scale, rec.act_zp):
                    raise FormatError(
                        "inception branch output grid differs from concat grid")


def reserialize(instance: EngineInstance) -> bytes:
    """Rebuild the blob from parsed tables; byte-identical to the original."""
    return _serialize_records(instance.spec, instance.scheme, instance.records)


def plan_arena(instance: EngineInstance) -> ArenaPlan:
    return instance.plan


def infer(instance: EngineInstance, image: np.ndarray):
    return instance.infer(image)


def benchmark(instance: EngineInstance, runs: int, warmup: int = 0,
              image: np.ndarray | None = None) -> BenchmarkReport:
    """Time repeated inference on a fixed input (compute only)."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if image is None:
        side = instance.spec.input_side
        image = np.fromfunction(lambda y, x: (x + y) % 251, (side, side)).astype(np.uint8)
    for _ in range(warmup):
        instance.infer(image)
    times = np.empty(runs)
    for i in range(runs):
        start = time.perf_counter()
        instance.infer(image)
        times[i] = (time.perf_counter() - start) * 1000.0
    stats = LatencyStats(
        runs=runs,
        mean_ms=float(times.mean()),
        p50_ms=float(np.percentile(times, 50)),
        p95_ms=float(np.percentile(times, 95)),
        min_ms=float(times.min()),
        max_ms=float(times.max()),
    )
    return BenchmarkReport(stats, instance.blob_bytes, instance.plan.arena_bytes)
