"""Model specs built from VGG-style and Inception-style blocks.

A ModelSpec is an ordered list of LayerSpec entries that must shape-check
end to end. build_model() turns a spec into runtime layers with
He-uniform initialized parameters; estimate_size() prices a spec in the
serialized blob format; random_search() samples the block space under an
int8 size budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn


class SpecError(Exception):
    """A ModelSpec fails shape propagation or cannot be realized."""


CONV, RELU, MAXPOOL, GAP, DENSE, FLATTEN, INCEPTION = (
    "conv", "relu", "maxpool", "gap", "dense", "flatten", "inception",
)


@dataclass(frozen=True)
class LayerSpec:
    op: str
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    in_ch: int = 0
    out_ch: int = 0
    branches: tuple = ()    # for INCEPTION: tuple of tuples of LayerSpec


@dataclass(frozen=True)
class ModelSpec:
    input_side: int
    input_channels: int
    layers: tuple
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise SpecError("num_classes must be >= 2")


@dataclass(frozen=True)
class SizeEstimate:
    param_count: int
    bytes_fp32: int
    bytes_fp16: int
    bytes_int8: int


def make_vgg_block(in_ch: int, out_ch: int) -> list:
    """Two padded 3x3 convolutions with ReLU, then a 2x2/2 max pool."""
    if in_ch < 1 or out_ch < 1:
        raise SpecError("channel counts must be >= 1")
    return [
        LayerSpec(CONV, kernel=3, stride=1, padding=1, in_ch=in_ch, out_ch=out_ch),
        LayerSpec(RELU),
        LayerSpec(CONV, kernel=3, stride=1, padding=1, in_ch=out_ch, out_ch=out_ch),
        LayerSpec(RELU),
        LayerSpec(MAXPOOL, kernel=2, stride=2),
    ]


def make_inception_block(in_ch, b1, b3_reduce, b3, b5_reduce, b5, pool_proj) -> LayerSpec:
    """Four parallel branches concatenated along channels, extent preserved.

    1x1, 1x1->3x3, 1x1->5x5, and 3x3 maxpool->1x1 projections; every
    convolution is followed by ReLU.
    """
    widths = (b1, b3_reduce, b3, b5_reduce, b5, pool_proj)
    if in_ch < 1 or any(wd < 1 for wd in widths):
        raise SpecError("all inception widths must be >= 1")
    conv = lambda k, p, ci, co: LayerSpec(CONV, kernel=k, stride=1, padding=p, in_ch=ci, out_ch=co)
    branches = (
        (conv(1, 0, in_ch, b1), LayerSpec(RELU)),
        (conv(1, 0, in_ch, b3_reduce), LayerSpec(RELU),
         conv(3, 1, b3_reduce, b3), LayerSpec(RELU)),
        (conv(1, 0, in_ch, b5_reduce), LayerSpec(RELU),
         conv(5, 2, b5_reduce, b5), LayerSpec(RELU)),
        (LayerSpec(MAXPOOL, kernel=3, stride=1, padding=1),
         conv(1, 0, in_ch, pool_proj), LayerSpec(RELU)),
    )
    return LayerSpec(INCEPTION, in_ch=in_ch, out_ch=b1 + b3 + b5 + pool_proj,
                     branches=branches)


def reference_model1_spec(input_side: int = 96, num_classes: int = 2) -> ModelSpec:
    """Three VGG blocks (1->8->16->32), global average pool, 32-wide head."""
    layers = (
        make_vgg_block(1, 8) + make_vgg_block(8, 16) + make_vgg_block(16, 32)
        + [LayerSpec(GAP),
           LayerSpec(DENSE, in_ch=32, out_ch=32), LayerSpec(RELU),
           LayerSpec(DENSE, in_ch=32, out_ch=num_classes)]
    )
    return ModelSpec(input_side, 1, tuple(layers), num_classes)


def reference_model2_spec(input_side: int = 96, num_classes: int = 2) -> ModelSpec:
    """VGG block, inception block, VGG block, same head as model 1."""
    layers = (
        make_vgg_block(1, 8)
        + [make_inception_block(8, 4, 4, 8, 2, 4, 4)]
        + make_vgg_block(20, 32)
        + [LayerSpec(GAP),
           LayerSpec(DENSE, in_ch=32, out_ch=32), LayerSpec(RELU),
           LayerSpec(DENSE, in_ch=32, out_ch=num_classes)]
    )
    return ModelSpec(input_side, 1, tuple(layers), num_classes)


def _conv_extent(side, kernel, stride, padding):
    out = (side + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise SpecError(f"non-positive extent from side {side}, kernel {kernel}, "
                        f"stride {stride}, padding {padding}")
    return out


def _propagate_layer(spec: LayerSpec, shape, where: str):
    """Advance a (h, w, c) or (n,) shape through one layer."""
    if spec.op in (CONV, MAXPOOL, GAP, INCEPTION) and len(shape) != 3:
        raise SpecError(f"{where}: {spec.op} needs a spatial input, got {shape}")
    if spec.op == CONV:
        h, w, c = shape
        if c != spec.in_ch:
            raise SpecError(f"{where}: conv expects {spec.in_ch} channels, has {c}")
        return (_conv_extent(h, spec.kernel, spec.stride, spec.padding),
                _conv_extent(w, spec.kernel, spec.stride, spec.padding),
                spec.out_ch)
    if spec.op == MAXPOOL:
        h, w, c = shape
        if spec.kernel > h + 2 * spec.padding or spec.kernel > w + 2 * spec.padding:
            raise SpecError(f"{where}: pool window {spec.kernel} exceeds input {h}x{w}")
        return (_conv_extent(h, spec.kernel, spec.stride, spec.padding),
                _conv_extent(w, spec.kernel, spec.stride, spec.padding), c)
    if spec.op == RELU:
        return shape
    if spec.op == GAP:
        return (shape[2],)
    if spec.op == FLATTEN:
        if len(shape) == 1:
            return shape
        return (shape[0] * shape[1] * shape[2],)
    if spec.op == DENSE:
        if len(shape) != 1:
            raise SpecError(f"{where}: dense needs a flat input, got {shape}")
        if shape[0] != spec.in_ch:
            raise SpecError(f"{where}: dense expects length {spec.in_ch}, has {shape[0]}")
        return (spec.out_ch,)
    if spec.op == INCEPTION:
        ends = []
        for bi, branch in enumerate(spec.branches):
            bshape = shape
            for sj, sub in enumerate(branch):
                bshape = _propagate_layer(sub, bshape, f"{where}/branch{bi}[{sj}]")
            ends.append(bshape)
        spatial = {e[:2] for e in ends}
        if len(spatial) != 1:
            raise SpecError(f"{where}: branch spatial extents differ: {sorted(spatial)}")
        total = sum(e[2] for e in ends)
        if total != spec.out_ch:
            raise SpecError(f"{where}: branch channels sum to {total}, spec says {spec.out_ch}")
        return (ends[0][0], ends[0][1], total)
    raise SpecError(f"{where}: unknown op {spec.op!r}")


def propagate_shapes(spec: ModelSpec) -> list:
    """Return the shape after every layer; raise SpecError on mismatch."""
    shape = (spec.input_side, spec.input_side, spec.input_channels)
    shapes = []
    for i, layer in enumerate(spec.layers):
        shape = _propagate_layer(layer, shape, f"layer {i} ({layer.op})")
        shapes.append(shape)
    if shape != (spec.num_classes,):
        raise SpecError(f"model emits {shape}, expected ({spec.num_classes},) logits")
    return shapes


def param_count(spec: ModelSpec) -> int:
    def count(layer: LayerSpec) -> int:
        if layer.op == CONV:
            return layer.kernel * layer.kernel * layer.in_ch * layer.out_ch + layer.out_ch
        if layer.op == DENSE:
            return layer.in_ch * layer.out_ch + layer.out_ch
        if layer.op == INCEPTION:
            return sum(count(sub) for branch in layer.branches for sub in branch)
        return 0
    return sum(count(layer) for layer in spec.layers)


def _runtime_layer(layer: LayerSpec, dtype):
    if layer.op == CONV:
        return nn.Conv2D(layer.kernel, layer.kernel, layer.in_ch, layer.out_ch,
                         layer.stride, layer.padding, dtype=dtype)
    if layer.op == RELU:
        return nn.ReLU()
    if layer.op == MAXPOOL:
        return nn.MaxPool2D(layer.kernel, layer.stride, layer.padding)
    if layer.op == GAP:
        return nn.GlobalAvgPool()
    if layer.op == FLATTEN:
        return nn.Flatten()
    if layer.op == DENSE:
        return nn.Dense(layer.in_ch, layer.out_ch, dtype=dtype)
    if layer.op == INCEPTION:
        return _InceptionRuntime(layer, dtype)
    raise SpecError(f"unknown op {layer.op!r}")


class _InceptionRuntime:
    """Runtime container for parallel branches joined by a channel concat."""

    def __init__(self, spec: LayerSpec, dtype):
        self.spec = spec
        self.branches = [[_runtime_layer(s, dtype) for s in branch]
                         for branch in spec.branches]
        self.concat = nn.ConcatChannels()

    @property
    def params(self):
        return [p for br in self.branches for l in br for p in l.params]

    @property
    def grads(self):
        return [g for br in self.branches for l in br for g in l.grads]

    def forward(self, x, sink=None):
        outs = []
        for branch in self.branches:
            h = x
            for l in branch:
                h = l.forward(h)
                if sink is not None:
                    sink.append(h)
            outs.append(h)
        y = self.concat.forward(outs)
        if sink is not None:
            sink.append(y)
        return y

    def backward(self, dy):
        douts = self.concat.backward(dy)
        dx = None
        for branch, d in zip(self.branches, douts):
            for l in reversed(branch):
                d = l.backward(d)
            dx = d if dx is None else dx + d
        return dx


class Model:
    """A spec realized as runtime layers with float parameters."""

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        propagate_shapes(spec)
        self.spec = spec
        self.dtype = dtype
        self.layers = [_runtime_layer(l, dtype) for l in spec.layers]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def forward_collect(self, x):
        """Forward pass returning every intermediate activation.

        Site order: the input, then each layer's output; inception layers
        contribute each branch sublayer output followed by the concat.
        """
        sites = [x]
        for layer in self.layers:
            if isinstance(layer, _InceptionRuntime):
                x = layer.forward(x, sink=sites)
            else:
                x = layer.forward(x)
                sites.append(x)
        return x, sites

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def param_tensors(self) -> list:
        return [p for layer in self.layers for p in layer.params]

    def grad_tensors(self) -> list:
        return [g for layer in self.layers for g in layer.grads]

    def parameterized_indices(self) -> list:
        """Indices of top-level layers that own parameters, in order."""
        return [i for i, l in enumerate(self.layers) if l.params]

    def clone(self) -> "Model":
        other = Model(self.spec, self.dtype)
        for mine, theirs in zip(self.param_tensors(), other.param_tensors()):
            theirs[:] = mine
        return other


def build_model(spec: ModelSpec, seed: int, dtype=np.float32) -> Model:
    """He-uniform weights (bound sqrt(6/fan_in)), zero biases, per-seed."""
    model = Model(spec, dtype)
    rng = np.random.default_rng(seed)
    for layer in model.layers:
        _init_layer(layer, rng, dtype)
    return model


def _init_layer(layer, rng, dtype):
    if isinstance(layer, _InceptionRuntime):
        for branch in layer.branches:
            for sub in branch:
                _init_layer(sub, rng, dtype)
        return
    if isinstance(layer, nn.Conv2D):
        fan_in = layer.kh * layer.kw * layer.in_ch
    elif isinstance(layer, nn.Dense):
        fan_in = layer.in_dim
    else:
        return
    bound = np.sqrt(6.0 / fan_in)
    layer.w[:] = rng.uniform(-bound, bound, size=layer.w.shape).astype(dtype)
    layer.b[:] = 0


def estimate_size(spec: ModelSpec) -> SizeEstimate:
    """Exact serialized blob sizes for the fp32/fp16/int8 schemes."""
    from . import engine

    propagate_shapes(spec)
    return SizeEstimate(
        param_count=param_count(spec),
        bytes_fp32=engine.blob_size(spec, engine.SCHEME_FP32),
        bytes_fp16=engine.blob_size(spec, engine.SCHEME_FP16),
        bytes_int8=engine.blob_size(spec, engine.SCHEME_INT8),
    )


@dataclass(frozen=True)
class SearchSpace:
    block_count_range: tuple = (2, 3)
    channel_choices: tuple = (8, 16, 32)
    block_kinds: tuple = ("vgg", "inception")
    head_choices: tuple = ("gap", "flatten")
    dense_width_choices: tuple = (16, 32)
    input_side_choices: tuple = (64, 96)

    def __post_init__(self):
        for name in ("channel_choices", "block_kinds", "head_choices",
                     "dense_width_choices", "input_side_choices"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be nonempty")
        lo, hi = self.block_count_range
        if lo < 1 or hi < lo:
            raise ValueError("block_count_range must be a nonempty 1-based range")


@dataclass(frozen=True)
class SearchEntry:
    spec: ModelSpec
    accuracy: float
    size: SizeEstimate
    trial: int


@dataclass(frozen=True)
class SearchResult:
    entries: tuple
    status: str     # "ok" | "no feasible architecture"
    trials: int


def sample_spec(space: SearchSpace, rng: np.random.Generator, num_classes: int = 2) -> ModelSpec:
    """Draw one spec uniformly from the search space."""
    lo, hi = space.block_count_range
    n_blocks = int(rng.integers(lo, hi + 1))
    side = int(rng.choice(space.input_side_choices))
    layers = []
    in_ch = 1
    for _ in range(n_blocks):
        kind = str(rng.choice(space.block_kinds))
        out_ch = int(rng.choice(space.channel_choices))
        if kind == "vgg" or in_ch < 4 or out_ch < 8:
            layers += make_vgg_block(in_ch, out_ch)
        else:
            b3 = out_ch // 2
            b1 = out_ch // 4
            b5 = max(1, out_ch // 8)
            pool = out_ch - b1 - b3 - b5
            layers.append(make_inception_block(
                in_ch, b1, max(1, b1 // 2), b3, max(1, b5 // 2), b5, pool))
            layers.append(LayerSpec(MAXPOOL, kernel=2, stride=2))
        in_ch = out_ch
    head = str(rng.choice(space.head_choices))
    width = int(rng.choice(space.dense_width_choices))
    shape = (side, side, 1)
    for l in layers:
        shape = _propagate_layer(l, shape, "sample")
    if head == "gap":
        layers.append(LayerSpec(GAP))
        flat = shape[2]
    else:
        layers.append(LayerSpec(FLATTEN))
        flat = shape[0] * shape[1] * shape[2]
    layers += [LayerSpec(DENSE, in_ch=flat, out_ch=width), LayerSpec(RELU),
               LayerSpec(DENSE, in_ch=width, out_ch=num_classes)]
    return ModelSpec(side, 1, tuple(layers), num_classes)


def random_search(space: SearchSpace, budget_bytes_int8: int, trials: int,
                  train_budget, ds, seed: int) -> SearchResult:
    """Uniform random spec sampling gated by the int8 size budget.

    Survivors train briefly on a fixed stratified split and rank by
    validation accuracy, then ascending int8 size, then trial index.
    """
    from . import dataset as data
    from . import trainer

    if trials < 1:
        raise ValueError("trials must be >= 1")
    seeds = np.random.SeedSequence(seed).spawn(trials + 1)
    plan = data.make_folds(ds, k=5, seed=int(seeds[0].generate_state(1)[0]))

    entries = []
    for trial in range(trials):
        rng = np.random.default_rng(seeds[trial + 1])
        spec = sample_spec(space, rng, num_classes=ds.num_classes)
        try:
            size = estimate_size(spec)
        except SpecError:
            continue
        if size.bytes_int8 > budget_bytes_int8:
            continue
        model = build_model(spec, seed=int(rng.integers(2 ** 63)))
        cfg = replace(train_budget, seed=int(rng.integers(2 ** 63)))
        trained, _ = trainer.train(model, ds, plan, val_fold=0, cfg=cfg)
        report = trainer.evaluate_model(trained, ds, plan, fold=0)
        entries.append(SearchEntry(spec, report.accuracy, size, trial))

    entries.sort(key=lambda e: (-e.accuracy, e.size.bytes_int8, e.trial))
    status = "ok" if entries else "no feasible architecture"
    return SearchResult(tuple(entries), status, trials)


def spec_to_text(spec: ModelSpec) -> str:
    """Line-oriented spec file: one ``layer_kind key=value ...`` per line."""
    lines = [f"input side={spec.input_side} channels={spec.input_channels} "
             f"classes={spec.num_classes}"]
    for layer in spec.layers:
        lines.append(_layer_line(layer))
    return "\n".join(lines) + "\n"


def _layer_line(layer: LayerSpec) -> str:
    if layer.op == CONV:
        return (f"conv k={layer.kernel} s={layer.stride} p={layer.padding} "
                f"in={layer.in_ch} out={layer.out_ch}")
    if layer.op == MAXPOOL:
        return f"maxpool k={layer.kernel} s={layer.stride} p={layer.padding}"
    if layer.op == DENSE:
        return f"dense in={layer.in_ch} out={layer.out_ch}"
    if layer.op == INCEPTION:
        b1 = layer.branches[0][0].out_ch
        b3r, b3 = layer.branches[1][0].out_ch, layer.branches[1][2].out_ch
        b5r, b5 = layer.branches[2][0].out_ch, layer.branches[2][2].out_ch
        pool = layer.branches[3][1].out_ch
        return (f"inception in={layer.in_ch} b1={b1} b3r={b3r} b3={b3} "
                f"b5r={b5r} b5={b5} pool={pool}")
    return layer.op


def spec_from_text(text: str) -> ModelSpec:
    header = None
    layers = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        kind, *rest = line.split()
        kv = {}
        for token in rest:
            key, _, value = token.partition("=")
            kv[key] = int(value)
        if kind == "input":
            header = kv
        elif kind == "conv":
            layers.append(LayerSpec(CONV, kernel=kv["k"], stride=kv["s"],
                                    padding=kv["p"], in_ch=kv["in"], out_ch=kv["out"]))
        elif kind == "relu":
            layers.append(LayerSpec(RELU))
        elif kind == "maxpool":
            layers.append(LayerSpec(MAXPOOL, kernel=kv["k"], stride=kv["s"],
                                    padding=kv.get("p", 0)))
        elif kind == "gap":
            layers.append(LayerSpec(GAP))
        elif kind == "flatten":
            layers.append(LayerSpec(FLATTEN))
        elif kind == "dense":
            layers.append(LayerSpec(DENSE, in_ch=kv["in"], out_ch=kv["out"]))
        elif kind == "inception":
            layers.append(make_inception_block(
                kv["in"], kv["b1"], kv["b3r"], kv["b3"], kv["b5r"], kv["b5"], kv["pool"]))
        else:
            raise SpecError(f"unknown spec line kind {kind!r}")
    if header is None:
        raise SpecError("spec file has no input line")
    spec = ModelSpec(header["side"], header["channels"], tuple(layers), header["classes"])
    propagate_shapes(spec)
    return spec
