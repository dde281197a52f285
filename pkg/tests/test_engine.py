import numpy as np
import pytest

from pvcrack import arch, dataset, engine, quant


def _qmodel(spec, seed=0, n_calib=6):
    model = arch.build_model(spec, seed=seed)
    rng = np.random.default_rng(seed + 1)
    calib = [rng.random((spec.input_side, spec.input_side, 1)).astype(np.float32)
             for _ in range(n_calib)]
    return model, quant.quantize_int8(model, quant.calibrate(model, calib))


def _small_spec(side=16):
    return arch.ModelSpec(side, 1, tuple(
        arch.make_vgg_block(1, 4)
        + [arch.LayerSpec(arch.GAP),
           arch.LayerSpec(arch.DENSE, in_ch=4, out_ch=2)]), 2)


def test_serialize_deterministic():
    model, qm = _qmodel(_small_spec())
    assert engine.serialize(qm) == engine.serialize(qm)
    assert engine.serialize(model) == engine.serialize(model)


def test_round_trip_int8_tables():
    _, qm = _qmodel(_small_spec())
    blob = engine.serialize(qm)
    inst = engine.parse(blob)
    assert inst.spec == qm.spec
    assert inst.scheme == engine.SCHEME_INT8
    recs = list(engine._iter_param_records(inst.records))
    flat_q = []

    def walk(qlayers):
        for ql in qlayers:
            if ql.branches is not None:
                for b in ql.branches:
                    walk(b)
            elif ql.weight is not None:
                flat_q.append(ql)
    walk(qm.layers)
    assert len(recs) == len(flat_q)
    for rec, ql in zip(recs, flat_q):
        assert np.array_equal(rec.weight, ql.weight)
        assert np.array_equal(rec.bias, ql.bias)
        assert rec.act_scale == np.float32(ql.out_qp.scale)
        assert rec.act_zp == ql.out_qp.zero_point
        assert (rec.requant_mult, rec.requant_shift) == ql.requant


def test_reserialize_byte_identical():
    model, qm = _qmodel(arch.reference_model2_spec(32))
    for blob in (engine.serialize(qm), engine.serialize(model),
                 engine.serialize(quant.quantize_fp16(model))):
        assert engine.reserialize(engine.parse(blob)) == blob


def test_float_round_trip_parameters():
    model, _ = _qmodel(_small_spec())
    inst = engine.parse(engine.serialize(model))
    for a, b in zip(model.param_tensors(), inst.float_model().param_tensors()):
        assert np.array_equal(a, b)


def test_fp16_blob_parses_and_runs():
    model, _ = _qmodel(_small_spec())
    hm = quant.quantize_fp16(model)
    inst = engine.parse(engine.serialize(hm))
    assert inst.scheme == engine.SCHEME_FP16
    img = np.random.default_rng(0).integers(0, 256, (300, 300)).astype(np.uint8)
    cls, logits = inst.infer(img)
    assert logits.shape == (2,) and 0 <= cls < 2


def test_truncated_blob_bounds_error():
    _, qm = _qmodel(_small_spec())
    blob = engine.serialize(qm)
    for cut in (0, 10, 23, 40, len(blob) - 1):
        with pytest.raises(engine.BlobError):
            engine.parse(blob[:cut])


def test_bad_magic_version_checksum():
    _, qm = _qmodel(_small_spec())
    blob = bytearray(engine.serialize(qm))
    tampered = bytearray(blob)
    tampered[:4] = b"XXXX"
    with pytest.raises(engine.BadMagicError):
        engine.parse(bytes(tampered))
    tampered = bytearray(blob)
    tampered[4] = 9
    with pytest.raises(engine.BadVersionError):
        engine.parse(bytes(tampered))
    tampered = bytearray(blob)
    tampered[-1] ^= 0xFF    # payload byte flip
    with pytest.raises(engine.ChecksumError):
        engine.parse(bytes(tampered))


def test_fuzz_parser_never_escapes_bloberror():
    rng = np.random.default_rng(0)
    _, qm = _qmodel(_small_spec())
    valid = engine.serialize(qm)
    for i in range(600):
        if i % 3 == 0:
            blob = rng.integers(0, 256, size=int(rng.integers(0, 200))).astype(np.uint8).tobytes()
        else:
            mutated = bytearray(valid)
            for _ in range(int(rng.integers(1, 8))):
                mutated[int(rng.integers(len(mutated)))] = int(rng.integers(256))
            blob = bytes(mutated)
        try:
            engine.parse(blob)
        except engine.BlobError:
            pass


def test_engine_matches_simulator_bit_exactly():
    for spec in (_small_spec(), arch.reference_model2_spec(32)):
        model, qm = _qmodel(spec, seed=3)
        inst = engine.parse(engine.serialize(qm))
        rng = np.random.default_rng(9)
        for _ in range(10):
            img = rng.integers(0, 256, (300, 300)).astype(np.uint8)
            t = dataset.preprocess(img, spec.input_side)
            sim_logits, _ = quant.simulate_quant_infer(qm, t)
            cls, eng_logits = inst.infer(img)
            assert np.array_equal(sim_logits, eng_logits)
            assert cls == int(np.argmax(sim_logits))


def test_float_engine_matches_model_forward():
    model, _ = _qmodel(_small_spec())
    inst = engine.parse(engine.serialize(model))
    img = np.random.default_rng(1).integers(0, 256, (300, 300)).astype(np.uint8)
    t = dataset.preprocess(img, model.spec.input_side)
    cls, logits = inst.infer(img)
    assert np.allclose(logits, model.forward(t))


def test_infer_rejects_bad_rank():
    _, qm = _qmodel(_small_spec())
    inst = engine.parse(engine.serialize(qm))
    with pytest.raises(ValueError):
        inst.infer(np.zeros((300, 300, 3), np.uint8))


def _toy_plan(sizes, chain=True):
    """Build steps for a straight-line chain with the given tensor sizes."""
    shapes = [(s, 1, 1) for s in sizes]
    steps = [engine._Step("relu", [i], i + 1, None) for i in range(len(sizes) - 1)]
    return engine._plan_arena(steps, shapes, 1)


def test_arena_straight_line_adjacent_pairs():
    # 3-layer chain with non-increasing sizes: arena is the max aligned
    # adjacent (input, output) pair.
    sizes = [64, 48, 32, 16]
    plan = _toy_plan(sizes)
    expect = max(engine._align(a) + b for a, b in zip(sizes, sizes[1:]))
    assert plan.arena_bytes == expect


def test_arena_single_layer_identity():
    plan = _toy_plan([32, 32])
    assert plan.arena_bytes == engine._align(32) + 32


def test_arena_no_live_overlap_and_inception_liveness():
    for spec in (arch.reference_model1_spec(48), arch.reference_model2_spec(48)):
        _, qm = _qmodel(spec, seed=2)
        inst = engine.parse(engine.serialize(qm))
        steps, shapes = inst.steps, inst.shapes
        birth = [0] * len(shapes)
        death = [0] * len(shapes)
        for si, step in enumerate(steps, start=1):
            birth[step.out] = si
            for t in step.inputs:
                death[t] = max(death[t], si)
        death[steps[-1].out] = len(steps) + 1
        placements = inst.plan.placements
        for a in range(len(shapes)):
            for b in range(a + 1, len(shapes)):
                if birth[a] <= death[b] and birth[b] <= death[a]:
                    a0, alen = placements[a]
                    b0, blen = placements[b]
                    assert a0 + alen <= b0 or b0 + blen <= a0, (a, b)
        concat_steps = [s for s in steps if s.op == "concat"]
        if concat_steps:
            step = concat_steps[0]
            ci = steps.index(step) + 1
            for t in step.inputs:
                assert death[t] >= ci     # all branch outputs live until concat


def test_arena_canary_replay():
    for spec in (arch.reference_model1_spec(48), arch.reference_model2_spec(48)):
        _, qm = _qmodel(spec, seed=4)
        inst = engine.parse(engine.serialize(qm))
        gap_mask = np.ones(inst.plan.arena_bytes, dtype=bool)
        for off, nbytes in inst.plan.placements:
            gap_mask[off:off + nbytes] = False
        inst.arena[gap_mask] = 0xAA
        img = np.random.default_rng(0).integers(0, 256, (300, 300)).astype(np.uint8)
        inst.infer(img)
        assert np.all(inst.arena[gap_mask] == 0xAA)


def test_benchmark_single_run_and_ordering():
    _, qm = _qmodel(_small_spec())
    inst = engine.parse(engine.serialize(qm))
    report = engine.benchmark(inst, runs=1, warmup=0)
    s = report.stats
    assert s.mean_ms == s.p50_ms == s.min_ms == s.max_ms
    report = engine.benchmark(inst, runs=7, warmup=1)
    s = report.stats
    assert s.min_ms <= s.p50_ms <= s.p95_ms <= s.max_ms
    assert report.blob_bytes == inst.blob_bytes
    assert report.arena_bytes == inst.plan.arena_bytes
    with pytest.raises(ValueError):
        engine.benchmark(inst, runs=0)


def test_identical_inference_calls_identical_output():
    _, qm = _qmodel(_small_spec())
    inst = engine.parse(engine.serialize(qm))
    img = np.full((300, 300), 77, np.uint8)
    a = inst.infer(img)
    b = inst.infer(img)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_dense_input_too_large_for_format():
    # A flatten head over a big plane would need in_ch > 65535.
    layers = tuple(
        [arch.LayerSpec(arch.CONV, kernel=3, stride=1, padding=1, in_ch=1, out_ch=8),
         arch.LayerSpec(arch.RELU),
         arch.LayerSpec(arch.FLATTEN),
         arch.LayerSpec(arch.DENSE, in_ch=96 * 96 * 8, out_ch=2)])
    spec = arch.ModelSpec(96, 1, layers, 2)
    model = arch.build_model(spec, seed=0)
    with pytest.raises(arch.SpecError, match="u16"):
        engine.serialize(model)
