import numpy as np
import pytest

from pvcrack import arch, engine


def _mini_spec(layers, side=8, classes=2):
    return arch.ModelSpec(side, 1, tuple(layers), classes)


def test_vgg_block_structure_and_params():
    block = arch.make_vgg_block(1, 8)
    ops = [l.op for l in block]
    assert ops == [arch.CONV, arch.RELU, arch.CONV, arch.RELU, arch.MAXPOOL]
    spec = _mini_spec(block + [arch.LayerSpec(arch.GAP),
                               arch.LayerSpec(arch.DENSE, in_ch=8, out_ch=2)], side=8)
    assert arch.param_count(spec) == 664 + 8 * 2 + 2


def test_vgg_block_halves_extent():
    spec = arch.reference_model1_spec(96)
    shapes = arch.propagate_shapes(spec)
    assert shapes[4] == (48, 48, 8)      # after first block's pool
    assert shapes[9] == (24, 24, 16)
    assert shapes[14] == (12, 12, 32)


def test_inception_output_channels_and_extent():
    block = arch.make_inception_block(8, 4, 4, 8, 2, 4, 4)
    assert block.out_ch == 20
    shape = arch._propagate_layer(block, (48, 48, 8), "test")
    assert shape == (48, 48, 20)


def test_inception_channel_sum_property():
    rng = np.random.default_rng(0)
    for _ in range(10):
        widths = rng.integers(1, 9, size=6)
        block = arch.make_inception_block(4, *map(int, widths))
        assert block.out_ch == int(widths[0] + widths[2] + widths[4] + widths[5])


def test_inception_branch_extent_mismatch_rejected():
    bad = arch.LayerSpec(
        arch.INCEPTION, in_ch=4, out_ch=2,
        branches=(
            (arch.LayerSpec(arch.CONV, kernel=1, in_ch=4, out_ch=1),),
            (arch.LayerSpec(arch.CONV, kernel=3, in_ch=4, out_ch=1),),  # no padding
        ))
    with pytest.raises(arch.SpecError, match="spatial"):
        arch._propagate_layer(bad, (8, 8, 4), "test")


def test_reference_model1_counts():
    spec = arch.reference_model1_spec()
    assert arch.param_count(spec) == 19162
    est = arch.estimate_size(spec)
    assert est.bytes_int8 < 100 * 1024


def test_build_model_deterministic():
    spec = arch.reference_model2_spec()
    a = arch.build_model(spec, seed=42)
    b = arch.build_model(spec, seed=42)
    for pa, pb in zip(a.param_tensors(), b.param_tensors()):
        assert pa.tobytes() == pb.tobytes()
    c = arch.build_model(spec, seed=43)
    assert any(pa.tobytes() != pc.tobytes()
               for pa, pc in zip(a.param_tensors(), c.param_tensors()))


def test_he_uniform_bounds():
    spec = arch.reference_model1_spec()
    model = arch.build_model(spec, seed=0)
    conv = model.layers[0]
    bound = np.sqrt(6.0 / (3 * 3 * 1))
    assert np.all(np.abs(conv.w) <= bound)
    assert np.all(conv.b == 0)


def test_dense_length_mismatch_is_spec_error():
    layers = [arch.LayerSpec(arch.GAP),
              arch.LayerSpec(arch.DENSE, in_ch=7, out_ch=2)]
    with pytest.raises(arch.SpecError, match="dense"):
        arch.build_model(_mini_spec(layers, side=8), seed=0)


def test_logits_length_checked():
    layers = [arch.LayerSpec(arch.GAP), arch.LayerSpec(arch.DENSE, in_ch=1, out_ch=3)]
    with pytest.raises(arch.SpecError, match="logits"):
        arch.propagate_shapes(_mini_spec(layers, side=8, classes=2))


def test_estimate_matches_serialized_length():
    rng = np.random.default_rng(7)
    space = arch.SearchSpace()
    for _ in range(20):
        spec = arch.sample_spec(space, rng)
        est = arch.estimate_size(spec)
        model = arch.build_model(spec, seed=int(rng.integers(2 ** 31)))
        assert len(engine.serialize(model)) == est.bytes_fp32
        assert est.bytes_int8 < est.bytes_fp16 < est.bytes_fp32
        assert est.param_count == arch.param_count(spec)


def test_size_estimate_dense_example():
    # Conv-free model whose head is a single Dense 10 -> 2 (22 parameters).
    spec = arch.ModelSpec(8, 1, (
        arch.LayerSpec(arch.GAP),
        arch.LayerSpec(arch.DENSE, in_ch=1, out_ch=10),
        arch.LayerSpec(arch.DENSE, in_ch=10, out_ch=2)), 2)
    est = arch.estimate_size(spec)
    assert est.param_count == (1 * 10 + 10) + (10 * 2 + 2)
    head_only = 10 * 2 + 2
    assert head_only == 22


def test_spec_text_round_trip():
    for spec in (arch.reference_model1_spec(), arch.reference_model2_spec(64)):
        text = arch.spec_to_text(spec)
        back = arch.spec_from_text(text)
        assert back == spec


def test_sample_spec_always_valid():
    rng = np.random.default_rng(11)
    space = arch.SearchSpace()
    for _ in range(50):
        spec = arch.sample_spec(space, rng)
        arch.propagate_shapes(spec)


def test_search_space_validation():
    with pytest.raises(ValueError):
        arch.SearchSpace(channel_choices=())
    with pytest.raises(ValueError):
        arch.SearchSpace(block_count_range=(3, 2))
