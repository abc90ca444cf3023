import math
from dataclasses import replace

import numpy as np
import pytest

from meshseg.meshnet import (
    DEFAULT_PARAMETER_COUNT,
    LayerSpec,
    ModelSpec,
    SpecError,
    WeightFileError,
    build_meshnet,
    count_model_arrays,
    count_parameters,
    fold_batchnorm,
    load_model,
    receptive_field,
    save_model,
)
from meshseg.rng import make_rng


def closed_form_count(M, channels=71, classes=50, hidden=7, k=3):
    first = M * channels * k ** 3 + channels
    middle = (hidden - 1) * (channels * channels * k ** 3 + channels)
    last = channels * classes + classes
    bn = hidden * channels * 2
    return first + middle + last + bn


def test_default_spec_shape():
    spec = ModelSpec.default(modalities=2)
    assert [l.dilation for l in spec.layers] == [1, 1, 1, 2, 4, 8, 1, 1]
    assert [l.padding for l in spec.layers] == [1, 1, 1, 2, 4, 8, 1, 0]
    assert [l.kernel for l in spec.layers] == [3] * 7 + [1]
    last = spec.layers[-1]
    assert not (last.bn or last.relu or last.dropout)


def test_dropout_only_in_seventh_layer():
    spec = ModelSpec.default(dropout=0.125)
    assert [l.dropout for l in spec.layers] == [None] * 6 + [0.125, None]


def test_parameter_counts():
    assert count_parameters(ModelSpec.default(modalities=2)) == DEFAULT_PARAMETER_COUNT == 825567
    assert closed_form_count(2) == 825567
    assert count_parameters(ModelSpec.default(modalities=1)) == closed_form_count(1) == 823650
    one = ModelSpec(1, 1, 1, (LayerSpec(3, 1, 1, bn=False, relu=False),), subvolume_side=5)
    assert count_parameters(one) == 28


def test_count_matches_materialized_arrays():
    for spec in (ModelSpec.default(modalities=2), ModelSpec.default(modalities=1, channels=5, classes=4)):
        model = build_meshnet(spec, "identity")
        assert count_model_arrays(model) == count_parameters(model)


def test_receptive_field():
    assert receptive_field(ModelSpec.default()) == 37
    one = ModelSpec(1, 1, 1, (LayerSpec(3, 1, 1, bn=False, relu=False),))
    assert receptive_field(one) == 3


def test_literal_table_variant_shrinks_output():
    spec = ModelSpec.default(literal_table=True)
    assert spec.layers[-1].kernel == 3
    assert spec.output_side(38) == 36
    assert receptive_field(spec) == 39


def test_invalid_spec_rejected():
    bad = replace(ModelSpec.default(), layers=(LayerSpec(3, 2, 1),) + ModelSpec.default().layers[1:])
    with pytest.raises(SpecError, match="padding"):
        build_meshnet(bad, "identity")


def toy_spec(**kw):
    return ModelSpec.default(modalities=1, channels=4, classes=3, subvolume_side=16, **kw)


def test_toy_forward_shape(rng):
    model = build_meshnet(toy_spec(), "xavier", make_rng(0))
    out = model.forward(rng.random((1, 1, 16, 16, 16)))
    assert out.shape == (1, 3, 16, 16, 16)


@pytest.mark.slow
def test_default_forward_shape(rng):
    model = build_meshnet(ModelSpec.default(modalities=2), "xavier", make_rng(0))
    out = model.forward(rng.random((1, 2, 38, 38, 38)).astype(np.float32))
    assert out.shape == (1, 50, 38, 38, 38)


def test_identity_model_logsoftmax_uniform(rng):
    spec = toy_spec()
    spec = replace(spec, layers=tuple(replace(l, bn=False) for l in spec.layers))
    model = build_meshnet(spec, "identity")
    lp = model.logprobs(rng.random((1, 1, 16, 16, 16))).data
    assert np.allclose(lp, -math.log(3), atol=1e-6)


def test_receptive_field_perturbation_footprint(rng):
    spec = ModelSpec.default(modalities=1, channels=3, classes=2, subvolume_side=45)
    model = build_meshnet(spec, "xavier", make_rng(1), dtype=np.float64)
    for layer in model.layers:
        layer.conv.bias.data[:] = 0.5  # keep ReLUs open
    x = rng.random((1, 1, 45, 45, 45))
    base = model.forward(x).data
    x2 = x.copy()
    x2[0, 0, 22, 22, 22] += 1.0
    changed = np.any(model.forward(x2).data != base, axis=(0, 1))
    idx = np.argwhere(changed)
    extent = idx.max(axis=0) - idx.min(axis=0) + 1
    assert tuple(extent) == (37, 37, 37)
    assert tuple(idx.min(axis=0)) == (22 - 18,) * 3


def test_save_load_roundtrip(tmp_path, rng):
    spec = toy_spec(dropout=0.25)
    model = build_meshnet(spec, "xavier", make_rng(0))
    for layer in model.layers:
        if layer.bn:
            layer.bn.running_mean[:] = rng.standard_normal(4)
            layer.bn.running_var[:] = rng.random(4) + 0.1
            layer.bn.gamma.data[:] = rng.random(4)
    path = tmp_path / "m.msw"
    save_model(model, path)
    back = load_model(path)
    assert back.spec == model.spec
    assert count_parameters(back) == count_parameters(model)
    for (n1, a), (n2, b) in zip(model.state_arrays(), back.state_arrays()):
        assert n1 == n2 and a.tobytes() == b.tobytes()
    x = rng.random((1, 1, 16, 16, 16)).astype(np.float32)
    assert model.forward(x).data.tobytes() == back.forward(x).data.tobytes()


def test_weight_file_header(tmp_path):
    path = tmp_path / "m.msw"
    save_model(build_meshnet(toy_spec(), "identity"), path)
    head = path.read_bytes().split(b"end_header\n")[0].decode()
    assert head.startswith("MESHSEG-WEIGHTS\nformat_version: 1\nbyte_order: little\ndtype: float32\n")
    assert "section: layer1.weight 0 432 " in head


def test_corrupted_checksum_names_section(tmp_path):
    path = tmp_path / "m.msw"
    save_model(build_meshnet(toy_spec(), "xavier", make_rng(0)), path)
    buf = bytearray(path.read_bytes())
    start = buf.index(b"end_header\n") + len(b"end_header\n")
    buf[start + 432 + 3] ^= 0xFF  # first byte(s) of layer1.bias
    path.write_bytes(bytes(buf))
    with pytest.raises(WeightFileError, match="layer1.bias"):
        load_model(path)


def test_version_and_truncation_errors(tmp_path):
    path = tmp_path / "m.msw"
    save_model(build_meshnet(toy_spec(), "identity"), path)
    buf = path.read_bytes()
    path.write_bytes(buf.replace(b"format_version: 1", b"format_version: 9", 1))
    with pytest.raises(WeightFileError, match="version"):
        load_model(path)
    path.write_bytes(buf[:-7])
    with pytest.raises(WeightFileError, match="truncated"):
        load_model(path)


def _random_bn_model(rng, dtype=np.float32, seed=0):
    model = build_meshnet(toy_spec(), "xavier", make_rng(seed), dtype=dtype)
    for layer in model.layers:
        layer.conv.bias.data[:] = rng.standard_normal(layer.conv.out_channels) * 0.1
        if layer.bn:
            c = layer.bn.channels
            layer.bn.gamma.data[:] = rng.random(c) + 0.5
            layer.bn.beta.data[:] = rng.standard_normal(c) * 0.2
            layer.bn.running_mean[:] = rng.standard_normal(c) * 0.3
            layer.bn.running_var[:] = rng.random(c) + 0.2
    return model.eval()


def test_fold_neutral_bn():
    model = build_meshnet(toy_spec(), "xavier", make_rng(0))
    folded = fold_batchnorm(model)
    w0, w1 = model.layers[0].conv.weight.data, folded.layers[0].conv.weight.data
    assert np.allclose(w1, w0 / np.sqrt(1 + 1e-5), rtol=1e-6)


def test_fold_equivalence_and_count(rng):
    model = _random_bn_model(rng)
    folded = fold_batchnorm(model)
    x = rng.random((2, 1, 16, 16, 16)).astype(np.float32)
    diff = np.abs(model.forward(x).data - folded.forward(x).data).max()
    assert diff <= 1e-5
    n_bn = sum(1 for l in model.layers if l.bn)
    assert count_parameters(model) - count_parameters(folded) == 2 * 4 * n_bn


def test_fold_rejects_train_mode_and_post_activation_bn():
    model = build_meshnet(toy_spec(), "identity").train()
    with pytest.raises(ValueError, match="inference"):
        fold_batchnorm(model)
    after = build_meshnet(toy_spec(bn_position="after"), "identity")
    with pytest.raises(ValueError, match="after"):
        fold_batchnorm(after)


def test_bn_after_activation_placement(rng):
    spec = toy_spec(bn_position="after")
    model = build_meshnet(spec, "xavier", make_rng(0))
    layer = model.layers[0]
    layer.bn.beta.data[:] = -5.0  # after the ReLU, beta can push outputs negative
    x = rng.random((1, 1, 16, 16, 16)).astype(np.float32)
    from meshseg.nn import Tensor, batchnorm, conv3d_dilated, relu

    h = batchnorm(relu(conv3d_dilated(Tensor(x), layer.conv)), layer.bn, "infer").data
    assert h.min() < 0
