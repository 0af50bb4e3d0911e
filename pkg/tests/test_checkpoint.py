import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergeforge.checkpoint import (
    ArchitectureSchema,
    CheckpointFormatError,
    DuplicateTensorError,
    IncompatibleModelsError,
    ModelParams,
    TruncatedCheckpointError,
    UnsupportedDtypeError,
    from_bytes,
    load_checkpoint,
    partition_layers,
    save_checkpoint,
    to_bytes,
    validate_compatible,
)
from mergeforge.presets import sam_vit_b_layout, sam_vit_b_schema, small_schema


def make_params(rng, n_tensors=3, meta=None):
    arrays = {}
    for i in range(n_tensors):
        shape = tuple(rng.integers(1, 4, size=rng.integers(1, 3)))
        arrays[f"t{i}.weight"] = rng.normal(size=shape)
    return ModelParams.from_arrays(arrays, meta or {})


def raw_file(header: dict, data: bytes = b"") -> bytes:
    head = json.dumps(header).encode()
    return struct.pack("<Q", len(head)) + head + data


def test_roundtrip_two_tensors(tmp_path):
    params = ModelParams.from_arrays(
        {"b": np.array([1.0, 2.0]), "a": np.arange(6).reshape(2, 3)}, {"arch": "toy"}
    )
    path = tmp_path / "m.mrg"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert loaded == params
    assert loaded.names == ["a", "b"]
    assert loaded.tensors["a"].shape == (2, 3)
    assert loaded.meta == {"arch": "toy"}
    save_checkpoint(loaded, tmp_path / "again.mrg")
    assert (tmp_path / "again.mrg").read_bytes() == path.read_bytes()


def test_save_is_deterministic(tmp_path):
    params = make_params(np.random.default_rng(0), meta={"z": "1", "a": "2"})
    save_checkpoint(params, tmp_path / "1.mrg")
    save_checkpoint(params, tmp_path / "2.mrg")
    assert (tmp_path / "1.mrg").read_bytes() == (tmp_path / "2.mrg").read_bytes()


def test_empty_map_is_header_only():
    blob = to_bytes(ModelParams({}, {}))
    expected_header = b'{"__meta__":{}}'
    assert blob == struct.pack("<Q", len(expected_header)) + expected_header
    assert from_bytes(blob) == ModelParams({}, {})


def test_header_is_sorted_and_offsets_contiguous():
    params = ModelParams.from_arrays({"zz": np.ones(2), "aa": np.ones(3)})
    blob = to_bytes(params)
    (n,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8 : 8 + n])
    assert list(header) == sorted(header)
    assert header["aa"] == {"dtype": "f32", "shape": [3], "offset": 0, "length": 12}
    assert header["zz"]["offset"] == 12
    assert len(blob) == 8 + n + 20


def test_nan_payloads_survive():
    bits = np.array([0x7FC00001, 0xFF800000, 0x00000001], dtype="<u4")
    params = ModelParams.from_arrays({"x": bits.view("<f4")})
    again = from_bytes(to_bytes(params))
    assert again["x"].view("<u4").tolist() == bits.tolist()


def test_header_length_beyond_file_is_truncation():
    blob = struct.pack("<Q", 1000) + b"{}"
    with pytest.raises(TruncatedCheckpointError) as err:
        from_bytes(blob)
    assert err.value.field == "header_length"


def test_f16_dtype_rejected():
    blob = raw_file({"w": {"dtype": "f16", "shape": [2], "offset": 0, "length": 4}}, b"\0" * 4)
    with pytest.raises(UnsupportedDtypeError) as err:
        from_bytes(blob)
    assert err.value.field == "w.dtype"


def test_duplicate_name_rejected():
    entry = '{"dtype":"f32","shape":[1],"offset":0,"length":4}'
    head = ('{"w":%s,"w":%s}' % (entry, entry)).encode()
    blob = struct.pack("<Q", len(head)) + head + b"\0" * 4
    with pytest.raises(DuplicateTensorError):
        from_bytes(blob)


@pytest.mark.parametrize(
    "header, data, field",
    [
        ({"w": {"dtype": "f32", "shape": [4], "offset": 0, "length": 16}}, b"\0" * 8, "w.length"),
        ({"w": {"dtype": "f32", "shape": [2], "offset": 0, "length": 12}}, b"\0" * 12, "w.length"),
        ({"w": {"dtype": "f32", "shape": [0], "offset": 0, "length": 0}}, b"", "w.shape"),
        ({"w": {"dtype": "f32", "shape": [1], "offset": 4, "length": 4}}, b"\0" * 8, "w.offset"),
        ({"w": {"dtype": "f32", "shape": [1], "length": 4}}, b"\0" * 4, "w.offset"),
        ({"w": {"dtype": "f32", "shape": [1], "offset": 0, "length": 4}}, b"\0" * 8, "data"),
        ({"__meta__": {"a": 1}}, b"", "__meta__"),
    ],
)
def test_malformed_headers(header, data, field):
    with pytest.raises(CheckpointFormatError) as err:
        from_bytes(raw_file(header, data))
    assert err.value.field == field


def test_garbage_header_rejected():
    blob = struct.pack("<Q", 3) + b"\xff\xfe{"
    with pytest.raises(CheckpointFormatError):
        from_bytes(blob)
    with pytest.raises(CheckpointFormatError):
        from_bytes(struct.pack("<Q", 2) + b"[]")
    with pytest.raises(TruncatedCheckpointError):
        from_bytes(b"\x01\x02")


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 5))
def test_roundtrip_property(seed, n):
    params = make_params(np.random.default_rng(seed), n_tensors=n, meta={"seed": str(seed)})
    blob = to_bytes(params)
    again = from_bytes(blob)
    assert again == params
    assert to_bytes(again) == blob


def test_tensor_record_invariants():
    with pytest.raises(ValueError):
        ModelParams.from_arrays({"x": np.ones(3)}).replace({"x": np.ones(4)})


# --- compatibility ----------------------------------------------------------


def test_validate_identical_ok():
    rng = np.random.default_rng(1)
    a = make_params(rng)
    b = a.replace({n: a[n] + 1 for n in a.names})
    validate_compatible([a, b])


def test_validate_missing_tensor_named():
    a = ModelParams.from_arrays({"x": np.ones(2), "y": np.ones(2)})
    b = ModelParams.from_arrays({"x": np.ones(2)})
    with pytest.raises(IncompatibleModelsError, match="'y'"):
        validate_compatible([a, b])


def test_validate_shape_mismatch():
    a = ModelParams.from_arrays({"x": np.ones(768)})
    b = ModelParams.from_arrays({"x": np.ones(512)})
    with pytest.raises(IncompatibleModelsError, match=r"\[768\] vs \[512\]"):
        validate_compatible([a, b])


def test_validate_schema_unmatched():
    schema = small_schema(1, 1, 1, 1)
    a = ModelParams.from_arrays({"encoder.0.w": np.ones(2), "stray.w": np.ones(2)})
    with pytest.raises(IncompatibleModelsError, match="stray"):
        validate_compatible([a, a], schema)


def test_validate_needs_two_models():
    with pytest.raises(ValueError):
        validate_compatible([ModelParams({}, {})])


# --- partitioning ------------------------------------------------------------


def formula(schema, g_enc, g_prompt, g_dec):
    return (
        math.ceil(schema.encoder_layers / g_enc)
        + math.ceil(schema.prompt_layers / g_prompt)
        + math.ceil(schema.decoder_layers / g_dec)
    )


def test_sam_granularity_four():
    groups = partition_layers(sam_vit_b_schema(), 4, 4, 4)
    assert len([g for g in groups if g.component != "extra"]) == 3 + 1 + 2
    assert [g.id for g in groups] == list(range(1, len(groups) + 1))


def test_sam_granularity_one():
    groups = partition_layers(sam_vit_b_schema(), 1, 1, 1)
    assert len([g for g in groups if g.component != "extra"]) == 21


def test_encoder_pairs_at_granularity_two():
    groups = partition_layers(sam_vit_b_schema(), 2, 1, 1)
    enc = [g.layers for g in groups if g.component == "encoder"]
    assert enc == [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9), (10, 11)]


def test_last_group_may_be_smaller():
    groups = partition_layers(sam_vit_b_schema(), 4, 3, 4)
    prompt = [g.layers for g in groups if g.component == "prompt"]
    dec = [g.layers for g in groups if g.component == "decoder"]
    assert prompt == [(0, 1, 2), (3,)]
    assert dec == [(0, 1, 2, 3), (4,)]


def test_bad_granularity():
    with pytest.raises(ValueError):
        partition_layers(sam_vit_b_schema(), 0, 1, 1)


@settings(max_examples=64, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_partition_property(g_enc, g_prompt, g_dec):
    schema = sam_vit_b_schema()
    names = list(sam_vit_b_layout())
    groups = partition_layers(schema, g_enc, g_prompt, g_dec, names)
    assert len(groups) == formula(schema, g_enc, g_prompt, g_dec) + len(schema.extra_groups)
    seen = [n for g in groups for n in g.tensor_names]
    assert sorted(seen) == sorted(names)
    assert len(seen) == len(set(seen))


@settings(max_examples=50, deadline=None)
@given(
    st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(1, 9),
    st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 3),
)
def test_group_count_formula(l, k, z, p, g1, g2, g3, extras):
    schema = ArchitectureSchema(l, k, z, p, tuple(f"x{i}" for i in range(extras)))
    assert len(partition_layers(schema, g1, g2, g3)) == formula(schema, g1, g2, g3) + extras


def test_schema_dict_roundtrip():
    schema = sam_vit_b_schema()
    assert ArchitectureSchema.from_dict(json.loads(json.dumps(schema.to_dict()))) == schema


def test_locate_uses_dotted_prefixes():
    schema = sam_vit_b_schema()
    assert schema.locate("image_encoder.blocks.1.norm1.weight") == ("encoder", 1)
    assert schema.locate("image_encoder.blocks.10.norm1.weight") == ("encoder", 10)
    assert schema.locate("mask_decoder.upscaling.2.bias") == ("decoder", 4)
    assert schema.locate("image_encoder.neck.1.bias") == ("extra", 2)
