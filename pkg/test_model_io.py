#!/usr/bin/env python3
"""Tests for the tensor container, code packing and calibration files"""

import json
import struct

import numpy as np
import pytest

from src.core.errors import ConfigurationError, DomainError, ParseError
from src.core.lsi_core import capture
from src.core.model_io import (MAGIC, PREFIX_SIZE, decode_tensors, encode_tensors, export_model,
                               load_calib, model_tensors, pack_codes, read_model, read_tensors,
                               unpack_codes, write_calib_activations, write_calib_tokens,
                               write_model, write_tensors)
from src.core.tensor_core import seeded_rng
from src.core.toy_model import (STATE_LSI, STATE_QUANTIZED, Linear, fp, perplexity,
                                rtn_quantize, weight_only)


def _raw_container(header, payload=b""):
    text = json.dumps(header).encode("utf-8") if isinstance(header, dict) else header
    text += b" " * ((-len(text)) % 8)
    return MAGIC + struct.pack("<Q", len(text)) + text + payload


def _entry(offset, length=8, shape=(1,)):
    return {"dtype": "f64", "shape": list(shape), "offset": offset, "length": length}


def test_pack_known_byte():
    assert pack_codes(np.array([1, 2]), 4) == b"\x21"
    assert pack_codes(np.array([3, 0, 1, 2]), 2) == bytes([0b10010011])


@pytest.mark.parametrize("bits", [2, 3, 4, 6, 8])
def test_packed_size_and_inverse(bits, rng):
    for n in (1, 5, 17, 100, 1001):
        codes = rng.integers(0, 1 << bits, size=n)
        data = pack_codes(codes, bits)
        assert len(data) == -(-n * bits // 8)
        assert np.array_equal(unpack_codes(data, bits, n), codes)


def test_pack_rejects_out_of_range_codes():
    with pytest.raises(DomainError):
        pack_codes(np.array([4]), 2)
    with pytest.raises(DomainError):
        pack_codes(np.array([-1]), 4)
    with pytest.raises(DomainError):
        pack_codes(np.array([1]), 9)
    with pytest.raises(ParseError):
        unpack_codes(b"\x00", 4, 3)


def test_container_reencode_is_bit_exact(rng):
    tensors = {
        "a": rng.standard_normal((3, 5)),
        "b": rng.standard_normal(7).astype(np.float32),
        "c": rng.integers(0, 9, size=(2, 2)),
        "d": np.arange(5, dtype=np.uint8),
    }
    data = encode_tensors(tensors, {"kind": "test", "n": 4})
    decoded, metadata = decode_tensors(data)
    assert metadata == {"kind": "test", "n": 4}
    for name, value in tensors.items():
        assert decoded[name].dtype == value.dtype
        assert np.array_equal(decoded[name], value)
    assert encode_tensors(decoded, metadata) == data


def test_quantized_model_round_trip(tiny_model, tiny_calib, tmp_path):
    mode = weight_only(3)
    model = rtn_quantize(tiny_model, mode)
    path = tmp_path / "model.lsq"
    write_model(path, model)
    loaded = read_model(path)
    for ours, theirs in zip(model.blocks, loaded.blocks):
        for name, lin in ours.linears().items():
            other = theirs.linears()[name]
            assert other.state == STATE_QUANTIZED
            assert np.array_equal(other.weight.codes, lin.weight.codes)
            assert np.array_equal(other.weight.scale, lin.weight.scale)
            assert np.array_equal(other.weight.zero_point, lin.weight.zero_point)
    assert perplexity(loaded, tiny_calib, mode) == perplexity(model, tiny_calib, mode)

    write_model(tmp_path / "again.lsq", loaded)
    assert (tmp_path / "again.lsq").read_bytes() == path.read_bytes()


def test_float_and_lsi_states_round_trip(tiny_model, tiny_calib, tmp_path):
    block = tiny_model.blocks[0]
    mixed = tiny_model.with_blocks([
        block.map_linears(lambda name, lin: Linear(capture(lin.weight, square_n=2), lin.bias)
                          if name == "q" else lin),
        tiny_model.blocks[1],
    ])
    write_model(tmp_path / "mixed.lsq", mixed)
    loaded = read_model(tmp_path / "mixed.lsq")
    assert loaded.blocks[0].q.state == STATE_LSI
    assert loaded.blocks[0].q.weight.square_block.shape == (2, 2)
    assert perplexity(loaded, tiny_calib, fp()) == perplexity(mixed, tiny_calib, fp())


def test_truncation_fuzz(tiny_model):
    data = encode_tensors(*model_tensors(rtn_quantize(tiny_model, weight_only(4))))
    rng = seeded_rng(77)
    for cut in rng.integers(0, len(data), size=1000):
        with pytest.raises(ParseError):
            decode_tensors(data[:cut])

    (header_len,) = struct.unpack("<Q", data[len(MAGIC):PREFIX_SIZE])
    with pytest.raises(ParseError):
        decode_tensors(data[:PREFIX_SIZE + header_len + 1])


def test_structural_errors():
    good = _raw_container({"format_version": 1, "metadata": {}, "tensors": {"a": _entry(0)}},
                          b"\0" * 8)
    assert decode_tensors(good)[0]["a"].shape == (1,)

    with pytest.raises(ParseError) as excinfo:
        decode_tensors(b"NOTMAGIC" + good[8:])
    assert excinfo.value.offset == 0

    with pytest.raises(ParseError, match="version"):
        decode_tensors(_raw_container({"format_version": 2, "metadata": {}, "tensors": {}}))

    overlap = {"format_version": 1, "metadata": {},
               "tensors": {"a": _entry(0, 16, (2,)), "b": _entry(8)}}
    with pytest.raises(ParseError, match="overlaps"):
        decode_tensors(_raw_container(overlap, b"\0" * 16))

    with pytest.raises(ParseError, match="aligned"):
        decode_tensors(_raw_container({"format_version": 1, "metadata": {},
                                       "tensors": {"a": _entry(4)}}, b"\0" * 16))

    with pytest.raises(ParseError, match="shape needs"):
        decode_tensors(_raw_container({"format_version": 1, "metadata": {},
                                       "tensors": {"a": _entry(0, 8, (2,))}}, b"\0" * 16))

    duplicate = b'{"format_version":1,"format_version":1,"metadata":{},"tensors":{}}'
    with pytest.raises(ParseError, match="duplicate"):
        decode_tensors(_raw_container(duplicate))

    with pytest.raises(ParseError, match="schema"):
        decode_tensors(_raw_container({"format_version": 1, "tensors": {}}))

    misaligned = MAGIC + struct.pack("<Q", 5) + b"{}   "
    with pytest.raises(ParseError, match="aligned"):
        decode_tensors(misaligned)


def test_atomic_write_and_missing_file(tmp_path):
    write_tensors(tmp_path / "t.lsq", {"x": np.ones(3)})
    assert [p.name for p in tmp_path.iterdir()] == ["t.lsq"]
    with pytest.raises(ConfigurationError):
        read_tensors(tmp_path / "absent.lsq")
    with pytest.raises(ConfigurationError):
        read_model(tmp_path / "absent.lsq")


def test_token_files(tmp_path):
    tokens = np.array([[1, 2, 3], [4, 5, 6]])
    path = tmp_path / "calib.txt"
    write_calib_tokens(path, tokens)
    assert path.read_text().startswith("# lsiquant tokens samples=2 seq_len=3")
    assert np.array_equal(load_calib(path, vocab=64).tokens, tokens)

    def parse_error(text, vocab=64):
        path.write_text(text)
        with pytest.raises(ParseError) as excinfo:
            load_calib(path, vocab=vocab)
        return excinfo.value

    err = parse_error("1 2 x\n")
    assert (err.line, err.offset) == (1, 4)
    err = parse_error("1 2\n3 99\n")
    assert (err.line, err.offset) == (2, 6)
    err = parse_error("1 2\n3\n")
    assert (err.line, err.offset) == (2, 4)
    assert parse_error("1 -2\n").line == 1
    assert parse_error("# lsiquant tokens samples=3 seq_len=2\n1 2\n").line == 1

    path.write_text("# nothing here\n\n")
    with pytest.raises(DomainError):
        load_calib(path)
    with pytest.raises(ConfigurationError):
        load_calib(path, fmt="parquet")
    with pytest.raises(ConfigurationError):
        load_calib(tmp_path / "absent.txt")


def test_activation_files(tmp_path, rng, tiny_model):
    acts = rng.standard_normal((3, 4, 8))
    path = tmp_path / "acts.lsq"
    write_calib_activations(path, acts)
    calib = load_calib(path, fmt="activations")
    assert np.array_equal(calib.activations, acts)
    assert calib.n_samples == 3 and calib.seq_len == 4

    write_model(tmp_path / "model.lsq", tiny_model)
    with pytest.raises(ParseError):
        load_calib(tmp_path / "model.lsq", fmt="activations")


def test_export(tiny_model, tmp_path):
    model = rtn_quantize(tiny_model, weight_only(3))
    wide = export_model(tmp_path / "w64.lsq", model)
    narrow = export_model(tmp_path / "w32.lsq", model, scale_dtype="f32")
    assert narrow["file_bytes"] < wide["file_bytes"]
    assert narrow["code_bytes"] == wide["code_bytes"]
    expected = sum(-(-lin.weight.codes.size * 3 // 8)
                   for b in model.blocks for lin in b.linears().values())
    assert wide["code_bytes"] == expected
    assert wide["file_bytes"] == (tmp_path / "w64.lsq").stat().st_size

    reloaded = read_model(tmp_path / "w32.lsq")
    assert reloaded.blocks[1].down.state == STATE_QUANTIZED

    with pytest.raises(ConfigurationError):
        export_model(tmp_path / "fp.lsq", tiny_model)
    with pytest.raises(ConfigurationError):
        export_model(tmp_path / "x.lsq", model, scale_dtype="f16")


@pytest.mark.parametrize("damage", [
    lambda meta: meta["states"]["block.0.q"].pop("shape"),
    lambda meta: meta["states"]["block.0.k"].pop("state"),
    lambda meta: meta["states"]["block.1.up"].pop("bits"),
    lambda meta: meta["states"]["block.0.v"].update(shape=[4]),
    lambda meta: meta["states"]["block.0.o"].update(state="folded"),
    lambda meta: meta.update(states=[]),
    lambda meta: meta.pop("spec"),
])
def test_malformed_model_metadata_is_a_parse_error(damage, tiny_model, tmp_path):
    tensors, metadata = model_tensors(rtn_quantize(tiny_model, weight_only(4)))
    damage(metadata)
    path = tmp_path / "broken.lsq"
    write_tensors(path, tensors, metadata)
    with pytest.raises(ParseError, match="bad model metadata"):
        read_model(path)
