"""
On-disk formats.

Tensor container:

    [8 bytes  magic "LSIQTNSR"]
    [8 bytes  header length, u64 little-endian]
    [header   UTF-8 JSON, space-padded to a multiple of 8 bytes]
    [payload  tensor buffers, each starting on an 8-byte boundary]

The header is {"format_version", "metadata", "tensors"}; each tensor
entry gives dtype, shape, offset and length, offsets relative to the
payload start. Keys are sorted and tensors are laid out in name order,
so the same state always produces the same bytes.

Token calibration files hold one sequence per line as whitespace
separated decimal ids, optionally preceded by a header line
"# lsiquant tokens samples=<n> seq_len=<T>".
"""

import json
import logging
import os
import re
import struct
import tempfile
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import jsonschema
import numpy as np

from .errors import ConfigurationError, DomainError, ParseError
from .lsi_core import LsiParams
from .quantizer import QuantConfig, QuantizedTensor
from .tensor_core import SvdFactors
from .toy_model import (LINEARS, STATE_FLOAT, STATE_LSI, STATE_QUANTIZED, Block,
                        CalibSet, LayerGraph, Linear, ModelSpec)

logger = logging.getLogger(__name__)

MAGIC = b"LSIQTNSR"
FORMAT_VERSION = 1
ALIGNMENT = 8
PREFIX_SIZE = len(MAGIC) + 8

DTYPES = {
    "f64": np.dtype("<f8"),
    "f32": np.dtype("<f4"),
    "i64": np.dtype("<i8"),
    "u8": np.dtype("u1"),
}

KIND_MODEL = "model"
KIND_EXPORT = "export"
KIND_ACTIVATIONS = "activations"

TOKENS_HEADER = re.compile(r"^#\s*lsiquant tokens\s+samples=(\d+)\s+seq_len=(\d+)\s*$")

HEADER_SCHEMA = {
    "type": "object",
    "required": ["format_version", "metadata", "tensors"],
    "additionalProperties": False,
    "properties": {
        "format_version": {"type": "integer"},
        "metadata": {"type": "object"},
        "tensors": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["dtype", "shape", "offset", "length"],
                "additionalProperties": False,
                "properties": {
                    "dtype": {"enum": sorted(DTYPES)},
                    "shape": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                    "offset": {"type": "integer", "minimum": 0},
                    "length": {"type": "integer", "minimum": 0},
                },
            },
        },
    },
}

MODEL_METADATA_SCHEMA = {
    "type": "object",
    "required": ["kind", "spec", "states"],
    "properties": {
        "kind": {"enum": [KIND_MODEL, KIND_EXPORT]},
        "spec": {"type": "object"},
        "model": {"type": "object"},
        "states": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["state", "shape"],
                "properties": {
                    "state": {"enum": [STATE_FLOAT, STATE_LSI, STATE_QUANTIZED]},
                    "shape": {"type": "array", "minItems": 2, "maxItems": 2,
                              "items": {"type": "integer", "minimum": 1}},
                    "bits": {"type": "integer"},
                    "granularity": {"type": "string"},
                    "group_size": {"type": "integer", "minimum": 0},
                },
                "if": {"properties": {"state": {"const": STATE_QUANTIZED}}},
                "then": {"required": ["bits", "granularity", "group_size"]},
            },
        },
    },
}

PathLike = Union[str, Path]


def _dtype_name(array: np.ndarray) -> str:
    for name, dtype in DTYPES.items():
        if array.dtype == dtype or array.dtype == dtype.newbyteorder("="):
            return name
    raise DomainError(f"unsupported tensor dtype {array.dtype}",
                      hint="Store tensors as float64, float32, int64 or uint8")


def _pad(n: int) -> int:
    return (-n) % ALIGNMENT


def encode_tensors(tensors: Dict[str, np.ndarray], metadata: Optional[Dict[str, Any]] = None) -> bytes:
    """Serialize named tensors into container bytes."""
    entries: Dict[str, Dict[str, Any]] = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        array = np.ascontiguousarray(tensors[name])
        dtype = _dtype_name(array)
        data = array.astype(DTYPES[dtype], copy=False).tobytes()
        entries[name] = {"dtype": dtype, "shape": list(array.shape),
                         "offset": offset, "length": len(data)}
        chunks.append(data + b"\0" * _pad(len(data)))
        offset += len(data) + _pad(len(data))

    header = {"format_version": FORMAT_VERSION, "metadata": metadata or {}, "tensors": entries}
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    text += b" " * _pad(len(text))
    return MAGIC + struct.pack("<Q", len(text)) + text + b"".join(chunks)


def _reject_duplicates(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise ParseError(f"duplicate key '{key}' in container header")
        seen[key] = value
    return seen


def decode_tensors(buffer: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """
    Parse container bytes.

    Returns:
        (tensors, metadata)

    Raises:
        ParseError: naming the first violated constraint and its byte offset
    """
    size = len(buffer)
    if size < PREFIX_SIZE:
        raise ParseError(f"file holds {size} bytes, too short for the container prefix", offset=size)
    if buffer[:len(MAGIC)] != MAGIC:
        raise ParseError("bad magic, not an lsiquant tensor container", offset=0)
    (header_len,) = struct.unpack("<Q", buffer[len(MAGIC):PREFIX_SIZE])
    if header_len % ALIGNMENT:
        raise ParseError(f"header length {header_len} is not 8-byte aligned", offset=len(MAGIC))
    payload_start = PREFIX_SIZE + header_len
    if payload_start > size:
        raise ParseError(f"header of {header_len} bytes runs past the end of the file", offset=size)

    try:
        header = json.loads(buffer[PREFIX_SIZE:payload_start].decode("utf-8"),
                            object_pairs_hook=_reject_duplicates)
    except UnicodeDecodeError as e:
        raise ParseError(f"header is not UTF-8: {e.reason}", offset=PREFIX_SIZE + e.start)
    except json.JSONDecodeError as e:
        raise ParseError(f"header is not valid JSON: {e.msg}", offset=PREFIX_SIZE + e.pos)

    try:
        jsonschema.validate(header, HEADER_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ParseError(f"header violates the container schema at {where}: {e.message}",
                         offset=PREFIX_SIZE)
    if header["format_version"] != FORMAT_VERSION:
        raise ParseError(f"unsupported format version {header['format_version']}",
                         offset=PREFIX_SIZE,
                         hint=f"This build reads format version {FORMAT_VERSION}")

    payload_size = size - payload_start
    tensors = {}
    end_prev, name_prev = 0, None
    for name, entry in sorted(header["tensors"].items(), key=lambda kv: (kv[1]["offset"], kv[0])):
        offset, length = entry["offset"], entry["length"]
        dtype = DTYPES[entry["dtype"]]
        where = payload_start + offset
        if offset % ALIGNMENT:
            raise ParseError(f"tensor '{name}' is not 8-byte aligned", offset=where)
        if offset < end_prev:
            raise ParseError(f"tensor '{name}' overlaps '{name_prev}'", offset=where)
        if offset + length > payload_size:
            raise ParseError(f"tensor '{name}' runs past the end of the file", offset=min(where, size))
        expected = int(np.prod(entry["shape"], dtype=np.int64)) * dtype.itemsize
        if length != expected:
            raise ParseError(f"tensor '{name}' holds {length} bytes, its shape needs {expected}",
                             offset=where)
        raw = buffer[where:where + length]
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
        end_prev, name_prev = offset + length, name
    return tensors, header["metadata"]


def _atomic_write(path: PathLike, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensors(path: PathLike, tensors: Dict[str, np.ndarray],
                  metadata: Optional[Dict[str, Any]] = None) -> None:
    """Write a container atomically (temp file, then rename)."""
    _atomic_write(path, encode_tensors(tensors, metadata))
    logger.debug(f"Wrote {len(tensors)} tensors to {path}")


def read_tensors(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise ConfigurationError(f"File not found: {path}")
    return decode_tensors(data)


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """
    Pack k-bit codes LSB-first, row-major, into ceil(N*k/8) bytes.

    Example: k=4, codes [1, 2] -> b"\\x21".
    """
    if not 1 <= bits <= 8:
        raise DomainError(f"cannot pack {bits}-bit codes")
    flat = np.asarray(codes).reshape(-1)
    if flat.size and (flat.min() < 0 or flat.max() > (1 << bits) - 1):
        raise DomainError(f"codes outside [0, {(1 << bits) - 1}] cannot be packed at {bits} bits")
    flat = flat.astype(np.uint8)
    planes = (flat[:, None] >> np.arange(bits, dtype=np.uint8)) & 1
    return np.packbits(planes.reshape(-1), bitorder="little").tobytes()


def unpack_codes(data: bytes, bits: int, count: int) -> np.ndarray:
    """Inverse of pack_codes; returns count int64 codes."""
    if not 1 <= bits <= 8:
        raise DomainError(f"cannot unpack {bits}-bit codes")
    needed = -(-count * bits // 8)
    if len(data) < needed:
        raise ParseError(f"packed codes need {needed} bytes, got {len(data)}", offset=len(data))
    bit_stream = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    planes = bit_stream[:count * bits].reshape(count, bits).astype(np.int64)
    return planes @ (1 << np.arange(bits, dtype=np.int64))


def _config_meta(cfg: QuantConfig) -> Dict[str, Any]:
    return {"bits": cfg.bits, "granularity": cfg.granularity, "group_size": cfg.group_size}


def _quantized_tensors(prefix: str, q: QuantizedTensor, scale_dtype: np.dtype) -> Dict[str, np.ndarray]:
    packed = np.frombuffer(pack_codes(q.codes, q.bits), dtype=np.uint8)
    return {
        f"{prefix}.codes": packed,
        f"{prefix}.scale": q.scale.astype(scale_dtype),
        f"{prefix}.zero_point": q.zero_point.astype(scale_dtype),
    }


def _lsi_tensors(prefix: str, p: LsiParams) -> Dict[str, np.ndarray]:
    out = {
        f"{prefix}.base": p.base,
        f"{prefix}.u": p.factors.u,
        f"{prefix}.s": p.factors.s,
        f"{prefix}.v_h": p.factors.v_h,
        f"{prefix}.increment": p.increment,
    }
    if p.square_block is not None:
        out[f"{prefix}.square_block"] = p.square_block
    return out


def model_tensors(model: LayerGraph, scale_dtype: str = "f64") -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Flatten a model into named tensors plus the metadata that rebuilds it."""
    sdtype = DTYPES[scale_dtype]
    tensors = {
        "embedding": model.embedding,
        "lnf.gain": model.lnf_gain,
        "lnf.bias": model.lnf_bias,
        "head.weight": model.head,
        "head.bias": model.head_bias,
    }
    states: Dict[str, Dict[str, Any]] = {}
    for i, block in enumerate(model.blocks):
        tensors[f"block.{i}.ln1.gain"] = block.ln1_gain
        tensors[f"block.{i}.ln1.bias"] = block.ln1_bias
        tensors[f"block.{i}.ln2.gain"] = block.ln2_gain
        tensors[f"block.{i}.ln2.bias"] = block.ln2_bias
        for name, lin in block.linears().items():
            prefix = f"block.{i}.{name}"
            tensors[f"{prefix}.bias"] = lin.bias
            entry: Dict[str, Any] = {"state": lin.state, "shape": list(lin.shape)}
            if lin.state == STATE_QUANTIZED:
                entry.update(_config_meta(lin.weight.config))
                tensors.update(_quantized_tensors(prefix, lin.weight, sdtype))
            elif lin.state == STATE_LSI:
                tensors.update(_lsi_tensors(prefix, lin.weight))
            else:
                tensors[f"{prefix}.weight"] = lin.weight
            states[prefix] = entry
    metadata = {
        "kind": KIND_MODEL,
        "spec": model.spec.to_dict(),
        "model": dict(model.metadata),
        "states": states,
        "scale_dtype": scale_dtype,
    }
    return tensors, metadata


def _take(tensors: Dict[str, np.ndarray], name: str, shape=None) -> np.ndarray:
    if name not in tensors:
        raise ParseError(f"model container is missing tensor '{name}'")
    array = tensors[name]
    if shape is not None and tuple(array.shape) != tuple(shape):
        raise ParseError(f"tensor '{name}' has shape {array.shape}, expected {tuple(shape)}")
    return array


def _read_linear(tensors, prefix: str, entry: Dict[str, Any]) -> Linear:
    shape = tuple(entry["shape"])
    bias = _take(tensors, f"{prefix}.bias", (shape[1],)).astype(np.float64)
    state = entry["state"]
    if state == STATE_QUANTIZED:
        try:
            cfg = QuantConfig(bits=entry["bits"], granularity=entry["granularity"],
                              group_size=entry["group_size"])
        except (KeyError, ConfigurationError) as e:
            raise ParseError(f"bad quantization config for '{prefix}': {e}")
        count = shape[0] * shape[1]
        codes = unpack_codes(_take(tensors, f"{prefix}.codes").tobytes(), cfg.bits, count)
        n_groups = cfg.n_groups(shape)
        q = QuantizedTensor(codes=codes.reshape(shape),
                            scale=_take(tensors, f"{prefix}.scale", (n_groups,)).astype(np.float64),
                            zero_point=_take(tensors, f"{prefix}.zero_point", (n_groups,)).astype(np.float64),
                            shape=shape, config=cfg)
        return Linear(q, bias)
    if state == STATE_LSI:
        factors = SvdFactors(u=_take(tensors, f"{prefix}.u"), s=_take(tensors, f"{prefix}.s"),
                             v_h=_take(tensors, f"{prefix}.v_h"))
        block = tensors.get(f"{prefix}.square_block")
        return Linear(LsiParams(base=_take(tensors, f"{prefix}.base", shape), factors=factors,
                                increment=_take(tensors, f"{prefix}.increment"),
                                square_block=block), bias)
    if state == STATE_FLOAT:
        return Linear(_take(tensors, f"{prefix}.weight", shape), bias)
    raise ParseError(f"unknown weight state '{state}' for '{prefix}'")


def model_from_tensors(tensors: Dict[str, np.ndarray], metadata: Dict[str, Any]) -> LayerGraph:
    """
    Rebuild a model from a decoded container.

    Raises:
        ParseError: the metadata violates the model schema or a tensor is
                    missing or misshapen
    """
    if metadata.get("kind") not in (KIND_MODEL, KIND_EXPORT):
        raise ParseError(f"container holds '{metadata.get('kind')}', not a model")
    try:
        jsonschema.validate(metadata, MODEL_METADATA_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ParseError(f"bad model metadata at {where}: {e.message}")
    try:
        spec = ModelSpec.from_dict(metadata["spec"])
        states = metadata["states"]
    except (KeyError, TypeError, ConfigurationError) as e:
        raise ParseError(f"bad model metadata: {e}")
    width = spec.width
    blocks = []
    for i in range(spec.n_layers):
        def norm(part: str) -> np.ndarray:
            return _take(tensors, f"block.{i}.{part}", (width,))

        linears = {}
        for name in LINEARS:
            prefix = f"block.{i}.{name}"
            if prefix not in states:
                raise ParseError(f"model metadata has no state for '{prefix}'")
            linears[name] = _read_linear(tensors, prefix, states[prefix])
        blocks.append(Block(ln1_gain=norm("ln1.gain"), ln1_bias=norm("ln1.bias"),
                            ln2_gain=norm("ln2.gain"), ln2_bias=norm("ln2.bias"), **linears))
    return LayerGraph(
        spec=spec,
        embedding=_take(tensors, "embedding", (spec.vocab, width)),
        blocks=blocks,
        lnf_gain=_take(tensors, "lnf.gain", (width,)),
        lnf_bias=_take(tensors, "lnf.bias", (width,)),
        head=_take(tensors, "head.weight", (width, spec.vocab)),
        head_bias=_take(tensors, "head.bias", (spec.vocab,)),
        metadata=dict(metadata.get("model", {})),
    )


def write_model(path: PathLike, model: LayerGraph) -> None:
    """Lossless write of a model in any mix of weight states."""
    tensors, metadata = model_tensors(model)
    write_tensors(path, tensors, metadata)
    logger.info(f"Saved {len(model.blocks)}-block model to {path}")


def read_model(path: PathLike) -> LayerGraph:
    tensors, metadata = read_tensors(path)
    return model_from_tensors(tensors, metadata)


def export_model(path: PathLike, model: LayerGraph, scale_dtype: str = "f64") -> Dict[str, Any]:
    """
    Write a folded model with packed codes, optionally with f32 qparams.

    Returns:
        Size summary: packed code bytes, total file bytes
    """
    if scale_dtype not in ("f64", "f32"):
        raise ConfigurationError(f"scale dtype must be f64 or f32, got {scale_dtype}")
    unfolded = [f"block.{i}.{name}" for i, b in enumerate(model.blocks)
                for name, lin in b.linears().items() if lin.state != STATE_QUANTIZED]
    if unfolded:
        raise ConfigurationError(
            f"export needs a quantized model; {unfolded[0]} is not folded",
            hint="Run quantize first")
    tensors, metadata = model_tensors(model, scale_dtype)
    metadata["kind"] = KIND_EXPORT
    data = encode_tensors(tensors, metadata)
    _atomic_write(path, data)
    code_bytes = sum(t.nbytes for n, t in tensors.items() if n.endswith(".codes"))
    logger.info(f"Exported model to {path}: {code_bytes} code bytes, {len(data)} total")
    return {"code_bytes": int(code_bytes), "file_bytes": len(data), "scale_dtype": scale_dtype}


def write_calib_tokens(path: PathLike, tokens: np.ndarray) -> None:
    tokens = np.asarray(tokens, dtype=np.int64)
    n, t = tokens.shape
    lines = [f"# lsiquant tokens samples={n} seq_len={t}"]
    lines.extend(" ".join(str(int(v)) for v in row) for row in tokens)
    _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


def _parse_tokens(text: str, vocab: Optional[int]) -> np.ndarray:
    declared = None
    rows = []
    offset = 0
    for line_no, line in enumerate(text.splitlines(keepends=True), start=1):
        stripped = line.strip()
        line_start = offset
        offset += len(line.encode("utf-8"))
        if not stripped:
            continue
        if stripped.startswith("#"):
            match = TOKENS_HEADER.match(stripped)
            if match and declared is None and not rows:
                declared = (int(match.group(1)), int(match.group(2)))
            continue
        row = []
        for m in re.finditer(r"\S+", line):
            where = line_start + len(line[:m.start()].encode("utf-8"))
            try:
                value = int(m.group(0))
            except ValueError:
                raise ParseError(f"token '{m.group(0)}' is not a decimal id", offset=where, line=line_no)
            if value < 0 or (vocab is not None and value >= vocab):
                raise ParseError(f"token id {value} outside the vocabulary [0, {vocab})",
                                 offset=where, line=line_no)
            row.append(value)
        if rows and len(row) != len(rows[0]):
            raise ParseError(f"sequence of length {len(row)}, expected {len(rows[0])}",
                             offset=line_start, line=line_no)
        rows.append(row)

    if not rows:
        raise DomainError("calibration file holds no sequences")
    tokens = np.array(rows, dtype=np.int64)
    if declared is not None and declared != tokens.shape:
        raise ParseError(f"header declares {declared[0]} x {declared[1]} tokens, "
                         f"file holds {tokens.shape[0]} x {tokens.shape[1]}", line=1)
    return tokens


def load_calib(path: PathLike, fmt: str = "tokens", vocab: Optional[int] = None) -> CalibSet:
    """
    Load a calibration set.

    Args:
        path: Token text file or activations container
        fmt: "tokens" or "activations"
        vocab: Reject token ids at or above this bound

    Returns:
        CalibSet
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"File not found: {path}")
    if fmt == "tokens":
        try:
            text = path.read_bytes().decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(f"calibration file is not UTF-8 text: {e.reason}", offset=e.start)
        tokens = _parse_tokens(text, vocab)
        logger.info(f"Loaded {tokens.shape[0]} token sequences of length {tokens.shape[1]} from {path}")
        return CalibSet(tokens=tokens)
    if fmt == KIND_ACTIVATIONS:
        tensors, metadata = read_tensors(path)
        if metadata.get("kind") != KIND_ACTIVATIONS:
            raise ParseError(f"container holds '{metadata.get('kind')}', not activations")
        names = sorted((n for n in tensors if n.startswith("sample.")),
                       key=lambda n: int(n.split(".", 1)[1]) if n.split(".", 1)[1].isdigit() else -1)
        if not names:
            raise DomainError("activation file holds no samples")
        samples = [tensors[n].astype(np.float64) for n in names]
        if any(s.ndim != 2 or s.shape != samples[0].shape for s in samples):
            raise ParseError("activation samples must share one T x width shape")
        return CalibSet(activations=np.stack(samples))
    raise ConfigurationError(f"Unknown calibration format: {fmt}", hint="Use tokens or activations")


def write_calib_activations(path: PathLike, activations: np.ndarray) -> None:
    tensors = {f"sample.{i}": np.asarray(a, dtype=np.float64) for i, a in enumerate(activations)}
    write_tensors(path, tensors, {"kind": KIND_ACTIVATIONS})
