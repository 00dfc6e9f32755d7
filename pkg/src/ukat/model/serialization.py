"""The ``.ukat`` model file.

Layout::

    b"UKAT" | u32 version (=1) | u32 header length | UTF-8 JSON header | tensor data

All integers are little-endian. The JSON header carries the architecture,
the front-end config, the vocabulary and a manifest of named tensors with
shapes and byte offsets relative to the start of the data section. The
header is space-padded so the data section starts on an 8-byte boundary.
Tensors are raw little-endian float32 in manifest order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from ..dsp import FrontendConfig
from ..errors import FormatError
from ..labels import LabelVocabulary
from .network import ArchitectureConfig, ModelParameters, parameter_shapes

MAGIC = b"UKAT"
VERSION = 1
PREAMBLE = struct.Struct("<4sII")
ALIGN = 8


def encode_model(p: ModelParameters, v: LabelVocabulary, frontend: FrontendConfig,
                 extra: dict | None = None) -> bytes:
    manifest = []
    offset = 0
    for name, t in p.tensors.items():
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += 4 * t.size
    header = {
        "architecture": p.config.to_dict(),
        "frontend": frontend.to_dict(),
        "vocabulary": {"at": list(v.at_labels), "kws": list(v.kws_labels)},
        "tensors": manifest,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    blob += b" " * (-(PREAMBLE.size + len(blob)) % ALIGN)
    parts = [PREAMBLE.pack(MAGIC, VERSION, len(blob)), blob]
    parts += [np.ascontiguousarray(t, dtype="<f4").tobytes() for t in p.tensors.values()]
    return b"".join(parts)


def save_model(p: ModelParameters, v: LabelVocabulary, frontend: FrontendConfig, path,
               extra: dict | None = None) -> None:
    data = encode_model(p, v, frontend, extra)
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def decode_model(data: bytes):
    """Parse model bytes into ``(params, vocabulary, arch config, frontend config, extra)``."""
    if len(data) < PREAMBLE.size:
        raise FormatError("file truncated inside the preamble", len(data))
    magic, version, header_len = PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    start = PREAMBLE.size
    if start + header_len > len(data):
        raise FormatError(f"header length {header_len} runs past end of file", 8)
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise FormatError("header is not valid UTF-8", start + exc.start) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"header is not valid JSON ({exc.msg})", start + exc.pos) from None

    try:
        cfg = ArchitectureConfig.from_dict(header["architecture"])
        frontend = FrontendConfig.from_dict(header["frontend"])
        vocab = LabelVocabulary(header["vocabulary"]["at"], header["vocabulary"]["kws"])
        manifest = header["tensors"]
        names = [m["name"] for m in manifest]
    except Exception as exc:  # any schema violation is a format error
        raise FormatError(f"malformed header ({exc.__class__.__name__}: {exc})", start) from None
    if len(vocab) != cfg.num_outputs:
        raise FormatError(f"vocabulary size {len(vocab)} != model outputs {cfg.num_outputs}",
                          start)
    expected = parameter_shapes(cfg)
    if names != list(expected):
        raise FormatError("tensor manifest does not match the architecture", start)

    data_start = start + header_len
    tensors = {}
    offset = 0
    for m in manifest:
        shape = tuple(m["shape"])
        if shape != tuple(expected[m["name"]]) or m["offset"] != offset:
            raise FormatError(f"tensor {m['name']!r} has inconsistent shape or offset", start)
        size = int(np.prod(shape, dtype=np.int64))
        lo = data_start + offset
        hi = lo + 4 * size
        if hi > len(data):
            raise FormatError(f"file truncated inside tensor {m['name']!r}", len(data))
        tensors[m["name"]] = np.frombuffer(data, dtype="<f4", count=size, offset=lo) \
            .reshape(shape).astype(np.float32)
        offset += 4 * size
    if data_start + offset != len(data):
        raise FormatError("unexpected trailing bytes after tensor data", data_start + offset)
    return ModelParameters(cfg, tensors), vocab, cfg, frontend, header.get("extra", {})


def load_model(path):
    return decode_model(Path(path).read_bytes())


def read_header(path) -> dict:
    data = Path(path).read_bytes()
    decode_model(data)
    header_len = PREAMBLE.unpack_from(data, 0)[2]
    return json.loads(data[PREAMBLE.size:PREAMBLE.size + header_len])
