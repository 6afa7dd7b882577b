"""Binary model container.

Layout: an 8-byte magic, a little-endian u64 header length, a UTF-8 JSON
header, then one little-endian float64 block per entry of ``header["blocks"]``
in that order. The header carries the builder config, so loading rebuilds
the architecture and then fills in the parameters.
"""
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .models import rebuild

MAGIC = b"CEXPFLW1"
FORMAT = "convexp-flow"
VERSION = 1


class ModelFormatError(ValueError):
    """Malformed model file; ``field`` names the offending header entry."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"invalid model file: {field}: {message}")


def _header(model, extra=None):
    state = model.state_dict()
    blocks = [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype).replace("torch.", "")}
              for k, v in state.items()]
    layers = [{"index": i, "type": type(layer).__name__} for i, layer in enumerate(model.layers)]
    hdr = {"format": FORMAT, "version": VERSION, "config": model.config,
           "event_shape": list(model.event_shape), "layers": layers, "blocks": blocks}
    if extra:
        hdr["meta"] = extra
    return hdr


def dumps(model, meta=None):
    hdr = json.dumps(_header(model, meta), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<Q", len(hdr)), hdr]
    for v in model.state_dict().values():
        parts.append(v.detach().cpu().to(torch.float64).numpy().astype("<f8").tobytes())
    return b"".join(parts)


def save(model, path, meta=None):
    Path(path).write_bytes(dumps(model, meta))


def _require(hdr, key, kind):
    if key not in hdr:
        raise ModelFormatError(key, "missing")
    if not isinstance(hdr[key], kind):
        raise ModelFormatError(key, f"expected {kind.__name__}")
    return hdr[key]


def parse_header(data):
    if len(data) < 16 or data[:8] != MAGIC:
        raise ModelFormatError("magic", "not a model file")
    (n,) = struct.unpack("<Q", data[8:16])
    if 16 + n > len(data):
        raise ModelFormatError("header_length", f"{n} exceeds file size")
    try:
        hdr = json.loads(data[16:16 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ModelFormatError("header", f"not valid JSON ({err})") from None
    if not isinstance(hdr, dict):
        raise ModelFormatError("header", "expected an object")
    if _require(hdr, "format", str) != FORMAT:
        raise ModelFormatError("format", f"expected {FORMAT!r}")
    if _require(hdr, "version", int) != VERSION:
        raise ModelFormatError("version", f"unsupported version {hdr['version']}")
    cfg = _require(hdr, "config", dict)
    if "name" not in cfg or "event_shape" not in cfg:
        raise ModelFormatError("config", "needs name and event_shape")
    blocks = _require(hdr, "blocks", list)
    for i, b in enumerate(blocks):
        if not (isinstance(b, dict) and isinstance(b.get("name"), str)
                and isinstance(b.get("shape"), list)
                and all(isinstance(s, int) and s >= 0 for s in b["shape"])):
            raise ModelFormatError(f"blocks[{i}]", "needs a name and a list of sizes")
    return hdr, 16 + n


def loads(data):
    hdr, offset = parse_header(data)
    try:
        model = rebuild(hdr["config"])
    except (TypeError, ValueError) as err:
        raise ModelFormatError("config", str(err)) from None
    state = model.state_dict()
    names = [b["name"] for b in hdr["blocks"]]
    if set(names) != set(state):
        missing = sorted(set(state) - set(names)) or sorted(set(names) - set(state))
        raise ModelFormatError("blocks", f"do not match the architecture ({missing[:3]})")
    new_state = {}
    for i, b in enumerate(hdr["blocks"]):
        target = state[b["name"]]
        if tuple(b["shape"]) != tuple(target.shape):
            raise ModelFormatError(f"blocks[{i}].shape",
                                   f"{b['shape']} vs expected {list(target.shape)}")
        count = int(np.prod(b["shape"], dtype=np.int64))
        end = offset + 8 * count
        if end > len(data):
            raise ModelFormatError(f"blocks[{i}]", "truncated parameter data")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(b["shape"])
        new_state[b["name"]] = torch.from_numpy(arr.copy()).to(target.dtype)
        offset = end
    if offset != len(data):
        raise ModelFormatError("blocks", f"{len(data) - offset} trailing bytes")
    model.load_state_dict(new_state)
    model.eval()
    return model


def load(path):
    return loads(Path(path).read_bytes())
