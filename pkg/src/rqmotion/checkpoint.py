"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes  b"RQMCKPT\\x00"
    version    uint32
    header_len uint32
    header     UTF-8 JSON: {"tensors": {name: {shape, dtype, offset, nbytes}},
                            "config": str, "step": int, "meta": {...}}
    payload    concatenated little-endian tensor bytes, offsets relative to payload start
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError

MAGIC = b"RQMCKPT\x00"
VERSION = 1
_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_BY_NAME = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    config: str = ""
    step: int = 0
    meta: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        entries, chunks, offset = {}, [], 0
        for name, t in self.tensors.items():
            t = t.detach().cpu().contiguous()
            if t.dtype not in _DTYPES:
                raise ValidationError(f"unsupported dtype {t.dtype} for {name}")
            raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes(order="C")
            entries[name] = {"shape": list(t.shape), "dtype": _DTYPES[t.dtype], "offset": offset, "nbytes": len(raw)}
            chunks.append(raw)
            offset += len(raw)
        header = json.dumps(
            {"tensors": entries, "config": self.config, "step": self.step, "meta": self.meta},
            sort_keys=True,
        ).encode("utf-8")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", VERSION, len(header)))
            fh.write(header)
            for chunk in chunks:
                fh.write(chunk)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:8] != MAGIC or len(raw) < 16:
            raise ValidationError(f"{path} is not a checkpoint (bad magic)")
        version, hlen = struct.unpack_from("<II", raw, 8)
        if version != VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {version}")
        try:
            header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValidationError(f"{path}: corrupt checkpoint header") from exc
        payload = memoryview(raw)[16 + hlen:]
        tensors = {}
        for name, e in sorted(header["tensors"].items(), key=lambda kv: kv[1]["offset"]):
            if e["offset"] + e["nbytes"] > len(payload):
                raise ValidationError(f"{path}: truncated (tensor {name!r} runs past the end)")
            buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
            arr = np.frombuffer(buf, dtype=e["dtype"]).reshape(e["shape"])
            tensors[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
            if tensors[name].dtype != _BY_NAME[e["dtype"]]:
                tensors[name] = tensors[name].to(_BY_NAME[e["dtype"]])
        return cls(tensors, header["config"], header["step"], header.get("meta", {}))

    def subset(self, prefix: str) -> dict[str, torch.Tensor]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def state_hash(module: torch.nn.Module) -> str:
    """Digest over every parameter and buffer, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
