"""Single-file checkpoint container.

Layout (little-endian): magic ``MUCK``, version u32, manifest length u32, UTF-8 JSON
manifest (config text, step, epoch, metric history, ...), tensor count u32, then one
record per tensor: name length u16, name, dtype code u8, ndim u8, ndim x u32 dims,
raw row-major data.
"""

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import CorruptionError, FormatError

MAGIC = b"MUCK"
VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "u1"}
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("u1"): 3}


@dataclass
class Checkpoint:
    config_text: str
    config_hash: str
    step: int = 0
    epoch: int = 0
    kind: str = "single"
    dataset_hash: str = None
    history: list = field(default_factory=list)
    model_state: dict = field(default_factory=OrderedDict)
    optim_state: dict = None
    teacher_state: dict = None
    extra: dict = field(default_factory=dict)

    def save(self, path):
        tensors = OrderedDict((f"model.{k}", v) for k, v in self.model_state.items())
        if self.teacher_state is not None:
            tensors.update((f"teacher.{k}", v) for k, v in self.teacher_state.items())
        optim_meta = None
        if self.optim_state is not None:
            optim_meta = {"param_groups": self.optim_state["param_groups"], "keys": {}}
            for idx, state in self.optim_state["state"].items():
                optim_meta["keys"][str(idx)] = sorted(state)
                for key in sorted(state):
                    tensors[f"optim.{idx}.{key}"] = torch.as_tensor(state[key])
        manifest = {
            "config": self.config_text,
            "config_hash": self.config_hash,
            "step": self.step,
            "epoch": self.epoch,
            "kind": self.kind,
            "dataset_hash": self.dataset_hash,
            "history": self.history,
            "optimizer": optim_meta,
            "extra": self.extra,
        }
        write_container(path, manifest, tensors)

    @classmethod
    def load(cls, path):
        manifest, tensors = read_container(path)
        model_state = OrderedDict(
            (k[len("model."):], v) for k, v in tensors.items() if k.startswith("model.")
        )
        teacher_state = OrderedDict(
            (k[len("teacher."):], v) for k, v in tensors.items() if k.startswith("teacher.")
        )
        optim_state = None
        meta = manifest.get("optimizer")
        if meta is not None:
            state = {}
            # JSON sorts the indices as strings; restore numeric order
            for idx, keys in sorted(meta["keys"].items(), key=lambda kv: int(kv[0])):
                state[int(idx)] = {key: tensors[f"optim.{idx}.{key}"] for key in keys}
            optim_state = {"state": state, "param_groups": meta["param_groups"]}
        return cls(
            config_text=manifest["config"],
            config_hash=manifest["config_hash"],
            step=manifest["step"],
            epoch=manifest["epoch"],
            kind=manifest["kind"],
            dataset_hash=manifest.get("dataset_hash"),
            history=manifest.get("history", []),
            model_state=model_state,
            optim_state=optim_state,
            teacher_state=teacher_state or None,
            extra=manifest.get("extra", {}),
        )


def write_container(path, manifest, tensors):
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<I", len(tensors))]
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor) else np.asarray(tensor)
        arr = arr.astype(arr.dtype.newbyteorder("<"), order="C")  # keeps 0-d shapes
        if arr.dtype not in _CODES:
            raise TypeError(f"unsupported tensor dtype {arr.dtype} for {name}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_container(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, n = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        offset = 12
        manifest = json.loads(data[offset:offset + n].decode("utf-8"))
        offset += n
        (count,) = struct.unpack_from("<I", data, offset)
        offset += 4
        tensors = OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            code, ndim = struct.unpack_from("<BB", data, offset)
            offset += 2
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            dtype = np.dtype(_DTYPES[code])
            size = int(np.prod(shape)) * dtype.itemsize
            if offset + size > len(data):
                raise CorruptionError(f"{path}: truncated tensor {name}")
            arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=offset).reshape(shape)
            offset += size
            tensors[name] = torch.from_numpy(arr.copy())
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CorruptionError(f"{path}: damaged checkpoint ({exc})") from exc
    if offset != len(data):
        raise CorruptionError(f"{path}: {len(data) - offset} trailing bytes")
    return manifest, tensors
