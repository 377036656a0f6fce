"""Self-describing binary container of named float arrays.

Layout::

    b"ODILCKPT\\x01"          magic + format version
    uint64 little-endian      header length in bytes
    header                    UTF-8 JSON, sorted keys: {"meta": ..., "arrays": [...]}
    payload                   concatenated little-endian array bytes

Each array entry records ``name``, ``dtype``, ``shape``, ``offset`` and
``nbytes`` (offset relative to the payload start).  Output is a pure function
of the inputs, so identical models serialize to identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .batchnorm import BatchNormState, StatsMode
from .models import Model, ModelSpec
from .optim import AdamState

MAGIC = b"ODILCKPT\x01"


class CheckpointError(ValueError):
    pass


def encode(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True,
                        separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("bad magic: not a checkpoint container")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise CheckpointError(f"truncated header length at byte {pos}")
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if len(blob) < pos + hlen:
        raise CheckpointError(f"truncated header at byte {pos}")
    header = json.loads(blob[pos:pos + hlen])
    base = pos + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        if len(blob) < start + e["nbytes"]:
            raise CheckpointError(f"truncated array {e['name']} at byte {start}")
        arrays[e["name"]] = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"])),
                                          offset=start).reshape(e["shape"]).copy()
    return header["meta"], arrays


def model_arrays(model: Model) -> dict[str, np.ndarray]:
    arrays = {f"param/{k}": t.data for k, t in model.params.items()}
    arrays.update({f"stats/{k}": v for k, v in model.running_stats().items()})
    return arrays


def dumps_model(model: Model, opt: AdamState | None = None) -> bytes:
    meta = {"spec": model.spec.to_dict(), "mode": model.mode.value,
            "param_order": list(model.params)}
    arrays = model_arrays(model)
    if opt is not None:
        meta["adam"] = {"t": opt.t, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}
        for k in opt.m:
            arrays[f"adam_m/{k}"] = opt.m[k]
            arrays[f"adam_v/{k}"] = opt.v[k]
    return encode(meta, arrays)


def loads_model(blob: bytes) -> tuple[Model, AdamState | None]:
    meta, arrays = decode(blob)
    spec = ModelSpec(**meta["spec"])
    params = {k: Tensor(arrays[f"param/{k}"], requires_grad=True, name=k) for k in meta["param_order"]}
    bn = []
    for i in range(len(spec.widths)):
        bn.append(BatchNormState(params[f"bn{i}.gamma"], params[f"bn{i}.beta"],
                                 arrays[f"stats/bn{i}.running_mean"], arrays[f"stats/bn{i}.running_var"],
                                 spec.bn_momentum, spec.bn_eps))
    model = Model(spec, params, bn, StatsMode.parse(meta["mode"]))
    opt = None
    if "adam" in meta:
        a = meta["adam"]
        opt = AdamState(m={k: arrays[f"adam_m/{k}"] for k in meta["param_order"]},
                        v={k: arrays[f"adam_v/{k}"] for k in meta["param_order"]},
                        t=a["t"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
    return model, opt


def save_model(path: str | Path, model: Model, opt: AdamState | None = None) -> None:
    Path(path).write_bytes(dumps_model(model, opt))


def load_model(path: str | Path) -> tuple[Model, AdamState | None]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads_model(path.read_bytes())
